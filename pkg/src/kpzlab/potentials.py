"""Single-site interaction potentials V = phi + psi.

Built-in families
-----------------
quadratic
    V(u) = a u^2 / 2.
perturbed
    V(u) = a u^2 / 2 + b s(u) with a bounded shape s in {sine, tanh}.
user
    Opaque callables for V, V', V'' (and optionally V''' and a split into a
    convex part and a bounded perturbation).

The built-in families carry an integer code so compiled kernels can evaluate
V' without calling back into Python.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import UsageError

FAMILIES = ("quadratic", "perturbed", "user")
SHAPES = ("sine", "tanh")

# codes understood by the compiled lattice kernels
CODE_QUADRATIC = 0
CODE_SINE = 1
CODE_TANH = 2
CODE_USER = -1


def _shape_derivs(shape: str, u, order: int):
    if shape == "sine":
        if order == 0:
            return np.sin(u)
        if order == 1:
            return np.cos(u)
        if order == 2:
            return -np.sin(u)
        return -np.cos(u)
    t = np.tanh(u)
    if order == 0:
        return t
    s = 1.0 - t * t
    if order == 1:
        return s
    if order == 2:
        return -2.0 * t * s
    return s * (6.0 * t * t - 2.0)


@dataclass(frozen=True, eq=False)
class Potential:
    """Immutable potential with closed-form derivatives.

    For ``family="user"`` pass ``funcs=(V, dV, d2V)`` or
    ``(V, dV, d2V, d3V)``.  An optional ``split=(phi2, psi, dpsi, d2psi)``
    describes the convex part (through its second derivative) and the
    bounded perturbation; without it the whole potential is treated as convex.
    """

    family: str = "quadratic"
    a: float = 1.0
    b: float = 0.0
    shape: str = "sine"
    funcs: Optional[tuple] = field(default=None, repr=False)
    split: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UsageError(f"unknown potential family {self.family!r}")
        if self.family == "perturbed" and self.shape not in SHAPES:
            raise UsageError(f"unknown perturbation shape {self.shape!r}")
        if self.family != "user" and not self.a > 0:
            raise UsageError("curvature a must be positive")
        if self.family == "user":
            if self.funcs is None or len(self.funcs) < 3:
                raise UsageError("user potential needs funcs=(V, dV, d2V)")

    @classmethod
    def quadratic(cls, a: float = 1.0) -> "Potential":
        return cls("quadratic", a=float(a))

    @classmethod
    def perturbed(cls, a: float = 1.0, b: float = 0.3, shape: str = "sine") -> "Potential":
        return cls("perturbed", a=float(a), b=float(b), shape=shape)

    @classmethod
    def user(cls, V: Callable, dV: Callable, d2V: Callable, d3V: Callable | None = None,
             split: tuple | None = None) -> "Potential":
        funcs = (V, dV, d2V) if d3V is None else (V, dV, d2V, d3V)
        return cls("user", a=float("nan"), b=0.0, funcs=funcs, split=split)

    @classmethod
    def from_spec(cls, spec: dict) -> "Potential":
        """Build from a config mapping ``{family, a, b, shape}``."""
        fam = spec.get("family", "quadratic")
        if fam == "quadratic":
            return cls.quadratic(spec.get("a", 1.0))
        if fam in ("perturbed", "perturbed-quadratic"):
            return cls.perturbed(spec.get("a", 1.0), spec.get("b", 0.3), spec.get("shape", "sine"))
        raise UsageError(f"potential family {fam!r} cannot be built from a config")

    def to_spec(self) -> dict:
        if self.family == "user":
            raise UsageError("user potentials are not serializable")
        d = {"family": self.family, "a": self.a}
        if self.family == "perturbed":
            d.update(b=self.b, shape=self.shape)
        return d

    @property
    def code(self) -> int:
        if self.family == "quadratic":
            return CODE_QUADRATIC
        if self.family == "perturbed":
            return CODE_SINE if self.shape == "sine" else CODE_TANH
        return CODE_USER

    @property
    def is_gaussian(self) -> bool:
        return self.family == "quadratic" or (self.family == "perturbed" and self.b == 0.0)

    @property
    def key(self) -> tuple:
        """Hashable identity used for caching thermodynamic tables."""
        if self.family == "user":
            return ("user", id(self))
        return (self.family, self.a, self.b if self.family == "perturbed" else 0.0,
                self.shape if self.family == "perturbed" else "")

    def __hash__(self):
        return hash(self.key)

    def __eq__(self, other):
        return isinstance(other, Potential) and self.key == other.key

    def _derivative(self, u, order: int):
        u = np.asarray(u, dtype=float)
        if self.family == "user":
            if order == 3 and len(self.funcs) < 4:
                raise UsageError("third derivative not supplied for this user potential")
            return np.asarray(self.funcs[order](u), dtype=float)
        if order == 0:
            base = 0.5 * self.a * u * u
        elif order == 1:
            base = self.a * u
        elif order == 2:
            base = np.full_like(u, self.a)
        else:
            base = np.zeros_like(u)
        if self.family == "perturbed" and self.b != 0.0:
            base = base + self.b * _shape_derivs(self.shape, u, order)
        return base

    def __call__(self, u):
        return self._derivative(u, 0)

    def dV(self, u):
        return self._derivative(u, 1)

    def d2V(self, u):
        return self._derivative(u, 2)

    def d3V(self, u):
        """Third derivative; diagnostics only."""
        return self._derivative(u, 3)

    def convex_dd(self, u):
        """Second derivative of the convex part."""
        u = np.asarray(u, dtype=float)
        if self.family == "user":
            if self.split is None:
                return self.d2V(u)
            return np.asarray(self.split[0](u), dtype=float)
        return np.full_like(u, self.a)

    def perturbation(self, u, order: int = 0):
        u = np.asarray(u, dtype=float)
        if self.family == "user":
            if self.split is None:
                return np.zeros_like(u)
            return np.asarray(self.split[1 + order](u), dtype=float)
        if self.family == "quadratic" or self.b == 0.0:
            return np.zeros_like(u)
        return self.b * _shape_derivs(self.shape, u, order)


def eval(potential: Potential, u, order: int):
    """V(u), V'(u) or V''(u) for ``order`` 0, 1, 2."""
    if order not in (0, 1, 2):
        raise UsageError(f"order must be 0, 1 or 2, got {order!r}")
    out = potential._derivative(u, order)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ValidationReport:
    passed: bool
    C: float
    min_convex_dd: float
    max_convex_dd: float
    sup_psi: float
    sup_dpsi: float
    sup_d2psi: float
    lipschitz: float
    reasons: list = field(default_factory=list)
    offending_point: Optional[float] = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def validate_assumption_v(potential: Potential, probe=None, curvature_cap: float = 1e3,
                          perturbation_cap: float = 1e6) -> ValidationReport:
    """Probe-based check that V splits into a uniformly convex part plus a
    bounded C^2 perturbation.

    ``curvature_cap`` bounds both phi'' and 1/phi''; ``perturbation_cap``
    bounds the sup-norms of psi, psi', psi''.
    """
    if probe is None:
        probe = np.linspace(-25.0, 25.0, 50001)
    probe = np.asarray(probe, dtype=float)
    if probe.size == 0:
        raise UsageError("probe grid is empty")
    if probe.min() > -20.0 or probe.max() < 20.0:
        raise UsageError("probe grid must cover [-20, 20]")

    dd = potential.convex_dd(probe)
    psis = [potential.perturbation(probe, k) for k in range(3)]
    d2v = potential.d2V(probe)
    for arr in (dd, d2v, *psis):
        bad = ~np.isfinite(arr)
        if bad.any():
            x = float(probe[np.argmax(bad)])
            return ValidationReport(False, np.inf, np.nan, np.nan, np.nan, np.nan, np.nan, np.inf,
                                    [f"non-finite derivative at u={x}"], x)

    lo, hi = float(dd.min()), float(dd.max())
    sups = [float(np.max(np.abs(p))) for p in psis]
    reasons = []
    if lo <= 0.0:
        reasons.append(f"convex part not uniformly convex: min phi''={lo}")
    C = max(hi, 1.0 / lo) if lo > 0 else np.inf
    if C > curvature_cap:
        reasons.append(f"phi'' outside [1/C, C] with C={C} above cap {curvature_cap}")
    for name, s in zip(("psi", "psi'", "psi''"), sups):
        if s > perturbation_cap:
            reasons.append(f"sup|{name}|={s} above cap {perturbation_cap}")
    return ValidationReport(
        passed=not reasons, C=C, min_convex_dd=lo, max_convex_dd=hi,
        sup_psi=sups[0], sup_dpsi=sups[1], sup_d2psi=sups[2],
        lipschitz=C + sups[2], reasons=reasons,
    )
