import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from patchforge import grid as G
from patchforge.grid import TsdfGrid


def random_grid(D=8, seed=0, t=2.5):
    rng = np.random.default_rng(seed)
    return TsdfGrid(rng.uniform(-t, t, size=(D, D, D)), t, 1.0 / D)


# chunk -----------------------------------------------------------------------------

def test_chunk_whole_grid_is_single_chunk():
    g = random_grid(32)
    chunks = G.chunk(g, 32)
    assert len(chunks) == 1
    assert chunks[0].origin == (0, 0, 0)
    assert np.array_equal(chunks[0].values, g.values)


def test_chunk_count_r8():
    assert len(G.chunk(random_grid(32), 8)) == 64


def test_chunk_d4_r2_matches_index_enumeration():
    vals = np.arange(64, dtype=np.float32).reshape(4, 4, 4) / 64.0
    g = TsdfGrid(vals, truncation=2.5, voxel_size=0.25)
    chunks = G.chunk(g, 2)
    assert len(chunks) == 8
    first = chunks[0]
    assert first.origin == (0, 0, 0)
    expected = sorted(vals[x, y, z] for x, y, z in itertools.product(range(4), repeat=3) if max(x, y, z) < 2)
    assert sorted(first.values.ravel().tolist()) == expected
    # every chunk matches a brute-force slice at its origin
    for c in chunks:
        x, y, z = c.origin
        brute = np.array([[[vals[x + i, y + j, z + k] for k in range(2)] for j in range(2)] for i in range(2)])
        assert np.array_equal(c.values, brute)


def test_chunk_order_is_ascending_origin():
    origins = [c.origin for c in G.chunk(random_grid(8), 2)]
    assert origins == sorted(origins)
    assert len(set(origins)) == len(origins)


def test_chunk_values_are_a_permutation():
    g = random_grid(8, seed=3)
    cat = np.concatenate([c.values.ravel() for c in G.chunk(g, 4)])
    assert np.array_equal(np.sort(cat), np.sort(g.values.ravel()))


def test_chunk_rejects_non_divisor():
    with pytest.raises(ValueError):
        G.chunk(random_grid(8), 3)


@pytest.mark.parametrize("R", [4, 8])
def test_recompose_roundtrip(R):
    g = random_grid(32, seed=R)
    assert G.recompose(G.chunk(g, R), 32, g.truncation, g.voxel_size) == g


def test_recompose_single_chunk():
    g = random_grid(8)
    assert G.recompose(G.chunk(g, 8), 8, g.truncation, g.voxel_size) == g


def test_recompose_rejects_overlap_and_gaps():
    chunks = G.chunk(random_grid(8), 4)
    with pytest.raises(ValueError, match="overlapping"):
        G.recompose(chunks[:-1] + [chunks[0]], 8)
    with pytest.raises(ValueError, match="missing"):
        G.recompose(chunks[:-1], 8)


@settings(max_examples=30, deadline=None)
@given(exp=st.integers(2, 4), r_exp=st.integers(0, 4), seed=st.integers(0, 2**16))
def test_chunk_recompose_bijection(exp, r_exp, seed):
    D = 2**exp
    R = 2 ** min(r_exp, exp)
    g = random_grid(D, seed)
    assert G.recompose(G.chunk(g, R), D, g.truncation, g.voxel_size) == g
    assert np.array_equal(G.recompose_array(G.chunk_array(g.values, R), D), g.values)


# sign partition ----------------------------------------------------------------------

def test_partition_identical():
    g = random_grid()
    part = G.sign_partition(g, g)
    assert part.correct.all()
    assert not part.occ_wrong.any() and not part.empty_wrong.any()


def test_partition_sign_flip():
    g = random_grid()
    assert not (g.values == 0).any()
    part = G.sign_partition(g.with_values(-g.values), g)
    assert not part.correct.any()
    assert (part.occ_wrong | part.empty_wrong).all()


def test_partition_zero_is_positive():
    gt = np.full((4, 4, 4), -1.0)
    pred = np.zeros((4, 4, 4))
    part = G.sign_partition(pred, gt)
    assert part.empty_wrong.all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_partition_matches_per_voxel_loop(seed):
    rng = np.random.default_rng(seed)
    pred = rng.choice([-1.0, 0.0, 1.0], size=(4, 4, 4))
    gt = rng.choice([-1.0, 0.0, 1.0], size=(4, 4, 4))
    part = G.sign_partition(pred, gt)
    for idx in itertools.product(range(4), repeat=3):
        g_neg, p_neg = gt[idx] < 0, pred[idx] < 0
        assert part.occ_wrong[idx] == ((not g_neg) and p_neg)
        assert part.empty_wrong[idx] == (g_neg and not p_neg)
        assert part.correct[idx] == (g_neg == p_neg)
    total = part.occ_wrong.astype(int) + part.empty_wrong + part.correct
    assert (total == 1).all()


def test_partition_shape_mismatch():
    with pytest.raises(ValueError):
        G.sign_partition(np.zeros((4, 4, 4)), np.zeros((8, 8, 8)))


# construction policy ---------------------------------------------------------------

def test_clamp_policy_counts_and_clamps():
    vals = np.zeros((4, 4, 4))
    vals[0, 0, 0] = 3.0
    vals[1, 1, 1] = -2.5000002
    g = TsdfGrid(vals, 2.5, 0.25)
    assert g.n_clamped == 2
    assert np.abs(g.values).max() <= 2.5


def test_error_policy_raises():
    vals = np.zeros((4, 4, 4))
    vals[0, 0, 0] = 3.0
    with pytest.raises(ValueError):
        TsdfGrid(vals, 2.5, 0.25, policy=G.ERROR)


def test_grid_is_immutable():
    g = random_grid()
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 4, 4), elements=st.floats(-100, 100)))
def test_values_never_exceed_truncation(arr):
    g = TsdfGrid(arr, 2.5, 0.25)
    assert np.abs(g.values).max() <= np.float32(2.5)


# file I/O ------------------------------------------------------------------------------

def test_io_roundtrip(tmp_path):
    g = TsdfGrid(random_grid(32).values, 2.5, 1.1 / 32)
    G.write_grid(tmp_path / "a.pcts", g)
    back = G.read_grid(tmp_path / "a.pcts")
    assert back == g
    assert back.values.tobytes() == g.values.tobytes()


def test_io_layout_is_little_endian_z_fastest(tmp_path):
    vals = np.zeros((4, 4, 4), dtype=np.float32)
    vals[0, 0, 1] = 1.0
    G.write_grid(tmp_path / "b.pcts", TsdfGrid(vals, 2.5, 0.25))
    raw = (tmp_path / "b.pcts").read_bytes()
    assert raw[:4] == b"PCTS"
    assert struct.unpack("<IIff", raw[4:20]) == (1, 4, 2.5, 0.25)
    assert struct.unpack("<2f", raw[20:28]) == (0.0, 1.0)


def test_bad_magic(tmp_path):
    raw = bytearray(G.to_bytes(random_grid()))
    raw[:4] = b"XXXX"
    with pytest.raises(G.BadMagicError):
        G.from_bytes(bytes(raw))


def test_version_mismatch():
    raw = bytearray(G.to_bytes(random_grid()))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(G.VersionMismatchError):
        G.from_bytes(bytes(raw))


def test_truncated_payload():
    g = random_grid(32)
    raw = G.to_bytes(g)[:-4]  # 32^3 - 1 floats
    with pytest.raises(G.TruncatedFileError):
        G.from_bytes(raw)


def test_nan_payload():
    raw = bytearray(G.to_bytes(random_grid()))
    raw[20:24] = struct.pack("<f", float("nan"))
    with pytest.raises(G.NonFinitePayloadError):
        G.from_bytes(bytes(raw))


def test_parse_errors_are_distinct():
    kinds = {G.BadMagicError, G.VersionMismatchError, G.TruncatedFileError, G.NonFinitePayloadError}
    assert len(kinds) == 4
    assert all(issubclass(k, G.GridFormatError) for k in kinds)
