import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semkit.errors import FormatError, ShapeMismatch
from semkit.features import FeatureMap
from semkit.geometry import Correspondence, EpipolarBand, epipolar_bands, grid_centers
from semkit.matching import (MatchMatrix, MatchSet, band_support, cell_to_pixel, dual_softmax,
                             epipolar_rewrite, extract_matches, heatmap_stats, pixel_to_cell,
                             read_matches_tsv, refine_match, write_matches_tsv, write_matchset_tsv)
from semkit.synthetic import generate_scene, ground_truth_matches, render_feature_maps


def fmap(data, scale=8):
    return FeatureMap(np.asarray(data, dtype=float), scale)


def oracle_dual(S):
    # exhaustive row and column normalizers
    n, m = S.shape
    out = np.zeros_like(S)
    for i in range(n):
        for j in range(m):
            row = sum(np.exp(S[i, k] - S[i, j]) for k in range(m))
            col = sum(np.exp(S[k, j] - S[i, j]) for k in range(n))
            out[i, j] = 1.0 / (row * col)
    return out


def oracle_mnn(M, theta):
    pairs = set()
    for i in range(M.shape[0]):
        j = int(np.argmax(M[i]))
        if int(np.argmax(M[:, j])) == i and M[i, j] >= theta:
            pairs.add((i, j))
    return pairs


# --- dual softmax


def test_singleton_is_one():
    M = dual_softmax(fmap([[[0.3, -0.2]]]), fmap([[[1.0, 4.0]]]), 1.0)
    assert M.scores.shape == (1, 1) and M.scores[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_orthonormal_large_tau_near_identity():
    eye = np.eye(8).reshape(2, 4, 8)
    M = dual_softmax(fmap(eye), fmap(eye), 10.0)
    assert np.all(np.diag(M.scores) >= 0.99)


def test_dual_softmax_random_oracle():
    rng = np.random.default_rng(0)
    for tau in (0.1, 1.0, 10.0):
        a, b = rng.normal(size=(2, 4, 5)), rng.normal(size=(4, 2, 5))
        M = dual_softmax(fmap(a), fmap(b), tau)
        S = tau * a.reshape(8, 5) @ b.reshape(8, 5).T
        assert np.max(np.abs(M.scores - oracle_dual(S))) <= 1e-12


def test_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        dual_softmax(fmap(np.ones((1, 1, 2))), fmap(np.ones((1, 1, 3))), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.05, 30), st.integers(0, 2 ** 16))
def test_dual_softmax_entries_and_row_sums(n, m, tau, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(1, n, 4)), rng.normal(size=(1, m, 4))
    M = dual_softmax(fmap(a), fmap(b), tau).scores
    assert np.all((M >= 0) & (M <= 1))
    # each factor is stochastic, so the product is bounded by either
    assert np.all(M.sum(axis=1) <= 1 + 1e-9) and np.all(M.sum(axis=0) <= 1 + 1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 16))
def test_dual_softmax_row_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(1, n, 4)), rng.normal(size=(1, 5, 4))
    perm = rng.permutation(n)
    M = dual_softmax(fmap(a), fmap(b), 2.0).scores
    Mp = dual_softmax(fmap(a[:, perm]), fmap(b), 2.0).scores
    assert np.allclose(Mp, M[perm], atol=1e-15)


# --- rewrite


def test_rewrite_all_invalid_equals_dual_softmax():
    rng = np.random.default_rng(1)
    a, b = fmap(rng.normal(size=(3, 3, 4))), fmap(rng.normal(size=(2, 4, 4)))
    M = dual_softmax(a, b, 3.0)
    inv = EpipolarBand.invalid(1.0)
    R = epipolar_rewrite(M, a, b, [inv] * 9, [inv] * 8)
    assert np.max(np.abs(R.scores - M.scores)) <= 1e-15


def test_rewrite_single_cell_band():
    rng = np.random.default_rng(2)
    a, b = fmap(rng.normal(size=(1, 4, 3))), fmap(rng.normal(size=(1, 4, 3)))
    # band i covers only column (3 - i): vertical lines x = 3 - i
    bref = [EpipolarBand(np.array([1.0, 0.0, -(3.0 - i)]), 0.1) for i in range(4)]
    bsrc = [EpipolarBand(np.array([1.0, 0.0, -(3.0 - j)]), 0.1) for j in range(4)]
    R = epipolar_rewrite(dual_softmax(a, b, 1.0), a, b, bref, bsrc)
    want = np.fliplr(np.eye(4))
    assert np.array_equal(R.scores, want)


def test_band_support_union_and_fallback():
    inv = EpipolarBand.invalid(1.0)
    far = EpipolarBand(np.array([0.0, 1.0, -50.0]), 0.5)
    row0 = EpipolarBand(np.array([1.0, 0.0, 0.0]), 0.1)      # x = 0 in a 1x2 grid
    sup = band_support([row0, far], [far, far], (1, 2), (1, 2))
    assert sup.tolist() == [[True, False], [True, True]]
    sup = band_support([inv, row0], [far, far], (1, 2), (1, 2))
    assert sup[0].all() and not sup.all()
    with pytest.raises(ShapeMismatch):
        band_support([inv], [inv], (1, 2), (1, 2))


def test_rewrite_never_loses_ground_truth_mass():
    scene = generate_scene(100, 0.5, 10.0, seed=4)
    gt = ground_truth_matches(scene)
    fm = render_feature_maps(scene, seed=4)
    a, b = fm[8]
    g_ref, g_src = scene.cam_ref.grid(8), scene.cam_src.grid(8)
    H, W = gt.ref_dims
    bref = epipolar_bands(g_ref, g_src, scene.pose, grid_centers(W, H), 2.0)
    bsrc = epipolar_bands(g_src, g_ref, scene.pose.inverse(), grid_centers(W, H), 2.0)
    M = dual_softmax(a, b, 5.0)
    R = epipolar_rewrite(M, a, b, bref, bsrc)
    i, j = np.array(sorted(gt.pairs())).T
    assert R.scores[i, j].mean() >= M.scores[i, j].mean()


# --- extraction


def test_extract_identity():
    ms = extract_matches(MatchMatrix(np.eye(4), (2, 2), (2, 2), 1.0), 0.2)
    assert ms.pairs() == {(k, k) for k in range(4)} and np.all(ms.confidence == 1)


def test_extract_below_threshold_empty():
    assert len(extract_matches(MatchMatrix(np.full((3, 3), 0.1), (1, 3), (1, 3), 1.0), 0.2)) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.floats(0.01, 0.5), st.integers(0, 2 ** 16))
def test_extract_equals_brute_force_and_transposes(n, m, theta, seed):
    S = np.random.default_rng(seed).random((n, m))
    M = MatchMatrix(S, (1, n), (1, m), 1.0)
    got = extract_matches(M, theta).pairs()
    assert got == oracle_mnn(S, theta)
    assert extract_matches(M.T, theta).pairs() == {(j, i) for i, j in got}


def test_extract_threshold_range():
    with pytest.raises(ValueError):
        extract_matches(MatchMatrix(np.eye(2), (1, 2), (1, 2), 1.0), 1.0)


# --- coordinates


def test_cell_pixel_roundtrip():
    cells = np.array([[0, 0], [3, 7], [31, 31]])
    assert np.array_equal(pixel_to_cell(cell_to_pixel(cells, 8), 8), cells)
    assert cell_to_pixel([[0, 0]], 8).tolist() == [[3.5, 3.5]]
    assert pixel_to_cell([[-0.5, 7.49]], 8).tolist() == [[0, 0]]
    assert pixel_to_cell([[7.5, 0]], 8).tolist() == [[1, 0]]


# --- refinement


def _fine(data):
    return FeatureMap(np.asarray(data, dtype=float), 2)


def test_refine_uniform_heatmap():
    fine = _fine(np.ones((16, 16, 4)))
    c = Correspondence((8.5, 8.5), (12.5, 16.5))
    pt, var = refine_match(c, fine, fine, w=5, tau=1.0)
    # window centered at fine cell (6, 8) -> pixel 2k + 0.5
    assert np.allclose(pt, [12.5, 16.5])
    # uniform 5x5 grid: variance 2 per axis, trace 4
    assert var == pytest.approx(2 * (25 - 1) / 12, abs=1e-12)


def test_refine_one_hot():
    ref = _fine(np.tile([1.0, 0, 0, 0], (16, 16, 1)))
    src = np.zeros((16, 16, 4))
    src[9, 7] = [500.0, 0, 0, 0]
    pt, var = refine_match(Correspondence((8.5, 8.5), (16.5, 16.5)), ref, _fine(src), 5, 1.0)
    assert np.allclose(pt, [2 * 7 + 0.5, 2 * 9 + 0.5])
    assert var == pytest.approx(0, abs=1e-12)


def test_refine_gaussian_bump():
    # correlation equals log of a Gaussian bump -> heatmap is that bump
    cx, cy, s = 7.3, 8.6, 0.8
    ys, xs = np.mgrid[0:16, 0:16]
    logb = -((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * s * s)
    src = np.zeros((16, 16, 2))
    src[..., 0] = logb
    ref = _fine(np.tile([1.0, 0.0], (16, 16, 1)))
    pt, _ = refine_match(Correspondence((0.5, 0.5), (2 * 7 + 0.5, 2 * 9 + 0.5)), ref, _fine(src), 5, 1.0)
    win = np.exp(logb[7:12, 5:10])
    win /= win.sum()
    mean, _ = heatmap_stats(win)
    want = (mean + [5, 7]) * 2 + 0.5
    assert np.allclose(pt, want, atol=1e-12)
    assert np.all(np.abs((pt - 0.5) / 2 - [cx, cy]) <= 0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 40), st.floats(-5, 40), st.integers(0, 2 ** 16))
def test_refine_stays_in_clamped_window(x, y, seed):
    rng = np.random.default_rng(seed)
    src = _fine(rng.normal(size=(16, 16, 4)) * 3)
    ref = _fine(rng.normal(size=(16, 16, 4)))
    pt, var = refine_match(Correspondence((5.5, 5.5), (x, y)), ref, src, 5, 1.0)
    f = (pt - 0.5) / 2
    assert np.all(f >= 0 - 1e-9) and np.all(f <= 15 + 1e-9) and var >= 0
    # window always 5 wide inside the map
    k = np.floor((np.array([x, y]) - 0.5) / 2 + 0.5)
    c = np.clip(k, 2, 13)
    assert np.all(f >= c - 2 - 1e-9) and np.all(f <= c + 2 + 1e-9)


# --- TSV


def test_tsv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    ref, src = rng.uniform(0, 256, (7, 2)), rng.uniform(0, 256, (7, 2))
    conf, s2 = rng.random(7), rng.random(7)
    write_matches_tsv(tmp_path / "m.tsv", ref, src, conf, s2)
    cols = read_matches_tsv(tmp_path / "m.tsv")
    assert np.allclose(cols["ref_x"], ref[:, 0], rtol=1e-5)
    # written values are already 6-digit; a second pass is bit-exact
    write_matches_tsv(tmp_path / "n.tsv", np.column_stack([cols["ref_x"], cols["ref_y"]]),
                      np.column_stack([cols["src_x"], cols["src_y"]]), cols["confidence"], cols["sigma2"])
    assert (tmp_path / "m.tsv").read_bytes() == (tmp_path / "n.tsv").read_bytes()


def test_tsv_empty_matchset(tmp_path):
    ms = MatchSet([], [], [], (4, 4), (4, 4))
    write_matchset_tsv(tmp_path / "e.tsv", ms)
    cols = read_matches_tsv(tmp_path / "e.tsv")
    assert len(cols["ref_x"]) == 0


@pytest.mark.parametrize("text", ["", "a\tb\n1\t2\n", "ref_x\tref_y\tsrc_x\tsrc_y\n1\t2\t3\n",
                                  "ref_x\tref_y\tsrc_x\tsrc_y\n1\t2\t3\tx\n"])
def test_tsv_schema_errors(tmp_path, text):
    (tmp_path / "bad.tsv").write_text(text)
    with pytest.raises(FormatError):
        read_matches_tsv(tmp_path / "bad.tsv")
