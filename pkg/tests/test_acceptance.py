"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""
import time
from pathlib import Path

import numpy as np

from semkit.attention import attention_weights, linear_attention, self_cross_block, vanilla_attention
from semkit.cli import main
from semkit.features import FeatureMap, fuse_scales, structured_features
from semkit.geometry import (CameraModel, RelativePose, band_masks, epipolar_bands, epipolar_line,
                             estimate_pose_from_points, grid_centers, pose_error, rotation_about)
from semkit.matching import MatchMatrix, MatchSet, dual_softmax
from semkit.params import init_params
from semkit.pipeline import (Features, PipelineConfig, cell_precision_recall, coarse_loss,
                             coarse_loss_grad, coarse_match, dual_softmax_scores, fine_loss,
                             initialize_features, run_pipeline, trace_precision)
from semkit.synthetic import generate_scene, ground_truth_matches, render_feature_maps

PARAMS = init_params(32, 32, seed=0)
DEFAULTS = PipelineConfig()  # s0=10, 32 anchors, sigma_h=0.5, theta=0.2, 4 iterations
FALLBACK = PipelineConfig(sigma_h=1.01, estimate_pose=False)


def features(scene, seed):
    fm = render_feature_maps(scene, seed=seed)
    return Features(fm[8][0], fm[32][0], fm[2][0]), Features(fm[8][1], fm[32][1], fm[2][1])


def draws(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        k = int(rng.integers(1, 33))
        yield rng.uniform(0, 32, (1, 2)), rng.uniform(0, 32, (k, 2)), rng


# 1
def test_structured_scale_invariance(gate):
    t0, worst = time.perf_counter(), 0.0
    for p, a, rng in draws(1000, 1):
        s = rng.uniform(0.1, 10)
        worst = max(worst, np.max(np.abs(structured_features(p * s, a * s) - structured_features(p, a))))
    dt = time.perf_counter() - t0
    gate(1, worst <= 1e-9 and dt < 1.0,
         f"structured scale invariance: max dev {worst:.2e} (<=1e-9), {dt:.2f}s (<1s)")


# 2
def test_distance_block_rotation_invariance(gate):
    t0, worst = time.perf_counter(), 0.0
    for p, a, rng in draws(1000, 2):
        th, c = rng.uniform(0, 2 * np.pi), rng.uniform(-20, 50, 2)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        n = len(a)
        d0 = structured_features(p, a)[:, 2 * n:]
        d1 = structured_features((p - c) @ R.T + c, (a - c) @ R.T + c)[:, 2 * n:]
        worst = max(worst, np.max(np.abs(d0 - d1)))
    dt = time.perf_counter() - t0
    gate(2, worst <= 1e-9 and dt < 1.0,
         f"distance-block rotation invariance: max dev {worst:.2e} (<=1e-9), {dt:.2f}s (<1s)")


# 3
def test_epipolar_line_oracle(gate):
    rng = np.random.default_rng(3)

    def cam():
        f = rng.uniform(200, 900)
        return CameraModel(f, f * rng.uniform(0.9, 1.1), rng.uniform(100, 300), rng.uniform(100, 300), 400, 400)

    t0, worst = time.perf_counter(), 0.0
    for _ in range(1000):
        cr, cs = cam(), cam()
        T = rng.normal(size=3)
        pose = RelativePose(rotation_about(rng.normal(size=3), rng.uniform(-30, 30)), T / np.linalg.norm(T))
        t = pose.T
        Tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
        F = np.linalg.inv(cs.K).T @ Tx @ pose.R @ np.linalg.inv(cr.K)
        x = np.array([*rng.uniform(0, 400, 2), 1.0])
        want = F @ x
        got = epipolar_line(cr, cs, pose, x[:2], 1.0).line
        worst = max(worst, np.linalg.norm(np.cross(got / np.linalg.norm(got), want / np.linalg.norm(want))))
    dt = time.perf_counter() - t0
    gate(3, worst <= 1e-9 and dt < 1.0,
         f"epipolar line vs fundamental-matrix oracle: cross norm {worst:.2e} (<=1e-9), {dt:.2f}s (<1s)")


# 4
def test_band_recall(gate):
    t0, total, inside = time.perf_counter(), 0, 0
    for seed in range(50):
        scene = generate_scene(100, 0.5, 10.0, seed=seed)
        gt = ground_truth_matches(scene)
        H, W = gt.ref_dims
        bands = epipolar_bands(scene.cam_ref.grid(8), scene.cam_src.grid(8), scene.pose, grid_centers(W, H), 2.0)
        masks = band_masks(bands, gt.src_dims[1], gt.src_dims[0]).reshape(len(bands), -1)
        for i, j in gt.pairs():
            total += 1
            inside += bool(masks[i, j])
    dt = time.perf_counter() - t0
    gate(4, inside == total and dt < 5.0,
         f"band recall at s0=2: {inside}/{total} GT pairs inside, {dt:.2f}s (<5s)")


# 5
def test_pose_recovery(gate):
    t0, clean, dirty = time.perf_counter(), 0.0, 0.0
    for seed in range(50):
        scene = generate_scene(100, 0.5, 10.0, seed=seed)
        gt = ground_truth_matches(scene)
        pose, _ = estimate_pose_from_points(gt.ref_px, gt.src_px, scene.cam_ref, scene.cam_src, seed=seed)
        clean = max(clean, *pose_error(pose, scene.pose))
        # outliers make up 30% of the final set
        rng = np.random.default_rng(1000 + seed)
        k = int(round(0.3 * len(gt) / 0.7))
        ref = np.vstack([gt.ref_px, rng.uniform(0, 255, (k, 2))])
        src = np.vstack([gt.src_px, rng.uniform(0, 255, (k, 2))])
        order = rng.permutation(len(ref))
        pose, _ = estimate_pose_from_points(ref[order], src[order], scene.cam_ref, scene.cam_src, seed=seed)
        dirty = max(dirty, *pose_error(pose, scene.pose))
    dt = time.perf_counter() - t0
    gate(5, clean <= 1e-3 and dirty <= 0.1 and dt < 10.0,
         f"pose recovery: exact {clean:.2e} deg (<=1e-3), 30% outliers {dirty:.2e} deg (<=0.1), "
         f"{dt:.2f}s (<10s)")


# 6
def test_dual_softmax_brute_force(gate):
    rng = np.random.default_rng(6)
    t0, worst = time.perf_counter(), 0.0
    for n in range(1, 9):
        for m in range(1, 9):
            for tau in (0.1, 1.0, 10.0):
                A, B = rng.normal(size=(n, 4)), rng.normal(size=(m, 4))
                S = tau * np.array([[sum(A[i, c] * B[j, c] for c in range(4)) for j in range(m)] for i in range(n)])
                want = np.zeros((n, m))
                for i in range(n):
                    for j in range(m):
                        row = sum(np.exp(S[i, k] - S[i, j]) for k in range(m))
                        col = sum(np.exp(S[k, j] - S[i, j]) for k in range(n))
                        want[i, j] = 1.0 / (row * col)
                got = dual_softmax(FeatureMap(A[None], 8), FeatureMap(B[None], 8), tau).scores
                worst = max(worst, np.max(np.abs(got - want)), np.max(np.abs(dual_softmax_scores(S) - want)))
    dt = time.perf_counter() - t0
    gate(6, worst <= 1e-12 and dt < 1.0,
         f"dual softmax vs exhaustive oracle (up to 8x8, tau 0.1/1/10): {worst:.2e} (<=1e-12), {dt:.2f}s (<1s)")


# 7
def test_attention_oracles(gate):
    rng = np.random.default_rng(7)
    t0, dv, dl, dc = time.perf_counter(), 0.0, 0.0, 0.0
    phi = lambda x: np.array([v + 1 if v > 0 else np.exp(v) for v in x])
    for _ in range(50):
        nq, nk, d = rng.integers(1, 9, 3)
        Q, K, V = rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), rng.normal(size=(nk, d))
        mask = rng.random((nq, nk)) < 0.5
        mask[np.arange(nq), rng.integers(0, nk, nq)] = True
        want = np.zeros((nq, d))
        for i in range(nq):
            keys = [j for j in range(nk) if mask[i, j]]
            s = [sum(Q[i, c] * K[j, c] for c in range(d)) / np.sqrt(d) for j in keys]
            e = [np.exp(v - max(s)) for v in s]
            for w, j in zip(e, keys):
                want[i] += w / sum(e) * V[j]
        dv = max(dv, np.max(np.abs(vanilla_attention(Q, K, V, mask) - want)))
        pk = [phi(k) for k in K]
        S, z = sum(np.outer(p, v) for p, v in zip(pk, V)), sum(pk)
        want = np.array([phi(q) @ S / (phi(q) @ z) for q in Q])
        dl = max(dl, np.max(np.abs(linear_attention(Q, K, V) - want)))
        w = attention_weights(Q, K, mask)
        dc = max(dc, np.max(np.abs(w.sum(axis=1) - 1.0)), float(-w.min()))
    dt = time.perf_counter() - t0
    ok = dv <= 1e-12 and dl <= 1e-12 and dc <= 1e-12 and dt < 1.0
    gate(7, ok, f"attention oracles: vanilla {dv:.2e}, linear {dl:.2e}, convexity {dc:.2e} (all <=1e-12), "
                f"{dt:.2f}s (<1s)")


# 8
def test_fallback_equivalence(gate):
    worst = 0.0
    for seed in range(3):
        scene = generate_scene(100, 0.5, 10.0, seed=seed)
        ref, src = features(scene, seed)
        cfg = PipelineConfig(iterations=1, sigma_h=1.01, estimate_pose=False)
        a, b = initialize_features(ref, src, PARAMS)
        M, _ = coarse_match(a, b, scene.cam_ref, scene.cam_src, cfg, PARAMS)
        t_ref, t_src = self_cross_block(ref.top, src.top, PARAMS, "init32", "vanilla")
        c_ref, c_src = self_cross_block(ref.coarse, src.coarse, PARAMS, "init8", "linear")
        c_ref, _ = fuse_scales(c_ref, t_ref, PARAMS)
        c_src, _ = fuse_scales(c_src, t_src, PARAMS)
        worst = max(worst, np.max(np.abs(M.scores - dual_softmax(c_ref, c_src, cfg.tau).scores)))
    gate(8, worst <= 1e-12, f"fallback path (K=1) vs plain fused dual softmax: {worst:.2e} (<=1e-12)")


# 9
def test_end_to_end_distinctive(gate):
    t0, P, R, mono = time.perf_counter(), [], [], 0
    for seed in range(20):
        scene = generate_scene(100, 0.5, 10.0, seed=seed)
        ref, src = features(scene, seed)
        gt = ground_truth_matches(scene).pairs()
        r = run_pipeline(ref, src, scene.cam_ref, scene.cam_src, DEFAULTS, PARAMS)
        p, rc = cell_precision_recall(r.matches.pairs(), gt)
        P.append(p)
        R.append(rc)
        prec = trace_precision(r.trace, gt, DEFAULTS.theta)
        mono += all(b >= a for a, b in zip(prec, prec[1:]))
    dt = time.perf_counter() - t0
    ok = min(P) >= 0.95 and min(R) >= 0.80 and mono >= 18 and dt < 60.0
    gate(9, ok, f"end-to-end distinctive: min precision {min(P):.3f} (>=0.95), min recall {min(R):.3f} (>=0.80), "
                f"monotone {mono}/20 (>=18), {dt:.1f}s (<60s)")


# 10
def test_repetitive_texture(gate):
    full, plain = [], []
    for seed in range(20):
        scene = generate_scene(100, 0.5, 10.0, seed=seed, repeat_fraction=0.5)
        ref, src = features(scene, seed)
        gt = ground_truth_matches(scene).pairs()
        for cfg, acc in ((DEFAULTS, full), (FALLBACK, plain)):
            ms = run_pipeline(ref, src, scene.cam_ref, scene.cam_src, cfg, PARAMS).matches
            acc.append(cell_precision_recall(ms.pairs(), gt)[0])
    a, b = float(np.mean(full)), float(np.mean(plain))
    gate(10, a > b, f"repetitive texture: anchors+bands precision {a:.3f} > fallback {b:.3f}")


# 11
def test_loss_chain(gate):
    rng = np.random.default_rng(11)
    grad_err = 0.0
    for _ in range(5):
        S = rng.normal(size=(4, 4))
        gt = {(0, 1), (2, 3), (3, 0)}
        g, h = coarse_loss_grad(S, gt), 1e-5
        for i in range(4):
            for j in range(4):
                Sp, Sm = S.copy(), S.copy()
                Sp[i, j] += h
                Sm[i, j] -= h
                fd = (coarse_loss([dual_softmax_scores(Sp)], gt) - coarse_loss([dual_softmax_scores(Sm)], gt)) / (2 * h)
                grad_err = max(grad_err, abs(g[i, j] - fd) / max(abs(fd), 1e-8))
    eye = MatchSet(np.arange(3), np.arange(3), np.ones(3), (1, 3), (1, 3), np.zeros((3, 2)), np.ones(3))
    zero_c = coarse_loss([MatchMatrix(np.eye(3), (1, 3), (1, 3), 1.0)], {(0, 0), (1, 1), (2, 2)})
    zero_f = fine_loss(eye, {k: [0.0, 0.0] for k in range(3)})
    one = MatchSet(np.array([0]), np.array([0]), np.ones(1), (1, 1), (1, 1), np.array([[3.0, 4.0]]), np.ones(1))
    five = fine_loss(one, {0: [0.0, 0.0]})
    ok = grad_err <= 1e-4 and zero_c == 0.0 and zero_f == 0.0 and five == 5.0
    gate(11, ok, f"loss chain: gradient rel err {grad_err:.2e} (<=1e-4), perfect losses {zero_c}/{zero_f}, "
                 f"3-4-5 case {five} (==5.0)")


# 12
def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_cli_determinism(gate, tmp_path):
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        s = d / "scene"
        rc = [main(["synth", "--seed", "5", "--out", str(s)])]
        cams = ["--cam-ref", str(s / "cam_ref.json"), "--cam-src", str(s / "cam_src.json")]
        rc.append(main(["match", str(s / "ref_8.semf"), str(s / "src_8.semf"), *cams, "--scene",
                        str(s / "scene.json"), "--seed", "5", "--out", str(d / "match")]))
        rc.append(main(["eval", "--pred", str(d / "match" / "matches.tsv"), "--gt", str(s / "gt.tsv"), *cams,
                        "--pose", str(s / "pose.json"), "--seed", "5", "--out", str(d / "eval")]))
        rc.append(main(["viz", str(s / "ref.npy"), str(s / "src.npy"), str(d / "match" / "matches.tsv"),
                        "--band-point", "120,96", *cams, "--pose", str(s / "pose.json"), "--out", str(d / "viz")]))
        runs.append((rc, tree_bytes(d)))
    (rc_a, a), (rc_b, b) = runs
    ok = rc_a == rc_b == [0, 0, 0, 0] and a == b and len(a) > 10
    gate(12, ok, f"CLI determinism: synth/match/eval/viz twice, {len(a)} files byte-identical={a == b}")
