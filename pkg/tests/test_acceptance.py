"""Acceptance checks: one test per shipped guarantee, each against an
independent reference coded from scratch in this file.

The references are deliberately naive: an exhaustive threshold scan, a
scalar-loop bilinear upsampler, dense O(N^2) message passing, the
resistor-chain closed form for harmonic functions, floor-count
bookkeeping, indicator-image co-registration, and hand-tallied confusion
counts. Tolerances are asserted literally, and the end-to-end run pins
the baseline recorded on its first execution.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from attnmask import crf as crf_mod
from attnmask.affinity import solve_harmonic
from attnmask.aggregate import aggregate
from attnmask.augment import (
    DEFAULT_SPLICE_GRIDS,
    Sample,
    SpliceGrid,
    gaussian_blur,
    occlude,
    perspective,
    splice,
)
from attnmask.binarize import adaptive_threshold, default_search_space, threshold
from attnmask.bundle import AttentionBundle, AttentionEntry
from attnmask.config import AffinityConfig, PipelineConfig
from attnmask.crf import CrfParams, meanfield_refine, unary_from_prob
from attnmask.dataset import evaluate_miou
from attnmask.fixtures import FixtureSpec, gen_fixture
from attnmask.noiselearn import (
    SampleRecord,
    kfold_split,
    prune_by_class,
    score_out_of_sample,
)
from attnmask.pipeline import run_pipeline
from attnmask.rasters import IGNORE_LABEL, load_mask
from attnmask.seeding import derive_seed


def iou_binary(a, b):
    fg_a = np.asarray(a) == 1
    fg_b = np.asarray(b) == 1
    union = int(np.count_nonzero(fg_a | fg_b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(fg_a & fg_b)) / union


# ---------------------------------------------------------------------------
# 1. Adaptive threshold selection equals an exhaustive scan, fast enough.


def exhaustive_best_gamma(values, affinity, omega):
    """Literal scan: threshold at every candidate, keep the first strict best."""
    arr = np.asarray(values, dtype=np.float64)
    fg = np.asarray(affinity) == 1
    best_gamma = None
    best_score = -1.0
    for gamma in omega:
        mask = arr >= gamma
        union = int(np.count_nonzero(mask | fg))
        inter = int(np.count_nonzero(mask & fg))
        score = 1.0 if union == 0 else inter / union
        if score > best_score:
            best_score = score
            best_gamma = float(gamma)
    return best_gamma


def test_adaptive_threshold_matches_exhaustive_scan_exactly():
    rng = np.random.default_rng(20240816)
    omega = np.round(0.05 + 0.01 * np.arange(91), 10)
    assert np.array_equal(omega, default_search_space())

    fixtures = []
    for i in range(120):
        h, w = (int(v) for v in rng.integers(5, 41, 2))
        style = i % 3
        if style == 0:
            values = rng.random((h, w))
        elif style == 1:
            # two-decimal values collide with grid candidates, forcing ties
            values = np.round(rng.random((h, w)), 2)
        else:
            values = rng.random((h, w)).cumsum(axis=0)
            values = values / values.max()
        kind = i % 4
        if kind == 0:
            affinity = (rng.random((h, w)) < 0.5).astype(np.uint8)
        elif kind == 1:
            affinity = np.zeros((h, w), dtype=np.uint8)
        elif kind == 2:
            affinity = np.ones((h, w), dtype=np.uint8)
        else:
            affinity = (values >= float(rng.choice(omega))).astype(np.uint8)
        fixtures.append((values, affinity))

    start = time.perf_counter()
    picked = [adaptive_threshold(values, affinity, omega)[0] for values, affinity in fixtures]
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0

    for (values, affinity), gamma_hat in zip(fixtures, picked):
        assert gamma_hat == exhaustive_best_gamma(values, affinity, omega)


# ---------------------------------------------------------------------------
# 2. Attention fusion matches a scalar-loop reference and is invariant to
#    entry order and per-map positive scaling.


def upsample_reference(src, height, width):
    """Corner-aligned bilinear resize written as plain per-pixel loops."""
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape
    out = np.zeros((height, width), dtype=np.float64)
    for i in range(height):
        y = i * (h - 1) / (height - 1) if h > 1 and height > 1 else 0.0
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(width):
            x = j * (w - 1) / (width - 1) if w > 1 and width > 1 else 0.0
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
            bottom = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1.0 - fy) + bottom * fy
    return out


def fuse_reference(bundle, token_group, target, reducer, after):
    height, width = target
    per_token = []
    for token in token_group:
        entries = sorted(
            (e for e in bundle.entries if e.token_index == token),
            key=AttentionEntry.key,
        )
        acc = np.zeros((height, width), dtype=np.float64)
        for entry in entries:
            raw = np.asarray(entry.map, dtype=np.float64)
            if after:
                up = upsample_reference(raw, height, width)
                acc += up / up.max()
            else:
                acc += upsample_reference(raw / raw.max(), height, width)
        per_token.append(acc / len(entries))
    stack = np.stack(per_token)
    fused = stack.mean(axis=0) if reducer == "mean" else stack.max(axis=0)
    return fused / fused.max()


def build_stack_bundle(rng, sizes, token_ids, timesteps):
    entries = []
    for layer, size in enumerate(sizes):
        for step in timesteps:
            for tok in list(token_ids) + [99]:  # token 99 is never in the group
                values = (rng.random((size, size)) + 1e-3).astype(np.float32)
                entries.append(AttentionEntry(layer, step, tok, values))
    tokens = [(t, f"tok{t}") for t in sorted(set(token_ids) | {99})]
    return AttentionBundle(
        image=np.zeros((8, 8, 3), dtype=np.uint8),
        prompt="a photo of a thing",
        tokens=tokens,
        entries=entries,
        seed=0,
        model_id="test",
    )


def test_attention_fusion_matches_reference_and_invariances():
    rng = np.random.default_rng(20240816)
    stacks = [
        ((5, 8, 13), (26, 26)),
        ((4, 6), (33, 21)),
        ((7, 7, 10), (40, 30)),
        ((6, 9), (27, 45)),
        ((5, 12, 16), (32, 48)),
        ((8, 8), (24, 24)),
        ((9, 14), (56, 42)),
        ((4, 5, 6, 7), (21, 35)),
    ]
    group = [1, 3]
    for sizes, target in stacks:
        bundle = build_stack_bundle(rng, sizes, group, (1, 11))
        for reducer in ("mean", "max"):
            for after in (False, True):
                got = aggregate(bundle, group, target, reducer=reducer, normalize_after_upsample=after)
                want = fuse_reference(bundle, group, target, reducer, after)
                assert float(np.max(np.abs(got - want))) <= 1e-6

    for case in range(1000):
        n_tok = int(rng.integers(1, 4))
        base_group = list(range(n_tok))
        entries = []
        for tok in base_group:
            for e_idx in range(int(rng.integers(1, 4))):
                size = int(rng.integers(4, 11))
                values = (rng.random((size, size)) + 1e-3).astype(np.float32)
                entries.append(AttentionEntry(e_idx, 7, tok, values))
        tokens = [(t, f"tok{t}") for t in base_group]
        image = np.zeros((4, 4, 3), dtype=np.uint8)
        bundle = AttentionBundle(image, "p", tokens, entries, 0, "m")
        reducer = "mean" if case % 2 == 0 else "max"
        after = (case // 2) % 2 == 1
        base = aggregate(bundle, base_group, (12, 12), reducer=reducer, normalize_after_upsample=after)

        scaled = []
        for entry in entries:
            factor = float(rng.uniform(0.05, 20.0))
            rescaled = (np.asarray(entry.map, dtype=np.float64) * factor).astype(np.float32)
            scaled.append(AttentionEntry(entry.layer_id, entry.timestep, entry.token_index, rescaled))
        shuffled = [scaled[int(k)] for k in rng.permutation(len(scaled))]
        variant_bundle = AttentionBundle(image, "p", tokens, shuffled, 0, "m")
        perm_group = [base_group[int(k)] for k in rng.permutation(n_tok)]
        variant = aggregate(
            variant_bundle, perm_group, (12, 12), reducer=reducer, normalize_after_upsample=after
        )
        assert float(np.max(np.abs(variant - base))) <= 1e-6


# ---------------------------------------------------------------------------
# 3. Mean-field refinement matches a dense double-loop oracle, keeps its
#    posterior normalized every iteration, and degenerates to a bare softmax
#    when both pairwise weights are zero.


def softmax_costs_reference(costs):
    z = -np.asarray(costs, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def meanfield_reference(image, unary, params):
    height, width = image.shape[:2]
    n = height * width
    coords = np.stack(np.meshgrid(np.arange(height), np.arange(width), indexing="ij"), axis=-1)
    pos = coords.reshape(n, 2).astype(np.float64)
    rgb = image.reshape(n, 3).astype(np.float64)
    kernel = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dp = pos[i] - pos[j]
            dc = rgb[i] - rgb[j]
            app = math.exp(
                -float(dp @ dp) / (2.0 * params.theta_alpha**2)
                - float(dc @ dc) / (2.0 * params.theta_beta**2)
            )
            smooth = math.exp(-float(dp @ dp) / (2.0 * params.theta_gamma**2))
            kernel[i, j] = params.w_app * app + params.w_smooth * smooth
    u = unary.reshape(n, 2).astype(np.float64)
    q = softmax_costs_reference(u)
    for _ in range(params.iterations):
        message = kernel @ q
        psi = np.empty_like(u)
        psi[:, 0] = u[:, 0] + message[:, 1]
        psi[:, 1] = u[:, 1] + message[:, 0]
        q = softmax_costs_reference(psi)
    return q[:, 1].reshape(height, width)


def test_meanfield_crf_matches_double_loop_oracle(monkeypatch):
    recorded = []
    real_softmax = crf_mod._softmax_from_costs

    def recording_softmax(costs):
        q = real_softmax(costs)
        recorded.append(float(np.max(np.abs(q.sum(axis=-1) - 1.0))))
        return q

    monkeypatch.setattr(crf_mod, "_softmax_from_costs", recording_softmax)

    rng = np.random.default_rng(20240816)
    for size in range(3, 9):
        for _ in range(3):
            h = size
            w = int(rng.integers(3, 9))
            image = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
            unary = unary_from_prob(rng.random((h, w)))
            params = CrfParams(
                w_app=float(rng.uniform(1.0, 10.0)),
                theta_alpha=float(rng.uniform(1.0, 30.0)),
                theta_beta=float(rng.uniform(5.0, 20.0)),
                w_smooth=float(rng.uniform(0.5, 5.0)),
                theta_gamma=float(rng.uniform(0.5, 5.0)),
                iterations=5,
            )
            posterior, mask = meanfield_refine(image, unary, params)
            expected = meanfield_reference(image, unary, params)
            assert float(np.max(np.abs(posterior - expected))) <= 1e-6
            assert mask.shape == (h, w)

    # normalization also holds on a window-truncated instance, once per update
    image = rng.integers(0, 256, (104, 104, 3), dtype=np.uint8)
    unary = unary_from_prob(rng.random((104, 104)))
    params = CrfParams(theta_alpha=2.0, iterations=2)
    before = len(recorded)
    meanfield_refine(image, unary, params)
    assert len(recorded) - before == params.iterations + 1
    assert max(recorded) <= 1e-6

    # zero pairwise weight leaves exactly the softmax of the unary
    image = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
    unary = unary_from_prob(rng.random((9, 7)))
    posterior, _ = meanfield_refine(image, unary, CrfParams(w_app=0.0, w_smooth=0.0, iterations=3))
    assert np.array_equal(posterior, softmax_costs_reference(unary)[..., 1])


# ---------------------------------------------------------------------------
# 4. Seeded propagation on path graphs matches the resistor-chain closed
#    form, and the solution always stays inside [0, 1].


def test_seeded_propagation_closed_form_and_max_principle():
    rng = np.random.default_rng(20240816)

    cases = []
    for n in (10, 37):
        color = rng.integers(0, 256, 3)
        cases.append(np.repeat(color[None, :], n, axis=0))
    for _ in range(8):
        n = int(rng.integers(10, 61))
        start = rng.integers(0, 256, (1, 3)).astype(np.int64)
        steps = rng.integers(-80, 81, (n - 1, 3))
        cases.append(np.clip(np.cumsum(np.vstack([start, steps]), axis=0), 0, 255))
    for _ in range(2):
        # a single large color jump makes one nearly insulating edge
        n = int(rng.integers(20, 41))
        colors = np.full((n, 3), 90, dtype=np.int64)
        colors[int(rng.integers(5, n - 5)):, 0] += 120
        cases.append(colors)

    for colors in cases:
        image = np.asarray(colors, dtype=np.uint8)[None, :, :]
        n = image.shape[1]
        seeds = np.full((1, n), 2, dtype=np.uint8)
        seeds[0, 0] = 1
        seeds[0, n - 1] = 0
        f = solve_harmonic(image, seeds, sigma_c=30.0, tol=1e-10, max_iter=300000)

        rgb = image[0].astype(np.float64)
        diffs = rgb[1:] - rgb[:-1]
        weights = np.exp(-np.einsum("ij,ij->i", diffs, diffs) / (2.0 * 30.0**2))
        resist = 1.0 / weights
        cumulative = np.concatenate([[0.0], np.cumsum(resist)])
        expected = 1.0 - cumulative / resist.sum()
        assert float(np.max(np.abs(f[0] - expected))) <= 1e-4

    for _ in range(100):
        h, w = (int(v) for v in rng.integers(5, 21, 2))
        image = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        seeds = np.full((h, w), 2, dtype=np.uint8)
        flat = rng.permutation(h * w)
        n_fg = int(rng.integers(1, 4))
        n_bg = int(rng.integers(1, 4))
        seeds.flat[flat[:n_fg]] = 1
        seeds.flat[flat[n_fg : n_fg + n_bg]] = 0
        f = solve_harmonic(image, seeds, max_iter=2000)
        assert f.min() >= 0.0
        assert f.max() <= 1.0
        assert np.all(f[seeds == 1] == 1.0)
        assert np.all(f[seeds == 0] == 0.0)


# ---------------------------------------------------------------------------
# 5. Pruning drops exactly floor(alpha * n_c) per class, never keeps a
#    record scored below one it pruned, and scoring never trains on the
#    fold it predicts.


class InstrumentedProvider:
    """Records, per fit call, the train ids and the ids predicted after it."""

    def __init__(self):
        self.calls = []

    def fit(self, train):
        self.calls.append({"train": {r.sample_id for r in train}, "predicted": set()})

    def predict(self, record):
        self.calls[-1]["predicted"].add(record.sample_id)
        return record.candidate_mask


def test_prune_counts_order_and_fold_isolation():
    rng = np.random.default_rng(20240816)
    tiny = np.ones((2, 2), dtype=np.uint8)

    for case in range(1000):
        if case % 10 == 0:
            alpha = 0.0
        elif case % 10 == 1:
            alpha = 1.0
        else:
            alpha = float(rng.uniform(0.0, 1.0))
        records = []
        counts = {}
        for class_id in range(1, int(rng.integers(1, 4)) + 1):
            n_c = int(rng.integers(1, 31))
            counts[class_id] = n_c
            for j in range(n_c):
                q = round(float(rng.random()), 1)  # one decimal forces ties
                records.append(
                    SampleRecord(f"c{class_id}_s{j:03d}", class_id, tiny, q=q)
                )
        kept, pruned = prune_by_class(records, alpha)
        assert len(kept) + len(pruned) == len(records)
        for class_id, n_c in counts.items():
            kept_c = [r for r in kept if r.class_id == class_id]
            pruned_c = [r for r in pruned if r.class_id == class_id]
            assert len(pruned_c) == math.floor(alpha * n_c)
            if kept_c and pruned_c:
                assert min(r.q for r in kept_c) >= max(r.q for r in pruned_c)
        shuffled = [records[int(k)] for k in rng.permutation(len(records))]
        _, pruned_again = prune_by_class(shuffled, alpha)
        assert {r.sample_id for r in pruned_again} == {r.sample_id for r in pruned}

    for case in range(50):
        k = int(rng.integers(2, 5))
        ids_by_class = {}
        records = []
        for class_id in range(1, int(rng.integers(1, 3)) + 1):
            ids = [f"f{case}_c{class_id}_{j:02d}" for j in range(int(rng.integers(k, 13)))]
            ids_by_class[class_id] = ids
            records.extend(SampleRecord(s, class_id, tiny) for s in ids)
        folds = kfold_split(ids_by_class, k=k, seed=case)
        provider = InstrumentedProvider()
        scored = score_out_of_sample(records, folds, provider)

        all_ids = {r.sample_id for r in records}
        predicted_total = []
        assert len(provider.calls) == k
        for call in provider.calls:
            assert call["train"] & call["predicted"] == set()
            assert call["train"] == all_ids - call["predicted"]
            predicted_total.extend(call["predicted"])
        assert sorted(predicted_total) == sorted(all_ids)
        assert all(r.q == 1.0 for r in scored)


# ---------------------------------------------------------------------------
# 6. Every augmentation op keeps image and mask co-registered, and splice
#    hits the requested canvas exactly for every allowed grid.


def indicator_sample(mask):
    """Sample whose image is a white-on-black rendering of its own mask."""
    image = np.zeros(mask.shape + (3,), dtype=np.uint8)
    image[mask == 1] = 255
    return Sample(image, mask.astype(np.uint8))


def coregistration_iou(sample):
    """IoU between the mask and the re-decoded indicator image."""
    valid = sample.mask != IGNORE_LABEL
    decoded = (sample.image[..., 0].astype(np.int32) > 127) & valid
    labeled = (sample.mask == 1) & valid
    union = int(np.count_nonzero(decoded | labeled))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(decoded & labeled)) / union


def rect_indicator(dims, rng, lo, hi):
    h, w = dims
    rect_h = int(rng.integers(lo, hi))
    rect_w = int(rng.integers(lo, hi))
    top = int(rng.integers(0, h - rect_h + 1))
    left = int(rng.integers(0, w - rect_w + 1))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[top : top + rect_h, left : left + rect_w] = 1
    return indicator_sample(mask)


def disk_indicator(dims, rng, r_lo, r_hi):
    h, w = dims
    radius = float(rng.uniform(r_lo, r_hi))
    cy = float(rng.uniform(radius + 2.0, h - radius - 3.0))
    cx = float(rng.uniform(radius + 2.0, w - radius - 3.0))
    yy, xx = np.ogrid[:h, :w]
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius).astype(np.uint8)
    return indicator_sample(mask)


def test_augmentation_coregistration_and_splice_dims():
    rng = np.random.default_rng(20240816)

    splice_scores = []
    for i in range(50):
        rows, cols = DEFAULT_SPLICE_GRIDS[i % len(DEFAULT_SPLICE_GRIDS)]
        pool = [rect_indicator((16, 16), rng, 4, 13) for _ in range(3)]
        out = splice(pool, SpliceGrid(rows, cols), (32 * rows, 32 * cols), int(rng.integers(2**31)))
        assert set(np.unique(out.mask)) <= {0, 1}
        splice_scores.append(coregistration_iou(out))
    assert min(splice_scores) >= 0.99

    occlude_scores = []
    for _ in range(50):
        target = rect_indicator((32, 32), rng, 8, 25)
        source = rect_indicator((32, 32), rng, 8, 25)
        out = occlude(target, source, seed=int(rng.integers(2**31)))
        occlude_scores.append(coregistration_iou(out))
    assert min(occlude_scores) >= 0.99

    perspective_scores = []
    for _ in range(50):
        sample = rect_indicator((128, 128), rng, 57, 103)
        out = perspective(sample, 0.25, seed=int(rng.integers(2**31)))
        perspective_scores.append(coregistration_iou(out))
    assert min(perspective_scores) >= 0.99

    blur_scores = []
    for _ in range(50):
        # disks lose only a curvature-sized sliver under blur-then-decode
        sample = disk_indicator((192, 192), rng, 60.0, 88.0)
        blurred = gaussian_blur(sample.image, int(rng.integers(6, 23)))
        blur_scores.append(coregistration_iou(Sample(blurred, sample.mask.copy())))
    assert min(blur_scores) >= 0.99

    full = Sample(np.full((16, 16, 3), 255, dtype=np.uint8), np.ones((16, 16), dtype=np.uint8))
    for canvas in ((97, 53), (128, 128)):
        for rows, cols in DEFAULT_SPLICE_GRIDS:
            out = splice([full], SpliceGrid(rows, cols), canvas, seed=3)
            assert out.dims == canvas
            assert out.image.shape == canvas + (3,)
            assert np.all(out.mask == 1)


# ---------------------------------------------------------------------------
# 7. Mean IoU agrees with hand-tallied confusion counts, skips ignore
#    pixels, and scores a perfect prediction as exactly 1.0.


def test_miou_matches_hand_counted_cases():
    gt_a = np.array(
        [[0, 0, 1, 1], [0, 0, 1, 1], [0, 1, 1, 0], [0, 0, 255, 1]], dtype=np.uint8
    )
    pred_a = np.array(
        [[0, 1, 1, 1], [0, 0, 1, 0], [0, 0, 1, 0], [1, 0, 0, 1]], dtype=np.uint8
    )
    report_a = evaluate_miou({"a": pred_a}, {"a": gt_a}, [0, 1])
    assert report_a.pixel_counts == {0: (6, 2, 2), 1: (5, 2, 2)}
    assert report_a.per_class_iou[0] == 6 / 10
    assert report_a.per_class_iou[1] == 5 / 9
    assert report_a.miou == pytest.approx(26 / 45, abs=1e-12)

    gt_b = np.array(
        [[2, 2, 0, 0], [2, 2, 0, 0], [1, 1, 1, 255], [0, 0, 1, 1]], dtype=np.uint8
    )
    pred_b = np.array(
        [[2, 0, 0, 0], [2, 2, 0, 1], [1, 1, 0, 255], [0, 1, 1, 1]], dtype=np.uint8
    )
    report_b = evaluate_miou({"b": pred_b}, {"b": gt_b}, [0, 1, 2])
    assert report_b.pixel_counts == {0: (4, 2, 2), 1: (4, 2, 1), 2: (3, 0, 1)}
    assert report_b.per_class_iou == {0: 4 / 8, 1: 4 / 7, 2: 3 / 4}
    assert report_b.miou == pytest.approx((4 / 8 + 4 / 7 + 3 / 4) / 3, abs=1e-12)

    # flipping the prediction under the ignore pixel changes nothing
    flipped = pred_a.copy()
    flipped[3, 2] = 1
    report_flipped = evaluate_miou({"a": flipped}, {"a": gt_a}, [0, 1])
    assert report_flipped.pixel_counts == report_a.pixel_counts
    assert report_flipped.per_class_iou == report_a.per_class_iou
    assert report_flipped.miou == report_a.miou

    tiny = evaluate_miou(
        {"t": np.array([[1, 0]], dtype=np.uint8)},
        {"t": np.array([[1, 255]], dtype=np.uint8)},
        [1],
    )
    assert tiny.pixel_counts == {1: (1, 0, 0)}
    assert tiny.miou == 1.0

    perfect = evaluate_miou({"p": gt_b}, {"p": gt_b}, [0, 1, 2])
    assert perfect.per_class_iou == {0: 1.0, 1: 1.0, 2: 1.0}
    assert perfect.miou == 1.0


# ---------------------------------------------------------------------------
# 8. The full pipeline recovers planted masks from noise-free fixtures,
#    runs single-threaded inside the time budget, and reproduces the same
#    manifest byte for byte.


def test_pipeline_end_to_end_zero_noise_recovery(tmp_path):
    spec = FixtureSpec()

    def config_for(out_dir):
        return PipelineConfig(
            out_dir=str(out_dir),
            seed=20240816,
            jobs=1,
            sample_count=20,
            fixture=spec,
            crf=CrfParams(theta_alpha=8.0),
            affinity=AffinityConfig(max_iter=2000),
        )

    start = time.perf_counter()
    manifest = run_pipeline(config_for(tmp_path / "run_a"))
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0

    base = [s for s in manifest.samples if s.augment_trace is None]
    assert len(base) == 20
    ious = []
    for i, row in enumerate(base):
        _, fixture_gt = gen_fixture(spec, derive_seed(20240816, "sample", i))
        produced = load_mask(tmp_path / "run_a" / row.mask_path)
        ious.append(iou_binary(produced, fixture_gt.mask))
    mean_iou = float(np.mean(ious))
    assert mean_iou >= 0.95
    # baseline pinned from the first recorded run of this exact configuration
    assert mean_iou == 1.0

    run_pipeline(config_for(tmp_path / "run_b"))
    digest_a = hashlib.sha256((tmp_path / "run_a" / "manifest.json").read_bytes()).hexdigest()
    digest_b = hashlib.sha256((tmp_path / "run_b" / "manifest.json").read_bytes()).hexdigest()
    assert digest_a == digest_b


# ---------------------------------------------------------------------------
# 9. On maps with a planted optimal threshold, the adaptive pick lands
#    near it and beats both fixed offsets by a clear margin.


def test_adaptive_threshold_beats_fixed_offsets():
    rng = np.random.default_rng(20240816)
    size = 64
    yy, xx = np.ogrid[:size, :size]
    errors = []
    adaptive_scores = []
    above_scores = []
    below_scores = []
    for _ in range(25):
        gamma_opt = float(rng.uniform(0.30, 0.60))
        r1 = float(rng.uniform(14.0, 20.0))
        r_core = r1 * float(rng.uniform(0.78, 0.86))
        r2 = r1 * float(rng.uniform(1.25, 1.40))
        cy = float(rng.uniform(r2 + 2.0, size - r2 - 3.0))
        cx = float(rng.uniform(r2 + 2.0, size - r2 - 3.0))
        dist = np.hypot(yy - cy, xx - cx)
        core = dist < r_core
        band = (dist >= r_core) & (dist <= r1)
        halo = (dist > r1) & (dist <= r2)
        outside = dist > r2
        values = np.empty((size, size), dtype=np.float64)
        values[core] = rng.uniform(gamma_opt + 0.20, 0.98, int(np.count_nonzero(core)))
        values[band] = rng.uniform(gamma_opt + 0.02, gamma_opt + 0.13, int(np.count_nonzero(band)))
        values[halo] = rng.uniform(gamma_opt - 0.13, gamma_opt - 0.02, int(np.count_nonzero(halo)))
        values[outside] = rng.uniform(0.01, gamma_opt - 0.20, int(np.count_nonzero(outside)))
        gt = (dist <= r1).astype(np.uint8)

        gamma_hat, mask = adaptive_threshold(values, gt)
        errors.append(abs(gamma_hat - gamma_opt))
        adaptive_scores.append(iou_binary(mask, gt))
        above_scores.append(iou_binary(threshold(values, gamma_opt + 0.15), gt))
        below_scores.append(iou_binary(threshold(values, gamma_opt - 0.15), gt))

    assert float(np.mean(errors)) <= 0.05
    assert float(np.mean(adaptive_scores) - np.mean(above_scores)) >= 0.10
    assert float(np.mean(adaptive_scores) - np.mean(below_scores)) >= 0.10
