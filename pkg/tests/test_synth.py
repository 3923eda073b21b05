import numpy as np
import pytest

from xckit.attribution import aggregate_signed
from xckit.autodiff import Tensor, forward
from xckit.errors import PlacementFailure, XckitError
from xckit.geometry import enlarge, iou_3d, membership_mask, project_to_bev
from xckit.matching import DEFAULT_IOU_THRESH, MatchConfig, TP, FP, categorize
from xckit.synth import (
    BENCHMARK_A_THRESH,
    BLOCK_PX,
    CLASSES,
    ConcentrationProfile,
    SceneSpec,
    SyntheticFrame,
    _points_sigma,
    build_toy_model,
    frame_attributions,
    generate_benchmark,
    generate_frame,
    noisy_and_feature_rows,
    n_anchors,
    output_index,
)
from xckit.xc import XcConfig, xc_scores


def planted_kinds(frame):
    """(label, is_fp) per prediction, from the generator's IoU guarantees."""
    kinds = []
    for pred in frame.preds:
        thresh = DEFAULT_IOU_THRESH[pred.label]
        is_tp = any(
            g.label == pred.label and iou_3d(pred.box, g.box) >= thresh
            for g in frame.gts
        )
        kinds.append((pred.label, not is_tp))
    return kinds


class TestSceneSpecValidation:
    def test_bad_fp_rate(self):
        with pytest.raises(XckitError):
            SceneSpec(fp_rate=1.5)

    def test_negative_count(self):
        with pytest.raises(XckitError):
            SceneSpec(n_objects={"car": -1})

    def test_bad_profile_fraction(self):
        with pytest.raises(XckitError):
            ConcentrationProfile(tp_inside=1.2)

    def test_grid_not_block_aligned(self):
        from xckit.geometry import GridMeta

        with pytest.raises(XckitError):
            SceneSpec(grid=GridMeta(height=35, width=40, origin_x=0, origin_y=0, pixel_size=0.4))


class TestGenerateFrame:
    def test_empty_spec_empty_frame(self):
        spec = SceneSpec(n_objects={}, fp_rate=0.0, rng_seed=3)
        frame = generate_frame(spec)
        assert frame.preds == [] and frame.gts == []
        assert not frame.pseudo_image.any()

    def test_same_seed_bit_identical(self):
        a = generate_frame(SceneSpec(rng_seed=11))
        b = generate_frame(SceneSpec(rng_seed=11))
        assert np.array_equal(a.pseudo_image, b.pseudo_image)
        assert [p.box for p in a.preds] == [p.box for p in b.preds]
        assert [p.scores for p in a.preds] == [p.scores for p in b.preds]
        assert [p.n_points for p in a.preds] == [p.n_points for p in b.preds]
        assert [g.box for g in a.gts] == [g.box for g in b.gts]

    def test_different_seed_differs(self):
        a = generate_frame(SceneSpec(rng_seed=11))
        b = generate_frame(SceneSpec(rng_seed=12))
        assert not np.array_equal(a.pseudo_image, b.pseudo_image)

    def test_scores_reproduce_under_forward(self):
        for seed in (0, 5, 9):
            frame = generate_frame(SceneSpec(rng_seed=seed))
            out = forward(frame.model, Tensor(frame.pseudo_image)).data
            for pred in frame.preds:
                for cls, stored in pred.scores.items():
                    idx = output_index(pred.anchor_index, cls)
                    assert abs(stored - float(out[idx])) < 1e-6

    def test_planted_iou_guarantees(self):
        # every pred is either a TP (>= thresh vs a same-label gt) or clears
        # every gt below its class threshold; nothing in between
        for seed in range(8):
            frame = generate_frame(SceneSpec(rng_seed=seed))
            for pred, (_, is_fp) in zip(frame.preds, planted_kinds(frame)):
                thresh = DEFAULT_IOU_THRESH[pred.label]
                if is_fp:
                    assert all(iou_3d(pred.box, g.box) < thresh for g in frame.gts)
                else:
                    assert any(
                        g.label == pred.label and iou_3d(pred.box, g.box) >= thresh
                        for g in frame.gts
                    )

    def test_matcher_agrees_with_planting(self):
        # the categorizer must tag every planted pred, none ignored
        for seed in range(6):
            frame = generate_frame(SceneSpec(rng_seed=seed))
            outcome = categorize(frame.preds, frame.gts, MatchConfig())
            for tag, (_, is_fp) in zip(outcome.tags, planted_kinds(frame)):
                assert tag == (FP if is_fp else TP)

    def test_distinct_anchor_blocks(self):
        for seed in range(6):
            frame = generate_frame(SceneSpec(rng_seed=seed))
            anchors = [p.anchor_index for p in frame.preds]
            assert len(set(anchors)) == len(anchors)
            assert all(0 <= a < n_anchors(SceneSpec().grid) for a in anchors)

    def test_scores_clear_ignore_threshold(self):
        for seed in range(6):
            frame = generate_frame(SceneSpec(rng_seed=seed))
            for pred in frame.preds:
                assert pred.scores[pred.label] >= 0.3

    def test_signal_respects_box_footprints(self):
        # planted pixels either sit inside some prediction's box or outside
        # every box's margin-enlarged footprint; never in the gray zone
        spec = SceneSpec(rng_seed=4)
        frame = generate_frame(spec)
        inside_any = np.zeros(frame.pseudo_image.shape[:2], dtype=bool)
        near_any = np.zeros_like(inside_any)
        boxes = [p.box for p in frame.preds] + [g.box for g in frame.gts]
        for box in boxes:
            inside_any |= membership_mask(project_to_bev(box), spec.grid)
            near_any |= membership_mask(project_to_bev(enlarge(box, 0.2)), spec.grid)
        planted = frame.pseudo_image[:, :, :3].sum(axis=2) > 0
        gray = planted & near_any & ~inside_any
        assert not gray.any()

    def test_too_many_objects_fails(self):
        spec = SceneSpec(n_objects={"car": n_anchors(SceneSpec().grid) + 1}, fp_rate=0.0)
        with pytest.raises(PlacementFailure):
            generate_frame(spec)

    def test_inhibition_channel_planted_with_signal(self):
        frame = generate_frame(SceneSpec(rng_seed=2))
        planted = frame.pseudo_image[:, :, :3].sum(axis=2) > 0
        assert (frame.pseudo_image[:, :, 3][planted] > 0).all()
        assert not frame.pseudo_image[:, :, 3][~planted].any()


class TestToyModel:
    def test_deterministic_build(self):
        grid = SceneSpec().grid
        a, b = build_toy_model(grid), build_toy_model(grid)
        for (na, pa), (nb, pb) in zip(
            sorted(a.parameters().items()), sorted(b.parameters().items())
        ):
            assert na == nb and np.array_equal(pa, pb)

    def test_output_count(self):
        grid = SceneSpec().grid
        model = build_toy_model(grid)
        y = forward(model, Tensor(np.zeros((grid.height, grid.width, 4), np.float32)))
        assert y.shape == (n_anchors(grid) * len(CLASSES),)

    def test_blank_image_low_scores(self):
        grid = SceneSpec().grid
        model = build_toy_model(grid)
        y = forward(model, Tensor(np.zeros((grid.height, grid.width, 4), np.float32))).data
        assert (y < 0.5).all()


class TestAttributionConcentration:
    def test_attribution_methods_and_shapes(self):
        frame = generate_frame(SceneSpec(rng_seed=1))
        for method in ("backprop", "ig", "ig-nomult"):
            maps = frame_attributions(frame, method=method, steps=8)
            assert len(maps) == len(frame.preds)
            for m, p in zip(maps, frame.preds):
                assert m.values.shape == frame.pseudo_image.shape
                assert m.values.dtype == np.float64
                assert m.target.class_index == CLASSES.index(p.label)

    def test_unknown_method(self):
        frame = generate_frame(SceneSpec(rng_seed=1))
        with pytest.raises(XckitError):
            frame_attributions(frame, method="occlusion")

    def test_gradients_vanish_off_signal(self):
        # the relu gate closes wherever nothing was planted, so attributions
        # there come only from sub-gate conv bleed: all below the threshold
        spec = SceneSpec(rng_seed=6)
        frame = generate_frame(spec)
        planted = frame.pseudo_image.sum(axis=2) > 0
        for m in frame_attributions(frame):
            pos, neg = aggregate_signed(m)
            assert pos[~planted].max() < BENCHMARK_A_THRESH
            assert neg[~planted].max() < BENCHMARK_A_THRESH

    def test_concentration_gap_over_50_frames(self):
        # TP-like preds plant 90% of their budget inside the box, FP-like 30%;
        # the counting score gap must come out well past 0.2
        spec = SceneSpec(rng_seed=7)
        frames, _ = generate_benchmark(spec, 50)
        cfg = XcConfig(a_thresh=BENCHMARK_A_THRESH, margin_m=0.2)
        tp_vals, fp_vals = [], []
        for frame in frames:
            maps = frame_attributions(frame)
            for m, p, (_, is_fp) in zip(maps, frame.preds, planted_kinds(frame)):
                sc = xc_scores(m, p.box, spec.grid, cfg)
                assert sc.xc_c_plus is not None
                (fp_vals if is_fp else tp_vals).append(sc.xc_c_plus)
        assert tp_vals and fp_vals
        gap = np.mean(tp_vals) - np.mean(fp_vals)
        assert gap >= 0.2
        # calibrated margin, frozen after measuring ~0.61 at this seed
        assert gap > 0.5


class TestGenerateBenchmark:
    def test_single_frame_manifest_matches_contents(self):
        spec = SceneSpec(rng_seed=21)
        frames, manifest = generate_benchmark(spec, 1)
        assert manifest["n_frames"] == 1
        kinds = planted_kinds(frames[0])
        for cls in CLASSES:
            assert manifest["tp_counts"][cls] == sum(
                1 for (lab, fp) in kinds if lab == cls and not fp
            )
            assert manifest["fp_counts"][cls] == sum(
                1 for (lab, fp) in kinds if lab == cls and fp
            )

    def test_fp_fraction_near_rate(self):
        spec = SceneSpec(rng_seed=99, fp_rate=0.25)
        frames, manifest = generate_benchmark(spec, 100)
        assert abs(manifest["fp_fraction"] - 0.25) <= 0.05

    def test_class_totals_sum_over_frames(self):
        spec = SceneSpec(rng_seed=5)
        frames, manifest = generate_benchmark(spec, 20)
        per_frame = [planted_kinds(f) for f in frames]
        for cls in CLASSES:
            tp = sum(1 for kinds in per_frame for (lab, fp) in kinds if lab == cls and not fp)
            fp = sum(1 for kinds in per_frame for (lab, fp) in kinds if lab == cls and fp)
            assert manifest["tp_counts"][cls] == tp
            assert manifest["fp_counts"][cls] == fp
        total = sum(len(f.preds) for f in frames)
        assert sum(manifest["tp_counts"].values()) + sum(manifest["fp_counts"].values()) == total

    def test_benchmark_deterministic_and_shares_model(self):
        a, _ = generate_benchmark(SceneSpec(rng_seed=8), 5)
        b, _ = generate_benchmark(SceneSpec(rng_seed=8), 5)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.pseudo_image, fb.pseudo_image)
        assert all(f.model is a[0].model for f in a)

    def test_bad_frame_count(self):
        with pytest.raises(XckitError):
            generate_benchmark(SceneSpec(), 0)


class TestPointsPlanting:
    def test_sigma_solves_point_biserial_identity(self):
        spec = SceneSpec(fp_rate=0.25, points_correlation=0.4, points_delta=100)
        sigma = _points_sigma(spec)
        p, q, d = 0.75, 0.25, 100.0
        rho = d * np.sqrt(p * q) / np.sqrt(d * d * p * q + sigma * sigma)
        assert abs(rho - 0.4) < 1e-12

    def test_empirical_correlation_near_target(self):
        frames, _ = generate_benchmark(SceneSpec(rng_seed=12345), 150)
        pts, lab = [], []
        for f in frames:
            for p, (_, is_fp) in zip(f.preds, planted_kinds(f)):
                pts.append(p.n_points)
                lab.append(0.0 if is_fp else 1.0)
        r = np.corrcoef(np.asarray(pts, float), np.asarray(lab))[0, 1]
        assert 0.25 < r < 0.55

    def test_points_positive(self):
        frame = generate_frame(SceneSpec(rng_seed=13))
        assert all(p.n_points >= 1 for p in frame.preds)


class TestNoisyAndDataset:
    def test_shape_and_determinism(self):
        a = noisy_and_feature_rows(200, rng_seed=1)
        b = noisy_and_feature_rows(200, rng_seed=1)
        assert len(a) == 200
        assert all(
            x.top_score == y.top_score and x.is_tp == y.is_tp for x, y in zip(a, b)
        )

    def test_feature_ranges(self):
        rows = noisy_and_feature_rows(500, rng_seed=2)
        for r in rows:
            for v in (r.top_score, r.xc_s_plus, r.xc_c_plus, r.xc_s_minus, r.xc_c_minus):
                assert 0.0 <= v <= 1.0
            assert r.pred_label in CLASSES

    def test_label_balance_reasonable(self):
        rows = noisy_and_feature_rows(2000, rng_seed=3)
        rate = np.mean([r.is_tp for r in rows])
        # AND of two ~55% events with 8% flips: around 0.3
        assert 0.2 < rate < 0.45

    def test_no_single_factor_separates(self):
        # top_score tracks one latent factor, concentration the other; each
        # alone must leave real class overlap while together they separate
        rows = noisy_and_feature_rows(2000, rng_seed=4)
        tp = [r for r in rows if r.is_tp]
        fp = [r for r in rows if not r.is_tp]
        for feat in ("top_score", "xc_c_plus"):
            lo = np.percentile([getattr(r, feat) for r in tp], 10)
            hi = np.percentile([getattr(r, feat) for r in fp], 90)
            assert hi > lo  # heavy overlap for every single column
        both_tp = np.mean([min(r.top_score, r.xc_c_plus) for r in tp])
        both_fp = np.mean([min(r.top_score, r.xc_c_plus) for r in fp])
        assert both_tp - both_fp > 0.25
