import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import best_constant_and_global, box, brute_force_step_choices, det, gt, naive_evaluate
from segfuse.ap_eval import evaluate
from segfuse.fusion import FusionTrace, PseudoGroundTruth, filter_controller, fuse, fuse_trace_verify
from segfuse.synth import NoiseProfile, gen_dataset, perturb_predictions


def synthetic_inputs(seed, n_images, n_models, tau=0.5):
    ds, _ = gen_dataset(seed, n_images, 3, render=False)
    controller = perturb_predictions(ds, NoiseProfile(0.03, 0.05, 0.3, None, 0.9, 0.3, 0.1), seed + 1000)
    rng = np.random.default_rng(seed)
    models = []
    for k in range(n_models):
        profile = NoiseProfile(
            box_jitter_sigma=float(rng.uniform(0.0, 0.2)),
            drop_rate=float(rng.uniform(0.0, 0.4)),
            fp_rate=float(rng.uniform(0.0, 1.5)),
            score_mean_tp=float(rng.uniform(0.5, 0.9)),
            score_mean_fp=float(rng.uniform(0.2, 0.6)),
            score_sigma=0.15,
        )
        models.append(perturb_predictions(ds, profile, seed * 31 + k))
    return ds, models, filter_controller(controller, tau)


def disjoint_strengths(n_images):
    """Model A is exact on odd-indexed images, model B on even-indexed ones."""
    pseudo, a, b = {}, {}, {}
    for i in range(1, n_images + 1):
        g = [gt(i, 1 + i % 2, box(10, 10, 20, 20)), gt(i, 1, box(40, 5, 10, 30))]
        pseudo[i] = g
        exact = [det(i, x.category_id, x.bbox, 0.9 - 0.1 * n) for n, x in enumerate(g)]
        wrong = [det(i, x.category_id, box(x.bbox.x + 100, x.bbox.y, x.bbox.w, x.bbox.h), 0.9) for x in g]
        a[i], b[i] = (exact, wrong) if i % 2 else (wrong, exact)
    return [a, b], PseudoGroundTruth(pseudo, 0.5)


class TestFilterController:
    def _dets(self):
        return {1: [det(1, 1, box(0, 0, 1, 1), s) for s in (0.9, 0.4, 0.2)], 2: []}

    def test_threshold(self):
        p = filter_controller(self._dets(), 0.5)
        assert len(p.boxes[1]) == 1 and p.boxes[2] == []
        assert p.boxes[1][0].score is None

    def test_zero_keeps_all(self):
        assert len(filter_controller(self._dets(), 0.0).boxes[1]) == 3

    def test_one_keeps_none(self):
        p = filter_controller(self._dets(), 1.0)
        assert p.boxes == {1: [], 2: []}

    def test_tau_range(self):
        with pytest.raises(ValueError):
            filter_controller({}, 1.5)


class TestFuse:
    def test_single_model_verbatim(self):
        _, models, pseudo = synthetic_inputs(0, 6, 1)
        fused, trace = fuse(models, pseudo)
        assert fused == models[0]
        assert trace.chosen_model == [0] * 6
        assert trace.ap_evaluations == 6

    def test_exact_model_beats_disjoint_one(self):
        pseudo = {i: [gt(i, 1, box(5 * i, 0, 10, 10))] for i in range(1, 5)}
        exact = {i: [det(i, 1, g[0].bbox, 0.8)] for i, g in pseudo.items()}
        far = {i: [det(i, 1, box(200, 200, 10, 10), 0.8)] for i in pseudo}
        fused, trace = fuse([far, exact], PseudoGroundTruth(pseudo, 0.5))
        assert trace.chosen_model == [1, 1, 1, 1]
        assert trace.prefix_ap[-1] == 1.0
        # per-step comparison by the independent evaluator
        for step in range(1, 5):
            prefix = {i: pseudo[i] for i in range(1, step + 1)}
            ap_exact = naive_evaluate(prefix, {i: exact[i] for i in prefix})[0]
            ap_far = naive_evaluate(prefix, {**{i: exact[i] for i in range(1, step)}, step: far[step]})[0]
            assert ap_exact == 1.0 and ap_far < 1.0

    def test_two_images_two_models_brute_force(self):
        models, pseudo = disjoint_strengths(2)
        fused, trace = fuse(models, pseudo)
        assert trace.chosen_model == [0, 1]
        assert trace.prefix_ap[-1] == 1.0
        table = best_constant_and_global(models, pseudo.boxes, lambda g, d: naive_evaluate(g, d)[0])
        assert table[(0, 1)] == 1.0
        assert table[(0, 0)] < 1.0 and table[(1, 1)] < 1.0
        assert max(table.values()) == table[(0, 1)]

    def test_alternation(self):
        models, pseudo = disjoint_strengths(7)
        _, trace = fuse(models, pseudo)
        assert trace.chosen_model == [0, 1, 0, 1, 0, 1, 0]

    def test_mask_passthrough(self):
        ds, models, pseudo = synthetic_inputs(4, 8, 3)
        fused, trace = fuse(models, pseudo)
        for i, k in zip(trace.image_order, trace.chosen_model):
            assert [d.mask for d in fused[i]] == [d.mask for d in models[k][i]]

    def test_deterministic_and_thread_invariant(self):
        _, models, pseudo = synthetic_inputs(5, 10, 4)
        first = fuse(models, pseudo)
        again = fuse(models, pseudo)
        threaded = fuse(models, pseudo, workers=4)
        assert first == again == threaded

    def test_image_order_ascending(self):
        models, pseudo = disjoint_strengths(4)
        pseudo = PseudoGroundTruth(dict(reversed(list(pseudo.boxes.items()))), 0.5)
        _, trace = fuse(models, pseudo)
        assert trace.image_order == [1, 2, 3, 4]

    def test_prefix_ap_matches_batch(self):
        _, models, pseudo = synthetic_inputs(6, 8, 3)
        fused, trace = fuse(models, pseudo)
        for step, image_id in enumerate(trace.image_order):
            prefix = {i: pseudo.boxes[i] for i in trace.image_order[: step + 1]}
            expected = evaluate(prefix, {i: fused[i] for i in prefix}).ap
            got = trace.prefix_ap[step]
            assert (got is None and expected is None) or abs(got - expected) <= 1e-12

    def test_class_agnostic_toggle(self):
        pseudo = PseudoGroundTruth({1: [gt(1, 1, box(0, 0, 10, 10))]}, 0.5)
        relabelled = {1: [det(1, 2, box(0, 0, 10, 10), 0.9)]}
        loose = {1: [det(1, 1, box(0, 0, 10, 6), 0.9)]}
        assert fuse([relabelled, loose], pseudo)[1].chosen_model == [1]
        assert fuse([relabelled, loose], pseudo, class_agnostic=True)[1].chosen_model == [0]

    def test_no_models(self):
        with pytest.raises(ValueError, match="at least one model"):
            fuse([], PseudoGroundTruth({1: []}, 0.5))

    def test_missing_image(self):
        with pytest.raises(ValueError, match="no prediction list"):
            fuse([{1: []}], PseudoGroundTruth({1: [], 2: []}, 0.5))

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_score(self, bad):
        with pytest.raises(ValueError, match="non-finite"):
            fuse([{1: [det(1, 1, box(0, 0, 1, 1), bad)]}], PseudoGroundTruth({1: []}, 0.5))


class TestVerify:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_traces_verify(self, seed):
        _, models, pseudo = synthetic_inputs(seed, 10, 3)
        _, trace = fuse(models, pseudo)
        report = fuse_trace_verify(models, pseudo, trace)
        assert report.ok, report.violations
        assert report.checked_steps == 10

    def test_corrupted_trace_detected(self):
        models, pseudo = disjoint_strengths(4)
        _, trace = fuse(models, pseudo)
        bad = replace(trace, chosen_model=[1 - k for k in trace.chosen_model])
        assert not fuse_trace_verify(models, pseudo, bad).ok

    def test_wrong_evaluation_count_detected(self):
        models, pseudo = disjoint_strengths(2)
        _, trace = fuse(models, pseudo)
        assert not fuse_trace_verify(models, pseudo, replace(trace, ap_evaluations=3)).ok

    def test_all_empty(self):
        pseudo = PseudoGroundTruth({i: [] for i in range(1, 4)}, 0.5)
        models = [{i: [] for i in range(1, 4)} for _ in range(3)]
        fused, trace = fuse(models, pseudo)
        assert trace.chosen_model == [0, 0, 0]
        assert trace.prefix_ap == [None, None, None]
        assert fuse_trace_verify(models, pseudo, trace).ok

    def test_small_cases_match_brute_force(self):
        for seed in range(10):
            _, models, pseudo = synthetic_inputs(seed, 3, 3)
            _, trace = fuse(models, pseudo)
            expected = brute_force_step_choices(
                models, pseudo.boxes, lambda g, d: naive_evaluate(g, d)[0]
            )
            assert trace.chosen_model == expected


def test_trace_to_dict():
    t = FusionTrace([1, 2], [0, 1], [1.0, None], 4)
    assert t.to_dict() == {"image_order": [1, 2], "chosen_model": [0, 1], "prefix_ap": [1.0, None],
                           "ap_evaluations": 4}
