import json
import pathlib

import numpy as np
import pytest

import patchgraph.autodiff as ad
from patchgraph.matching import ModelConfig, init_model, match_score
from patchgraph.placerec import (
    PartialAssignment,
    ScoreMatrix,
    frame_match_score,
    place_recognition_eval,
    same_place_label,
    score_matrix,
    sinkhorn_assign,
    tune_threshold,
)
from patchgraph.scene import Frame, Patch, standard_camera

GOLDEN = pathlib.Path(__file__).parent / "golden" / "placerec_case.json"


def make_frame(fid, count, position, rng):
    patches = [Patch("%s/p%03d" % (fid, i), fid,
                     (0.0, 0.0, 8.0, 8.0),
                     rng.integers(0, 256, size=(8, 8), dtype=np.uint8),
                     loc3d=np.array([2.0 * i, 0.0, 10.0]))
               for i in range(count)]
    cam = standard_camera(position=position)
    return Frame(fid, cam, np.asarray(position, dtype=np.float64), patches)


class TestScoreMatrix:
    def test_single_pair_equals_match_score(self):
        rng = np.random.default_rng(0)
        model = init_model(ModelConfig(n=4, k=2), seed=0)
        fa = make_frame("f0", 1, (0, 0, 0), rng)
        fb = make_frame("f1", 1, (1, 0, 0), rng)
        s = score_matrix(fa, fb, model)
        r = match_score(fa.patches[0], fa, fb.patches[0], fb, model)
        assert s.scores.shape == (1, 1)
        assert s.scores[0, 0] == r.score

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(1)
        model = init_model(ModelConfig(n=4, k=2), seed=1)
        fa = make_frame("f0", 3, (0, 0, 0), rng)
        fb = make_frame("f1", 2, (1, 0, 0), rng)
        ab = score_matrix(fa, fb, model).scores
        ba = score_matrix(fb, fa, model).scores
        np.testing.assert_array_equal(ab, ba.T)

    def test_empty_frame_rejected(self):
        rng = np.random.default_rng(2)
        model = init_model(ModelConfig(n=4, k=2), seed=2)
        fa = make_frame("f0", 2, (0, 0, 0), rng)
        empty = Frame("f1", standard_camera(position=(0, 0, 0)),
                      np.zeros(3), [])
        with pytest.raises(ValueError):
            score_matrix(fa, empty, model)

    def test_validation(self):
        with pytest.raises(ValueError):
            ScoreMatrix(np.array([[0.2, 1.4]]))
        with pytest.raises(ValueError):
            ScoreMatrix(np.array([[np.nan]]))
        with pytest.raises(ValueError):
            ScoreMatrix(np.full((2, 2), 0.5), dustbin=np.inf)

    def test_golden_case(self):
        golden = json.loads(GOLDEN.read_text())
        rng = np.random.default_rng(20260501)
        model = init_model(ModelConfig(n=8, k=2), seed=271)
        fa = make_frame("f0", 3, (0, 0, 0), rng)
        fb = make_frame("f1", 4, (3, 0, 0), rng)
        s = score_matrix(fa, fb, model)
        np.testing.assert_allclose(s.scores, np.asarray(golden["scores"]),
                                   atol=1e-12)
        plan = sinkhorn_assign(s)
        result = frame_match_score(s, plan)
        assert abs(result.score - golden["frame_score"]) < 1e-12


class TestSinkhorn:
    def test_uniform_scores_give_uniform_interior(self):
        # permutation symmetry: every interior entry must be identical,
        # and with a very low dustbin score nearly all row mass stays in
        # the interior block
        s = ScoreMatrix(np.full((4, 4), 0.7), dustbin=-50.0)
        plan = sinkhorn_assign(s).interior
        assert plan.max() - plan.min() < 1e-9
        assert plan.min() > 0.24
        np.testing.assert_allclose(plan.sum(axis=1), np.full(4, plan.sum(axis=1)[0]),
                                   atol=1e-9)

    def test_diagonal_scores_recover_identity(self):
        s = ScoreMatrix(np.eye(5), dustbin=-5.0)
        interior = sinkhorn_assign(s).interior
        assert np.all(np.diag(interior) > 0.95)
        off = interior - np.diag(np.diag(interior))
        assert np.all(off < 0.05)

    @pytest.mark.parametrize("seed,shape", [(0, (5, 5)), (1, (3, 7)),
                                            (2, (8, 2)), (3, (1, 4))])
    def test_residuals_small_after_default_iterations(self, seed, shape):
        rng = np.random.default_rng(seed)
        s = ScoreMatrix(rng.uniform(0.0, 1.0, size=shape))
        plan = sinkhorn_assign(s)
        assert plan.row_residual < 1e-6
        assert plan.col_residual < 1e-6
        a, b = shape
        np.testing.assert_allclose(plan.plan[:a].sum(axis=1), np.ones(a),
                                   atol=1e-6)
        np.testing.assert_allclose(plan.plan[:, :b].sum(axis=0), np.ones(b),
                                   atol=1e-6)

    def test_planted_permutation_recovered(self):
        rng = np.random.default_rng(4)
        hits = 0
        for _ in range(20):
            perm = rng.permutation(10)
            s = 0.05 + 0.02 * rng.uniform(size=(10, 10))
            s[np.arange(10), perm] = 0.9 + 0.05 * rng.uniform(size=10)
            plan = sinkhorn_assign(ScoreMatrix(s)).interior
            hits += int(np.array_equal(plan.argmax(axis=1), perm))
        assert hits == 20

    def test_parameter_validation(self):
        s = ScoreMatrix(np.full((2, 2), 0.5))
        with pytest.raises(ValueError):
            sinkhorn_assign(s, iterations=0)
        with pytest.raises(ValueError):
            sinkhorn_assign(s, tau=0.0)


class TestFrameScore:
    def test_identity_assignment_of_perfect_scores(self):
        s = ScoreMatrix(np.eye(3))
        plan = np.zeros((4, 4))
        plan[:3, :3] = np.eye(3)
        result = frame_match_score(s, PartialAssignment(plan, 0.0, 0.0))
        assert result.score == 1.0
        assert result.decision == 1

    def test_all_dustbin_scores_zero(self):
        s = ScoreMatrix(np.full((2, 3), 0.9))
        plan = np.zeros((3, 4))
        plan[:2, 3] = 1.0
        plan[2, :3] = 1.0
        result = frame_match_score(s, PartialAssignment(plan, 0.0, 0.0))
        assert result.score == 0.0
        assert result.decision == 0

    def test_monotone_in_scores(self):
        rng = np.random.default_rng(5)
        scores = rng.uniform(0.0, 0.9, size=(3, 4))
        s = ScoreMatrix(scores)
        plan = sinkhorn_assign(s)
        base = frame_match_score(s, plan).score
        for i in range(3):
            for j in range(4):
                bumped = scores.copy()
                bumped[i, j] = min(1.0, bumped[i, j] + 0.05)
                assert frame_match_score(ScoreMatrix(bumped),
                                         plan).score >= base

    def test_shape_mismatch_rejected(self):
        s = ScoreMatrix(np.full((2, 2), 0.5))
        plan = PartialAssignment(np.zeros((4, 4)), 0.0, 0.0)
        with pytest.raises(ValueError):
            frame_match_score(s, plan)


class TestPlaceLabels:
    def test_nearby_frames_same_place(self):
        rng = np.random.default_rng(6)
        fa = make_frame("f0", 1, (0.0, 0.0, 0.0), rng)
        fb = make_frame("f1", 1, (5.0, 0.0, 0.0), rng)
        assert same_place_label(fa, fb) == 1

    def test_distant_frames_different_place(self):
        rng = np.random.default_rng(7)
        fa = make_frame("f0", 1, (0.0, 0.0, 0.0), rng)
        fb = make_frame("f1", 1, (50.0, 0.0, 0.0), rng)
        assert same_place_label(fa, fb) == 0

    def test_boundary_is_strict(self):
        rng = np.random.default_rng(8)
        fa = make_frame("f0", 1, (0.0, 0.0, 0.0), rng)
        fb = make_frame("f1", 1, (10.0, 0.0, 0.0), rng)
        assert same_place_label(fa, fb) == 0

    def test_missing_position_rejected(self):
        rng = np.random.default_rng(9)
        fa = make_frame("f0", 1, (0.0, 0.0, 0.0), rng)
        fb = make_frame("f1", 1, (np.nan, 0.0, 0.0), rng)
        with pytest.raises(ValueError):
            same_place_label(fa, fb)


class TestThresholdTuning:
    def test_perfect_separation(self):
        t = tune_threshold([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        decisions = [int(s > t) for s in [0.9, 0.8, 0.2, 0.1]]
        assert decisions == [1, 1, 0, 0]

    def test_prefers_higher_recall_on_ties(self):
        # t=0 (tp=2, fp=2) and t=0.5 (tp=1, fp=1) both give F1=2/3;
        # the lower threshold — the higher-recall operating point — wins
        t = tune_threshold([0.8, 0.8, 0.5, 0.5], [1, 0, 1, 0])
        assert t == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            tune_threshold([], [])


class PlaceScorer:
    """Stub patch scorer driven by frame-position proximity."""

    def __init__(self, high=0.9, low=0.1):
        self.high, self.low = high, low

    def score_pair(self, px, fx, py, fy, cache=None):
        d = np.linalg.norm(fx.position - fy.position)
        s = ad.constant(self.high if d < 10.0 else self.low)
        return s, s

    def trainable(self):
        return []


class TestPlaceRecognitionEval:
    def _pairs(self, rng):
        pairs = []
        for i in range(4):
            base = 100.0 * i
            fa = make_frame("a%d" % i, 3, (base, 0.0, 0.0), rng)
            fb = make_frame("b%d" % i, 3, (base + 4.0, 0.0, 0.0), rng)
            fc = make_frame("c%d" % i, 3, (base + 40.0, 0.0, 0.0), rng)
            pairs.append((fa, fb))   # same place
            pairs.append((fa, fc))   # different place
        return pairs

    def test_perfect_scorer_perfect_metrics(self):
        rng = np.random.default_rng(10)
        model = init_model(ModelConfig(n=4, k=2), seed=3)
        report = place_recognition_eval(self._pairs(rng), model,
                                        scorer=PlaceScorer(), seed=1)
        assert report.f1 == 1.0
        assert report.accuracy == 1.0
        assert len(report.rows) == 4  # half held out for tuning

    def test_explicit_threshold_skips_tuning(self):
        rng = np.random.default_rng(11)
        model = init_model(ModelConfig(n=4, k=2), seed=4)
        report = place_recognition_eval(self._pairs(rng), model,
                                        scorer=PlaceScorer(),
                                        threshold=0.5)
        assert len(report.rows) == 8
        assert report.threshold == 0.5

    def test_empty_rejected(self):
        model = init_model(ModelConfig(n=4, k=2), seed=5)
        with pytest.raises(ValueError):
            place_recognition_eval([], model)
