"""Frame-level place recognition from patch match scores.

Pipeline: score every cross-frame patch pair with the trained matcher,
solve a partial assignment over the score matrix (log-domain Sinkhorn with
a dustbin row/column for unmatched patches), and aggregate the assigned
scores into one frame similarity in [0, 1].  Two frames count as the same
place when their camera positions are less than 10 meters apart.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .matching import FlagshipScorer
from .seeds import rng_for

SAME_PLACE_RADIUS_M = 10.0
DUSTBIN_DEFAULT = 0.2
SINKHORN_TAU = 0.1
SINKHORN_ITERS = 100


@dataclass
class ScoreMatrix:
    scores: np.ndarray          # (A, B), entries in [0, 1]
    dustbin: float = DUSTBIN_DEFAULT

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or min(self.scores.shape) < 1:
            raise ValueError("score matrix must be 2-d and nonempty")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("score matrix has non-finite entries")
        if np.any(self.scores < 0.0) or np.any(self.scores > 1.0):
            raise ValueError("match scores must lie in [0, 1]")
        if not math.isfinite(self.dustbin):
            raise ValueError("dustbin score must be finite")


@dataclass
class PartialAssignment:
    plan: np.ndarray            # (A+1, B+1), dustbin-augmented
    row_residual: float
    col_residual: float

    @property
    def interior(self):
        return self.plan[:-1, :-1]


def score_matrix(frame_a, frame_b, model, scorer=None, dustbin=DUSTBIN_DEFAULT):
    """S[i][j] = symmetric match score between patch i of frame A and
    patch j of frame B; embeddings are computed once per patch."""
    if not frame_a.patches or not frame_b.patches:
        raise ValueError("both frames need at least one patch")
    scorer = FlagshipScorer(model) if scorer is None else scorer
    cache = {}
    out = np.zeros((len(frame_a.patches), len(frame_b.patches)))
    with ad.no_grad():
        for i, pa in enumerate(frame_a.patches):
            for j, pb in enumerate(frame_b.patches):
                d1, d2 = scorer.score_pair(pa, frame_a, pb, frame_b, cache)
                out[i, j] = 0.5 * (float(d1.data) + float(d2.data))
    return ScoreMatrix(out, dustbin=dustbin)


def sinkhorn_assign(score, iterations=SINKHORN_ITERS, tau=SINKHORN_TAU):
    """Log-domain Sinkhorn over the dustbin-augmented score matrix.

    Marginals follow the partial-assignment convention: every real patch
    carries unit mass, and each dustbin can absorb the entire other side
    (row marginals [1..1, B], column marginals [1..1, A]).
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if tau <= 0.0:
        raise ValueError("temperature must be positive")
    a, b = score.scores.shape
    cost = np.full((a + 1, b + 1), score.dustbin)
    cost[:a, :b] = score.scores
    log_k = cost / tau
    log_mu = np.concatenate([np.zeros(a), [math.log(b)]])
    log_nu = np.concatenate([np.zeros(b), [math.log(a)]])
    u = np.zeros(a + 1)
    v = np.zeros(b + 1)
    for _ in range(iterations):
        u = log_mu - _lse(log_k + v[None, :], axis=1)
        v = log_nu - _lse(log_k + u[:, None], axis=0)
    plan = np.exp(log_k + u[:, None] + v[None, :])
    row_res = float(np.max(np.abs(plan[:a].sum(axis=1) - 1.0)))
    col_res = float(np.max(np.abs(plan[:, :b].sum(axis=0) - 1.0)))
    return PartialAssignment(plan, row_res, col_res)


def _lse(m, axis):
    shift = np.max(m, axis=axis, keepdims=True)
    return (shift + np.log(np.sum(np.exp(m - shift), axis=axis,
                                  keepdims=True))).squeeze(axis)


@dataclass
class FrameMatchResult:
    score: float
    decision: int
    threshold: float


def frame_match_score(score, assignment, threshold=0.5):
    """Assignment-weighted mean score: sum(S * P_interior) / min(A, B),
    with the strict-threshold same-place decision."""
    interior = assignment.interior
    if interior.shape != score.scores.shape:
        raise ValueError("assignment shape %r does not match scores %r"
                         % (interior.shape, score.scores.shape))
    value = float(np.sum(score.scores * interior) / min(score.scores.shape))
    return FrameMatchResult(score=value, decision=int(value > threshold),
                            threshold=threshold)


def same_place_label(frame_a, frame_b, radius=SAME_PLACE_RADIUS_M):
    for f in (frame_a, frame_b):
        if f.position is None or not np.all(np.isfinite(f.position)):
            raise ValueError("frame %s has no finite global position"
                             % f.frame_id)
    return int(np.linalg.norm(frame_a.position - frame_b.position) < radius)


def tune_threshold(scores, labels):
    """Pick the frame threshold maximizing F1; among near-ties (within
    1e-9) prefer the lowest threshold, i.e. the higher-recall operating
    point."""
    if len(scores) == 0:
        raise ValueError("no validation pairs to tune on")
    best_f1, best_t = -1.0, 0.5
    candidates = sorted({0.0, *scores})
    for t in candidates:
        decisions = [int(s > t) for s in scores]
        tp = sum(1 for d, y in zip(decisions, labels) if d and y)
        fp = sum(1 for d, y in zip(decisions, labels) if d and not y)
        fn = sum(1 for d, y in zip(decisions, labels) if not d and y)
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        if f1 > best_f1 + 1e-9 or (abs(f1 - best_f1) <= 1e-9 and t < best_t):
            best_f1, best_t = f1, t
    return best_t


@dataclass
class PlaceRecognitionReport:
    f1: float
    accuracy: float
    threshold: float
    rows: list = field(default_factory=list)  # (fa, fb, score, decision, label)


def place_recognition_eval(frame_pairs, model, threshold=None,
                           val_fraction=0.5, seed=0, scorer=None,
                           dustbin=DUSTBIN_DEFAULT, tau=SINKHORN_TAU,
                           iterations=SINKHORN_ITERS):
    """Score frame pairs, tune the threshold on a validation split when
    none is given, and report F1/accuracy on the remaining pairs."""
    if not frame_pairs:
        raise ValueError("no frame pairs to evaluate")
    scored = []
    for fa, fb in frame_pairs:
        label = same_place_label(fa, fb)
        s = score_matrix(fa, fb, model, scorer=scorer, dustbin=dustbin)
        plan = sinkhorn_assign(s, iterations=iterations, tau=tau)
        value = frame_match_score(s, plan).score
        scored.append((fa.frame_id, fb.frame_id, value, label))
    if threshold is None:
        rng = rng_for(seed, "place/val-split")
        order = rng.permutation(len(scored))
        n_val = max(1, int(round(val_fraction * len(scored))))
        if len(scored) > 1:
            n_val = min(n_val, len(scored) - 1)
        val_idx = set(order[:n_val].tolist())
        threshold = tune_threshold(
            [scored[i][2] for i in sorted(val_idx)],
            [scored[i][3] for i in sorted(val_idx)])
        test = [scored[i] for i in range(len(scored)) if i not in val_idx]
    else:
        test = scored
    rows = [(fa, fb, s, int(s > threshold), y) for fa, fb, s, y in test]
    tp = sum(1 for r in rows if r[3] and r[4])
    fp = sum(1 for r in rows if r[3] and not r[4])
    fn = sum(1 for r in rows if not r[3] and r[4])
    tn = sum(1 for r in rows if not r[3] and not r[4])
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    accuracy = (tp + tn) / len(rows) if rows else 0.0
    return PlaceRecognitionReport(f1=f1, accuracy=accuracy,
                                  threshold=threshold, rows=rows)
