"""Generalized zero-shot evaluation: calibration sweep, reports, feasibility.

A scalar bias added to every unseen-composition score trades seen accuracy
against unseen accuracy. The sweep evaluates the finite set of decision-
changing biases: each image's (best seen score - best unseen score) gap,
plus one sentinel beyond each extreme that realizes the two infinite-bias
limits. Ties are broken toward the lowest candidate column. AUC is the
exact area under the resulting staircase in (seen, unseen) space, not a
trapezoid estimate, so brute-force bias enumeration must match it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .space import CompositionSpace

Pair = tuple[int, int]


class EvalError(ValueError):
    """Evaluation is undefined for the given inputs."""


@dataclass
class EvalReport:
    seen_best: float
    unseen_best: float
    hm_best: float
    auc: float
    curve: list = field(repr=False)  # (bias, seen_acc, unseen_acc), ascending bias

    def summary(self) -> str:
        return (f"AUC={self.auc:.6f} HM={self.hm_best:.6f} "
                f"Seen={self.seen_best:.6f} Unseen={self.unseen_best:.6f}")

    def to_csv(self) -> str:
        lines = ["bias,seen_acc,unseen_acc"]
        lines += [f"{b!r},{s!r},{u!r}" for b, s, u in self.curve]
        lines.append(f"# {self.summary()}")
        return "\n".join(lines) + "\n"


def curve_metrics(curve_seen: np.ndarray, curve_unseen: np.ndarray):
    """(Seen, Unseen, HM, AUC) from accuracy pairs ordered by ascending bias."""
    s = np.asarray(curve_seen, dtype=np.float64)
    u = np.asarray(curve_unseen, dtype=np.float64)
    tot = s + u
    hm = np.where(tot > 0, (2.0 * s * u) / np.where(tot > 0, tot, 1.0), 0.0)
    u_prev = np.concatenate([[0.0], u[:-1]])
    auc = float(np.sum(s * (u - u_prev)))
    return float(np.max(s)), float(np.max(u)), float(np.max(hm)), auc


def calibration_sweep(scores: np.ndarray, gt_cols, gt_is_seen,
                      seen_cols) -> EvalReport:
    """Sweep all decision-changing biases over an (images x candidates) matrix.

    `gt_cols[i]` is the candidate column of image i's label, or -1 when the
    label was filtered out of the candidate set (the image then counts as
    always wrong). `gt_is_seen[i]` says which accuracy the image belongs to;
    `seen_cols` marks the seen-composition columns.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gt_cols = np.asarray(gt_cols, dtype=np.int64)
    gt_is_seen = np.asarray(gt_is_seen, dtype=bool)
    seen_cols = np.asarray(seen_cols, dtype=bool)
    n, k = scores.shape
    if gt_cols.shape != (n,) or gt_is_seen.shape != (n,) or seen_cols.shape != (k,):
        raise EvalError("inconsistent shapes")
    n_seen_img = int(gt_is_seen.sum())
    n_unseen_img = n - n_seen_img
    if n_unseen_img == 0:
        raise EvalError("no unseen-labeled test images: HM/AUC are undefined")
    if n_seen_img == 0:
        raise EvalError("no seen-labeled test images: HM/AUC are undefined")
    if not seen_cols.any() or seen_cols.all():
        raise EvalError("candidate set must contain both seen and unseen columns")

    seen_part = np.where(seen_cols[None, :], scores, -np.inf)
    uns_part = np.where(seen_cols[None, :], -np.inf, scores)
    best_seen = seen_part.max(axis=1)
    best_uns = uns_part.max(axis=1)
    col_seen = seen_part.argmax(axis=1)   # lowest column among ties
    col_uns = uns_part.argmax(axis=1)

    seen_hit = gt_is_seen & (col_seen == gt_cols)
    uns_hit = ~gt_is_seen & (col_uns == gt_cols)
    seen_tiebreak = col_seen < col_uns   # at an exact tie the lower column wins

    gaps = best_seen - best_uns
    biases = np.unique(gaps)
    biases = np.concatenate([[biases[0] - 1.0], biases, [biases[-1] + 1.0]])

    shifted = best_uns[:, None] + biases[None, :]          # (n, m)
    takes_seen = (best_seen[:, None] > shifted) | \
                 ((best_seen[:, None] == shifted) & seen_tiebreak[:, None])
    seen_correct = (takes_seen & seen_hit[:, None]).sum(axis=0)
    uns_correct = (~takes_seen & uns_hit[:, None]).sum(axis=0)
    seen_acc = seen_correct / n_seen_img
    uns_acc = uns_correct / n_unseen_img

    sb, ub, hm, auc = curve_metrics(seen_acc, uns_acc)
    curve = [(float(b), float(s), float(u))
             for b, s, u in zip(biases, seen_acc, uns_acc)]
    return EvalReport(sb, ub, hm, auc, curve)


@dataclass
class FeasibilityMask:
    """Per-composition feasibility scores plus the pruning threshold.

    Compositions scoring below the threshold leave the open-world candidate
    set; seen compositions always stay.
    """

    scores: np.ndarray                 # (n_attrs, n_objs)
    threshold: float = -math.inf

    def candidate_pairs(self, space: CompositionSpace) -> list[Pair]:
        if self.scores.shape != (space.n_attrs, space.n_objs):
            raise EvalError(f"feasibility grid {self.scores.shape} does not cover "
                            f"{space.n_attrs} x {space.n_objs} compositions")
        return [p for p in space.all_pairs()
                if p in space.seen or self.scores[p] >= self.threshold]


def _score_matrix(model, samples, candidates, weights, threads: int):
    feats = np.stack([s.feature for s in samples])
    scores = model.inference_scores(feats, candidates, weights, threads=threads)
    pos = {p: i for i, p in enumerate(candidates)}
    gt_cols = np.array([pos.get(s.pair, -1) for s in samples], dtype=np.int64)
    return scores, gt_cols


def closed_world_eval(model, samples, space: CompositionSpace, weights,
                      threads: int = 1) -> EvalReport:
    """Sweep over the seen + unseen candidate set of the given split."""
    if not samples:
        raise EvalError("no test samples")
    candidates = space.sorted_pairs(space.test_closed)
    scores, gt_cols = _score_matrix(model, samples, candidates, weights, threads)
    if np.any(gt_cols < 0):
        bad = next(s for s, g in zip(samples, gt_cols) if g < 0)
        raise EvalError(f"test label {space.pair_name(bad.pair)!r} missing from "
                        "the closed-world candidate set")
    gt_is_seen = np.array([s.pair in space.seen for s in samples])
    seen_cols = np.array([p in space.seen for p in candidates])
    return calibration_sweep(scores, gt_cols, gt_is_seen, seen_cols)


def open_world_eval(model, samples, space: CompositionSpace,
                    mask: FeasibilityMask, weights, threads: int = 1) -> EvalReport:
    """Sweep over the feasibility-filtered full Cartesian candidate set.

    Images whose unseen label was filtered out remain in the denominator and
    can never be predicted correctly.
    """
    if not samples:
        raise EvalError("no test samples")
    candidates = mask.candidate_pairs(space)
    scores, gt_cols = _score_matrix(model, samples, candidates, weights, threads)
    gt_is_seen = np.array([s.pair in space.seen for s in samples])
    seen_cols = np.array([p in space.seen for p in candidates])
    return calibration_sweep(scores, gt_cols, gt_is_seen, seen_cols)


def subset_accuracy(scores: np.ndarray, gt_cols, keep) -> float:
    """Zero-bias accuracy over the selected images (lowest column wins ties)."""
    keep = np.asarray(keep, dtype=bool)
    if not keep.any():
        raise EvalError("empty image subset")
    pred = np.argmax(scores[keep], axis=1)
    return float(np.mean(pred == np.asarray(gt_cols)[keep]))


def select_threshold(model, samples, space: CompositionSpace, feas_scores: np.ndarray,
                     weights, max_thresholds: int = 64, threads: int = 1):
    """Pick the feasibility threshold maximizing unseen accuracy on `samples`.

    Candidate thresholds are quantiles of the score grid (capped at
    `max_thresholds`) plus -inf; ties go to the stricter threshold.
    """
    values = np.unique(np.asarray(feas_scores, dtype=np.float64))
    if values.size > max_thresholds:
        qs = np.linspace(0.0, 1.0, max_thresholds)
        values = np.unique(np.quantile(values, qs))
    best = (-1.0, -math.inf)
    for thr in [-math.inf, *values.tolist()]:
        report = open_world_eval(model, samples, space,
                                 FeasibilityMask(feas_scores, thr), weights,
                                 threads=threads)
        if report.unseen_best >= best[0]:
            best = (report.unseen_best, thr)
    return best[1]
