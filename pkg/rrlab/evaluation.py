"""Scoring protocol for rejectors.

Correctly classified samples are the positives: a good rejection score ranks
them above misclassified ones.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from rrlab.errors import EvaluationError, InvalidArgumentError
from rrlab.model import HeadOutputs
from rrlab.rejection import PROB_CLAMP, xi_min_batch

log = logging.getLogger(__name__)

TPR_SLACK = 1e-9
PASS_CURVE_HEADER = ("xi", "correct_pass", "wrong_pass", "correct_sep", "wrong_sep")
CERTIFIED_HEADER = ("xi", "certified", "violations")
RELIABILITY_HEADER = ("mean_conf", "bin_lo", "bin_hi", "count", "accuracy")


@dataclass
class ScoredSamples:
    """Column arrays, one entry per evaluated input."""

    score: np.ndarray
    correct: np.ndarray
    confidence: np.ndarray | None = None
    r_con: np.ndarray | None = None
    xi_min: np.ndarray | None = None

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        n = self.score.shape[0]
        self.confidence = self.score if self.confidence is None else np.asarray(self.confidence, dtype=np.float64)
        self.r_con = self.score if self.r_con is None else np.asarray(self.r_con, dtype=np.float64)
        if self.xi_min is not None:
            self.xi_min = np.asarray(self.xi_min, dtype=np.float64)
        for name in ("correct", "confidence", "r_con"):
            if getattr(self, name).shape != (n,):
                raise InvalidArgumentError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if not np.isfinite(self.score).all():
            raise EvaluationError("rejection scores must be finite")

    def __len__(self) -> int:
        return self.score.shape[0]


def _to_numpy(t) -> np.ndarray:
    return t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)


def collect_scores(outputs: HeadOutputs, y, rejector: str) -> ScoredSamples:
    """Score a batch of forward outputs with one of conf, tcon, rcon, aphi."""
    probs = _to_numpy(outputs.probs)
    y = _to_numpy(y).astype(np.int64)
    rows = np.arange(len(y))
    y_m = _to_numpy(outputs.y_m)
    confidence = _to_numpy(outputs.confidence)
    a_phi = _to_numpy(outputs.a_phi)
    r_con = _to_numpy(outputs.r_con)
    t_con = probs[rows, y]
    scores = {"conf": confidence, "tcon": t_con, "rcon": r_con, "aphi": a_phi}
    if rejector not in scores:
        raise InvalidArgumentError(f"rejector must be one of {', '.join(scores)}, got {rejector!r}")
    a_star = np.maximum(t_con, PROB_CLAMP) / np.maximum(confidence, PROB_CLAMP)
    return ScoredSamples(
        score=scores[rejector],
        correct=y_m == y,
        confidence=confidence,
        r_con=r_con,
        xi_min=xi_min_batch(a_phi, a_star),
    )


@dataclass(frozen=True, slots=True)
class TprResult:
    threshold: float
    accuracy: float
    coverage: float
    retained: int


def accuracy_at_threshold(samples: ScoredSamples, threshold: float) -> TprResult:
    keep = samples.score >= threshold
    retained = int(keep.sum())
    accuracy = float(samples.correct[keep].mean()) if retained else math.nan
    return TprResult(
        threshold=float(threshold),
        accuracy=accuracy,
        coverage=retained / len(samples) if len(samples) else 0.0,
        retained=retained,
    )


def tpr_threshold(samples: ScoredSamples, tpr: float = 0.95) -> float:
    """Largest t such that at least ``tpr`` of the correct samples score >= t."""
    if not 0 < tpr <= 1:
        raise InvalidArgumentError(f"tpr must lie in (0, 1], got {tpr}")
    positives = np.sort(samples.score[samples.correct])[::-1]
    if positives.size == 0:
        raise EvaluationError("no correctly classified samples to fix a TPR threshold")
    k = max(1, math.ceil(tpr * positives.size - TPR_SLACK))
    return float(positives[k - 1])


def tpr_accuracy(samples: ScoredSamples, tpr: float = 0.95) -> TprResult:
    """Accuracy among samples retained at the TPR threshold; ties are retained."""
    return accuracy_at_threshold(samples, tpr_threshold(samples, tpr))


def roc_auc(samples: ScoredSamples) -> float:
    """P(correct outscores wrong), ties counted one half, computed exactly."""
    pos = samples.score[samples.correct]
    neg = np.sort(samples.score[~samples.correct])
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("roc_auc needs both correct and misclassified samples")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (at_or_below - below).sum()
    return float(wins / (pos.size * neg.size))


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    count: np.ndarray
    accuracy: np.ndarray
    mean_conf: np.ndarray

    def rows(self) -> list[tuple]:
        return [
            (float(self.mean_conf[i]), float(self.edges[i]), float(self.edges[i + 1]),
             int(self.count[i]), float(self.accuracy[i]))
            for i in range(len(self.count))
            if self.count[i]
        ]


def reliability_bins(confidences, correct_flags, n_bins: int = 15) -> ReliabilityBins:
    """Equal-width bins (lo, hi] on [0, 1]; a confidence of 0 joins the first bin."""
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct_flags, dtype=np.float64)
    if conf.size == 0:
        raise EvaluationError("calibration needs at least one sample")
    if n_bins < 1:
        raise InvalidArgumentError(f"n_bins must be >= 1, got {n_bins}")
    index = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    count = np.bincount(index, minlength=n_bins)
    correct_sum = np.bincount(index, weights=correct, minlength=n_bins)
    conf_sum = np.bincount(index, weights=conf, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        accuracy = np.where(count > 0, correct_sum / count, 0.0)
        mean_conf = np.where(count > 0, conf_sum / count, 0.0)
    return ReliabilityBins(np.linspace(0, 1, n_bins + 1), count, accuracy, mean_conf)


def ece(confidences, correct_flags, n_bins: int = 15) -> float:
    bins = reliability_bins(confidences, correct_flags, n_bins)
    weights = bins.count / bins.count.sum()
    return float((weights * np.abs(bins.accuracy - bins.mean_conf)).sum())


def xi_grid(points: int = 101, xi_max: float = 0.99) -> np.ndarray:
    return np.linspace(0.0, xi_max, points)


def pass_curve(samples: ScoredSamples, grid=None, use_score: bool = False) -> list[tuple]:
    """Per xi: how many correct/wrong samples pass the 1/(2 - xi) confidence
    filter, and how many of those sit on their side of the 1/2 line.

    The second stage uses R-Con, or the sample score with ``use_score``.
    """
    grid = xi_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if ((grid < 0) | (grid >= 1)).any():
        raise InvalidArgumentError("xi grid values must lie in [0, 1)")
    second = samples.score if use_score else samples.r_con
    rows = []
    for xi in grid:
        passed = samples.confidence > 1.0 / (2.0 - xi)
        correct = passed & samples.correct
        wrong = passed & ~samples.correct
        rows.append((
            float(xi),
            int(correct.sum()),
            int(wrong.sum()),
            int((correct & (second > 0.5)).sum()),
            int((wrong & (second <= 0.5)).sum()),
        ))
    return rows


def certified_separation(samples: ScoredSamples, grid=None) -> list[tuple]:
    """Per xi: samples that pass the confidence filter with measured
    xi_min <= xi, and how many of them R-Con puts on the wrong side of 1/2.

    The second count is zero whenever the coupling result holds.
    """
    if samples.xi_min is None:
        raise InvalidArgumentError("certified_separation needs xi_min (label-aware scores)")
    grid = xi_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    measured = np.nan_to_num(samples.xi_min, nan=np.inf)
    rows = []
    for xi in grid:
        certified = (samples.confidence > 1.0 / (2.0 - xi)) & (measured <= xi)
        violations = certified & np.where(samples.correct, samples.r_con <= 0.5, samples.r_con >= 0.5)
        rows.append((float(xi), int(certified.sum()), int(violations.sum())))
    return rows


@dataclass
class EvalReport:
    rejector: str
    n: int
    all_accuracy: float
    tpr: float
    tpr_threshold: float
    tpr_accuracy: float
    coverage: float
    roc_auc: float | None
    ece: float
    sampled_accuracy: float | None = None
    pass_curve: list[tuple] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        rows = [
            ("rejector", self.rejector),
            ("n", self.n),
            ("all_accuracy", self.all_accuracy),
            ("tpr", self.tpr),
            ("tpr_threshold", self.tpr_threshold),
            ("tpr_accuracy", self.tpr_accuracy),
            ("coverage", self.coverage),
            ("roc_auc", "" if self.roc_auc is None else self.roc_auc),
            ("ece", self.ece),
        ]
        if self.sampled_accuracy is not None:
            rows.append(("sampled_accuracy", self.sampled_accuracy))
        return rows


def build_report(
    samples: ScoredSamples,
    rejector: str,
    tpr: float = 0.95,
    grid=None,
    ece_bins: int = 15,
    threshold: float | None = None,
    sampled_accuracy: float | None = None,
    use_score: bool = False,
) -> EvalReport:
    """``threshold`` replaces the TPR threshold fixed on ``samples`` itself.
    ``use_score`` makes the pass curve separate by the rejector score.
    """
    if len(samples) == 0:
        raise EvaluationError("cannot evaluate an empty sample set")
    if threshold is None:
        threshold = tpr_threshold(samples, tpr)
    kept = accuracy_at_threshold(samples, threshold)
    try:
        auc = roc_auc(samples)
    except EvaluationError:
        log.warning("ROC-AUC undefined for %s: only one correctness class present", rejector)
        auc = None
    return EvalReport(
        rejector=rejector,
        n=len(samples),
        all_accuracy=float(samples.correct.mean()),
        tpr=tpr,
        tpr_threshold=kept.threshold,
        tpr_accuracy=kept.accuracy,
        coverage=kept.coverage,
        roc_auc=auc,
        ece=ece(samples.confidence, samples.correct, ece_bins),
        sampled_accuracy=sampled_accuracy,
        pass_curve=pass_curve(samples, grid, use_score),
    )


TAU_SUMMARY_HEADER = (
    "log2_tau", "tpr_acc_conf", "tpr_acc_tcon", "all_acc",
    "mean_conf_correct", "mean_conf_wrong", "mean_tcon_correct", "mean_tcon_wrong", "sampled_acc",
)
XI_SCATTER_HEADER = ("confidence", "xi_min", "correct")


def _mean(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else math.nan


def tau_summary(outputs: HeadOutputs, y, exponents, tpr: float = 0.95) -> list[tuple]:
    """Rejection statistics with the classifier softmax at tau = 2**k.

    The predicted labels, and so the accuracy without rejection, do not move
    with tau; the confidence and T-Con orderings can.
    """
    y_np = _to_numpy(y).astype(np.int64)
    rows = []
    for k in exponents:
        scaled = outputs.at_temperature(2.0 ** k)
        conf = collect_scores(scaled, y_np, "conf")
        t_con = collect_scores(scaled, y_np, "tcon")
        correct = conf.correct
        rows.append((
            k,
            tpr_accuracy(conf, tpr).accuracy,
            tpr_accuracy(t_con, tpr).accuracy,
            float(correct.mean()),
            _mean(conf.score[correct]),
            _mean(conf.score[~correct]),
            _mean(t_con.score[correct]),
            _mean(t_con.score[~correct]),
            _mean(t_con.score),
        ))
        log.debug("tau=2^%d: conf %.4f tcon %.4f", k, rows[-1][1], rows[-1][2])
    return rows


def xi_scatter(samples: ScoredSamples) -> list[tuple]:
    if samples.xi_min is None:
        raise InvalidArgumentError("xi_scatter needs xi_min (label-aware scores)")
    return [
        (float(c), float(x), bool(ok))
        for c, x, ok in zip(samples.confidence, samples.xi_min, samples.correct)
    ]
