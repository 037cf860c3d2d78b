"""Rejection metrics and machine checks of the separability results.

Scores: confidence p[y_m], T-Con p[y] (needs the label), A_phi and
R-Con = confidence * A_phi. A rectifier is xi-error at a point when either

    (i)  |log(A_phi / A*)| <= log(2 / (2 - xi))
    (ii) |A_phi - A*|      <= xi / 2

with A* = p[y] / p[y_m]. Inputs whose confidence exceeds 1/(2 - xi) are then
separated by R-Con at 1/2. The verifiers sample hypothesis-satisfying
instances and count violations; any violation is a bug.

xi needs T-Con, so it is only computed where labels are available.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, auto

import numpy as np

from rrlab.errors import InvalidArgumentError
from rrlab.seeding import rng_for, thread_limit

log = logging.getLogger(__name__)

GUARD = 1e-9
PROB_CLAMP = 1e-12
CHUNK = 10_000
MAX_CLASSES = 10


def _probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise InvalidArgumentError(f"expected a probability vector of length >= 2, got shape {p.shape}")
    return p


def _check_label(y: int, n_classes: int):
    if not 0 <= y < n_classes:
        raise InvalidArgumentError(f"label {y} out of range [0, {n_classes})")


def tcon(probs, y: int) -> float:
    p = _probs(probs)
    _check_label(y, p.size)
    return float(p[y])


def optimal_rectifier(probs, y: int) -> float:
    p = _probs(probs)
    _check_label(y, p.size)
    return max(p[y], PROB_CLAMP) / max(p[int(np.argmax(p))], PROB_CLAMP)


@dataclass(frozen=True, slots=True)
class RejectionScores:
    confidence: float
    tcon: float
    a_phi: float
    r_con: float
    correct: bool

    @classmethod
    def from_probs(cls, probs, y: int, a_phi: float) -> "RejectionScores":
        p = _probs(probs)
        _check_label(y, p.size)
        y_m = int(np.argmax(p))
        confidence = float(p[y_m])
        return cls(
            confidence=confidence,
            tcon=tcon(p, y),
            a_phi=float(a_phi),
            r_con=confidence * float(a_phi),
            correct=y_m == y,
        )


@dataclass(frozen=True, slots=True)
class Definition1Result:
    """``None`` marks an unattainable bound (no xi in [0, 1) satisfies it)."""

    xi_arith: float
    xi_geom: float | None
    xi_min: float | None
    a_star: float


def xi_bounds(a_phi: float, a_star: float) -> Definition1Result:
    if not 0 <= a_phi <= 1:
        raise InvalidArgumentError(f"a_phi must lie in [0, 1], got {a_phi}")
    xi_arith = 2 * abs(a_phi - a_star)
    xi_geom = None
    if a_phi > 0 and a_star > 0:
        ratio = max(a_phi / a_star, a_star / a_phi)
        if ratio < 2:
            xi_geom = 2 - 2 / ratio
    attainable = [v for v in (xi_geom, xi_arith) if v is not None and v < 1]
    return Definition1Result(
        xi_arith=xi_arith,
        xi_geom=xi_geom,
        xi_min=min(attainable) if attainable else None,
        a_star=a_star,
    )


def xi_error(a_phi: float, probs, y: int) -> Definition1Result:
    return xi_bounds(a_phi, optimal_rectifier(probs, y))


def xi_min_batch(a_phi, a_star) -> np.ndarray:
    """Vectorized xi_min; NaN where neither bound is attainable."""
    a = np.asarray(a_phi, dtype=np.float64)
    s = np.asarray(a_star, dtype=np.float64)
    arith = 2 * np.abs(a - s)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(a / s, s / a)
        geom = np.where((a > 0) & (s > 0) & (ratio < 2), 2 - 2 / ratio, np.inf)
    arith = np.where(arith < 1, arith, np.inf)
    best = np.minimum(geom, arith)
    return np.where(np.isfinite(best), best, np.nan)


def confidence_threshold(xi: float) -> float:
    return 1.0 / (2.0 - xi)


class Stage(Enum):
    REJECTED_BY_CONFIDENCE = auto()
    ACCEPTED = auto()
    FLAGGED_BY_RCON = auto()


@dataclass(frozen=True, slots=True)
class CoupledDecision:
    stage: Stage
    xi: float
    confidence_threshold: float
    rcon_threshold: float = 0.5


def _check_xi(xi: float):
    if not 0 <= xi < 1:
        raise InvalidArgumentError(f"xi must lie in [0, 1), got {xi}")


def coupled_reject(scores: RejectionScores, xi: float) -> CoupledDecision:
    """Confidence filter at 1/(2 - xi), then R-Con at 1/2 among the accepted."""
    _check_xi(xi)
    threshold = confidence_threshold(xi)
    if scores.confidence <= threshold:
        stage = Stage.REJECTED_BY_CONFIDENCE
    elif scores.r_con <= 0.5:
        stage = Stage.FLAGGED_BY_RCON
    else:
        stage = Stage.ACCEPTED
    return CoupledDecision(stage=stage, xi=xi, confidence_threshold=threshold)


def coupled_stages(confidence, r_con, xi) -> np.ndarray:
    """Vectorized coupled_reject returning Stage values as an object array."""
    xi = np.asarray(xi, dtype=np.float64)
    if ((xi < 0) | (xi >= 1)).any():
        raise InvalidArgumentError("xi must lie in [0, 1)")
    conf = np.asarray(confidence, dtype=np.float64)
    rcon = np.asarray(r_con, dtype=np.float64)
    passed = conf > 1.0 / (2.0 - xi)
    return np.where(
        ~passed,
        Stage.REJECTED_BY_CONFIDENCE,
        np.where(rcon <= 0.5, Stage.FLAGGED_BY_RCON, Stage.ACCEPTED),
    )


def separation_bound(xi):
    """(2 - 2 xi) / (2 - xi)^2, the ceiling on R-Con of a wrong point."""
    xi = np.asarray(xi, dtype=np.float64)
    return (2 - 2 * xi) / (2 - xi) ** 2


@dataclass
class VerificationReport:
    name: str
    trials: int
    violations: int = 0
    branches: dict[str, int] = field(default_factory=dict)
    margins: dict[str, float] = field(default_factory=dict)
    counterexamples: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        lines = [f"{self.name}: {verdict} ({self.violations} violations over {self.trials} trials)"]
        lines += [f"  branch {k}: {v}" for k, v in self.branches.items()]
        lines += [f"  margin {k}: {v:.3e}" for k, v in self.margins.items()]
        for ce in self.counterexamples:
            lines.append("  counterexample: " + ", ".join(f"{k}={v}" for k, v in ce.items()))
        return "\n".join(lines)

    def merge(self, other: "VerificationReport"):
        self.violations += other.violations
        for k, v in other.branches.items():
            self.branches[k] = self.branches.get(k, 0) + v
        for k, v in other.margins.items():
            self.margins[k] = min(self.margins.get(k, math.inf), v)
        room = 5 - len(self.counterexamples)
        self.counterexamples += other.counterexamples[:max(room, 0)]


def _run_chunked(
    name: str,
    trials: int,
    seed: int,
    chunk_fn: Callable[[np.random.Generator, int], VerificationReport],
) -> VerificationReport:
    if trials < 1:
        raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
    sizes = [min(CHUNK, trials - start) for start in range(0, trials, CHUNK)]
    jobs = [(rng_for(seed, name, i), size) for i, size in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=min(thread_limit(), len(jobs))) as pool:
        parts = list(pool.map(lambda job: chunk_fn(*job), jobs))
    report = VerificationReport(name=name, trials=trials)
    for part in parts:
        report.merge(part)
    log.info("%s: %d violations over %d trials", name, report.violations, trials)
    return report


def _sample_others(rng: np.random.Generator, n: int, conf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spread 1 - conf over L - 1 other classes; return (L, mass on one other class)."""
    n_classes = rng.integers(2, MAX_CLASSES + 1, size=n)
    weights = rng.gamma(1.0, size=(n, MAX_CLASSES - 1))
    weights[np.arange(MAX_CLASSES - 1)[None, :] >= (n_classes - 1)[:, None]] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    pick = rng.integers(0, n_classes - 1)
    return n_classes, (1 - conf) * weights[np.arange(n), pick]


def _counterexample(index: int, **columns) -> dict:
    return {k: float(v[index]) if np.ndim(v) else v for k, v in columns.items()}


def _sample_confident(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Probability vectors whose largest entry exceeds 1/2 + GUARD.

    Returns (L per row, probs) with probs zero-padded to MAX_CLASSES columns.
    """
    n_classes = rng.integers(2, MAX_CLASSES + 1, size=n)
    conf = rng.uniform(0.5 + GUARD, 1.0, size=n)
    top = rng.integers(0, n_classes)
    cols = np.arange(MAX_CLASSES)[None, :]
    weights = rng.gamma(1.0, size=(n, MAX_CLASSES)) + PROB_CLAMP
    weights[(cols >= n_classes[:, None]) | (cols == top[:, None])] = 0.0
    probs = (1 - conf)[:, None] * weights / weights.sum(axis=1, keepdims=True)
    probs[np.arange(n), top] = conf
    return n_classes, probs


def _lemma1_chunk(rng: np.random.Generator, n: int, fault: bool) -> VerificationReport:
    report = VerificationReport(name="lemma1", trials=n)
    n_classes, probs = _sample_confident(rng, n)
    labels = rng.integers(0, n_classes)
    scores = [RejectionScores.from_probs(probs[i, :n_classes[i]], int(labels[i]), 1.0) for i in range(n)]
    conf = np.array([s.confidence for s in scores])
    t_con = np.array([s.tcon for s in scores])
    correct = np.array([s.correct for s in scores], dtype=bool)
    bad_w = (t_con <= 0.5) if fault else (t_con >= 0.5)
    bad = np.where(correct, t_con <= 0.5, bad_w) | (conf <= 0.5)
    report.violations = int(bad.sum())
    report.branches = {"correct": int(correct.sum()), "wrong": int((~correct).sum())}
    if correct.any():
        report.margins["correct"] = float((t_con[correct] - 0.5).min())
    if not correct.all():
        report.margins["wrong"] = float((0.5 - t_con[~correct]).min())
    for i in np.flatnonzero(bad)[:5]:
        report.counterexamples.append(
            _counterexample(i, n_classes=n_classes, label=labels, correct=correct, confidence=conf, tcon=t_con)
        )
    return report


def simplex_grid_violations(resolution: int = 1000) -> tuple[int, int]:
    """Check the confidence/T-Con ordering on every 3-class grid point with max > 1/2.

    Returns (points checked, violations).
    """
    i, j = np.meshgrid(np.arange(resolution + 1), np.arange(resolution + 1), indexing="ij")
    keep = i + j <= resolution
    counts = np.stack([i[keep], j[keep], resolution - i[keep] - j[keep]], axis=1)
    counts = counts[counts.max(axis=1) * 2 > resolution]
    probs = counts / resolution
    y_m = counts.argmax(axis=1)
    violations = 0
    for y in range(3):
        correct = y_m == y
        t = probs[:, y]
        violations += int(((correct & (t <= 0.5)) | (~correct & (t >= 0.5))).sum())
    return len(counts), violations


def verify_lemma1(trials: int, seed: int, fault: bool = False, grid_resolution: int = 1000) -> VerificationReport:
    """Correct points with confidence > 1/2 have T-Con > 1/2; wrong ones < 1/2."""
    report = _run_chunked("lemma1", trials, seed, lambda rng, n: _lemma1_chunk(rng, n, fault))
    # barely confident wrong point with all remaining mass on the true label
    edge = RejectionScores.from_probs([0.5 + GUARD, 0.5 - GUARD], 1, 1.0)
    report.branches["boundary"] = 1
    if edge.correct or not edge.tcon < 0.5:
        report.violations += 1
    if grid_resolution:
        checked, bad = simplex_grid_violations(grid_resolution)
        report.branches["simplex_grid"] = checked
        report.violations += bad
    return report


def _theorem1_chunk(rng: np.random.Generator, n: int, xi_fixed: float | None, fault: bool) -> VerificationReport:
    report = VerificationReport(name="theorem1", trials=n)
    xi = np.full(n, xi_fixed) if xi_fixed is not None else rng.uniform(0.0, 1.0, size=n)
    threshold = 1.0 / (2.0 - xi)
    up = 2.0 / (2.0 - xi)

    def sample_a(a_star: np.ndarray, bound: str) -> np.ndarray:
        if bound == "i":
            lo, hi = a_star / up, np.minimum(1.0, a_star * up)
        else:
            lo, hi = np.maximum(0.0, a_star - xi / 2), np.minimum(1.0, a_star + xi / 2)
        return lo + (hi - lo) * rng.uniform(0.0, 1.0, size=n)

    for label in ("correct", "wrong"):
        for bound in ("i", "ii"):
            branch = f"{label}-{bound}"
            conf = threshold + GUARD + (1.0 - threshold - GUARD) * rng.uniform(0.0, 1.0, size=n)
            if label == "correct":
                a_star = np.ones(n)
            else:
                _, p_true = _sample_others(rng, n, conf)
                a_star = np.maximum(p_true, PROB_CLAMP) / conf
            a_phi = sample_a(a_star, bound)
            r_con = conf * a_phi
            stages = coupled_stages(conf, r_con, xi)
            expected = Stage.ACCEPTED if label == "correct" else Stage.FLAGGED_BY_RCON
            if fault and label == "correct":
                expected = Stage.FLAGGED_BY_RCON
            bad = stages != expected
            bad |= ~(xi_min_batch(a_phi, a_star) <= xi + GUARD)
            report.violations += int(bad.sum())
            report.branches[branch] = n
            margin = r_con - 0.5 if label == "correct" else 0.5 - r_con
            report.margins[branch] = float(margin.min())
            for i in np.flatnonzero(bad)[:5]:
                report.counterexamples.append(
                    _counterexample(i, branch=branch, xi=xi, confidence=conf, a_phi=a_phi, a_star=a_star, r_con=r_con)
                )
    return report


def verify_theorem1(
    trials: int,
    seed: int,
    xi: float | None = None,
    fault: bool = False,
    grid_points: int = 10_000,
) -> VerificationReport:
    """Sample every proof branch (correct/wrong point x bound i/ii) per trial.

    Also checks that the wrong-point ceiling (2 - 2 xi)/(2 - xi)^2 equals 1/2
    at xi = 0 and decreases strictly on a grid over [0, 1).
    """
    if xi is not None:
        _check_xi(xi)
    report = _run_chunked("theorem1", trials, seed, lambda rng, n: _theorem1_chunk(rng, n, xi, fault))
    grid = np.arange(grid_points) / grid_points
    g = separation_bound(grid)
    bad = int(g[0] != 0.5) + int((np.diff(g) >= 0).sum()) + int((g[1:] >= 0.5).sum())
    report.branches["g_grid"] = grid_points
    report.violations += bad
    if bad:
        report.counterexamples.append({"check": "g(xi) monotone below 1/2", "failures": bad})
    return report


@dataclass(frozen=True, slots=True)
class SubstituteClasses:
    n1: float
    n2: float
    n_sub: int


def nsub(xi: float, rho: float) -> SubstituteClasses:
    """Class counts of the classification tasks that stand in for learning a
    xi-error rectifier (geometric bins from rho, or arithmetic bins)."""
    if not 0 < xi < 1:
        raise InvalidArgumentError(f"xi must lie in (0, 1), got {xi}")
    if not 0 < rho < 1:
        raise InvalidArgumentError(f"rho must lie in (0, 1), got {rho}")
    n1 = math.log(1 / rho) / math.log(2 / (2 - xi)) + 1
    n2 = 2 / xi
    return SubstituteClasses(n1=n1, n2=n2, n_sub=math.ceil(min(n1, n2)))


def geometric_bins(xi: float, rho: float) -> list[float]:
    """Edges 0, rho, r*rho, r^2*rho, ... capped at 1, with r = 2/(2 - xi)."""
    ratio = 2 / (2 - xi)
    edges = [0.0, rho]
    s = 1
    while edges[-1] < 1:
        edges.append(min(1.0, rho * ratio**s))
        s += 1
    return edges


def arithmetic_bins(xi: float) -> list[float]:
    edges = [0.0]
    s = 1
    while edges[-1] < 1:
        edges.append(min(1.0, s * xi / 2))
        s += 1
    return edges


def verify_nsub(trials: int, seed: int) -> VerificationReport:
    """Explicit bin counts agree with ceil(N1) and ceil(N2)."""
    rng = rng_for(seed, "nsub")
    report = VerificationReport(name="nsub", trials=trials, branches={"geometric": 0, "arithmetic": 0})
    for _ in range(trials):
        xi = float(rng.uniform(0.01, 1.0))
        rho = float(rng.uniform(1e-3, 1.0))
        counts = nsub(xi, rho)
        n_geo = len(geometric_bins(xi, rho)) - 1
        n_ari = len(arithmetic_bins(xi)) - 1
        report.branches["geometric"] += 1
        report.branches["arithmetic"] += 1
        if n_geo != math.ceil(counts.n1) or n_ari != math.ceil(counts.n2):
            report.violations += 1
            if len(report.counterexamples) < 5:
                report.counterexamples.append(
                    {"xi": xi, "rho": rho, "geometric_bins": n_geo, "n1": counts.n1,
                     "arithmetic_bins": n_ari, "n2": counts.n2}
                )
    return report


def expected_sampled_accuracy(probs_batch, y_batch) -> float:
    """Mean probability on the true label: the accuracy of labels sampled
    from the softmax rather than taken by argmax."""
    p = np.asarray(probs_batch, dtype=np.float64)
    y = np.asarray(y_batch, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidArgumentError("expected_sampled_accuracy needs a non-empty batch")
    if y.shape != (p.shape[0],):
        raise InvalidArgumentError(f"labels shape {y.shape} does not match {p.shape[0]} rows")
    if (y < 0).any() or (y >= p.shape[1]).any():
        raise InvalidArgumentError("label out of range")
    return float(p[np.arange(len(y)), y].mean())


@dataclass(frozen=True, slots=True)
class OrderingFlip:
    name: str
    index: int
    low_tau: tuple[float, float]
    high_tau: tuple[float, float]

    @property
    def flipped(self) -> bool:
        return self.low_tau[0] < self.low_tau[1] and self.high_tau[0] > self.high_tau[1]


def _softmax_np(logits: np.ndarray, tau: float) -> np.ndarray:
    z = logits / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def temperature_ordering_flip(low_tau: float = 1.0, high_tau: float = 2.0) -> list[OrderingFlip]:
    """Two toy pairs whose probability ordering reverses with temperature.

    True-class case: index 0 of (0, 3, -1000) vs (0, 2, 2). Confidence case:
    the top class of (0, -1, -1000) vs (0, -2, -2).
    """
    cases = [
        ("tcon", 0, np.array([0.0, 3.0, -1000.0]), np.array([0.0, 2.0, 2.0])),
        ("confidence", 0, np.array([0.0, -1.0, -1000.0]), np.array([0.0, -2.0, -2.0])),
    ]
    flips = []
    for name, index, x1, x2 in cases:
        def at(tau: float) -> tuple[float, float]:
            return float(_softmax_np(x1, tau)[index]), float(_softmax_np(x2, tau)[index])

        flips.append(OrderingFlip(name=name, index=index, low_tau=at(low_tau), high_tau=at(high_tau)))
    return flips


def verify_ordering_flip() -> VerificationReport:
    report = VerificationReport(name="ordering_flip", trials=2)
    for flip in temperature_ordering_flip():
        report.branches[flip.name] = 1
        if not flip.flipped:
            report.violations += 1
            report.counterexamples.append({"case": flip.name, "tau1": flip.low_tau, "tau2": flip.high_tau})
    return report
