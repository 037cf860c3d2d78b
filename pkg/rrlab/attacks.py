"""First-order attacks on the two-head network.

``pgd`` runs projected gradient ascent inside an L-inf or L2 ball with random
restarts. ``adaptive_loss`` builds objectives that target the classifier and
the R-Con rejector together. ``min_distortion`` bisects the radius for the
smallest ball in which an adaptive PGD run succeeds.
"""

import logging
import math
from collections.abc import Callable, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np
import torch

from rrlab.config import OBJECTIVES, AttackConfig
from rrlab.errors import AttackError, InvalidArgumentError
from rrlab.losses import rr_loss
from rrlab.model import BNMode, HeadOutputs, TwoHeadNet, bn_mode
from rrlab.numkit import as_tensor, cross_entropy, pick
from rrlab.seeding import rng_for

log = logging.getLogger(__name__)

Objective = Callable[[HeadOutputs, torch.Tensor], torch.Tensor]

NORM_CLAMP = 1e-12
RCON_CLAMP = 1e-12


@dataclass
class AttackResult:
    x_star: torch.Tensor
    objective: torch.Tensor
    success: torch.Tensor
    r_con: torch.Tensor
    confidence: torch.Tensor
    y_m: torch.Tensor
    eps: torch.Tensor

    def __len__(self) -> int:
        return self.x_star.shape[0]


def ce_objective(outputs: HeadOutputs, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy(outputs.probs, y)


def adaptive_loss(
    outputs: HeadOutputs,
    y,
    kind: str = "ce",
    eta: float = 1.0,
    tau_rr: float = 1.0,
    rcon_log: bool = True,
) -> torch.Tensor:
    """Per-example attack objective, to be maximized.

    ``ce`` and ``con`` bases push the prediction off the true label (``con``
    lowers p[y] directly). The R-Con term enters as ``+eta * log R-Con`` and the
    RR term as ``-eta * L_RR`` so that ascent also evades the rejector.
    """
    if kind not in OBJECTIVES:
        raise InvalidArgumentError(f"objective kind must be one of {', '.join(OBJECTIVES)}, got {kind!r}")
    base_kind, _, term_kind = kind.partition("+")
    if base_kind == "ce":
        base = cross_entropy(outputs.probs, y)
    else:
        base = -pick(outputs.probs, y)
    if term_kind == "rcon":
        rcon = outputs.r_con.clamp_min(RCON_CLAMP)
        return base + eta * (torch.log(rcon) if rcon_log else rcon)
    if term_kind == "rr":
        return base - eta * rr_loss(outputs, y, tau_rr, "rcon", stop_gradients=False)
    return base


def objective_for(cfg: AttackConfig, tau_rr: float = 1.0) -> Objective:
    if cfg.objective == "ce":
        return ce_objective
    return lambda outputs, y: adaptive_loss(outputs, y, cfg.objective, cfg.eta, tau_rr, cfg.rcon_log)


@contextmanager
def frozen_running_stats(model: TwoHeadNet):
    bn = model.batch_norm
    saved = [b.detach().clone() for b in bn.buffers()]
    try:
        yield
    finally:
        with torch.no_grad():
            for b, s in zip(bn.buffers(), saved):
                b.copy_(s)


def _per_row(value, n: int, default: float) -> torch.Tensor:
    if value is None:
        value = default
    t = as_tensor(value)
    return t.expand(n).clone() if t.dim() == 0 else t


def _norms(delta: torch.Tensor) -> torch.Tensor:
    return delta.flatten(1).norm(dim=1)


def project(x: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor, norm: str) -> torch.Tensor:
    delta = x - x0
    radius = eps.unsqueeze(1)
    if norm == "linf":
        delta = torch.maximum(torch.minimum(delta, radius), -radius)
    else:
        scale = (eps / _norms(delta).clamp_min(NORM_CLAMP)).clamp(max=1.0)
        delta = delta * scale.unsqueeze(1)
    return x0 + delta


def _random_start(rng: np.random.Generator, x0: torch.Tensor, eps: torch.Tensor, norm: str) -> torch.Tensor:
    n, d = x0.shape
    if norm == "linf":
        unit = rng.uniform(-1.0, 1.0, size=(n, d))
    else:
        direction = rng.standard_normal(size=(n, d))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), NORM_CLAMP)
        radius = rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
        unit = direction * radius
    return x0 + torch.from_numpy(unit) * eps.unsqueeze(1)


def _step_direction(grad: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "linf":
        return grad.sign()
    return grad / _norms(grad).clamp_min(NORM_CLAMP).unsqueeze(1)


def pgd(
    model: TwoHeadNet,
    X,
    y,
    cfg: AttackConfig,
    objective: Objective | None = None,
    rng: np.random.Generator | None = None,
    eps=None,
    alpha=None,
    mode: BNMode | str = BNMode.EVAL,
    threshold: float | None = None,
) -> AttackResult:
    """Maximize ``objective`` per example inside the ball of radius ``eps``.

    The clean input competes with the final iterate of every restart; the
    candidate with the highest objective wins, earlier candidates on ties.
    ``threshold`` turns success into "misclassified and R-Con above it".
    """
    X = as_tensor(X).detach()
    y = torch.as_tensor(y, dtype=torch.long)
    n = X.shape[0]
    eps = _per_row(eps, n, cfg.epsilon)
    if (eps < 0).any():
        raise InvalidArgumentError("attack radius must be >= 0")
    if alpha is None:
        alpha = eps * (cfg.alpha / cfg.epsilon if cfg.epsilon > 0 else 0.25)
    else:
        alpha = _per_row(alpha, n, cfg.alpha)
    objective = objective or objective_for(cfg)
    rng = rng if rng is not None else rng_for(cfg.seed, "attack")
    mode = BNMode(mode)

    def evaluate(x: torch.Tensor) -> tuple[HeadOutputs, torch.Tensor]:
        outputs = model(x)
        return outputs, objective(outputs, y)

    with bn_mode(model, mode), frozen_running_stats(model):
        with torch.no_grad():
            best_out, best_val = evaluate(X)
        best_x = X.clone()
        if cfg.steps > 0 and (eps > 0).any():
            for restart in range(cfg.restarts):
                x = _random_start(rng, X, eps, cfg.norm)
                x = _clip_box(project(x, X, eps, cfg.norm), cfg)
                for step in range(cfg.steps):
                    x.requires_grad_(True)
                    _, value = evaluate(x)
                    (grad,) = torch.autograd.grad(value.sum(), x)
                    if not torch.isfinite(grad).all():
                        raise AttackError("non-finite input gradient", step)
                    with torch.no_grad():
                        x = x + alpha.unsqueeze(1) * _step_direction(grad, cfg.norm)
                        x = _clip_box(project(x, X, eps, cfg.norm), cfg)
                with torch.no_grad():
                    out, val = evaluate(x)
                better = val > best_val
                best_x = torch.where(better.unsqueeze(1), x, best_x)
                best_val = torch.where(better, val, best_val)
                best_out = _merge(best_out, out, better)
                log.debug("restart %d: mean objective %.4f", restart, best_val.mean().item())

    success = best_out.y_m != y
    if threshold is not None:
        success &= best_out.r_con > threshold
    return AttackResult(
        x_star=best_x.detach(),
        objective=best_val.detach(),
        success=success,
        r_con=best_out.r_con.detach(),
        confidence=best_out.confidence.detach(),
        y_m=best_out.y_m,
        eps=eps,
    )


def _clip_box(x: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    return x.clamp(cfg.box_low, cfg.box_high) if cfg.box else x


def _merge(old: HeadOutputs, new: HeadOutputs, take_new: torch.Tensor) -> HeadOutputs:
    def pick_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        mask = take_new.view(-1, *([1] * (a.dim() - 1)))
        return torch.where(mask, b, a)

    return HeadOutputs(
        logits=pick_rows(old.logits, new.logits),
        probs=pick_rows(old.probs, new.probs),
        confidence=pick_rows(old.confidence, new.confidence),
        y_m=pick_rows(old.y_m, new.y_m),
        a_phi=pick_rows(old.a_phi, new.a_phi),
        r_con=pick_rows(old.r_con, new.r_con),
        tau=old.tau,
    )


def worst_case(results: Sequence[AttackResult]) -> AttackResult:
    """Per example, keep the run that hurts the rejector most.

    Misclassified candidates beat correct ones; among misclassified, the
    highest R-Con wins; among correct ones, the lowest R-Con. Earlier runs win
    ties.
    """
    if not results:
        raise InvalidArgumentError("worst_case needs at least one attack result")
    best = results[0]
    for other in results[1:]:
        best_key = _severity(best)
        other_key = _severity(other)
        take = (other.success & ~best.success) | ((other.success == best.success) & (other_key > best_key))
        mask = take.unsqueeze(1)
        best = AttackResult(
            x_star=torch.where(mask, other.x_star, best.x_star),
            objective=torch.where(take, other.objective, best.objective),
            success=torch.where(take, other.success, best.success),
            r_con=torch.where(take, other.r_con, best.r_con),
            confidence=torch.where(take, other.confidence, best.confidence),
            y_m=torch.where(take, other.y_m, best.y_m),
            eps=torch.where(take, other.eps, best.eps),
        )
    return best


def _severity(result: AttackResult) -> torch.Tensor:
    return torch.where(result.success, result.r_con, -result.r_con)


def adaptive_sweep(
    model: TwoHeadNet,
    X,
    y,
    cfg: AttackConfig,
    threshold: float | None = None,
    tau_rr: float = 1.0,
) -> AttackResult:
    """Run every configured objective kind at every eta and keep the worst case."""
    runs = []
    for kind in cfg.kinds:
        for eta in cfg.eta_grid if kind != "ce" else (0.0,):
            run_cfg = cfg.adaptive(kind, eta)
            rng = rng_for(cfg.seed, "adaptive", kind, f"{eta:g}")
            result = pgd(model, X, y, run_cfg, objective_for(run_cfg, tau_rr), rng, threshold=threshold)
            log.info(
                "adaptive %s eta=%g: success rate %.3f",
                kind, eta, result.success.double().mean().item(),
            )
            runs.append(result)
    return worst_case(runs)


@dataclass
class MinDistortionResult:
    eps: torch.Tensor  # nan where not found
    found: torch.Tensor
    lo: torch.Tensor
    hi: torch.Tensor


def min_distortion(
    model: TwoHeadNet,
    X,
    y,
    rejector_median: float,
    cfg: AttackConfig,
    tau_rr: float = 1.0,
) -> MinDistortionResult:
    """Smallest radius (up to bisection resolution) with a successful attack.

    Success means the prediction is wrong and R-Con exceeds
    ``rejector_median``. The step size scales with the radius, 2.5 * eps /
    steps. After ``cfg.search_steps`` halvings the bracket [lo, hi] has width
    eps_max / 2**search_steps and ``hi`` is reported.
    """
    if not cfg.eps_max > 0:
        raise InvalidArgumentError(f"eps_max must be positive, got {cfg.eps_max}")
    X = as_tensor(X)
    n = X.shape[0]
    objective = objective_for(cfg, tau_rr)
    steps = max(cfg.steps, 1)

    def attempt(radius: torch.Tensor, tag: int) -> torch.Tensor:
        rng = rng_for(cfg.seed, "min-distortion", tag)
        result = pgd(
            model, X, y, cfg, objective, rng,
            eps=radius, alpha=2.5 * radius / steps, threshold=rejector_median,
        )
        return result.success

    lo = torch.zeros(n, dtype=X.dtype)
    hi = torch.full((n,), float(cfg.eps_max), dtype=X.dtype)
    found = attempt(hi, 0)
    for i in range(cfg.search_steps):
        mid = (lo + hi) / 2
        ok = attempt(mid, i + 1) & found
        hi = torch.where(ok, mid, hi)
        lo = torch.where(ok | ~found, lo, mid)
    eps = torch.where(found, hi, torch.full_like(hi, math.nan))
    log.info("min distortion: %d/%d found", int(found.sum()), n)
    return MinDistortionResult(eps=eps, found=found, lo=lo, hi=hi)


def epsilon_sweep(
    model: TwoHeadNet,
    X,
    y,
    cfg: AttackConfig,
    multipliers: Sequence[float] = (0, 1, 2, 4, 8),
) -> list[tuple[float, float]]:
    """PGD accuracy at eps * m for each multiplier.

    An example broken at a smaller radius counts as broken at every larger one,
    since its adversarial point lies inside the larger ball.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    broken = torch.zeros(len(y), dtype=torch.bool)
    rows = []
    for m in sorted(multipliers):
        run_cfg = replace(cfg, epsilon=cfg.epsilon * m, step_size=cfg.alpha * m)
        result = pgd(model, X, y, run_cfg, rng=rng_for(cfg.seed, "sweep", f"{m:g}"))
        broken |= result.success
        rows.append((run_cfg.epsilon, 1.0 - broken.double().mean().item()))
        log.info("eps=%g: PGD accuracy %.4f", run_cfg.epsilon, rows[-1][1])
    return rows
