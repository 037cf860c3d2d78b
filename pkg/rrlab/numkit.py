"""Dense float64 kernels: temperature softmax, losses and a gradient checker.

Every kernel accepts a single vector or a batch with a leading dimension and
returns one value per row. Tensors are ``torch.float64`` throughout.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import torch

from rrlab.errors import EvaluationError, InvalidArgumentError

log = logging.getLogger(__name__)

CE_CLAMP = 1e-12
BCE_CLAMP = 1e-6
KL_CLAMP = 1e-12

DTYPE = torch.float64


def as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(values, dtype=DTYPE)


def _labels(y, batch_shape: torch.Size, n_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(y, dtype=torch.long)
    if labels.shape != batch_shape:
        labels = labels.expand(batch_shape) if labels.dim() == 0 else labels
    if labels.shape != batch_shape:
        raise InvalidArgumentError(
            f"label shape {tuple(labels.shape)} does not match batch shape {tuple(batch_shape)}"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgumentError(f"label out of range [0, {n_classes})")
    return labels


def pick(values: torch.Tensor, y) -> torch.Tensor:
    """values[..., y] per row, with range checking."""
    labels = _labels(y, values.shape[:-1], values.shape[-1])
    return values.gather(-1, labels.unsqueeze(-1)).squeeze(-1)


def softmax_t(logits, tau: float = 1.0) -> torch.Tensor:
    logits = as_tensor(logits)
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    if logits.shape[-1] < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {logits.shape[-1]}")
    if not torch.isfinite(logits).all():
        raise InvalidArgumentError("logits must be finite")
    # torch.softmax subtracts the row max before exponentiating
    return torch.softmax(logits / tau, dim=-1)


def predicted_label(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index
    return torch.argmax(logits, dim=-1)


def cross_entropy(p, y) -> torch.Tensor:
    p = as_tensor(p)
    return -torch.log(pick(p, y).clamp(CE_CLAMP, 1 - CE_CLAMP))


@dataclass
class StopGradScalar:
    """A value paired with a flag saying whether gradients may flow through it.

    ``grad_enabled`` may be a bool or a boolean tensor matching ``value`` for
    per-row decisions.
    """

    value: torch.Tensor
    grad_enabled: bool | torch.Tensor = False

    def resolve(self) -> torch.Tensor:
        value = as_tensor(self.value)
        if isinstance(self.grad_enabled, torch.Tensor):
            return torch.where(self.grad_enabled, value, value.detach())
        return value if self.grad_enabled else value.detach()


def _check_unit_interval(name: str, t: torch.Tensor):
    if not torch.isfinite(t).all() or (t < 0).any() or (t > 1).any():
        raise InvalidArgumentError(f"{name} must lie in [0, 1]")


def binary_cross_entropy(pred, target) -> torch.Tensor:
    """BCE with gradients through both arguments."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    _check_unit_interval("pred", pred)
    _check_unit_interval("target", target)
    f = pred.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -target * torch.log(f) - (1 - target) * torch.log(1 - f)


def bce_stopgrad(pred, target) -> torch.Tensor:
    """Binary cross-entropy whose target never carries gradient."""
    if isinstance(target, StopGradScalar):
        target = target.value
    return binary_cross_entropy(pred, as_tensor(target).detach())


def kl_divergence(p, q) -> torch.Tensor:
    p = as_tensor(p)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise InvalidArgumentError(
            f"kl_divergence shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}"
        )
    ratio = torch.log(p.clamp_min(KL_CLAMP)) - torch.log(q.clamp_min(KL_CLAMP))
    return (p * ratio).sum(dim=-1)


@dataclass(frozen=True, slots=True)
class FiniteDiffReport:
    max_rel_error: float
    passed: bool
    worst_param: int
    worst_index: int
    analytic: float
    numeric: float
    n_coords: int


def finite_diff_check(
    fn: Callable[[Sequence[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    reference_fn: Callable[[Sequence[torch.Tensor]], torch.Tensor] | None = None,
) -> FiniteDiffReport:
    """Compare autograd gradients of ``fn`` with central differences.

    ``reference_fn`` is differenced instead of ``fn`` when given; use it to
    supply the objective with gradient-stopped quantities frozen as constants.
    """
    if not 0 < step <= 1e-2:
        raise InvalidArgumentError(f"step must be in (0, 1e-2], got {step}")
    reference_fn = reference_fn or fn

    leaves = [as_tensor(p).detach().clone().requires_grad_(True) for p in params]
    value = fn(leaves)
    if not torch.isfinite(value):
        raise EvaluationError("function value is not finite at the base point")
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    analytic = [
        torch.zeros_like(p) if g is None else g.detach() for p, g in zip(leaves, grads)
    ]

    base = [p.detach().clone() for p in leaves]
    worst = (0.0, 0, 0, 0.0, 0.0)
    n_coords = 0
    with torch.no_grad():
        for pi, tensor in enumerate(base):
            flat = tensor.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                f_plus = reference_fn(base)
                flat[i] = original - step
                f_minus = reference_fn(base)
                flat[i] = original
                if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                    raise EvaluationError(
                        f"function value is not finite when perturbing param {pi} index {i}"
                    )
                numeric = (f_plus.item() - f_minus.item()) / (2 * step)
                a = analytic[pi].view(-1)[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst[0] or n_coords == 0:
                    worst = (rel, pi, i, a, numeric)
                n_coords += 1

    report = FiniteDiffReport(
        max_rel_error=worst[0],
        passed=worst[0] <= tol,
        worst_param=worst[1],
        worst_index=worst[2],
        analytic=worst[3],
        numeric=worst[4],
        n_coords=n_coords,
    )
    log.debug("finite_diff_check: %d coords, max rel error %.3g", n_coords, report.max_rel_error)
    return report
