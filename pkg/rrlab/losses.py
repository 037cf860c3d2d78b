"""The rectified-rejection loss and the per-example objective terms built on it."""

import torch

from rrlab.config import RCON_MODES
from rrlab.errors import InvalidArgumentError
from rrlab.model import HeadOutputs
from rrlab.numkit import (
    StopGradScalar,
    bce_stopgrad,
    binary_cross_entropy,
    pick,
    softmax_t,
)


def rr_loss(
    outputs: HeadOutputs,
    y,
    tau_rr: float = 1.0,
    mode: str = "rcon",
    stop_gradients: bool = True,
) -> torch.Tensor:
    """BCE between the predicted R-Con and T-Con, both at temperature ``tau_rr``.

    With ``stop_gradients`` the T-Con target is a constant, and the confidence
    factor is a constant on rows where the prediction is correct. Without it
    every path carries gradient (used by adaptive attackers).

    ``mode`` swaps the prediction: ``aphi-only`` uses A_phi alone and
    ``conf-only`` the confidence alone.
    """
    if mode not in RCON_MODES:
        raise InvalidArgumentError(f"rcon mode must be one of {', '.join(RCON_MODES)}, got {mode!r}")
    probs = softmax_t(outputs.logits, tau_rr)
    tcon = pick(probs, y)
    conf = pick(probs, outputs.y_m)
    if stop_gradients:
        correct = outputs.y_m == torch.as_tensor(y, dtype=torch.long)
        conf = StopGradScalar(conf, grad_enabled=~correct).resolve()

    if mode == "rcon":
        pred = conf * outputs.a_phi
    elif mode == "aphi-only":
        pred = outputs.a_phi
    else:
        pred = conf

    if stop_gradients:
        return bce_stopgrad(pred, StopGradScalar(tcon))
    return binary_cross_entropy(pred, tcon)


def optimal_rectifier(outputs: HeadOutputs, y) -> torch.Tensor:
    """A*_phi = p[y] / p[y_m], the minimizer of the RR loss over A_phi."""
    return pick(outputs.probs, y) / pick(outputs.probs, outputs.y_m).clamp_min(1e-12)
