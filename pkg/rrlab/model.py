"""Two-head network: shared ReLU backbone, linear classifier, rectifier head.

The rectifier head maps the backbone feature z to A_phi(x) in [0, 1] through
Linear -> BatchNorm1d -> ReLU -> Linear -> sigmoid. R-Con is the predicted
class probability times A_phi(x).
"""

import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from rrlab.errors import InvalidArgumentError
from rrlab.numkit import DTYPE, as_tensor, pick, predicted_label, softmax_t
from rrlab.seeding import rng_for

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BNMode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    widths: tuple[int, ...] = (64, 64)
    n_classes: int = 2
    aux_hidden: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise InvalidArgumentError(f"model.input_dim must be >= 1, got {self.input_dim}")
        if self.n_classes < 2:
            raise InvalidArgumentError(f"model.n_classes must be >= 2, got {self.n_classes}")
        if any(w < 1 for w in self.widths):
            raise InvalidArgumentError(f"model.widths must all be >= 1, got {list(self.widths)}")
        if self.aux_hidden is None:
            object.__setattr__(self, "aux_hidden", max(1, self.feature_dim // 2))
        elif self.aux_hidden < 1:
            raise InvalidArgumentError(f"model.aux_hidden must be >= 1, got {self.aux_hidden}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] if self.widths else self.input_dim


@dataclass
class HeadOutputs:
    """Forward results, batched along the first dimension (or a single row)."""

    logits: torch.Tensor
    probs: torch.Tensor
    confidence: torch.Tensor
    y_m: torch.Tensor
    a_phi: torch.Tensor
    r_con: torch.Tensor
    tau: float = 1.0

    @classmethod
    def from_logits(cls, logits: torch.Tensor, a_phi: torch.Tensor, tau: float = 1.0) -> "HeadOutputs":
        probs = softmax_t(logits, tau)
        y_m = predicted_label(logits)
        confidence = pick(probs, y_m)
        return cls(
            logits=logits,
            probs=probs,
            confidence=confidence,
            y_m=y_m,
            a_phi=a_phi,
            r_con=confidence * a_phi,
            tau=tau,
        )

    def __len__(self) -> int:
        return self.logits.shape[0] if self.logits.dim() > 1 else 1

    def row(self, i: int) -> "HeadOutputs":
        return HeadOutputs(
            logits=self.logits[i],
            probs=self.probs[i],
            confidence=self.confidence[i],
            y_m=self.y_m[i],
            a_phi=self.a_phi[i],
            r_con=self.r_con[i],
            tau=self.tau,
        )

    def rows(self) -> Iterator["HeadOutputs"]:
        for i in range(len(self)):
            yield self.row(i)

    def at_temperature(self, tau: float) -> "HeadOutputs":
        return HeadOutputs.from_logits(self.logits, self.a_phi, tau)


class TwoHeadNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        layers: list[nn.Module] = []
        fan_in = arch.input_dim
        for width in arch.widths:
            layers += [nn.Linear(fan_in, width, dtype=DTYPE), nn.ReLU()]
            fan_in = width
        self.backbone = nn.Sequential(*layers)
        self.head = nn.Linear(arch.feature_dim, arch.n_classes, dtype=DTYPE)
        self.aux = nn.Sequential(
            nn.Linear(arch.feature_dim, arch.aux_hidden, dtype=DTYPE),
            nn.BatchNorm1d(arch.aux_hidden, eps=BN_EPS, momentum=BN_MOMENTUM, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(arch.aux_hidden, 1, dtype=DTYPE),
        )

    def forward(self, x: torch.Tensor, tau: float = 1.0) -> HeadOutputs:
        z = self.backbone(x)
        logits = self.head(z)
        a_phi = torch.sigmoid(self.aux(z)).squeeze(-1)
        return HeadOutputs.from_logits(logits, a_phi, tau)

    @property
    def batch_norm(self) -> nn.BatchNorm1d:
        return self.aux[1]


def init_params(arch: Architecture, seed: int) -> TwoHeadNet:
    """Build a network with fan-in scaled uniform weights.

    Each weight matrix is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) on its
    own stream ``rng_for(seed, "init", name)``. Biases start at zero, batch norm
    at gamma=1, beta=0, mean=0, var=1.
    """
    model = TwoHeadNet(arch)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() == 2:
                bound = 1.0 / np.sqrt(param.shape[1])
                values = rng_for(seed, "init", name).uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values))
            elif name.endswith("weight"):
                param.fill_(1.0)
            else:
                param.zero_()
        model.batch_norm.reset_running_stats()
    model.eval()
    return model


@contextmanager
def bn_mode(model: TwoHeadNet, mode: BNMode | str):
    mode = BNMode(mode)
    was_training = model.training
    model.train(mode is BNMode.TRAIN)
    try:
        yield model
    finally:
        model.train(was_training)


def _check_batch(model: TwoHeadNet, X: torch.Tensor, mode: BNMode):
    if X.dim() != 2 or X.shape[1] != model.arch.input_dim:
        raise InvalidArgumentError(
            f"input has shape {tuple(X.shape)}, model expects (n, {model.arch.input_dim})"
        )
    if X.shape[0] < 1:
        raise InvalidArgumentError("empty batch")
    if mode is BNMode.TRAIN and X.shape[0] < 2:
        raise InvalidArgumentError("train-mode batch norm needs a batch of at least 2 rows")
    if not torch.isfinite(X).all():
        raise InvalidArgumentError("inputs must be finite")


def forward_batch(
    model: TwoHeadNet,
    X,
    tau_cls: float = 1.0,
    mode: BNMode | str = BNMode.EVAL,
) -> HeadOutputs:
    """Train mode normalizes with batch statistics and updates running stats."""
    mode = BNMode(mode)
    X = as_tensor(X)
    _check_batch(model, X, mode)
    with bn_mode(model, mode):
        return model(X, tau_cls)


def forward(model: TwoHeadNet, x, tau_cls: float = 1.0, mode: BNMode | str = BNMode.EVAL) -> HeadOutputs:
    x = as_tensor(x)
    if x.dim() != 1:
        raise InvalidArgumentError(f"forward expects a single input vector, got shape {tuple(x.shape)}")
    return forward_batch(model, x.unsqueeze(0), tau_cls, mode).row(0)


@dataclass
class ParamView:
    """Named parameter tensors of a model, for functional evaluation."""

    names: list[str]
    tensors: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def of(cls, model: TwoHeadNet, prefixes: Sequence[str] = ()) -> "ParamView":
        names, tensors = [], []
        for name, param in model.named_parameters():
            if prefixes and not name.startswith(tuple(prefixes)):
                continue
            names.append(name)
            tensors.append(param.detach().clone())
        return cls(names, tensors)


def call_with(
    model: TwoHeadNet,
    names: Sequence[str],
    tensors: Sequence[torch.Tensor],
    X: torch.Tensor,
    tau: float = 1.0,
) -> HeadOutputs:
    """Run the model with the named parameters replaced by ``tensors``."""
    return functional_call(model, dict(zip(names, tensors)), (X, tau))
