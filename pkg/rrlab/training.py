"""Adversarial training of the two-head network with the RR loss.

The outer objective per batch is

    pgd-at:  mean[ CE(f(x*), y) + lam * L_RR(x*) ]
    trades:  mean[ CE(f(x), y) + beta * KL(f(x) || f(x*)) + lam * L_RR(x*) ]

where x* comes from an inner PGD run that touches neither the parameters nor
the batch-norm running statistics.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from rrlab.attacks import ce_objective, pgd
from rrlab.checkpoint import Checkpoint
from rrlab.config import AttackConfig, Config, TrainConfig, config_digest
from rrlab.data import Dataset
from rrlab.errors import EvaluationError, InvalidArgumentError, TrainingError
from rrlab.losses import rr_loss
from rrlab.model import BNMode, HeadOutputs, TwoHeadNet, bn_mode, call_with, init_params
from rrlab.numkit import cross_entropy, kl_divergence
from rrlab.seeding import rng_for

__all__ = ["BatchObjective", "TrainLog", "batch_objective", "rr_loss", "train"]

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


@dataclass
class BatchObjective:
    loss: float
    cls_loss: float
    rr_loss: float
    grads: list[torch.Tensor]
    x_star: torch.Tensor


def _inner_objective(cfg: TrainConfig, clean_probs: torch.Tensor | None):
    if cfg.framework == "trades":
        target = clean_probs.detach()

        def trades_objective(outputs: HeadOutputs, y):
            value = kl_divergence(target, outputs.probs)
            if cfg.attack_includes_aphi:
                value = value + cfg.lam * rr_loss(outputs, y, cfg.tau_rr, cfg.rcon_mode)
            return value

        return trades_objective
    if cfg.attack_includes_aphi:
        return lambda outputs, y: cross_entropy(outputs.probs, y) + cfg.lam * rr_loss(
            outputs, y, cfg.tau_rr, cfg.rcon_mode
        )
    return ce_objective


def objective_terms(
    forward,
    X: torch.Tensor,
    x_star: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    clean_forward=None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-example (classification, RR) terms given the adversarial points.

    ``forward`` maps an input batch to HeadOutputs; ``clean_forward``, if
    given, replaces it for the clean batch. The classification term includes
    the TRADES KL part.
    """
    adv = forward(x_star)
    rr = rr_loss(adv, y, cfg.tau_rr, cfg.rcon_mode)
    if cfg.framework == "trades" or cfg.rr_on_clean:
        clean = (clean_forward or forward)(X)
    if cfg.framework == "trades":
        cls = cross_entropy(clean.probs, y) + cfg.trades_beta * kl_divergence(clean.probs, adv.probs)
    else:
        cls = cross_entropy(adv.probs, y)
    if cfg.rr_on_clean:
        rr = rr + rr_loss(clean, y, cfg.tau_rr, cfg.rcon_mode)
    return cls, rr


def batch_objective(
    model: TwoHeadNet,
    X: torch.Tensor,
    y: torch.Tensor,
    cfg: TrainConfig,
    attack_cfg: AttackConfig,
    rng: np.random.Generator | None = None,
    x_star: torch.Tensor | None = None,
    mode: BNMode | str = BNMode.TRAIN,
    batch_index: int = 0,
) -> BatchObjective:
    """Objective value and gradients for one batch.

    Pass ``x_star`` to skip the inner attack and hold the adversarial points
    fixed.
    """
    if X.shape[0] == 0:
        raise InvalidArgumentError("empty batch")
    y = torch.as_tensor(y, dtype=torch.long)
    if x_star is None:
        clean_probs = None
        if cfg.framework == "trades":
            with torch.no_grad(), bn_mode(model, BNMode.EVAL):
                clean_probs = model(X).probs
        result = pgd(
            model, X, y, attack_cfg,
            objective=_inner_objective(cfg, clean_probs),
            rng=rng if rng is not None else rng_for(attack_cfg.seed, "train-attack", batch_index),
            mode=cfg.attack_bn_mode,
        )
        x_star = result.x_star

    def clean_forward(inputs):
        # throwaway buffers: only the adversarial pass moves the running stats
        names, buffers = zip(*((n, b.clone()) for n, b in model.named_buffers()))
        return call_with(model, names, buffers, inputs)

    with bn_mode(model, mode):
        cls, rr = objective_terms(model, X, x_star, y, cfg, clean_forward)
        cls_mean = cls.mean()
        rr_mean = rr.mean()
        loss = cls_mean + cfg.lam * rr_mean
    if not torch.isfinite(loss):
        raise EvaluationError(f"non-finite objective in batch {batch_index}")

    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    return BatchObjective(
        loss=loss.item(),
        cls_loss=cls_mean.item(),
        rr_loss=rr_mean.item(),
        grads=grads,
        x_star=x_star,
    )


@dataclass
class EpochRecord:
    epoch: int
    cls_loss: float
    rr_loss: float
    clean_acc: float
    pgd_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    final: Checkpoint | None = None

    HEADER = ("epoch", "cls_loss", "rr_loss", "clean_acc", "pgd_acc", "seconds")

    def rows(self) -> list[tuple]:
        return [
            (r.epoch, r.cls_loss, r.rr_loss, r.clean_acc, r.pgd_acc, r.seconds)
            for r in self.records
        ]


def predict(model: TwoHeadNet, X, tau: float = 1.0) -> HeadOutputs:
    """Eval-mode forward over a dataset in chunks, without gradients."""
    X = torch.as_tensor(X, dtype=torch.float64)
    parts = []
    with torch.no_grad(), bn_mode(model, BNMode.EVAL):
        for start in range(0, X.shape[0], EVAL_CHUNK):
            parts.append(model(X[start:start + EVAL_CHUNK], tau))
    return HeadOutputs(
        logits=torch.cat([p.logits for p in parts]),
        probs=torch.cat([p.probs for p in parts]),
        confidence=torch.cat([p.confidence for p in parts]),
        y_m=torch.cat([p.y_m for p in parts]),
        a_phi=torch.cat([p.a_phi for p in parts]),
        r_con=torch.cat([p.r_con for p in parts]),
        tau=tau,
    )


def robust_accuracy(model: TwoHeadNet, data: Dataset, attack_cfg: AttackConfig, rng) -> tuple[float, float]:
    X = torch.from_numpy(data.X)
    y = torch.from_numpy(data.y)
    clean = predict(model, X)
    clean_acc = (clean.y_m == y).double().mean().item()
    result = pgd(model, X, y, attack_cfg, rng=rng)
    return clean_acc, 1.0 - result.success.double().mean().item()


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if batches and len(batches[-1]) == 1:
        # train-mode batch norm cannot normalize a single row
        log.warning("Dropping trailing batch of size 1")
        batches.pop()
    return batches


def train(config: Config, train_set: Dataset, val_set: Dataset) -> tuple[Checkpoint, TrainLog]:
    """Train from scratch; return the checkpoint with the best validation PGD
    accuracy and the per-epoch log (whose ``final`` holds the last state)."""
    tc = config.train
    ac = config.attack
    arch = config.model.architecture(train_set.dim, train_set.n_classes)
    digest = config_digest(config)
    model = init_params(arch, tc.seed)

    batches_per_epoch = len(_batches(np.arange(len(train_set)), tc.batch_size))
    if tc.epochs > 0 and batches_per_epoch < 2:
        raise InvalidArgumentError(
            f"training set of {len(train_set)} rows gives {batches_per_epoch} batch(es) of "
            f"{tc.batch_size}; need at least 2"
        )

    optimizer = torch.optim.SGD(
        model.parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(tc.milestones), gamma=tc.decay)
    params = list(model.parameters())
    X_all = torch.from_numpy(train_set.X)
    y_all = torch.from_numpy(train_set.y)

    best = Checkpoint.from_model(model, digest, tc.seed, epoch=0)
    best_acc = -1.0
    train_log = TrainLog()
    log.info(
        "Training %s (lam=%g, tau_rr=%g, mode=%s) for %d epochs on %d rows",
        tc.framework, tc.lam, tc.tau_rr, tc.rcon_mode, tc.epochs, len(train_set),
    )

    for epoch in range(1, tc.epochs + 1):
        started = time.monotonic()
        order = rng_for(tc.seed, "shuffle", epoch).permutation(len(train_set))
        cls_total = rr_total = 0.0
        batches = _batches(order, tc.batch_size)
        for step, idx in enumerate(batches):
            index = torch.from_numpy(idx)
            try:
                result = batch_objective(
                    model, X_all[index], y_all[index], tc, ac,
                    rng=rng_for(tc.seed, "attack", epoch, step),
                    batch_index=step,
                )
            except EvaluationError as e:
                raise TrainingError(str(e), epoch, step) from e
            for p, g in zip(params, result.grads):
                p.grad = g
            optimizer.step()
            if not all(torch.isfinite(p).all() for p in params):
                raise TrainingError("parameters diverged", epoch, step)
            cls_total += result.cls_loss
            rr_total += result.rr_loss
            log.debug("epoch %d step %d: loss %.5f", epoch, step, result.loss)
        scheduler.step()

        clean_acc, pgd_acc = robust_accuracy(model, val_set, ac, rng_for(tc.seed, "validate", epoch))
        record = EpochRecord(
            epoch=epoch,
            cls_loss=cls_total / len(batches),
            rr_loss=rr_total / len(batches),
            clean_acc=clean_acc,
            pgd_acc=pgd_acc,
            seconds=round(time.monotonic() - started, 3),
        )
        train_log.records.append(record)
        log.info(
            "Epoch %d/%d: cls %.4f rr %.4f clean %.4f pgd %.4f (%.1fs)",
            epoch, tc.epochs, record.cls_loss, record.rr_loss, clean_acc, pgd_acc, record.seconds,
        )
        if pgd_acc > best_acc:
            best_acc = pgd_acc
            best = Checkpoint.from_model(model, digest, tc.seed, epoch=epoch)
            train_log.best_epoch = epoch
            log.info("New best PGD accuracy %.4f at epoch %d", pgd_acc, epoch)

    train_log.final = Checkpoint.from_model(model, digest, tc.seed, epoch=tc.epochs)
    return best, train_log
