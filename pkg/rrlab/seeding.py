"""Seed derivation.

Every stochastic component draws from its own PCG64 stream derived from the
run's master seed and a purpose tag, e.g. ``rng_for(seed, "init")`` or
``rng_for(seed, "attack", epoch, step)``. Adding a consumer never shifts
another consumer's stream.
"""

import logging
import os
import zlib

import numpy as np
import torch

from rrlab.errors import InvalidArgumentError

log = logging.getLogger(__name__)

_THREADS_ENV = "RRLAB_THREADS"


def _tag_word(tag: object) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode())


def derive_seed(master: int, *tags: object) -> np.random.SeedSequence:
    if master < 0:
        raise InvalidArgumentError(f"seed must be non-negative, got {master}")
    entropy = [master & 0xFFFFFFFF, (master >> 32) & 0xFFFFFFFF]
    entropy.extend(_tag_word(t) for t in tags)
    return np.random.SeedSequence(entropy)


def rng_for(master: int, *tags: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))


def thread_limit() -> int:
    raw = os.environ.get(_THREADS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        log.warning("Ignoring non-integer %s=%r", _THREADS_ENV, raw)
        return os.cpu_count() or 1
    return max(1, value)


def configure_threads() -> int:
    n = thread_limit()
    torch.set_num_threads(n)
    log.debug("Using %d threads", n)
    return n
