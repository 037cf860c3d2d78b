"""Versioned text checkpoint container.

Layout::

    RRLAB-CKPT v1
    meta <key> <value>          (one line per metadata field)
    array <name> <dim> [<dim>]  (followed by one line per row, values in %.17g)
    end

Values are printed with 17 significant digits, so every float64 survives a
save/load cycle bit-exactly.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from rrlab.artifacts import atomic_write_text
from rrlab.errors import ParseError, VersionError
from rrlab.model import Architecture, TwoHeadNet
from rrlab.numkit import DTYPE

log = logging.getLogger(__name__)

MAGIC = "RRLAB-CKPT"
FORMAT_VERSION = 1

# integer bookkeeping buffer, not part of the model's numerical state
_SKIPPED = "num_batches_tracked"


@dataclass
class Checkpoint:
    arch: Architecture
    state: dict[str, torch.Tensor]
    config_digest: str = ""
    seed: int = 0
    epoch: int = 0
    format_version: int = FORMAT_VERSION
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TwoHeadNet, config_digest: str = "", seed: int = 0, epoch: int = 0) -> "Checkpoint":
        state = {
            name: t.detach().clone()
            for name, t in model.state_dict().items()
            if not name.endswith(_SKIPPED)
        }
        return cls(arch=model.arch, state=state, config_digest=config_digest, seed=seed, epoch=epoch)

    def build_model(self) -> TwoHeadNet:
        model = TwoHeadNet(self.arch)
        expected = {n for n in model.state_dict() if not n.endswith(_SKIPPED)}
        if expected != set(self.state):
            missing = sorted(expected - set(self.state))
            unexpected = sorted(set(self.state) - expected)
            raise ParseError(
                f"checkpoint arrays do not match architecture (missing {missing}, unexpected {unexpected})"
            )
        model.load_state_dict(self.state, strict=False)
        model.eval()
        return model

    def same_as(self, other: "Checkpoint") -> bool:
        return (
            self.arch == other.arch
            and self.config_digest == other.config_digest
            and self.seed == other.seed
            and self.epoch == other.epoch
            and self.state.keys() == other.state.keys()
            and all(torch.equal(self.state[k], other.state[k]) for k in self.state)
        )


def _fmt(values) -> str:
    return " ".join(format(v, ".17g") for v in values)


def dumps(ckpt: Checkpoint) -> str:
    arch = ckpt.arch
    lines = [f"{MAGIC} v{ckpt.format_version}"]
    meta = {
        "input_dim": str(arch.input_dim),
        "widths": ",".join(str(w) for w in arch.widths) or "-",
        "n_classes": str(arch.n_classes),
        "aux_hidden": str(arch.aux_hidden),
        "config_digest": ckpt.config_digest or "-",
        "seed": str(ckpt.seed),
        "epoch": str(ckpt.epoch),
    }
    meta.update(ckpt.extra)
    lines += [f"meta {k} {v}" for k, v in meta.items()]
    for name, tensor in ckpt.state.items():
        t = tensor.detach().to(DTYPE)
        lines.append(f"array {name} {' '.join(str(d) for d in t.shape)}")
        if t.dim() == 2:
            lines += [_fmt(row) for row in t.tolist()]
        else:
            lines.append(_fmt(t.reshape(-1).tolist()))
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_checkpoint(ckpt: Checkpoint, path: Path):
    atomic_write_text(Path(path), dumps(ckpt))
    log.info("Wrote checkpoint %s (epoch %d)", path, ckpt.epoch)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self.offset = 0

    def next_line(self) -> tuple[int, str]:
        start = self.offset
        if start >= len(self._data):
            raise ParseError(f"unexpected end of file at byte {start}", start)
        end = self._data.find(b"\n", start)
        if end < 0:
            raise ParseError(f"unterminated line at byte {start}", start)
        self.offset = end + 1
        try:
            return start, self._data[start:end].decode("ascii")
        except UnicodeDecodeError as e:
            raise ParseError(f"non-ascii data at byte {start + e.start}", start + e.start) from None


def _floats(text: str, count: int, offset: int) -> list[float]:
    parts = text.split()
    if len(parts) != count:
        raise ParseError(f"expected {count} values at byte {offset}, got {len(parts)}", offset)
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"non-numeric value at byte {offset}", offset) from None


def loads(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    offset, header = reader.next_line()
    parts = header.split()
    if len(parts) != 2 or parts[0] != MAGIC or not parts[1].startswith("v"):
        raise ParseError(f"not an rrlab checkpoint (bad header at byte {offset})", offset)
    try:
        version = int(parts[1][1:])
    except ValueError:
        raise ParseError(f"bad version field at byte {offset}", offset) from None
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}", offset)

    meta: dict[str, str] = {}
    state: dict[str, torch.Tensor] = {}
    while True:
        offset, line = reader.next_line()
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            if not key or not value:
                raise ParseError(f"malformed meta line at byte {offset}", offset)
            meta[key] = value
        elif kind == "array":
            fields = rest.split()
            if not fields:
                raise ParseError(f"malformed array line at byte {offset}", offset)
            try:
                dims = [int(d) for d in fields[1:]]
            except ValueError:
                raise ParseError(f"bad array dims at byte {offset}", offset) from None
            if len(dims) == 2:
                rows = []
                for _ in range(dims[0]):
                    row_offset, text = reader.next_line()
                    rows.append(_floats(text, dims[1], row_offset))
                values = torch.tensor(rows, dtype=DTYPE).reshape(dims)
            else:
                row_offset, text = reader.next_line()
                count = 1
                for d in dims:
                    count *= d
                values = torch.tensor(_floats(text, count, row_offset), dtype=DTYPE).reshape(dims)
            state[fields[0]] = values
        else:
            raise ParseError(f"unknown record {kind!r} at byte {offset}", offset)

    try:
        widths_text = meta.pop("widths")
        arch = Architecture(
            input_dim=int(meta.pop("input_dim")),
            widths=() if widths_text == "-" else tuple(int(w) for w in widths_text.split(",")),
            n_classes=int(meta.pop("n_classes")),
            aux_hidden=int(meta.pop("aux_hidden")),
        )
        digest = meta.pop("config_digest")
        seed = int(meta.pop("seed"))
        epoch = int(meta.pop("epoch"))
    except KeyError as e:
        raise ParseError(f"missing metadata field {e.args[0]}", reader.offset) from None
    except ValueError as e:
        raise ParseError(f"bad metadata: {e}", reader.offset) from None

    return Checkpoint(
        arch=arch,
        state=state,
        config_digest="" if digest == "-" else digest,
        seed=seed,
        epoch=epoch,
        format_version=version,
        extra=meta,
    )


def load_checkpoint(path: Path) -> Checkpoint:
    ckpt = loads(Path(path).read_bytes())
    log.debug("Loaded checkpoint %s (epoch %d)", path, ckpt.epoch)
    return ckpt
