"""Output files: atomic writes, CSV tables, run manifests, gnuplot companions."""

import json
import logging
import os
import tempfile
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


def atomic_write_text(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".10g")
    if value is None:
        return ""
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    lines += [",".join(format_cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    atomic_write_text(path, render_csv(header, rows))
    log.info("Wrote %s", path)


def write_json(path: Path, data: dict):
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: str = ""
    seed: int | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    version: str = ""
    wall_seconds: float = 0.0
    exit_code: int | None = None
    error: str | None = None
    _started: float = field(default_factory=time.monotonic, repr=False)

    def add(self, role: str, path: Path):
        self.artifacts[role] = str(path)

    def finish(self, exit_code: int, error: str | None = None):
        self.exit_code = exit_code
        self.error = error
        self.wall_seconds = round(time.monotonic() - self._started, 3)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("_started")
        return data

    def write(self, out_dir: Path, name: str = "manifest.json") -> Path:
        path = Path(out_dir) / name
        write_json(path, self.to_dict())
        return path


_GNUPLOT_CURVES = {
    "pass_curve": (
        "xi",
        "samples passing",
        [(2, "correct pass"), (3, "wrong pass"), (4, "correct separated"), (5, "wrong separated")],
    ),
    "tau_summary": (
        "log2 tau",
        "value",
        [(2, "TPR acc (conf)"), (3, "TPR acc (tcon)")],
    ),
    "reliability": ("confidence", "accuracy", [(5, "accuracy")]),
    "certified_curve": ("xi", "count", [(2, "certified"), (3, "violations")]),
}


def write_gnuplot(csv_path: Path) -> Path:
    """Companion script plotting a known CSV schema; run with ``gnuplot -p``."""
    csv_path = Path(csv_path)
    stem = csv_path.stem
    key = next((k for k in _GNUPLOT_CURVES if stem == k or stem.startswith(k + "_")), None)
    if key is None:
        raise KeyError(f"no gnuplot layout for {csv_path.name}")
    xlabel, ylabel, series = _GNUPLOT_CURVES[key]
    plots = ", ".join(
        f"'{csv_path.name}' using 1:{col} with linespoints title '{title}'" for col, title in series
    )
    script = "\n".join([
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{xlabel}'",
        f"set ylabel '{ylabel}'",
        f"plot {plots}",
        "",
    ])
    path = csv_path.with_suffix(".gp")
    atomic_write_text(path, script)
    return path
