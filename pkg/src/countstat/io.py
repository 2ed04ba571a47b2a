"""Model files, tabular/JSON emission and run manifests."""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SUBSIDIARY_FORMS, CountingModel, ModelError

__version__ = "0.1.0"

MODEL_KEYS = {
    "b_mean": float,
    "b_rel_sigma": float,
    "b_subsidiary_form": str,
    "eff_mean": float,
    "eff_rel_sigma": float,
    "eff_subsidiary_form": str,
    "tau": float,
}
_FIELD = {"b_subsidiary_form": "b_form", "eff_subsidiary_form": "eff_form"}


class ModelFileError(ModelError):
    pass


def parse_model(text: str, source: str = "<model>") -> CountingModel:
    """Parse ``key = value`` lines into a :class:`CountingModel`.

    Blank lines and ``#`` comments are ignored. Unknown or repeated keys and
    bad values are errors that name the line.
    """
    values: dict[str, object] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ModelFileError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in MODEL_KEYS:
            raise ModelFileError(
                f"{source}:{lineno}: unknown key {key!r}; allowed keys: {', '.join(MODEL_KEYS)}"
            )
        if key in seen:
            raise ModelFileError(f"{source}:{lineno}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        try:
            v = MODEL_KEYS[key](val)
        except ValueError:
            raise ModelFileError(f"{source}:{lineno}: {key} needs a number, got {val!r}") from None
        if MODEL_KEYS[key] is str and v not in SUBSIDIARY_FORMS:
            raise ModelFileError(
                f"{source}:{lineno}: {key} must be one of {', '.join(SUBSIDIARY_FORMS)}, got {val!r}"
            )
        if isinstance(v, float) and not math.isfinite(v):
            raise ModelFileError(f"{source}:{lineno}: {key} must be finite, got {val!r}")
        values[_FIELD.get(key, key)] = v
    try:
        return CountingModel(**values)
    except ModelError as exc:
        raise ModelFileError(f"{source}: {exc}") from None


def load_model(path: str | Path) -> CountingModel:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ModelFileError(f"{p}: cannot read model file ({exc.strerror})") from None
    return parse_model(text, str(p))


def format_model(model: CountingModel) -> str:
    lines = [
        f"b_mean = {model.b_mean!r}",
        f"b_rel_sigma = {model.b_rel_sigma!r}",
        f"b_subsidiary_form = {model.b_form}",
        f"eff_mean = {model.eff_mean!r}",
        f"eff_rel_sigma = {model.eff_rel_sigma!r}",
        f"eff_subsidiary_form = {model.eff_form}",
    ]
    if model.tau is not None:
        lines.append(f"tau = {model.tau!r}")
    return "\n".join(lines) + "\n"


@dataclass
class RunManifest:
    command: str
    parameters: dict
    seed: int | None
    version: str = __version__
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "parameters": self.parameters,
            "seed": self.seed,
            "version": self.version,
            "python": self.python,
            "numpy": self.numpy,
            "wall_time": self.wall_time,
        }


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def format_number(v) -> str:
    """Six significant digits; scientific notation below 1e-4 in magnitude."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if v == 0:
            return "0"
        return f"{v:.6g}"
    return str(v)


def to_csv(records: list[dict]) -> str:
    if not records:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(records[0])
    w.writerow(header)
    for r in records:
        w.writerow([format_number(r.get(k)) for k in header])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        # JSON has no infinities; spell them out
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return v


def to_json(records: list[dict], manifest: RunManifest) -> str:
    doc = {"manifest": manifest.as_dict(), "results": records}
    return json.dumps(_jsonable(doc), indent=2, allow_nan=False) + "\n"


def emit(records: list[dict], fmt: str, destination: str | None, manifest: RunManifest,
         stdout=None) -> None:
    """Write results as CSV or JSON to ``destination`` (stdout when ``None``).

    CSV output written to a file gets a ``.manifest.json`` sidecar.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    text = to_csv(records) if fmt == "csv" else to_json(records, manifest)
    if destination is None:
        (stdout or sys.stdout).write(text)
        return
    path = Path(destination)
    path.write_text(text)
    if fmt == "csv":
        side = path.with_name(path.name + ".manifest.json")
        side.write_text(json.dumps(_jsonable(manifest.as_dict()), indent=2) + "\n")


def coverage_records(curve) -> list[dict]:
    return [
        {"s_true": float(s), "coverage": float(c), "stderr": float(e), "n_toys": int(curve.n_toys)}
        for s, c, e in zip(curve.s_true, curve.coverage, curve.stderr)
    ]


def read_table(path: str | Path, required: tuple[str, ...]) -> list[dict[str, str]]:
    """Rows of a headed CSV file, checking that the required columns exist."""
    p = Path(path)
    try:
        with p.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
            header = rows[0].keys() if rows else []
    except OSError as exc:
        raise ModelFileError(f"{p}: cannot read ({exc.strerror})") from None
    if not rows:
        raise ModelFileError(f"{p}: no data rows")
    missing = [c for c in required if c not in header]
    if missing:
        raise ModelFileError(f"{p}: missing column(s) {', '.join(missing)}")
    return rows


def column(rows, name: str, source: str) -> np.ndarray:
    out = []
    for i, r in enumerate(rows, start=2):
        try:
            out.append(float(r[name]))
        except (TypeError, ValueError):
            raise ModelFileError(f"{source}:{i}: column {name!r} needs a number, got {r[name]!r}") from None
    return np.array(out)
