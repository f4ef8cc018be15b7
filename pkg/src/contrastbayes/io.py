"""File formats.

* Fields: headerless CSV, one grid row per line.  Leading ``#`` lines carry
  provenance (``# key: value``).
* Transects: one height (mm) per line, ``#`` lines ignored, plus a JSON
  manifest listing the files and the spacing.
* Reports: JSON with sorted keys.
* Posterior grids: CSV with one column per parameter and a ``density``
  column; marginals likewise.

Reals are written with 17 significant digits so that reading a file back
reproduces the in-memory values exactly.  Every write goes through a
temporary file and an atomic rename.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .simulators import LatticeField, SurfaceSample

MANIFEST_FORMAT = "contrastbayes-transects"
MIN_TRANSECT_POINTS = 10


class DataFormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _real(x: float) -> str:
    return format(float(x), ".17g")


def _header(provenance: Mapping | None) -> str:
    if not provenance:
        return ""
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True)}\n" for k, v in provenance.items())


def _data_lines(path: Path) -> Iterable[tuple[int, str]]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc})") from exc
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield no, s


def read_provenance(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.startswith("#"):
            break
        key, _, val = line[1:].partition(":")
        try:
            out[key.strip()] = json.loads(val)
        except json.JSONDecodeError:
            out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------- fields


def write_field_csv(path, fld: LatticeField, provenance: Mapping | None = None) -> Path:
    prov = dict(provenance or {})
    prov["kind"] = "binary" if fld.binary else "real"
    prov["spacing"] = fld.spacing
    if fld.binary:
        rows = (",".join(str(int(v)) for v in row) for row in fld.values)
    else:
        rows = (",".join(_real(v) for v in row) for row in fld.values)
    return atomic_write_text(path, _header(prov) + "\n".join(rows) + "\n")


def read_field_csv(path, binary: bool | None = None) -> LatticeField:
    """Square field from CSV; ``binary`` defaults to the header, else to 0/1 detection."""
    path = Path(path)
    rows = []
    for no, line in _data_lines(path):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise DataFormatError(f"{path}:{no}: non-numeric value in {line!r}") from None
    n = len(rows)
    if n == 0 or any(len(r) != n for r in rows):
        raise DataFormatError(f"{path}: field must be a non-empty square table")
    values = np.array(rows)
    prov = read_provenance(path)
    if binary is None:
        binary = prov.get("kind") == "binary" if "kind" in prov else bool(np.all((values == 0) | (values == 1)))
    spacing = float(prov.get("spacing", 1.0))
    if binary:
        if not np.all((values == 0) | (values == 1)):
            raise DataFormatError(f"{path}: binary field contains values other than 0 and 1")
        values = values.astype(np.int8)
    return LatticeField(values, spacing, binary=binary)


# ---------------------------------------------------------------- transects


def read_transect_file(path) -> np.ndarray:
    path = Path(path)
    heights = []
    for no, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 1:
            raise DataFormatError(f"{path}:{no}: expected one height per line, got {line!r}")
        try:
            v = float(parts[0])
        except ValueError:
            raise DataFormatError(f"{path}:{no}: non-numeric height {parts[0]!r}") from None
        if not math.isfinite(v):
            raise DataFormatError(f"{path}:{no}: height is not finite")
        heights.append(v)
    if len(heights) < MIN_TRANSECT_POINTS:
        raise DataFormatError(f"{path}: a transect needs at least {MIN_TRANSECT_POINTS} heights, got {len(heights)}")
    return np.array(heights)


def write_transects(directory, stem: str, sample: SurfaceSample, provenance: Mapping | None = None) -> Path:
    """One file per transect plus ``<stem>.json``; returns the manifest path."""
    directory = Path(directory)
    names = []
    width = max(2, len(str(len(sample.transects))))
    for k, t in enumerate(sample.transects, start=1):
        name = f"{stem}_{k:0{width}d}.txt"
        atomic_write_text(directory / name, _header(provenance) + "".join(_real(v) + "\n" for v in t))
        names.append(name)
    manifest = {"format": MANIFEST_FORMAT, "spacing_mm": sample.spacing, "files": names,
                "provenance": dict(provenance or {})}
    return write_json(directory / f"{stem}.json", manifest)


def read_transect_manifest(path) -> tuple[tuple[np.ndarray, ...], float]:
    path = Path(path)
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(meta, dict) or meta.get("format") != MANIFEST_FORMAT:
        raise DataFormatError(f"{path}: not a transect manifest")
    try:
        spacing = float(meta["spacing_mm"])
        files = list(meta["files"])
    except (KeyError, TypeError, ValueError):
        raise DataFormatError(f"{path}: manifest needs 'spacing_mm' and 'files'") from None
    if not files or not spacing > 0:
        raise DataFormatError(f"{path}: manifest lists no files or a non-positive spacing")
    return tuple(read_transect_file(path.parent / f) for f in files), spacing


def read_surface_sample(path) -> SurfaceSample:
    transects, spacing = read_transect_manifest(path)
    return SurfaceSample(transects, spacing)


# ---------------------------------------------------------------- reports and grids


def to_jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_table_csv(path, columns: Mapping[str, np.ndarray], provenance: Mapping | None = None) -> Path:
    names = list(columns)
    cols = [np.asarray(columns[k], dtype=float).reshape(-1) for k in names]
    if len({c.size for c in cols}) != 1:
        raise ValueError("columns differ in length")
    body = "".join(",".join(_real(v) for v in row) + "\n" for row in zip(*cols))
    return atomic_write_text(path, _header(provenance) + ",".join(names) + "\n" + body)


def write_grid_csv(path, grid, names: Iterable[str], provenance: Mapping | None = None) -> Path:
    """Posterior grid in long form: parameter columns then ``density``."""
    names = list(names)
    pts = grid.points()
    cols = {name: pts[:, i] for i, name in enumerate(names)}
    cols["density"] = grid.density.reshape(-1)
    return write_table_csv(path, cols, provenance)


def write_marginal_csv(path, grid, axis: int, name: str, provenance: Mapping | None = None) -> Path:
    x, dens = grid.marginal(axis)
    return write_table_csv(path, {name: x, "density": dens}, provenance)
