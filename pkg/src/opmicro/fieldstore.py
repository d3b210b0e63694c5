"""Typed field containers and deterministic array I/O.

Everything in the package passes 2D data around as :class:`ScalarField` and
time series as :class:`FrameStack`.  Stacks are persisted as NPY v1.0 files
with an optional ``<name>.meta.json`` sidecar holding times, pixel size and
value range.  Small frames can also be imported from CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

CANONICAL_AXES = "THWC"
NPY_MAGIC = b"\x93NUMPY"


class FieldError(ValueError):
    """Raised for malformed, non-finite or inconsistently shaped data."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScalarField:
    """One 2D array of finite real values (rows = y, columns = x)."""

    data: np.ndarray
    pixel_size: float | None = None
    value_range: tuple[float, float] | None = None

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise FieldError(f"ScalarField needs a non-empty 2D array, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise FieldError("ScalarField contains non-finite values")
        if self.value_range is not None:
            lo, hi = (float(v) for v in self.value_range)
            if not lo < hi:
                raise FieldError(f"value_range must satisfy min < max, got {self.value_range}")
            object.__setattr__(self, "value_range", (lo, hi))
        object.__setattr__(self, "data", _readonly(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def span(self, default: float = 1.0) -> float:
        """Width of the declared value range, or ``default`` when undeclared."""
        if self.value_range is None:
            return default
        return self.value_range[1] - self.value_range[0]

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and self.pixel_size == other.pixel_size
            and self.value_range == other.value_range
        )


@dataclass(frozen=True, eq=False)
class FrameStack:
    """Ordered frames stored as one canonical ``(T, H, W, C)`` array.

    ``C`` is 1 for grayscale and 3 for colour.  ``times`` must be strictly
    increasing; frame indices are used when none are given.
    """

    data: np.ndarray
    times: np.ndarray | None = None
    pixel_size: float | None = None
    value_range: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 3:
            a = a[..., None]
        if a.ndim != 4:
            raise FieldError(f"FrameStack needs a (T,H,W[,C]) array, got shape {a.shape}")
        if min(a.shape[:3]) < 1:
            raise FieldError(f"empty FrameStack, shape {a.shape}")
        if a.shape[3] not in (1, 3):
            raise FieldError(f"channel count must be 1 or 3, got {a.shape[3]}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise FieldError("FrameStack contains non-finite values")
        t = np.arange(a.shape[0], dtype=np.float64) if self.times is None else np.asarray(self.times, dtype=np.float64)
        if t.shape != (a.shape[0],):
            raise FieldError(f"times has length {t.size}, expected {a.shape[0]}")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise FieldError("times must be strictly increasing")
        if self.value_range is not None:
            lo, hi = (float(v) for v in self.value_range)
            if not lo < hi:
                raise FieldError(f"value_range must satisfy min < max, got {self.value_range}")
            object.__setattr__(self, "value_range", (lo, hi))
        object.__setattr__(self, "data", _readonly(a))
        object.__setattr__(self, "times", _readonly(t))
        object.__setattr__(self, "meta", dict(self.meta))

    @classmethod
    def from_fields(cls, fields: Sequence[ScalarField], times=None, **kw) -> "FrameStack":
        if not fields:
            raise FieldError("cannot build a FrameStack from zero frames")
        shapes = {f.shape for f in fields}
        if len(shapes) != 1:
            raise FieldError(f"frames have differing shapes: {sorted(shapes)}")
        kw.setdefault("pixel_size", fields[0].pixel_size)
        kw.setdefault("value_range", fields[0].value_range)
        return cls(np.stack([f.data for f in fields]), times=times, **kw)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def frame(self, i: int, channel: int = 0) -> ScalarField:
        return ScalarField(self.data[i, :, :, channel], self.pixel_size, self.value_range)

    @property
    def frames(self) -> list[ScalarField]:
        """Frames of the first channel."""
        return [self.frame(i) for i in range(self.n_frames)]

    def gray(self) -> np.ndarray:
        """``(T, H, W)`` view of a single-channel stack."""
        if self.channels != 1:
            raise FieldError("stack has colour channels; use .data")
        return self.data[..., 0]

    def replace(self, data=None, **kw) -> "FrameStack":
        """New stack with the same metadata and (optionally) new data."""
        args = dict(
            data=self.data if data is None else data,
            times=self.times,
            pixel_size=self.pixel_size,
            value_range=self.value_range,
            meta=self.meta,
        )
        args.update(kw)
        return FrameStack(**args)

    def __len__(self):
        return self.n_frames

    def __eq__(self, other):
        if not isinstance(other, FrameStack):
            return NotImplemented
        return (
            self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.times, other.times)
            and self.pixel_size == other.pixel_size
            and self.value_range == other.value_range
        )


def canonicalize(array: np.ndarray, layout: str) -> np.ndarray:
    """Reorder ``array`` from ``layout`` (any arrangement of T,H,W[,C]) to THWC.

    Missing T or C axes are inserted with length 1, so ``"HW"`` and ``"THW"``
    are accepted.  Applying the function to an already canonical array with
    layout ``"THWC"`` is the identity.
    """
    layout = layout.upper()
    if len(set(layout)) != len(layout) or not set(layout) <= set(CANONICAL_AXES) or not {"H", "W"} <= set(layout):
        raise FieldError(f"invalid layout descriptor {layout!r}")
    a = np.asarray(array)
    if a.ndim != len(layout):
        raise FieldError(f"array has {a.ndim} axes but layout {layout!r} declares {len(layout)}")
    for ax in "TC":
        if ax not in layout:
            a = a[..., None]
            layout += ax
    return np.transpose(a, [layout.index(ax) for ax in CANONICAL_AXES])


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    name = path.name[:-4] if path.name.endswith(".npy") else path.name
    return path.with_name(name + ".meta.json")


def _read_csv_frame(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or all(not v.strip() for v in rec):
                continue
            try:
                rows.append([float(v) for v in rec])
            except ValueError as exc:
                raise FieldError(f"{path}: non-numeric CSV cell ({exc})") from None
    if not rows:
        raise FieldError(f"{path}: empty CSV")
    if len({len(r) for r in rows}) != 1:
        raise FieldError(f"{path}: ragged CSV rows")
    return np.array(rows, dtype=np.float64)


def load_stack(path: str | Path, layout: str | None = None) -> FrameStack:
    """Read a stack from NPY (plus sidecar) or a single-frame CSV.

    ``layout`` describes the axis order on disk; when omitted it is taken
    from the sidecar, else inferred as HW / THW / THWC from the rank.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta = {}
    mp = meta_path(path)
    if mp.exists():
        meta = json.loads(mp.read_text())
    if path.suffix.lower() == ".csv":
        raw = _read_csv_frame(path)
        layout = layout or "HW"
    else:
        with open(path, "rb") as fh:
            if fh.read(6) != NPY_MAGIC:
                raise FieldError(f"{path}: not an NPY file (bad magic)")
        try:
            raw = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FieldError(f"{path}: malformed NPY header ({exc})") from None
        layout = layout or meta.get("layout") or {2: "HW", 3: "THW", 4: "THWC"}.get(raw.ndim)
        if layout is None:
            raise FieldError(f"{path}: cannot infer layout for rank-{raw.ndim} array")
    if not np.all(np.isfinite(raw)):
        raise FieldError(f"{path}: non-finite values")
    data = canonicalize(raw, layout)
    vr = meta.get("value_range")
    extra = {k: v for k, v in meta.items() if k not in ("times", "pixel_size", "value_range", "layout", "dtype")}
    return FrameStack(
        data,
        times=meta.get("times"),
        pixel_size=meta.get("pixel_size"),
        value_range=tuple(vr) if vr is not None else None,
        meta=extra,
    )


def save_stack(stack: FrameStack, path: str | Path, precision: str | None = None) -> Path:
    """Write ``stack`` as little-endian NPY v1.0 plus a JSON sidecar.

    ``precision`` may be ``"float32"`` or ``"float64"``; ``None`` keeps the
    stack's dtype so that ``load_stack(save_stack(x)) == x`` bit-exactly.
    """
    path = Path(path)
    if path.suffix != ".npy":
        path = path.with_name(path.name + ".npy")
    dtype = np.dtype(precision) if precision else stack.data.dtype
    if dtype not in (np.dtype("float32"), np.dtype("float64")):
        raise FieldError(f"unsupported precision {precision!r}")
    arr = np.ascontiguousarray(stack.data, dtype=dtype.newbyteorder("<"))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    meta = {
        "layout": CANONICAL_AXES,
        "dtype": dtype.name,
        "times": stack.times.tolist(),
        "pixel_size": stack.pixel_size,
        "value_range": list(stack.value_range) if stack.value_range else None,
    }
    meta.update(stack.meta)
    meta_path(path).write_text(json.dumps(to_jsonable(meta), indent=1, sort_keys=True) + "\n")
    return path


def load_field(path: str | Path) -> ScalarField:
    """Load a single 2D field (an NPY/CSV holding exactly one frame)."""
    st = load_stack(path)
    if st.n_frames != 1 or st.channels != 1:
        raise FieldError(f"{path}: expected a single grayscale frame, got {st.data.shape}")
    return st.frame(0)


def save_field(f: ScalarField, path: str | Path, precision: str | None = None) -> Path:
    return save_stack(FrameStack(f.data[None], pixel_size=f.pixel_size, value_range=f.value_range), path, precision)


# --- provenance -------------------------------------------------------------


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays (recursively) into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, Path):
        return str(obj)
    return obj


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


REPORT_KINDS = ("metrics", "recovery", "stxm", "neutron", "optical", "simulation", "corruption", "denoise", "summary")


@dataclass
class AnalysisReport:
    """Structured result record written by every pipeline run."""

    kind: str
    payload: dict
    provenance: dict

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise FieldError(f"unknown report kind {self.kind!r}")
        for key in ("inputs", "config_digest", "seed"):
            if key not in self.provenance:
                raise FieldError(f"report provenance lacks {key!r}")

    @classmethod
    def build(cls, kind: str, payload: dict, *, inputs: Iterable[str | Path] = (), config: dict | None = None,
              seed: int | None = None, **extra) -> "AnalysisReport":
        prov = {
            "inputs": {Path(p).name: file_digest(p) for p in inputs},
            "config_digest": config_digest(config or {}),
            "seed": seed,
        }
        prov.update(extra)
        return cls(kind, payload, prov)

    def to_dict(self) -> dict:
        return to_jsonable({"kind": self.kind, "payload": self.payload, "provenance": self.provenance})

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "AnalysisReport":
        d = json.loads(Path(path).read_text())
        return cls(d["kind"], d["payload"], d["provenance"])
