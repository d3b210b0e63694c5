"""Neutron radiography: transmission, Beer-Lambert attenuation change, active-area analysis.

Array axes: rows are depth (y, through the electrode stack), columns are
the in-plane coordinate (x) along which the cylinder's chord thickness varies.
``delta_sigma = ln(T(t) / T(t_ref)) / thickness`` is used exactly as written,
without a leading minus sign: lithiation lowers T and gives negative values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fieldstore import FrameStack, ScalarField
from .noisegen import median3
from .otsu import OtsuUndefined, otsu_threshold

PX_PER_CM = 1289.8
N_HALF_CYCLES = 8
WINDOW_FRACTION = 0.2


class NeutronError(ValueError):
    """Invalid radiograph input or geometry."""


def _arr(x):
    return x.data if isinstance(x, ScalarField) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RadiographSet:
    intensity: FrameStack
    open_beam: np.ndarray
    dark_current: np.ndarray
    px_per_cm: float = PX_PER_CM
    cell_radius_cm: float = 1.0
    cell_center_px: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        ob, dc = _arr(self.open_beam), _arr(self.dark_current)
        if ob.shape != self.intensity.shape or dc.shape != self.intensity.shape:
            raise NeutronError("open-beam and dark-current images must match the intensity frame shape")
        if not self.px_per_cm > 0:
            raise NeutronError("px_per_cm must be positive")
        if not self.cell_radius_cm > 0:
            raise NeutronError("cell radius must be positive")
        object.__setattr__(self, "open_beam", ob)
        object.__setattr__(self, "dark_current", dc)


@dataclass(frozen=True)
class HalfCycleSplit:
    """Start frame of each half-cycle plus the stack length; labels alternate from ``first``."""

    starts: tuple[int, ...]
    n_frames: int
    first: str = "charge"

    def __post_init__(self):
        s = tuple(int(v) for v in self.starts)
        if len(s) != N_HALF_CYCLES:
            raise NeutronError(f"need {N_HALF_CYCLES} half-cycles, got {len(s)}")
        if s[0] != 0 or any(b <= a for a, b in zip(s, s[1:])) or s[-1] >= self.n_frames:
            raise NeutronError("half-cycle starts must begin at 0, increase strictly and lie inside the stack")
        if self.first not in ("charge", "discharge"):
            raise NeutronError("first must be 'charge' or 'discharge'")
        object.__setattr__(self, "starts", s)

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        ends = list(self.starts[1:]) + [self.n_frames]
        return list(zip(self.starts, ends))

    @property
    def labels(self) -> list[str]:
        other = "discharge" if self.first == "charge" else "charge"
        return [self.first if i % 2 == 0 else other for i in range(N_HALF_CYCLES)]

    def segment_of(self, frame: int) -> int:
        return int(np.searchsorted(self.starts, frame, side="right") - 1)

    @classmethod
    def even(cls, n_frames: int, first: str = "charge") -> "HalfCycleSplit":
        starts = np.floor(np.arange(N_HALF_CYCLES) * n_frames / N_HALF_CYCLES).astype(int)
        return cls(tuple(starts), n_frames, first)


def normalize_transmission(rs: RadiographSet, crop=None) -> FrameStack:
    """``T = (I - DC) / (OB - DC)`` after a 3x3 median on I, OB and DC.

    ``crop`` is an optional ``(row_slice, col_slice)`` restricting the
    positivity check on ``OB - DC``.
    """
    ob = median3(rs.open_beam)
    dc = median3(rs.dark_current)
    den = ob - dc
    region = den if crop is None else den[crop]
    if np.any(region <= 0):
        raise NeutronError("open beam does not exceed dark current inside the analysis region")
    den = np.where(den > 0, den, np.nan)
    data = rs.intensity.gray()
    T = np.stack([(median3(f) - dc) / den for f in data])
    if crop is not None:
        T = T[(slice(None),) + tuple(crop)]
    if not np.all(np.isfinite(T)):
        raise NeutronError("non-finite transmission; restrict the analysis with crop")
    return FrameStack(T, times=rs.intensity.times, pixel_size=rs.intensity.pixel_size,
                      meta={**rs.intensity.meta, "quantity": "transmission"})


def chord_thickness(x_px, px_per_cm: float = PX_PER_CM, radius_cm: float = 1.0, center_px: float = 0.0):
    """Chord length ``2 sqrt(r^2 - d^2)`` in cm at in-plane pixel ``x_px``; ``d = |x - cx| / px_per_cm``."""
    d = np.abs(np.asarray(x_px, dtype=np.float64) - center_px) / px_per_cm
    if np.any(d > radius_cm * (1 + 1e-12)):
        raise NeutronError("pixel lies outside the cell projection")
    val = 2.0 * np.sqrt(np.clip(radius_cm**2 - d**2, 0.0, None))
    return float(val) if np.ndim(x_px) == 0 else val


def thickness_profile(rs: RadiographSet, width: int | None = None, x0: int = 0) -> np.ndarray:
    """Per-column thickness for columns ``x0 .. x0 + width - 1``."""
    width = rs.intensity.shape[1] if width is None else width
    return chord_thickness(np.arange(x0, x0 + width), rs.px_per_cm, rs.cell_radius_cm, rs.cell_center_px[0])


def delta_attenuation(T: FrameStack, split: HalfCycleSplit, thickness) -> FrameStack:
    """``ln(T(t) / T(t_ref)) / thickness`` with ``t_ref`` the first frame of each half-cycle."""
    data = T.gray()
    if split.n_frames != data.shape[0]:
        raise NeutronError("split does not cover the stack")
    if np.any(data <= 0):
        raise NeutronError("transmission must be positive")
    th = np.asarray(thickness, dtype=np.float64)
    if th.shape != (data.shape[2],) or np.any(th <= 0):
        raise NeutronError("thickness must be one positive value per column")
    out = np.empty_like(data)
    for a, b in split.boundaries:
        out[a:b] = np.log(data[a:b] / data[a]) / th[None, None, :]
    return FrameStack(out, times=T.times, pixel_size=T.pixel_size,
                      meta={**T.meta, "quantity": "delta_sigma_per_cm", "sign": "ln(T/T_ref)/delta"})


@dataclass
class ActiveResult:
    fraction: float
    active_mask: np.ndarray
    window: tuple[int, int] | None
    threshold: float | None
    flagged: bool
    row_fraction: np.ndarray


def active_fraction(delta, region=None, window_fraction: float = WINDOW_FRACTION) -> ActiveResult:
    """Otsu split of ``|delta|`` inside ``region``; active means at or above the threshold.

    ``window`` is the outermost pair of rows whose active fraction (within
    the region) is at least ``window_fraction``.  A constant region has no
    Otsu split: it is flagged and reported with fraction 0.
    """
    d = np.abs(_arr(delta))
    region = np.ones(d.shape, bool) if region is None else np.asarray(region, bool)
    if region.shape != d.shape or not region.any():
        raise NeutronError("region must be a non-empty mask of the field's shape")
    try:
        t = otsu_threshold(d[region])
    except OtsuUndefined:
        return ActiveResult(0.0, np.zeros(d.shape, bool), None, None, True, np.zeros(d.shape[0]))
    active = (d >= t) & region
    per_row = region.sum(axis=1)
    row_frac = np.where(per_row > 0, active.sum(axis=1) / np.maximum(per_row, 1), 0.0)
    rows = np.flatnonzero(row_frac >= window_fraction)
    window = (int(rows[0]), int(rows[-1])) if rows.size else None
    return ActiveResult(float(active.sum() / region.sum()), active, window, float(t), False, row_frac)


def half_cycle_activity(delta: FrameStack, split: HalfCycleSplit, regions: dict) -> list[dict]:
    """Active fraction and window at the final frame of each half-cycle for each named region."""
    rows = []
    for k, ((a, b), label) in enumerate(zip(split.boundaries, split.labels)):
        final = delta.gray()[b - 1]
        for name, mask in regions.items():
            res = active_fraction(final, mask)
            rows.append({"half_cycle": k, "label": label, "region": name, "frame": b - 1,
                         "fraction": res.fraction, "flagged": res.flagged, "threshold": res.threshold,
                         "window": list(res.window) if res.window else None})
    return rows


def depth_profile(delta, axis: str = "y") -> tuple[np.ndarray, np.ndarray]:
    """Mean and (population) standard deviation per depth position across the in-plane axis.

    ``axis="y"`` profiles along rows; ``axis="x"`` along columns.
    """
    d = _arr(delta)
    if d.size == 0:
        raise NeutronError("empty field")
    if axis not in ("y", "x"):
        raise NeutronError("axis must be 'y' or 'x'")
    ax = 1 if axis == "y" else 0
    return d.mean(axis=ax), d.std(axis=ax)


def local_variability(stack) -> float:
    """Mean local standard deviation over 3x3x3 (t, y, x) neighbourhoods."""
    x = stack.gray() if isinstance(stack, FrameStack) else np.asarray(stack, dtype=np.float64)
    m = ndimage.uniform_filter(x, size=3, mode="nearest")
    m2 = ndimage.uniform_filter(x * x, size=3, mode="nearest")
    return float(np.sqrt(np.clip(m2 - m * m, 0.0, None)).mean())
