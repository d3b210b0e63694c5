"""Synthetic corruption of concentration stacks: Gaussian, Poisson, impulse and composite.

Every frame draws from its own counter-based stream keyed by ``(seed, frame)``
with one counter block per stage, so corrupting a frame does not depend on
which other frames are processed or in what order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .fieldstore import FrameStack, ScalarField

FAMILIES = ("gaussian", "poisson", "impulse", "composite")
_STAGE_COUNTER = {"impulse": 1, "poisson": 2, "gaussian": 3}


@dataclass(frozen=True)
class NoiseSpec:
    """One corruption recipe.

    ``gaussian_rel`` is a fraction of the clean frame's standard deviation.
    ``post_median=None`` resolves to on for impulse and composite noise and
    off otherwise.  ``clip=None`` skips the final clip (diagnostics only).
    """

    family: str
    gaussian_rel: float = 0.0
    poisson_lambda: float = 1e4
    impulse_p: float = 0.0
    post_median: bool | None = None
    clip: tuple[float, float] | None = (0.01, 0.99)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.gaussian_rel < 0:
            raise ValueError("gaussian_rel must be non-negative")
        if not self.poisson_lambda > 0:
            raise ValueError("poisson_lambda must be positive")
        if not 0.0 <= self.impulse_p <= 1.0:
            raise ValueError("impulse_p must lie in [0, 1]")
        if self.clip is not None:
            lo, hi = (float(v) for v in self.clip)
            if not lo < hi:
                raise ValueError("clip range must satisfy lo < hi")
            object.__setattr__(self, "clip", (lo, hi))
        if self.post_median is None:
            object.__setattr__(self, "post_median", self.family in ("impulse", "composite"))

    @classmethod
    def composite(cls, gaussian_rel=0.1, poisson_lambda=1e4, impulse_p=0.2, **kw) -> "NoiseSpec":
        return cls("composite", gaussian_rel, poisson_lambda, impulse_p, **kw)

    @property
    def stages(self) -> list[str]:
        if self.family == "composite":
            return ["impulse", "poisson", "gaussian"]
        return [self.family]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = self.stages
        d["gaussian_scale"] = "per-frame std of the clean frame"
        d["poisson_convention"] = "Pois(v*lambda)/lambda"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        keys = ("family", "gaussian_rel", "poisson_lambda", "impulse_p", "post_median", "clip")
        kw = {k: d[k] for k in keys if k in d}
        if kw.get("clip") is not None:
            kw["clip"] = tuple(kw["clip"])
        return cls(**kw)


def frame_rng(seed: int, frame: int, stage: str) -> np.random.Generator:
    """Philox stream for one (seed, frame, stage); pixels are drawn in row-major order."""
    counter = np.zeros(4, dtype=np.uint64)
    counter[3] = _STAGE_COUNTER[stage]
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(frame)], counter=counter))


def median3(field):
    """3x3 median with replicated borders; accepts a ScalarField or a 2D array."""
    if isinstance(field, ScalarField):
        return ScalarField(median3(field.data), field.pixel_size, field.value_range)
    return ndimage.median_filter(np.asarray(field, dtype=np.float64), size=3, mode="nearest")


def add_impulse(frame, p: float, rng: np.random.Generator):
    """Salt and pepper: each pixel hit with probability ``p`` becomes 0 or 1 with equal odds."""
    hit = rng.random(frame.shape) < p
    salt = rng.random(frame.shape) < 0.5
    out = frame.copy()
    out[hit] = salt[hit].astype(np.float64)
    return out


def add_poisson(frame, lam: float, rng: np.random.Generator):
    if np.any(frame < 0):
        raise ValueError("Poisson corruption needs non-negative values")
    return rng.poisson(frame * lam) / lam


def add_gaussian(frame, sigma: float, rng: np.random.Generator):
    return frame + sigma * rng.standard_normal(frame.shape)


def corrupt_frame(clean: np.ndarray, spec: NoiseSpec, seed: int, frame: int) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    out = clean.copy()
    for stage in spec.stages:
        rng = frame_rng(seed, frame, stage)
        if stage == "impulse":
            out = add_impulse(out, spec.impulse_p, rng)
        elif stage == "poisson":
            out = add_poisson(out, spec.poisson_lambda, rng)
        else:
            out = add_gaussian(out, spec.gaussian_rel * clean.std(), rng)
    if spec.post_median:
        out = median3(out)
    if spec.clip is not None:
        out = np.clip(out, *spec.clip)
    return out


def corrupt(stack: FrameStack, spec: NoiseSpec, seed: int) -> FrameStack:
    """Corrupt every channel of every frame independently; deterministic per seed."""
    data = stack.data
    if np.any(data < 0.0) or np.any(data > 1.0):
        raise ValueError("corrupt expects values in [0, 1]")
    out = np.empty(data.shape, dtype=np.float64)
    nch = data.shape[-1]
    for t in range(data.shape[0]):
        for ch in range(nch):
            out[t, ..., ch] = corrupt_frame(data[t, ..., ch], spec, seed, t * nch + ch)
    vr = spec.clip if spec.clip is not None else stack.value_range
    meta = {**stack.meta, "noise": spec.to_dict(), "noise_seed": int(seed)}
    return stack.replace(data=out, value_range=vr, meta=meta)
