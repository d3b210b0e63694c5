"""Pseudo-spectral Cahn-Hilliard solver with concentration-dependent mobility.

Solves, on a periodic rectangle,

    dc/dt = div( D(c) c grad(mu_h(c) - kappa lap c) )

with a first-order IMEX step.  A constant-mobility biharmonic term
``Mbar kappa lap^2 c`` is treated implicitly and subtracted again
explicitly, where ``Mbar`` is the largest value of ``D(c) c`` on a
concentration grid.  Gradients and divergences are spectral and the
nonlinear flux is de-aliased with the 2/3 rule; modes outside the retained
band only feel the implicit damping.

All integrators accept an optional leading batch axis so that many laws can
be advanced together (the inverse problem uses this for its Jacobian).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from .fieldstore import FrameStack, ScalarField

log = logging.getLogger(__name__)

OMEGA_TRUE = 3.0
KAPPA_TRUE = 2e-3

# scipy.fft worker count; set by the CLI --threads flag
FFT_WORKERS = 1


class SimulationError(RuntimeError):
    """Integration produced non-finite values or left the (0, 1) interval."""

    def __init__(self, msg, last_stable_frame=None, last_stable_time=None):
        super().__init__(msg)
        self.last_stable_frame = last_stable_frame
        self.last_stable_time = last_stable_time


@dataclass(frozen=True)
class ChParams:
    """Discretization and material constants for one run.

    ``grid`` is ``(nx, ny)``; arrays are stored ``(ny, nx)``.  ``frame_stride``
    is the number of time steps between saved frames.
    """

    omega: float = OMEGA_TRUE
    kappa: float = KAPPA_TRUE
    grid: tuple[int, int] = (128, 128)
    domain_length: tuple[float, float] = (1.0, 1.0)
    dt: float = 1e-4
    n_frames: int = 501
    frame_stride: int = 10
    c_floor: float = 1e-6
    c_mean: float = 0.5
    ic_amplitude: float = 0.05
    dealias: bool = True
    stab_mobility: float | None = None
    check_every: int = 50

    def __post_init__(self):
        if isinstance(self.domain_length, (int, float)):
            object.__setattr__(self, "domain_length", (float(self.domain_length),) * 2)
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "domain_length", tuple(float(v) for v in self.domain_length))
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for n in self.grid:
            if n < 2 or n & (n - 1):
                raise ValueError(f"grid sizes must be powers of two, got {self.grid}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be at least 1")
        if not 0 < self.c_floor < 0.5:
            raise ValueError("c_floor must lie in (0, 0.5)")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.grid[1], self.grid[0])

    @property
    def pixel_size(self) -> float:
        return self.domain_length[0] / self.grid[0]

    @property
    def total_time(self) -> float:
        return (self.n_frames - 1) * self.frame_stride * self.dt

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.frame_stride * self.dt

    def with_(self, **kw) -> "ChParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MaterialLaw:
    """Chemical potential and diffusivity as vectorized callables of c."""

    mu_h: Callable[[np.ndarray], np.ndarray]
    diffusivity: Callable[[np.ndarray], np.ndarray]
    provenance: str = "ground_truth"
    batch: int | None = None
    description: dict = field(default_factory=dict)
    # optional fused evaluator returning (mu_h(c), D(c)) in one pass
    both: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    def evaluate(self, c):
        if self.both is not None:
            return self.both(c)
        return self.mu_h(c), self.diffusivity(c)


def ground_truth_law(omega: float = OMEGA_TRUE) -> MaterialLaw:
    """Regular-solution law: ``mu_h = ln(c/(1-c)) + omega (1-2c)``, ``D = 1 - c``."""

    def mu_h(c):
        c = np.asarray(c, dtype=np.float64)
        return np.log(c / (1.0 - c)) + omega * (1.0 - 2.0 * c)

    def diffusivity(c):
        return 1.0 - np.asarray(c, dtype=np.float64)

    return MaterialLaw(mu_h, diffusivity, "ground_truth", description={"omega": omega, "D": "1-c"})


def free_energy_density(c, omega: float = OMEGA_TRUE):
    """Regular-solution homogeneous free energy g(c) with g' = mu_h."""
    c = np.asarray(c, dtype=np.float64)
    return c * np.log(c) + (1.0 - c) * np.log1p(-c) + omega * c * (1.0 - c)


class SpectralGrid:
    """Wavenumbers, de-aliasing mask and FFT helpers for one periodic grid."""

    def __init__(self, params: ChParams):
        ny, nx = params.shape
        lx, ly = params.domain_length
        self.shape = (ny, nx)
        ky = 2.0 * np.pi * sfft.fftfreq(ny, ly / ny)
        kx = 2.0 * np.pi * sfft.rfftfreq(nx, lx / nx)
        KY, KX = np.meshgrid(ky, kx, indexing="ij")
        self.k2 = KX**2 + KY**2
        if params.dealias:
            keep = (np.abs(KX) < (2.0 / 3.0) * np.abs(kx).max() + 1e-12) & (
                np.abs(KY) < (2.0 / 3.0) * np.abs(ky).max() + 1e-12)
        else:
            # drop the Nyquist rows/columns, which odd derivatives cannot represent
            keep = np.ones_like(self.k2, dtype=bool)
            keep[ny // 2, :] = False
            keep[:, -1] = False
        self.keep = keep
        self.ikx = 1j * KX * keep
        self.iky = 1j * KY * keep

    def fft(self, a):
        return sfft.rfft2(a, workers=FFT_WORKERS)

    def ifft(self, a):
        return sfft.irfft2(a, s=self.shape, workers=FFT_WORKERS)

    def gradient(self, c):
        ch = self.fft(c)
        return self.ifft(self.ikx * ch), self.ifft(self.iky * ch)


def stabilizing_mobility(law: MaterialLaw, c_floor: float = 1e-6, n: int = 1001):
    """Max of ``D(c) c`` on a grid over [c_floor, 1 - c_floor]; per batch member if batched."""
    c = np.linspace(c_floor, 1.0 - c_floor, n)
    if law.batch is not None:
        c = np.broadcast_to(c, (law.batch, n))
    m = law.diffusivity(c) * c
    return np.max(m, axis=-1)


def integrate(params: ChParams, law: MaterialLaw, c0: np.ndarray, n_steps: int,
              save_at: Sequence[int] | None = None, strict: bool = True):
    """Advance ``c0`` by ``n_steps`` steps, returning the states at ``save_at``.

    ``c0`` is ``(ny, nx)`` or, for a batched law, ``(B, ny, nx)``.  Returns
    ``(frames, ok)`` where ``frames`` has one entry per requested step and
    ``ok`` flags (per batch member) whether the run stayed finite.  With
    ``strict=True`` a failure raises :class:`SimulationError` instead.
    """
    grid = SpectralGrid(params)
    c = np.array(c0, dtype=np.float64)
    batched = c.ndim == 3
    if c.shape[-2:] != grid.shape:
        raise ValueError(f"initial field shape {c.shape[-2:]} does not match grid {grid.shape}")
    save_at = [n_steps] if save_at is None else sorted(int(s) for s in save_at)
    if save_at and (save_at[0] < 0 or save_at[-1] > n_steps):
        raise ValueError("save_at outside [0, n_steps]")

    fl = params.c_floor
    mbar = params.stab_mobility
    if mbar is None:
        mbar = stabilizing_mobility(law, fl)
    mbar = np.asarray(mbar, dtype=np.float64)
    if batched:
        mbar = np.broadcast_to(mbar, (c.shape[0],)).reshape(-1, 1, 1)
    stiff = mbar * params.kappa * grid.k2**2
    implicit = 1.0 / (1.0 + params.dt * stiff)
    explicit_stiff = stiff * grid.keep
    dt, kappa = params.dt, params.kappa

    ch = grid.fft(c)
    ok = np.ones(c.shape[0] if batched else 1, dtype=bool)
    frames = []
    nxt = 0
    while nxt < len(save_at) and save_at[nxt] == 0:
        frames.append(c.copy())
        nxt += 1
    last_good = (0, c.copy())
    for step in range(1, n_steps + 1):
        cc = np.clip(grid.ifft(ch), fl, 1.0 - fl)
        mu_h, diff = law.evaluate(cc)
        muh = grid.fft(mu_h) + kappa * grid.k2 * ch
        mob = diff * cc
        fx = grid.fft(mob * grid.ifft(grid.ikx * muh))
        fy = grid.fft(mob * grid.ifft(grid.iky * muh))
        div = grid.ikx * fx + grid.iky * fy
        div[..., 0, 0] = 0.0
        ch = (ch + dt * (div + explicit_stiff * ch)) * implicit
        if step % params.check_every == 0 or (nxt < len(save_at) and save_at[nxt] == step):
            cur = grid.ifft(ch)
            finite = np.isfinite(cur).reshape(cur.shape[0], -1).all(axis=1) if batched else np.array([np.isfinite(cur).all()])
            if not finite.all():
                if strict:
                    raise SimulationError(
                        f"non-finite concentration at step {step}; last stable step {last_good[0]}",
                        last_stable_frame=last_good[1], last_stable_time=last_good[0] * dt)
                ok &= finite
                # keep failed members finite so they do not poison later FFT calls
                if batched:
                    cur[~finite] = 0.5
                    ch = grid.fft(cur)
            last_good = (step, cur)
            while nxt < len(save_at) and save_at[nxt] == step:
                frames.append(cur.copy())
                nxt += 1
    return frames, (ok if batched else bool(ok[0]))


def simulate(params: ChParams, law: MaterialLaw, c0, seed: int = 0) -> FrameStack:
    """Integrate from ``c0`` and return ``params.n_frames`` snapshots (frame 0 = ``c0``).

    Raises :class:`SimulationError` on non-finite values or when a saved
    frame leaves the open interval (0, 1).
    """
    data = c0.data if isinstance(c0, ScalarField) else np.asarray(c0, dtype=np.float64)
    if data.shape != params.shape:
        raise ValueError(f"c0 shape {data.shape} does not match grid {params.shape}")
    if np.any(data <= 0.0) or np.any(data >= 1.0):
        raise ValueError("c0 values must lie in (0, 1)")
    stride = params.frame_stride
    save_at = [i * stride for i in range(params.n_frames)]
    frames, _ = integrate(params, law, data, save_at[-1], save_at, strict=True)
    out = np.stack(frames)
    bad = np.flatnonzero((out <= 0.0).any(axis=(1, 2)) | (out >= 1.0).any(axis=(1, 2)))
    if bad.size:
        i = int(bad[0])
        raise SimulationError(f"frame {i} left the interval (0, 1)", last_stable_frame=out[i - 1],
                              last_stable_time=(i - 1) * stride * params.dt)
    meta = {"params": params.to_dict(), "law": law.provenance, "seed": int(seed)}
    return FrameStack(out, times=params.frame_times(), pixel_size=params.pixel_size, value_range=(0.0, 1.0), meta=meta)


def initial_condition(params: ChParams, seed: int, realization: int = 0) -> np.ndarray:
    """Uniform noise of half-width ``ic_amplitude`` about ``c_mean``."""
    rng = np.random.default_rng([int(seed), int(realization)])
    lo, hi = params.c_mean - params.ic_amplitude, params.c_mean + params.ic_amplitude
    return rng.uniform(lo, hi, size=params.shape)


def make_dataset(params: ChParams, n_realizations: int, seed: int, law: MaterialLaw | None = None) -> list[FrameStack]:
    """Independent trajectories that differ only in their initial-condition seed."""
    if n_realizations < 1:
        raise ValueError("n_realizations must be at least 1")
    law = law or ground_truth_law(params.omega)
    out = []
    for r in range(n_realizations):
        c0 = initial_condition(params, seed, r)
        st = simulate(params, law, c0, seed)
        out.append(st.replace(meta={**st.meta, "realization": r}))
    return out


# --- diagnostics --------------------------------------------------------------


def free_energy(c, params: ChParams) -> float:
    """Discrete free energy: sum of g(c) + kappa/2 |grad c|^2 times the cell area."""
    c = np.asarray(c, dtype=np.float64)
    grid = SpectralGrid(params.with_(dealias=False))
    gx, gy = grid.gradient(c)
    cc = np.clip(c, params.c_floor, 1.0 - params.c_floor)
    dA = (params.domain_length[0] / params.grid[0]) * (params.domain_length[1] / params.grid[1])
    return float(np.sum(free_energy_density(cc, params.omega) + 0.5 * params.kappa * (gx**2 + gy**2)) * dA)


def interface_length(c, level: float = 0.5, pixel_size: float = 1.0) -> float:
    """Length of the ``c = level`` contour on the periodic grid (marching squares)."""
    from skimage import measure

    padded = np.pad(np.asarray(c, dtype=np.float64), ((0, 1), (0, 1)), mode="wrap")
    total = 0.0
    for contour in measure.find_contours(padded, level):
        total += float(np.sum(np.hypot(*np.diff(contour, axis=0).T)))
    return total * pixel_size


def linear_growth_rate(k: float, c_bar: float, kappa: float, law: MaterialLaw, eps: float = 1e-6) -> float:
    """sigma(k) = -D(c) c k^2 (mu_h'(c) + kappa k^2) for a small perturbation of a uniform state."""
    dmu = (law.mu_h(c_bar + eps) - law.mu_h(c_bar - eps)) / (2 * eps)
    return float(-law.diffusivity(c_bar) * c_bar * k**2 * (dmu + kappa * k**2))
