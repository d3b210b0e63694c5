"""STXM composition pipeline: registration, optical density, LFP/FP unmixing, bootstrap error.

Composition is the lithiated fraction ``X = a / (a + b)`` where ``a`` and
``b`` weight the lithiated (LFP) and delithiated (FP) reference spectra.
Pixels with ``a + b <= 0`` carry ``valid = False`` instead of a sentinel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .otsu import OtsuUndefined, otsu_threshold

# pre-edge-normalized reference absorptions at 706 and 713 eV (rows: energy; cols: LFP, FP)
TWO_ENERGY_MATRIX = np.array([[0.64, 0.05], [0.11, 0.60]])
TWO_ENERGIES = (706.0, 713.0)
PRE_EDGE_EV = 703.0
EVEN_RANGE = (695.0, 715.0)
RISING_EDGE = (705.0, 707.0)
FALLING_EDGE = (711.0, 714.0)
OD_CONVENTION = "|ln(I/I0)|"


class StxmError(ValueError):
    """Invalid spectral input (energies, coverage, degenerate references)."""


@dataclass(frozen=True, eq=False)
class SpectralStack:
    energies: np.ndarray
    images: np.ndarray
    kind: str = "intensity"

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64).ravel()
        im = np.asarray(self.images, dtype=np.float64)
        if im.ndim != 3 or im.shape[0] != e.size:
            raise StxmError("images must be (n_energies, H, W)")
        if np.any(np.diff(e) <= 0):
            raise StxmError("energies must be strictly increasing")
        if self.kind not in ("intensity", "absorbance", "optical_density"):
            raise StxmError(f"unknown stack kind {self.kind!r}")
        if not np.all(np.isfinite(im)):
            raise StxmError("non-finite values in spectral stack")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "images", im)

    def subset(self, idx) -> "SpectralStack":
        idx = np.asarray(idx)
        return SpectralStack(self.energies[idx], self.images[idx], self.kind)

    def index_of(self, energy: float, tol: float = 0.5) -> int:
        i = int(np.argmin(np.abs(self.energies - energy)))
        if abs(self.energies[i] - energy) > tol:
            raise StxmError(f"no image within {tol} eV of {energy} eV")
        return i


@dataclass(frozen=True, eq=False)
class ReferenceSpectra:
    energies: np.ndarray
    lfp: np.ndarray
    fp: np.ndarray

    def __post_init__(self):
        e, l, f = (np.asarray(v, dtype=np.float64).ravel() for v in (self.energies, self.lfp, self.fp))
        if not (e.size == l.size == f.size) or e.size < 2:
            raise StxmError("reference arrays must have equal length >= 2")
        if not (np.all(np.isfinite(l)) and np.all(np.isfinite(f))):
            raise StxmError("reference values must be finite")
        if np.any(np.diff(e) <= 0):
            raise StxmError("reference energies must be strictly increasing")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "lfp", l)
        object.__setattr__(self, "fp", f)

    def matrix(self, energies) -> np.ndarray:
        """``(n, 2)`` design matrix [LFP, FP] at ``energies`` (linear interpolation)."""
        energies = np.asarray(energies, dtype=np.float64)
        if energies.min() < self.energies[0] - 1e-9 or energies.max() > self.energies[-1] + 1e-9:
            raise StxmError("reference spectra do not cover the requested energies")
        return np.column_stack([np.interp(energies, self.energies, self.lfp),
                                np.interp(energies, self.energies, self.fp)])

    @classmethod
    def from_csv(cls, path) -> "ReferenceSpectra":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


@dataclass(frozen=True, eq=False)
class CompositionMap:
    X: np.ndarray
    valid: np.ndarray
    a: np.ndarray
    b: np.ndarray


# --- registration -------------------------------------------------------------


def register_translation(ref, moving, upsample: int = 1) -> tuple:
    """Shift ``(dy, dx)`` such that ``moving ~= roll(ref, (dy, dx))``.

    Integer peak of the phase correlation; ``upsample > 1`` refines to
    ``1/upsample`` pixel with the matrix-multiply DFT of scikit-image.
    """
    ref = np.asarray(ref, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if ref.shape != moving.shape:
        raise StxmError("images must share a shape")
    if ref.std() == 0 or moving.std() == 0:
        raise StxmError("registration needs non-constant images")
    if upsample > 1:
        from skimage.registration import phase_cross_correlation

        shift, _, _ = phase_cross_correlation(ref, moving, upsample_factor=upsample, normalization="phase")
        return tuple(float(-s) for s in shift)
    F = np.fft.fft2(moving) * np.conj(np.fft.fft2(ref))
    F /= np.maximum(np.abs(F), 1e-300)
    corr = np.fft.ifft2(F).real
    peak = np.unravel_index(int(np.argmax(corr)), corr.shape)
    return tuple(int(p - n) if p > n // 2 else int(p) for p, n in zip(peak, corr.shape))


def align_stack(stack: SpectralStack, ref_index: int = 0, upsample: int = 1) -> tuple[SpectralStack, list]:
    """Register every image to ``images[ref_index]`` and undo the shift (circularly)."""
    from scipy import ndimage

    ref = stack.images[ref_index]
    out, shifts = [], []
    for im in stack.images:
        s = register_translation(ref, im, upsample)
        shifts.append(s)
        if upsample > 1:
            out.append(np.fft.ifft2(ndimage.fourier_shift(np.fft.fft2(im), [-v for v in s])).real)
        else:
            out.append(np.roll(im, (-s[0], -s[1]), axis=(0, 1)))
    return SpectralStack(stack.energies, np.array(out), stack.kind), shifts


# --- optical density and normalization ----------------------------------------


def background_intensity(image) -> float:
    """Mean of the bright (background) Otsu class."""
    im = np.asarray(image, dtype=np.float64)
    try:
        t = otsu_threshold(im)
    except OtsuUndefined:
        raise StxmError("empty background class: image is constant") from None
    bg = im[im >= t]
    if bg.size == 0:
        raise StxmError("empty background class")
    return float(bg.mean())


def optical_density(stack: SpectralStack, i0=None) -> SpectralStack:
    """``OD = |ln(I / I0)|`` per energy, with ``I0`` from Otsu unless given."""
    if stack.kind != "intensity":
        raise StxmError("optical_density needs an intensity stack")
    if np.any(stack.images <= 0):
        raise StxmError("intensities must be positive")
    if i0 is None:
        i0 = [background_intensity(im) for im in stack.images]
    i0 = np.broadcast_to(np.asarray(i0, dtype=np.float64), (stack.energies.size,))
    od = np.abs(np.log(stack.images / i0[:, None, None]))
    return SpectralStack(stack.energies, od, "optical_density")


def pre_edge_index(energies, pre_edge: float = PRE_EDGE_EV) -> int:
    """Last energy at or below ``pre_edge``."""
    below = np.flatnonzero(np.asarray(energies) <= pre_edge + 1e-9)
    if below.size == 0:
        raise StxmError(f"no energy at or below the pre-edge ({pre_edge} eV)")
    return int(below[-1])


def pre_edge_normalize(stack: SpectralStack, pre_edge: float = PRE_EDGE_EV, mode: str = "divide",
                       min_od: float = 1e-6) -> tuple[SpectralStack, np.ndarray]:
    """Edge jump relative to the pre-edge image.

    ``divide``: ``(OD - OD_pre) / OD_pre``; ``subtract``: ``OD - OD_pre``.
    Returns the normalized stack and the mask of pixels where the pre-edge
    OD exceeds ``min_od`` (division is undefined elsewhere; those pixels
    are set to 0).
    """
    if mode not in ("divide", "subtract"):
        raise StxmError("mode must be 'divide' or 'subtract'")
    k = pre_edge_index(stack.energies, pre_edge)
    pre = stack.images[k]
    ok = pre > min_od
    diff = stack.images - pre[None]
    if mode == "divide":
        diff = np.where(ok[None], diff / np.where(ok, pre, 1.0)[None], 0.0)
    return SpectralStack(stack.energies, diff, "absorbance"), ok


# --- unmixing -----------------------------------------------------------------


def _finish(a, b, eps=1e-12) -> CompositionMap:
    s = a + b
    valid = s > eps
    X = np.where(valid, np.clip(a / np.where(valid, s, 1.0), 0.0, 1.0), 0.0)
    return CompositionMap(X, valid, a, b)


def composition_two_energy(s706, s713, matrix=TWO_ENERGY_MATRIX) -> CompositionMap:
    """Solve the 2x2 system per pixel; ``X`` clipped to [0, 1]."""
    M = np.asarray(matrix, dtype=np.float64)
    det = np.linalg.det(M)
    if abs(det) < 1e-12:
        raise StxmError("reference matrix is singular")
    s706 = np.asarray(s706, dtype=np.float64)
    s713 = np.asarray(s713, dtype=np.float64)
    a = (M[1, 1] * s706 - M[0, 1] * s713) / det
    b = (-M[1, 0] * s706 + M[0, 0] * s713) / det
    return _finish(a, b)


def nnls2(A, Y, rank_tol: float = 1e-10):
    """Exact two-variable non-negative least squares for many right-hand sides.

    ``A`` is ``(n, 2)`` and ``Y`` is ``(n, ...)``.  Enumerates the active
    sets (both free, one clamped, both clamped) and keeps the feasible
    candidate of least residual, which is the unique KKT point of this
    convex problem.  Returns ``(a, b)`` with the trailing shape of ``Y``.
    """
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    shp = Y.shape[1:]
    Y = Y.reshape(Y.shape[0], -1)
    G = A.T @ A
    h = A.T @ Y
    yy = np.einsum("ij,ij->j", Y, Y)
    cands = []
    det = G[0, 0] * G[1, 1] - G[0, 1] ** 2
    if det > rank_tol * max(G[0, 0] * G[1, 1], 1e-300):
        a = (G[1, 1] * h[0] - G[0, 1] * h[1]) / det
        b = (G[0, 0] * h[1] - G[1, 0] * h[0]) / det
        cands.append((a, b))
    z = np.zeros_like(h[0])
    cands.append((np.maximum(h[0] / G[0, 0], 0.0) if G[0, 0] > 0 else z, z))
    cands.append((z, np.maximum(h[1] / G[1, 1], 0.0) if G[1, 1] > 0 else z))
    best_a, best_b = z.copy(), z.copy()
    best = yy.copy()
    for a, b in cands:
        feas = (a >= 0) & (b >= 0)
        f = yy - 2 * (a * h[0] + b * h[1]) + G[0, 0] * a * a + 2 * G[0, 1] * a * b + G[1, 1] * b * b
        take = feas & (f < best - 1e-15 * np.maximum(yy, 1.0))
        best = np.where(take, f, best)
        best_a = np.where(take, a, best_a)
        best_b = np.where(take, b, best_b)
    return best_a.reshape(shp), best_b.reshape(shp)


def composition_nnls(stack: SpectralStack, refs: ReferenceSpectra) -> CompositionMap:
    if stack.energies.size < 2:
        raise StxmError("need at least two energies")
    a, b = nnls2(refs.matrix(stack.energies), stack.images)
    return _finish(a, b)


# --- bootstrap ----------------------------------------------------------------


def strategy_energies(strategy: str, n: int | None = None, k: int | None = None,
                      pre_edge: float = PRE_EDGE_EV) -> np.ndarray:
    """Acquisition energies of a sampling strategy.

    even: ``n`` energies linearly spaced over 695-715 eV.  edge_focused: one
    pre-edge energy plus ``k`` on the rising (705-707 eV) and ``k`` on the
    falling (711-714 eV) edge, ``2k + 1`` in total.
    """
    if strategy == "even":
        if n is None or n < 2:
            raise StxmError("even strategy needs n >= 2")
        return np.linspace(*EVEN_RANGE, n)
    if strategy == "edge_focused":
        if k is None or k < 1:
            raise StxmError("edge_focused strategy needs k >= 1")
        return np.concatenate([[pre_edge], np.linspace(*RISING_EDGE, k), np.linspace(*FALLING_EDGE, k)])
    raise StxmError(f"unknown strategy {strategy!r}")


def select_energies(energies, strategy: str, n: int | None = None, k: int | None = None,
                    pre_edge: float = PRE_EDGE_EV, tol: float = 0.2) -> np.ndarray:
    """Indices of the available energies nearest to the strategy's targets."""
    energies = np.asarray(energies, dtype=np.float64)
    if strategy == "even" and n is None:
        n = int(np.sum((energies >= EVEN_RANGE[0] - tol) & (energies <= EVEN_RANGE[1] + tol)))
    if strategy == "edge_focused" and k is None:
        k = int(np.sum((energies >= RISING_EDGE[0] - 1e-9) & (energies <= RISING_EDGE[1] + 1e-9)))
    targets = strategy_energies(strategy, n, k, pre_edge)
    idx = np.array([int(np.argmin(np.abs(energies - t))) for t in targets])
    if strategy == "edge_focused":
        idx[0] = pre_edge_index(energies, pre_edge)
    far = np.abs(energies[idx] - targets)
    if strategy == "edge_focused":
        far = far[1:]
    if np.any(far > tol) or np.unique(idx).size != idx.size:
        raise StxmError(f"energies do not cover the {strategy} strategy")
    return idx


def bootstrap_sigma_x(stack: SpectralStack, refs: ReferenceSpectra, n_boot: int, strategy: str = "even",
                      seed: int = 0, n: int | None = None, k: int | None = None, mask=None,
                      rank_tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Per-pixel standard deviation of X over energy resamples, and its mean over ``mask``.

    The strategy's energies are drawn from ``stack`` (pre-edge normalized
    absorbance); each replicate resamples them with replacement and re-solves
    NNLS.  Replicates whose resampled design is rank deficient are skipped.
    """
    if n_boot < 2:
        raise StxmError("n_boot must be at least 2")
    idx = select_energies(stack.energies, strategy, n, k)
    E = stack.energies[idx]
    S = stack.images[idx]
    A = refs.matrix(E)
    m = idx.size
    xs = []
    for rep in range(n_boot):
        rng = np.random.default_rng([int(seed), rep])
        pick = rng.integers(0, m, size=m)
        Ab = A[pick]
        G = Ab.T @ Ab
        if np.linalg.det(G) <= rank_tol * max(G[0, 0] * G[1, 1], 1e-300):
            continue
        a, b = nnls2(Ab, S[pick])
        cm = _finish(a, b)
        xs.append(np.where(cm.valid, cm.X, np.nan))
    if len(xs) < 2:
        raise StxmError("fewer than two usable bootstrap replicates")
    xs = np.array(xs)
    with warnings.catch_warnings():
        # pixels invalid in every replicate have no spread
        warnings.simplefilter("ignore", RuntimeWarning)
        sigma = np.nanstd(xs, axis=0, ddof=1)
    if mask is None:
        mask = np.isfinite(sigma)
    mean = float(np.nanmean(sigma[np.asarray(mask, bool)]))
    return sigma, mean


# --- synthetic data -----------------------------------------------------------


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def synthetic_references(energies=None, edge=(703.0, 705.5)) -> ReferenceSpectra:
    """Synthetic 65-energy references over 695-715 eV (labelled synthetic in all outputs).

    Each spectrum linearly interpolates its two published values (706 and
    713 eV, held constant outside that interval) and is multiplied by a
    smoothstep edge that is 0 below ``edge[0]`` and 1 above ``edge[1]``, so
    the published values are reproduced exactly.
    """
    if energies is None:
        energies = np.linspace(*EVEN_RANGE, 65)
    e = np.asarray(energies, dtype=np.float64)
    step = _smoothstep((e - edge[0]) / (edge[1] - edge[0]))
    lfp = np.interp(e, TWO_ENERGIES, TWO_ENERGY_MATRIX[:, 0]) * step
    fp = np.interp(e, TWO_ENERGIES, TWO_ENERGY_MATRIX[:, 1]) * step
    return ReferenceSpectra(e, lfp, fp)


def synthetic_particle(shape=(48, 48), radius: float = 16.0, x_range=(0.2, 0.8), thickness: float = 1.0):
    """Disk particle with a linear X gradient and a spherical-cap thickness profile."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / radius**2
    inside = r2 < 1.0
    t = np.where(inside, thickness * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0)), 0.0)
    X = x_range[0] + (x_range[1] - x_range[0]) * (xx - cx + radius) / (2 * radius)
    X = np.where(inside, np.clip(X, 0.0, 1.0), 0.0)
    return X, t, inside


def synthetic_acquisition(X, t, energies, refs: ReferenceSpectra, total_dose: float | None = 1e6,
                          seed: int = 0, mu_pre: float = 1.0) -> SpectralStack:
    """Transmitted intensity ``I = exp(-t (mu_pre + X LFP + (1 - X) FP))`` per energy.

    With ``total_dose`` the photon budget per pixel is split evenly across
    the energies and counts are Poisson; ``None`` gives noise-free data.
    """
    energies = np.asarray(energies, dtype=np.float64)
    A = refs.matrix(energies)
    od = t[None] * (mu_pre + A[:, 0, None, None] * X[None] + A[:, 1, None, None] * (1.0 - X)[None])
    I = np.exp(-od)
    if total_dose is not None:
        per = total_dose / energies.size
        rng = np.random.default_rng(seed)
        counts = rng.poisson(I * per)
        I = np.maximum(counts, 1) / per
    return SpectralStack(energies, I, "intensity")


def process_intensity(stack: SpectralStack, pre_edge: float = PRE_EDGE_EV, mode: str = "divide"):
    """Optical density with Otsu I0, then pre-edge normalization."""
    return pre_edge_normalize(optical_density(stack), pre_edge, mode)


def synthetic_absorbance(X, t, energies, refs: ReferenceSpectra, total_dose: float = 1e6, seed: int = 0,
                         mu_pre: float = 1.0) -> SpectralStack:
    """Pre-edge-normalized absorbance with independent Poisson noise at every energy.

    A fixed per-pixel photon dose is split evenly across the energies, so
    sampling more energies spreads the same budget thinner.  Each energy is
    measured against a noise-free pre-edge level ``mu_pre``; pixels with zero
    thickness are set to 0.
    """
    energies = np.asarray(energies, dtype=np.float64)
    A = refs.matrix(energies)
    od = t[None] * (mu_pre + A[:, 0, None, None] * X[None] + A[:, 1, None, None] * (1.0 - X)[None])
    per = total_dose / energies.size
    rng = np.random.default_rng(seed)
    counts = np.maximum(rng.poisson(np.exp(-od) * per), 1)
    od_meas = -np.log(counts / per)
    tt = np.where(t > 0, t, 1.0)
    S = np.where(t[None] > 0, od_meas / tt[None] - mu_pre, 0.0)
    return SpectralStack(energies, S, "absorbance")
