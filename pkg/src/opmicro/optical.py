"""Optical microscopy of graphite: LAB clustering, particle geometry, phase rules, SOC, size statistics.

Phase codes: 0 background, 1 blue (stage III), 2 red (stage II), 3 gold
(stage I).  The codes increase with lithium content, so irreversibility is a
running maximum along time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

BACKGROUND, BLUE, RED, GOLD = 0, 1, 2, 3
PHASE_NAMES = {BACKGROUND: "background", BLUE: "blue", RED: "red", GOLD: "gold"}
PHASE_CONCENTRATION = {BLUE: 0.26, RED: 0.55, GOLD: 1.0}
MIN_AREA = 16


class OpticalError(ValueError):
    """Invalid optical-pipeline input."""


# --- colour --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabStack:
    frames: np.ndarray
    source: str = "sRGB"

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise OpticalError("LAB frames must be (T, H, W, 3)")
        if f[..., 0].min() < -1e-6 or f[..., 0].max() > 100 + 1e-6:
            raise OpticalError("L channel outside [0, 100]")
        object.__setattr__(self, "frames", f)

    def pixels(self, mask=None) -> np.ndarray:
        f = self.frames.reshape(-1, 3)
        return f if mask is None else f[np.asarray(mask, bool).reshape(-1)]


def rgb_to_lab(rgb) -> LabStack:
    """sRGB in [0, 1] to CIE-LAB (D65); accepts (H, W, 3), (T, H, W, 3) or a 3-channel FrameStack."""
    from skimage import color

    data = rgb.data if hasattr(rgb, "data") and hasattr(rgb, "channels") else np.asarray(rgb, dtype=np.float64)
    if data.shape[-1] != 3:
        raise OpticalError("expected three colour channels")
    if data.min() < 0.0 or data.max() > 1.0:
        raise OpticalError("RGB values must lie in [0, 1]")
    if data.ndim == 3:
        data = data[None]
    lab = color.rgb2lab(data, illuminant="D65", channel_axis=-1)
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return LabStack(lab)


# --- k-means ------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    iterations: int
    inertia: float


def _nearest(X, C):
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    lab = np.argmin(d, axis=1)
    return lab, d[np.arange(len(X)), lab]


def kmeans(X, k: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations until the largest centre shift < ``tol``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise OpticalError("k-means needs a non-empty (N, d) array")
    if k < 1 or X.shape[0] < k:
        raise OpticalError("need 1 <= k <= number of points")
    rng = np.random.default_rng(seed)
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(X.shape[0])]
    d2 = ((X - C[0]) ** 2).sum(1)
    for j in range(1, k):
        tot = d2.sum()
        i = rng.choice(X.shape[0], p=d2 / tot) if tot > 0 else rng.integers(X.shape[0])
        C[j] = X[i]
        d2 = np.minimum(d2, ((X - C[j]) ** 2).sum(1))
    it = 0
    for it in range(1, max_iter + 1):
        lab, dist = _nearest(X, C)
        new = C.copy()
        for j in range(k):
            sel = lab == j
            if sel.any():
                new[j] = X[sel].mean(0)
            else:
                # re-seed an empty cluster at the worst-fit point
                new[j] = X[int(np.argmax(dist))]
                dist[int(np.argmax(dist))] = 0.0
        shift = np.sqrt(((new - C) ** 2).sum(1)).max()
        C = new
        if shift < tol:
            break
    lab, dist = _nearest(X, C)
    return KMeansResult(C, lab, it, float(dist.sum()))


def kmeans_lab(stack: LabStack, k: int = 4, seed: int = 0, mask=None) -> KMeansResult:
    """Cluster LAB pixels (optionally only ``mask`` pixels); labels have the frames' shape (-1 outside mask)."""
    X = stack.pixels(mask)
    res = kmeans(X, k, seed)
    if mask is None:
        labels = res.labels.reshape(stack.frames.shape[:-1])
    else:
        labels = np.full(stack.frames.shape[:-1], -1, dtype=int)
        labels[np.asarray(mask, bool).reshape(labels.shape)] = res.labels
    return KMeansResult(res.centers, labels, res.iterations, res.inertia)


def assign_phase_ids(centers) -> dict[int, int]:
    """Map cluster index to phase code: darkest is background; of the rest, most negative b* is
    blue, most positive b* is gold and the remainder red."""
    C = np.asarray(centers, dtype=np.float64)
    if C.shape != (4, 3):
        raise OpticalError("phase assignment needs exactly four LAB centres")
    bg = int(np.argmin(C[:, 0]))
    rest = [i for i in range(4) if i != bg]
    order = sorted(rest, key=lambda i: C[i, 2])
    return {bg: BACKGROUND, order[0]: BLUE, order[1]: RED, order[2]: GOLD}


# --- particles ----------------------------------------------------------------


PERIMETER_SMOOTHING = 0.6


def contour_perimeter(mask, smoothing: float = PERIMETER_SMOOTHING) -> float:
    """Length of the 0.5 iso-contour of a lightly blurred, zero-padded binary mask.

    Contouring the raw mask follows the pixel staircase and overestimates
    curved boundaries by about 5%; the blur removes most of that bias.
    """
    from skimage import measure

    m = np.pad(np.asarray(mask, dtype=np.float64), 4)
    if smoothing > 0:
        m = ndimage.gaussian_filter(m, smoothing)
    return float(sum(np.hypot(*np.diff(c, axis=0).T).sum() for c in measure.find_contours(m, 0.5)))


@dataclass
class ParticleTable:
    label_image: np.ndarray
    ids: np.ndarray
    area: np.ndarray
    perimeter: np.ndarray
    char_size: np.ndarray
    centroid: np.ndarray
    pixel_size: float = 1.0
    mean_concentration: np.ndarray | None = None

    def __len__(self):
        return int(self.ids.size)

    def rows(self) -> list[dict]:
        out = []
        for n in range(len(self)):
            r = {"id": int(self.ids[n]), "area_px": int(self.area[n]), "perimeter_px": float(self.perimeter[n]),
                 "char_size": float(self.char_size[n]), "centroid_y": float(self.centroid[n, 0]),
                 "centroid_x": float(self.centroid[n, 1])}
            if self.mean_concentration is not None:
                r["c_mean_final"] = float(self.mean_concentration[-1, n])
            out.append(r)
        return out


def segment_particles(labels, background_id: int = 0, min_area: int = MIN_AREA, pixel_size: float = 1.0) -> ParticleTable:
    """8-connected components of non-background pixels, dropping those smaller than ``min_area``.

    Characteristic size is ``area / perimeter * pixel_size``.
    """
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise OpticalError("segment a single 2D label image")
    fg = lab != background_id
    comp, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    out = np.zeros_like(comp)
    ids, areas, perims, cents = [], [], [], []
    nxt = 1
    for i, sl in enumerate(ndimage.find_objects(comp), start=1):
        m = comp[sl] == i
        a = int(m.sum())
        if a < min_area:
            continue
        out[sl][m] = nxt
        ids.append(nxt)
        areas.append(a)
        perims.append(contour_perimeter(m))
        yy, xx = np.nonzero(m)
        cents.append((yy.mean() + sl[0].start, xx.mean() + sl[1].start))
        nxt += 1
    areas = np.array(areas, dtype=np.int64)
    perims = np.array(perims, dtype=np.float64)
    return ParticleTable(out, np.array(ids, dtype=int), areas, perims,
                         areas / np.where(perims > 0, perims, 1.0) * pixel_size,
                         np.array(cents, dtype=np.float64).reshape(-1, 2), pixel_size)


def particle_concentration(table: ParticleTable, phases) -> np.ndarray:
    """Mean phase concentration per particle and frame, ``(T, n_particles)``; NaN where no phase pixels."""
    pm = phases if isinstance(phases, PhaseMap) else PhaseMap(np.asarray(phases))
    ph, conc = pm.labels, pm.concentration
    valid = ph != BACKGROUND
    idx = table.ids
    out = np.full((ph.shape[0], idx.size), np.nan)
    for t in range(ph.shape[0]):
        lab_t = np.where(valid[t], table.label_image, 0)
        s = ndimage.sum_labels(conc[t], lab_t, idx)
        n = ndimage.sum_labels(np.ones_like(conc[t]), lab_t, idx)
        out[t] = np.where(n > 0, s / np.maximum(n, 1), np.nan)
    table.mean_concentration = out
    return out


# --- phase rules --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PhaseMap:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if not np.issubdtype(lab.dtype, np.integer) or np.any((lab < BACKGROUND) | (lab > GOLD)):
            raise OpticalError("phase codes must be integers in 0..3")
        object.__setattr__(self, "labels", lab.astype(np.int8))

    @property
    def concentration(self) -> np.ndarray:
        out = np.zeros(self.labels.shape)
        for code, c in PHASE_CONCENTRATION.items():
            out[self.labels == code] = c
        return out


def classify_phases(raw, mask=None, solid_solution=(0, 0)) -> PhaseMap:
    """Apply the five transition rules to raw per-pixel phase codes ``(T, ...)``.

    1. particle pixels are blue during frames ``solid_solution[0]:solid_solution[1]``;
    2. pixels blue in the final frame become background in every frame;
    3. after a pixel's first red frame past the solid-solution range, blue becomes red;
    4. reversals are removed by carrying the highest phase reached forward;
    5. background is absorbing.
    Pixels outside ``mask`` are background throughout.
    """
    L = np.array(raw, dtype=np.int64)
    if L.ndim < 1 or L.shape[0] < 1:
        raise OpticalError("need at least one frame")
    if np.any((L < BACKGROUND) | (L > GOLD)):
        raise OpticalError("phase codes must lie in 0..3")
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != L.shape[1:] and mask.shape != L.shape:
            raise OpticalError("mask shape does not match labels")
        L = np.where(mask, L, BACKGROUND)
        particle = np.broadcast_to(mask, L.shape) if mask.shape == L.shape[1:] else mask
    else:
        particle = np.ones(L.shape, bool)
    T = L.shape[0]
    s0, s1 = max(0, int(solid_solution[0])), min(T, int(solid_solution[1]))
    # rule 1
    if s1 > s0:
        L[s0:s1] = np.where(particle[s0:s1], BLUE, L[s0:s1])
    # rule 2
    L = np.where((L[-1] == BLUE)[None], BACKGROUND, L)
    # rule 3
    t = np.arange(T).reshape((T,) + (1,) * (L.ndim - 1))
    red_after = (L == RED) & (t >= s1)
    has = red_after.any(axis=0)
    onset = np.where(has, np.argmax(red_after, axis=0), T)
    L = np.where((L == BLUE) & (t > onset[None]), RED, L)
    # rule 4: background is 0, so a running max over the trace only lifts phase pixels
    L = np.where(L == BACKGROUND, BACKGROUND, np.maximum.accumulate(L, axis=0))
    # rule 5
    seen_bg = np.maximum.accumulate(L == BACKGROUND, axis=0)
    return PhaseMap(np.where(seen_bg, BACKGROUND, L))


def soc_estimate(phases) -> np.ndarray:
    """``sum_i c_i a_i`` per frame, with area fractions taken over non-background pixels."""
    ph = phases.labels if isinstance(phases, PhaseMap) else np.asarray(phases)
    T = ph.shape[0]
    flat = ph.reshape(T, -1)
    n = (flat != BACKGROUND).sum(axis=1)
    if np.any(n == 0):
        raise OpticalError("a frame has no particle pixels")
    soc = np.zeros(T)
    for code, c in PHASE_CONCENTRATION.items():
        soc += c * (flat == code).sum(axis=1) / n
    return soc


# --- statistics ---------------------------------------------------------------


@dataclass
class LogNormalFit:
    mu_log: float
    sigma_log: float
    mean: float
    std: float
    n: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {"mu_log": self.mu_log, "sigma_log": self.sigma_log, "mean": self.mean, "std": self.std,
                "n": self.n, "degenerate": self.degenerate}


def size_distribution(sizes) -> LogNormalFit:
    """Maximum-likelihood log-normal fit; reports log-space parameters and the distribution's mean/std."""
    s = np.asarray(sizes.char_size if isinstance(sizes, ParticleTable) else sizes, dtype=np.float64)
    if s.size < 3:
        raise OpticalError("need at least three particles")
    if np.any(s <= 0):
        raise OpticalError("sizes must be positive")
    ls = np.log(s)
    m, sd = float(ls.mean()), float(ls.std())
    degenerate = bool(np.ptp(ls) == 0.0)
    if degenerate:
        sd = 0.0
    mean = float(np.exp(m + sd**2 / 2))
    std = float(mean * np.sqrt(np.expm1(sd**2)))
    return LogNormalFit(m, sd, mean, std, int(s.size), degenerate)


@dataclass
class DensityGrid:
    c: np.ndarray
    size: np.ndarray
    density: np.ndarray
    bandwidth: np.ndarray

    def integral(self) -> float:
        return float(self.density.sum() * (self.c[1] - self.c[0]) * (self.size[1] - self.size[0]))


def population_density(table: ParticleTable, frame: int = -1, bandwidth=None, **kw) -> DensityGrid:
    """Population density over (c-bar, V/A) at ``frame``; needs ``particle_concentration`` run first."""
    if table.mean_concentration is None:
        raise OpticalError("particle concentrations have not been computed")
    return kde_grid(table.mean_concentration[frame], table.char_size, bandwidth, **kw)


def kde_grid(c_mean, char_size, bandwidth=None, n_grid: int = 128, pad: float = 4.0) -> DensityGrid:
    """Gaussian KDE over (particle-averaged concentration, characteristic size).

    Silverman bandwidth unless ``bandwidth`` (a scipy ``bw_method``) is given.
    The grid extends ``pad`` kernel standard deviations past the data so the
    density integrates to one.
    """
    c = np.asarray(c_mean, dtype=np.float64)
    v = np.asarray(char_size, dtype=np.float64)
    ok = np.isfinite(c) & np.isfinite(v)
    c, v = c[ok], v[ok]
    if c.size < 2:
        raise OpticalError("need at least two particles")
    try:
        kde = stats.gaussian_kde(np.vstack([c, v]), bw_method="silverman" if bandwidth is None else bandwidth)
    except np.linalg.LinAlgError:
        raise OpticalError("particle values are degenerate (singular covariance)") from None
    bw = np.sqrt(np.diag(kde.covariance))
    gc = np.linspace(c.min() - pad * bw[0], c.max() + pad * bw[0], n_grid)
    gv = np.linspace(v.min() - pad * bw[1], v.max() + pad * bw[1], n_grid)
    CC, VV = np.meshgrid(gc, gv, indexing="ij")
    dens = kde(np.vstack([CC.ravel(), VV.ravel()])).reshape(CC.shape)
    return DensityGrid(gc, gv, dens, bw)
