"""Classical denoisers and a linear blind-spot regressor.

The blind-spot model predicts each pixel as a weighted sum of its patch
neighbours with a mask zone (the pixel itself, or a horizontal run of
``mask_width`` pixels through it) removed, so noise at the pixel cannot be
copied into its own prediction.  Deep denoisers are not trained here; their
outputs can be loaded as ordinary stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fieldstore import FrameStack

KINDS = ("identity", "median_spatial", "median_temporal", "gaussian_blur", "total_variation", "blind_spot")

DEFAULTS = {
    "identity": {},
    "median_spatial": {"size": 3},
    "median_temporal": {"window": 3},
    "gaussian_blur": {"blur_sigma": 0.5},
    "total_variation": {"tv_weight": 0.01, "tv_iterations": 50},
    "blind_spot": {"mask_shape": "horizontal", "mask_width": 7, "patch_radius": 4,
                   "ridge_lambda": 1e-3, "max_samples": 20000},
}


class DenoiseError(ValueError):
    """Unknown denoiser kind or invalid parameters."""


class SingularSystemError(DenoiseError):
    """Blind-spot normal equations are singular; increase ridge_lambda."""


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DenoiseError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise DenoiseError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        p = {**DEFAULTS[self.kind], **self.params}
        for key in ("size", "window", "blur_sigma", "tv_weight", "tv_iterations", "mask_width",
                    "patch_radius", "max_samples"):
            if key in p and not p[key] > 0:
                raise DenoiseError(f"{key} must be positive")
        if p.get("ridge_lambda", 0) < 0:
            raise DenoiseError("ridge_lambda must be non-negative")
        for key in ("size", "window", "mask_width"):
            if key in p and int(p[key]) % 2 == 0:
                raise DenoiseError(f"{key} must be odd")
        if self.kind == "blind_spot":
            if p["mask_shape"] not in ("point", "horizontal"):
                raise DenoiseError("mask_shape must be 'point' or 'horizontal'")
            half = (int(p["mask_width"]) - 1) // 2 if p["mask_shape"] == "horizontal" else 0
            if p["patch_radius"] < max(half, 1):
                raise DenoiseError("patch_radius must cover the mask extent")
        object.__setattr__(self, "params", p)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


# --- classical filters --------------------------------------------------------


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    # negative adjoint of _grad
    dx = np.zeros_like(px)
    dy = np.zeros_like(py)
    dx[:, 0] = px[:, 0]
    dx[:, 1:-1] = px[:, 1:-1] - px[:, :-2]
    dx[:, -1] = -px[:, -2]
    dy[0, :] = py[0, :]
    dy[1:-1, :] = py[1:-1, :] - py[:-2, :]
    dy[-1, :] = -py[-2, :]
    return dx + dy


def tv_denoise(f, weight: float, n_iter: int = 50, tau: float = 0.25) -> np.ndarray:
    """ROF denoising, ``min_u |u - f|^2 / 2 + weight * TV(u)``, by dual projection.

    Runs exactly ``n_iter`` iterations with step ``tau`` (stable for tau <= 1/4).
    """
    f = np.asarray(f, dtype=np.float64)
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    for _ in range(int(n_iter)):
        gx, gy = _grad(_div(px, py) - f / weight)
        norm = 1.0 + tau * np.hypot(gx, gy)
        px = (px + tau * gx) / norm
        py = (py + tau * gy) / norm
    return f - weight * _div(px, py)


# --- blind-spot regressor -----------------------------------------------------


def mask_offsets(mask_shape: str, mask_width: int) -> set[tuple[int, int]]:
    if mask_shape == "point":
        return {(0, 0)}
    half = (mask_width - 1) // 2
    return {(0, dx) for dx in range(-half, half + 1)}


@dataclass(frozen=True, eq=False)
class BlindSpotModel:
    """Ridge-regression weights over unmasked patch offsets (no intercept)."""

    offsets: tuple[tuple[int, int], ...]
    weights: np.ndarray
    patch_radius: int
    mask_shape: str
    mask_width: int
    ridge_lambda: float
    n_samples: int

    def weight_map(self) -> np.ndarray:
        """Weights on the full ``(2r+1, 2r+1)`` patch; masked positions are exactly 0."""
        r = self.patch_radius
        w = np.zeros((2 * r + 1, 2 * r + 1))
        for (dy, dx), v in zip(self.offsets, self.weights):
            w[r + dy, r + dx] = v
        return w

    def predict(self, frame) -> np.ndarray:
        """Shifted sum over unmasked offsets only.

        Offsets falling outside the image are dropped and the remaining
        weights rescaled to the full weight sum.  Mirrored padding would let
        a border pixel read a reflected copy of its own masked zone.
        """
        r = self.patch_radius
        f = np.asarray(frame, dtype=np.float64)
        H, W = f.shape
        padded = np.pad(f, r)
        inside = np.pad(np.ones((H, W)), r)
        out = np.zeros((H, W))
        norm = np.zeros((H, W))
        for (dy, dx), v in zip(self.offsets, self.weights):
            sl = (slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
            out += v * padded[sl]
            norm += v * inside[sl]
        total = float(np.sum(self.weights))
        ok = np.abs(norm) > 1e-3 * max(abs(total), 1e-12)
        return np.where(ok, out * (total / np.where(ok, norm, 1.0)), out)

    def to_dict(self) -> dict:
        return {"patch_radius": self.patch_radius, "mask_shape": self.mask_shape, "mask_width": self.mask_width,
                "ridge_lambda": self.ridge_lambda, "n_samples": self.n_samples,
                "weights": self.weight_map().tolist()}


def _patch_features(padded, offsets, r, t, i, j):
    # padded: (N, H', W') with patch centres at (i + r, j + r); returns (len(t), K)
    X = np.empty((len(t), len(offsets)))
    for k, (dy, dx) in enumerate(offsets):
        X[:, k] = padded[t, i + r + dy, j + r + dx]
    return X


def fit_blind_spot(stack: FrameStack, spec: DenoiserSpec, seed: int) -> BlindSpotModel:
    """Fit the masked linear predictor on pixels sampled (seeded) from every frame and channel."""
    if spec.kind != "blind_spot":
        raise DenoiseError("fit_blind_spot needs a blind_spot spec")
    p = spec.params
    r = int(p["patch_radius"])
    masked = mask_offsets(p["mask_shape"], int(p["mask_width"]))
    offsets = tuple((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) not in masked)
    frames = np.moveaxis(stack.data, -1, 1).reshape(-1, *stack.shape)
    N, H, W = frames.shape
    # training pixels whose whole patch lies inside the frame
    h, w = H - 2 * r, W - 2 * r
    if h < 1 or w < 1:
        raise DenoiseError("frames are smaller than one patch")
    rng = np.random.default_rng(seed)
    total = N * h * w
    n = min(int(p["max_samples"]), total)
    flat = np.sort(rng.choice(total, size=n, replace=False))
    t, rem = np.divmod(flat, h * w)
    i, j = np.divmod(rem, w)
    X = _patch_features(frames, offsets, r, t, i, j)
    y = frames[t, i + r, j + r]
    A = X.T @ X
    lam = float(p["ridge_lambda"])
    A[np.diag_indices_from(A)] += lam
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSystemError(f"normal equations are singular (cond {cond:.3g}); increase ridge_lambda")
    w = np.linalg.solve(A, X.T @ y)
    return BlindSpotModel(offsets, w, r, p["mask_shape"], int(p["mask_width"]), lam, n)


# --- dispatcher ---------------------------------------------------------------


def denoise_stack(stack: FrameStack, spec: DenoiserSpec, seed: int = 0) -> FrameStack:
    """Apply one denoiser to every frame and channel; identity returns the input object."""
    if stack.n_frames < 1:
        raise DenoiseError("empty stack")
    p = spec.params
    if spec.kind == "identity":
        return stack
    data = stack.data.astype(np.float64)
    if spec.kind == "median_temporal":
        out = ndimage.median_filter(data, size=(int(p["window"]), 1, 1, 1), mode="nearest")
    else:
        model = fit_blind_spot(stack, spec, seed) if spec.kind == "blind_spot" else None
        out = np.empty_like(data)
        for t in range(data.shape[0]):
            for ch in range(data.shape[-1]):
                f = data[t, ..., ch]
                if spec.kind == "median_spatial":
                    g = ndimage.median_filter(f, size=int(p["size"]), mode="nearest")
                elif spec.kind == "gaussian_blur":
                    g = ndimage.gaussian_filter(f, float(p["blur_sigma"]), mode="nearest")
                elif spec.kind == "total_variation":
                    g = tv_denoise(f, float(p["tv_weight"]), int(p["tv_iterations"]))
                else:
                    g = model.predict(f)
                out[t, ..., ch] = g
    meta = {**stack.meta, "denoiser": spec.to_dict(), "denoise_seed": int(seed)}
    return stack.replace(data=out, meta=meta)
