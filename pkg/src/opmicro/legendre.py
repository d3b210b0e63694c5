"""Shifted Legendre basis on [0, 1] and the polynomial material model.

The basis is orthonormal in L2([0, 1])::

    P~_n(c) = sqrt(2n + 1) * P_n(2c - 1)

A :class:`MaterialModel` holds coefficient vectors ``a`` (chemical potential)
and ``b`` (log diffusivity) over this basis.  With the lattice-entropy prior
the chemical potential is ``log(c / (1 - c)) + sum a_n P~_n(c)``; the
diffusivity is always ``exp(sum b_n P~_n(c))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

C_FLOOR = 1e-6
MAX_EXPONENT = 50.0

# Basis convention written into every model file and report.
BASIS_CONVENTION = "shifted Legendre on [0,1], unit L2 norm: sqrt(2n+1)*P_n(2c-1)"


class ModelDomainError(ValueError):
    """Concentration outside the admissible interval, or exponent overflow."""


def legendre_basis(c, degree: int) -> np.ndarray:
    """All basis values ``P~_0..P~_degree`` at ``c``; shape ``(degree+1,) + c.shape``.

    Uses the three-term recurrence for P_n on x = 2c - 1.
    """
    c = np.asarray(c, dtype=np.float64)
    x = 2.0 * c - 1.0
    out = np.empty((degree + 1,) + c.shape)
    out[0] = 1.0
    if degree >= 1:
        out[1] = x
    for n in range(1, degree):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    scale = np.sqrt(2.0 * np.arange(degree + 1) + 1.0)
    return out * scale.reshape((-1,) + (1,) * c.ndim)


def legendre_eval(n: int, c):
    """Normalized shifted Legendre polynomial of order ``n`` at ``c`` in [0, 1]."""
    if n < 0:
        raise ValueError("order must be non-negative")
    arr = np.asarray(c, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ModelDomainError("Legendre basis is defined on c in [0, 1]")
    val = legendre_basis(arr, n)[n]
    return float(val) if np.ndim(c) == 0 else val


def series(coef, c) -> np.ndarray:
    """``sum_n coef[n] * P~_n(c)`` (``coef`` may carry a leading batch axis)."""
    coef = np.asarray(coef, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    basis = legendre_basis(c, coef.shape[-1] - 1)
    if coef.ndim == 1:
        return np.tensordot(coef, basis, axes=(0, 0))
    # batched: coef (B, N+1), c (B, ...)
    out = np.zeros(c.shape)
    for n in range(coef.shape[-1]):
        out += coef[:, n].reshape((-1,) + (1,) * (c.ndim - 1)) * basis[n]
    return out


def project(fn, degree: int, lo: float = 0.0, hi: float = 1.0, n_quad: int = 128) -> np.ndarray:
    """Least-squares (L2 on [lo, hi]) coefficients of ``fn`` in the basis.

    On the full interval this is the orthogonal projection; on a
    sub-interval it is the weighted least-squares fit at Gauss-Legendre
    nodes of that sub-interval.
    """
    xg, wg = np.polynomial.legendre.leggauss(n_quad)
    c = 0.5 * (hi - lo) * (xg + 1.0) + lo
    w = np.sqrt(0.5 * (hi - lo) * wg)
    basis = legendre_basis(c, degree).T
    coef, *_ = np.linalg.lstsq(basis * w[:, None], np.asarray(fn(c)) * w, rcond=None)
    return coef


@dataclass(frozen=True, eq=False)
class MaterialModel:
    """Coefficients for the chemical potential and the log-diffusivity.

    ``include_constant=False`` pins ``a[0]`` and ``b[0]`` at zero; they are
    then excluded from the free parameter vector.
    """

    a: np.ndarray
    b: np.ndarray
    physical_prior: bool = True
    include_constant: bool = True
    c_floor: float = C_FLOOR

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).ravel()
        b = np.array(self.b, dtype=np.float64).ravel()
        if a.size < 1 or a.size != b.size:
            raise ValueError(f"coefficient vectors must be equal, non-empty length (got {a.size}, {b.size})")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("coefficients must be finite")
        if not self.include_constant:
            a[0] = 0.0
            b[0] = 0.0
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def degree(self) -> int:
        return self.a.size - 1

    @classmethod
    def zeros(cls, degree: int, **kw) -> "MaterialModel":
        return cls(np.zeros(degree + 1), np.zeros(degree + 1), **kw)

    # parameter-vector view used by the optimizer
    @property
    def free_index(self) -> np.ndarray:
        start = 0 if self.include_constant else 1
        return np.arange(start, self.degree + 1)

    @property
    def n_params(self) -> int:
        return 2 * self.free_index.size

    def params(self) -> np.ndarray:
        idx = self.free_index
        return np.concatenate([self.a[idx], self.b[idx]])

    def with_params(self, theta) -> "MaterialModel":
        theta = np.asarray(theta, dtype=np.float64)
        idx = self.free_index
        if theta.shape != (2 * idx.size,):
            raise ValueError(f"expected {2 * idx.size} parameters, got {theta.shape}")
        a = np.zeros(self.degree + 1)
        b = np.zeros(self.degree + 1)
        a[idx] = theta[: idx.size]
        b[idx] = theta[idx.size:]
        return MaterialModel(a, b, self.physical_prior, self.include_constant, self.c_floor)

    def _check(self, c, lo, hi):
        c = np.asarray(c, dtype=np.float64)
        if np.any(c < lo) or np.any(c > hi):
            raise ModelDomainError(f"concentration outside [{lo}, {hi}]")
        return c

    def mu(self, c):
        """Homogeneous chemical potential; ``c`` must lie in [c_floor, 1 - c_floor]."""
        c = self._check(c, self.c_floor, 1.0 - self.c_floor)
        out = series(self.a, c)
        if self.physical_prior:
            out = out + np.log(c / (1.0 - c))
        return out

    def log_diffusivity(self, c):
        c = self._check(c, 0.0, 1.0)
        s = series(self.b, c)
        if np.any(s > MAX_EXPONENT):
            raise ModelDomainError(f"log-diffusivity exceeds {MAX_EXPONENT}")
        return s

    def diffusivity(self, c):
        return np.exp(self.log_diffusivity(c))

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "physical_prior": self.physical_prior,
            "include_constant": self.include_constant,
            "c_floor": self.c_floor,
            "basis": BASIS_CONVENTION,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialModel":
        m = cls(d["a"], d["b"], bool(d.get("physical_prior", True)), bool(d.get("include_constant", True)),
                float(d.get("c_floor", C_FLOOR)))
        if "degree" in d and int(d["degree"]) != m.degree:
            raise ValueError("degree does not match coefficient length")
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MaterialModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_mu(model: MaterialModel, c):
    return model.mu(c)


def model_D(model: MaterialModel, c):
    return model.diffusivity(c)


def project_ground_truth(degree: int, omega: float = 3.0, physical_prior: bool = True,
                         d_interval: tuple[float, float] = (0.01, 0.99), include_constant: bool = True) -> MaterialModel:
    """Coefficients that best represent the regular-solution law in the basis.

    With the prior only the enthalpic part ``omega (1 - 2c)`` needs
    representing (exact for degree >= 1).  ``log(1 - c)`` is fitted on
    ``d_interval`` because it is singular at c = 1.
    """
    if physical_prior:
        a = project(lambda c: omega * (1.0 - 2.0 * c), degree)
    else:
        lo, hi = d_interval
        a = project(lambda c: np.log(c / (1.0 - c)) + omega * (1.0 - 2.0 * c), degree, lo, hi)
    b = project(lambda c: np.log1p(-c), degree, *d_interval)
    return MaterialModel(a, b, physical_prior, include_constant)


def power_coefficients(coef) -> np.ndarray:
    """Monomial coefficients in ``x = 2c - 1`` (lowest order first) of a basis expansion."""
    coef = np.atleast_2d(np.asarray(coef, dtype=np.float64))
    scale = np.sqrt(2.0 * np.arange(coef.shape[-1]) + 1.0)
    out = np.zeros_like(coef)
    for i, row in enumerate(coef * scale):
        p = np.polynomial.legendre.leg2poly(row)
        out[i, : p.size] = p
    return out


def _horner(P, x, shape):
    out = np.broadcast_to(P[:, -1].reshape(shape), x.shape).copy()
    for k in range(P.shape[1] - 2, -1, -1):
        out *= x
        out += P[:, k].reshape(shape)
    return out


def _batched_eval(PA, PB, prior, c):
    # PA, PB: monomial coefficients in x = 2c - 1, one row per batch member
    shape = (-1,) + (1,) * (c.ndim - 1)
    x = 2.0 * c - 1.0
    mu = _horner(PA, x, shape)
    s = _horner(PB, x, shape)
    if prior:
        mu += np.log(c / (1.0 - c))
    np.minimum(s, MAX_EXPONENT, out=s)
    return mu, np.exp(s, out=s)


def model_law(model: MaterialModel):
    """Wrap a model as a :class:`~opmicro.chsim.MaterialLaw` (no domain checks)."""
    return batch_law([model], squeeze=True)


def batch_law(models, squeeze: bool = False):
    """One law evaluating ``len(models)`` models along a leading batch axis.

    All models must share degree and prior flag.  The log-diffusivity is
    capped at ``MAX_EXPONENT`` here; callers that need the hard overflow
    error should check with :meth:`MaterialModel.log_diffusivity` first.
    """
    from .chsim import MaterialLaw

    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    prior = models[0].physical_prior
    if any(m.physical_prior != prior or m.degree != models[0].degree for m in models):
        raise ValueError("batched models must share degree and prior flag")
    A = power_coefficients(np.stack([m.a for m in models]))
    B = power_coefficients(np.stack([m.b for m in models]))

    if squeeze:
        def both(c):
            c = np.asarray(c, dtype=np.float64)
            mu, d = _batched_eval(A, B, prior, c[None])
            return mu[0], d[0]
        batch = None
    else:
        def both(c):
            return _batched_eval(A, B, prior, np.asarray(c, dtype=np.float64))
        batch = len(models)

    return MaterialLaw(lambda c: both(c)[0], lambda c: both(c)[1], "legendre_model", batch=batch,
                       description={"models": [m.to_dict() for m in models]} if squeeze else {}, both=both)
