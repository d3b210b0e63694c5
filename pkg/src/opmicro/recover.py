"""Recover a :class:`~opmicro.legendre.MaterialModel` from snapshots of one trajectory.

Multiple shooting: every consecutive pair of observed snapshots defines one
short forward run that starts from the observed initial field.  The pixel
mismatches at the pair's final time are stacked into one residual vector,
scaled so that its squared norm is the mean squared error over all pixels,
and ``sqrt(reg_lambda) * theta`` rows are appended when reg_lambda > 0.
The stacked problem is solved by Levenberg-Marquardt with a
forward-difference Jacobian whose columns are integrated together in one
batched simulation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .chsim import ChParams, integrate
from .fieldstore import FrameStack
from .legendre import MaterialModel, batch_law

log = logging.getLogger(__name__)

C_GRID = np.linspace(0.01, 0.99, 101)


class RecoveryError(RuntimeError):
    """Ill-posed problem setup (bad snapshot times, degree mismatch)."""


def select_snapshots(n_frames: int, n_snapshots: int = 5, start_fraction: float = 1.0 / 3.0) -> list[int]:
    """Frame indices log-spaced from ``start_fraction`` of the run to the last frame."""
    if n_snapshots < 2:
        raise ValueError("need at least two snapshots")
    lo = max(1, int(round(start_fraction * (n_frames - 1))))
    hi = n_frames - 1
    if hi - lo + 1 < n_snapshots:
        raise ValueError(f"cannot pick {n_snapshots} distinct frames from [{lo}, {hi}]")
    idx = np.unique(np.round(np.geomspace(lo, hi, n_snapshots)).astype(int))
    # rounding can merge neighbours on short runs; fall back to linear spacing
    if idx.size < n_snapshots:
        idx = np.unique(np.round(np.linspace(lo, hi, n_snapshots)).astype(int))
    return idx.tolist()


@dataclass(eq=False)
class ShootingProblem:
    """Observed snapshots plus everything needed to simulate between them.

    ``fields`` has shape ``(S, ny, nx)`` and ``times`` length ``S``.  Pairs
    are ``(k, k+1)`` for consecutive snapshots; ``pairs`` may be overridden
    (e.g. by bootstrap resampling) with any list of such index pairs.
    """

    times: np.ndarray
    fields: np.ndarray
    sim_params: ChParams
    model0: MaterialModel
    reg_lambda: float = 0.0
    clip: tuple[float, float] | None = (0.01, 0.99)
    penalty: float = 10.0
    pairs: list[tuple[int, int]] | None = None
    fit_mu_constant: bool = False
    steps: list[int] = field(init=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        f = np.asarray(self.fields, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] != self.times.size:
            raise RecoveryError("fields must be (S, ny, nx) with one time per snapshot")
        if f.shape[1:] != self.sim_params.shape:
            raise RecoveryError(f"snapshot shape {f.shape[1:]} does not match grid {self.sim_params.shape}")
        if self.times.size < 2 and self.pairs is None:
            raise RecoveryError("need at least two snapshots")
        if np.any(np.diff(self.times) <= 0):
            raise RecoveryError("snapshot times must be strictly increasing")
        if self.clip is not None:
            f = np.clip(f, *self.clip)
        self.fields = f
        if self.reg_lambda < 0:
            raise RecoveryError("reg_lambda must be non-negative")
        if self.pairs is None:
            self.pairs = [(k, k + 1) for k in range(self.times.size - 1)]
        self.pairs = [(int(i), int(j)) for i, j in self.pairs]
        dt = self.sim_params.dt
        # a_0 shifts mu_h by a constant and never reaches the flux, so it is held fixed
        full = self.model0.params()
        mask = np.ones(full.size, dtype=bool)
        if self.model0.include_constant and not self.fit_mu_constant:
            mask[0] = False
        self.free = mask
        self.steps = []
        for i, j in self.pairs:
            n = (self.times[j] - self.times[i]) / dt
            if n < 0.5 or abs(n - round(n)) > 1e-6 * max(1.0, n):
                raise RecoveryError(f"pair ({i},{j}) spans {n:g} time steps; need a positive integer")
            self.steps.append(int(round(n)))

    @classmethod
    def from_stack(cls, stack: FrameStack, sim_params: ChParams, model0: MaterialModel,
                   indices=None, n_snapshots: int = 5, **kw) -> "ShootingProblem":
        if indices is None:
            indices = select_snapshots(stack.n_frames, n_snapshots)
        indices = [int(i) for i in indices]
        return cls(stack.times[indices], stack.gray()[indices], sim_params, model0, **kw)

    def with_pairs(self, pairs) -> "ShootingProblem":
        return ShootingProblem(self.times, self.fields, self.sim_params, self.model0, self.reg_lambda,
                               None, self.penalty, list(pairs), self.fit_mu_constant)

    @property
    def n_params(self) -> int:
        return int(self.free.sum())

    def theta_of(self, model: MaterialModel) -> np.ndarray:
        """Free parameter vector of ``model``."""
        return model.params()[self.free]

    def model_of(self, theta) -> MaterialModel:
        full = self.model0.params().copy()
        full[self.free] = theta
        return self.model0.with_params(full)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_pixels(self) -> int:
        return self.n_pairs * self.fields[0].size

    # -- forward model ---------------------------------------------------------

    def predict(self, models) -> tuple[np.ndarray, np.ndarray]:
        """Final-time predictions ``(B, P, ny, nx)`` and per-model success flags."""
        models = list(models)
        B = len(models)
        law = batch_law(models)
        out = np.empty((B, self.n_pairs) + self.fields.shape[1:])
        ok = np.ones(B, dtype=bool)
        for p, ((i, _), n) in enumerate(zip(self.pairs, self.steps)):
            c0 = np.broadcast_to(self.fields[i], (B,) + self.fields.shape[1:])
            frames, good = integrate(self.sim_params, law, c0, n, strict=False)
            out[:, p] = frames[-1]
            ok &= good
        return out, ok

    def _stack_residuals(self, pred, ok, thetas):
        B = pred.shape[0]
        obs = self.fields[[j for _, j in self.pairs]]
        scale = 1.0 / np.sqrt(max(self.n_pixels, 1))
        data = ((pred - obs[None]) * scale).reshape(B, -1)
        data[~ok] = self.penalty * scale
        if self.reg_lambda == 0:
            return data
        reg = np.sqrt(self.reg_lambda) * np.asarray(thetas).reshape(B, -1)
        return np.concatenate([data, reg], axis=1)

    def residuals_batch(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        models = [self.model_of(t) for t in thetas]
        if self.n_pairs == 0:
            return self._stack_residuals(np.zeros((len(models), 0) + self.fields.shape[1:]),
                                         np.ones(len(models), bool), thetas), np.ones(len(models), bool)
        pred, ok = self.predict(models)
        return self._stack_residuals(pred, ok, thetas), ok

    def residual_vector(self, theta) -> tuple[np.ndarray, bool]:
        r, ok = self.residuals_batch(theta)
        return r[0], bool(ok[0])

    def jacobian(self, theta, rel_step: float = 1e-5) -> tuple[np.ndarray, np.ndarray, bool]:
        """Residual and forward-difference Jacobian, all columns in one batch.

        Step ``h_j = rel_step * max(1, |theta_j|)``.
        """
        theta = np.asarray(theta, dtype=np.float64)
        h = rel_step * np.maximum(1.0, np.abs(theta))
        thetas = np.vstack([theta, theta + np.diag(h)])
        R, ok = self.residuals_batch(thetas)
        J = (R[1:] - R[0]) / h[:, None]
        return R[0], J.T, bool(ok.all())

    def data_mse(self, r: np.ndarray) -> tuple[float, np.ndarray]:
        """Total and per-pair pixel MSE from a stacked residual vector."""
        npx = self.fields[0].size
        data = r[: self.n_pixels] * np.sqrt(max(self.n_pixels, 1))
        per = (data.reshape(self.n_pairs, npx) ** 2).mean(axis=1) if self.n_pairs else np.zeros(0)
        return float(per.mean()) if per.size else 0.0, per


def residuals(problem: ShootingProblem, model: MaterialModel) -> np.ndarray:
    """Stacked, scaled pixel residuals followed by the regularization rows."""
    if model.degree != problem.model0.degree or model.physical_prior != problem.model0.physical_prior:
        raise RecoveryError("model layout does not match the problem's initial model")
    return problem.residual_vector(problem.theta_of(model))[0]


# --- Levenberg-Marquardt core -------------------------------------------------


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    cost: float
    iterations: int
    converged: bool
    reason: str
    cost_trace: list[float]
    damping_trace: list[float]
    n_evaluations: int


def lm_solve(fun, jac, x0, *, max_iter: int = 50, gtol: float = 1e-10, xtol: float = 1e-8,
             ftol: float = 0.0, damping0: float = 1e-2, up: float = 3.0, down: float = 2.0,
             max_damping: float = 1e16, max_step: float = np.inf, callback=None) -> LMResult:
    """Minimize ``||r(x)||^2`` with Marquardt-scaled damping.

    ``fun(x) -> (r, ok)`` and ``jac(x) -> (r, J, ok)``.  A trial whose
    evaluation is flagged (``ok`` false) or whose cost does not decrease
    is rejected and the damping multiplied by ``up``; an accepted step
    divides it by ``down``.  Accepted costs are therefore non-increasing.
    Steps with an infinity norm above ``max_step`` are treated as rejected
    before evaluation.
    """
    x = np.array(x0, dtype=np.float64)
    r, J, ok = jac(x)
    if not ok:
        raise FloatingPointError("initial point produced a failed evaluation")
    cost = float(r @ r)
    mu = damping0
    trace, dtrace = [cost], [mu]
    n_eval = 1
    reason = "max_iter"
    converged = False
    it = 0
    while it < max_iter:
        g = J.T @ r
        if np.max(np.abs(g), initial=0.0) < gtol:
            reason, converged = "gtol", True
            break
        A = J.T @ J
        d = np.diag(A).copy()
        d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1e-300))
        accepted = False
        while mu <= max_damping:
            try:
                step = np.linalg.solve(A + mu * np.diag(d), -g)
            except np.linalg.LinAlgError:
                mu *= up
                continue
            if np.max(np.abs(step)) > max_step:
                mu *= up
                continue
            x_new = x + step
            r_new, ok_new = fun(x_new)
            n_eval += 1
            c_new = float(r_new @ r_new) if ok_new else np.inf
            if c_new < cost:
                accepted = True
                break
            mu *= up
        if not accepted:
            reason = "damping_overflow"
            log.warning("LM: all trial steps rejected (damping %.3g)", mu)
            break
        it += 1
        rel_drop = (cost - c_new) / max(cost, 1e-300)
        x = x_new
        mu = max(mu / down, 1e-300)
        r, J, _ = jac(x)
        n_eval += 1
        cost = float(r @ r)
        trace.append(cost)
        dtrace.append(mu)
        if callback is not None:
            callback(it, x, cost, mu)
        log.debug("LM iter %d cost %.6e damping %.3g", it, cost, mu)
        if np.linalg.norm(step) < xtol * (np.linalg.norm(x) + xtol):
            reason, converged = "xtol", True
            break
        if ftol > 0 and rel_drop < ftol:
            reason, converged = "ftol", True
            break
    return LMResult(x, r, cost, it, converged, reason, trace, dtrace, n_eval)


# --- recovery -----------------------------------------------------------------


@dataclass
class RecoveryResult:
    model: MaterialModel
    final_cost: float
    residual_mse: float
    iterations: int
    converged: bool
    per_pair_mse: np.ndarray
    cost_trace: list[float] = field(default_factory=list)
    reason: str = ""
    bootstrap_band: dict | None = None

    def curves(self, c=C_GRID) -> dict:
        out = {"c": np.asarray(c).tolist(), "mu_h": self.model.mu(c).tolist(), "D": self.model.diffusivity(c).tolist()}
        if self.bootstrap_band is not None:
            out["mu_h_std"] = list(self.bootstrap_band["mu_h_std"])
            out["D_std"] = list(self.bootstrap_band["D_std"])
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "final_cost": self.final_cost,
            "residual_mse": self.residual_mse,
            "iterations": self.iterations,
            "converged": self.converged,
            "termination": self.reason,
            "per_pair_mse": np.asarray(self.per_pair_mse).tolist(),
            "cost_trace": list(self.cost_trace),
            "curves": self.curves(),
        }


def levenberg_marquardt(problem: ShootingProblem, *, max_iter: int = 40, gtol: float = 1e-10,
                        xtol: float = 1e-6, ftol: float = 1e-6, damping0: float = 1e-2,
                        rel_step: float = 1e-5, max_step: float = 1.0, x0=None) -> RecoveryResult:
    """Fit the problem's model by damped Gauss-Newton; returns the best model found."""
    theta0 = problem.theta_of(problem.model0) if x0 is None else np.asarray(x0, dtype=np.float64)
    res = lm_solve(problem.residual_vector, lambda t: problem.jacobian(t, rel_step), theta0,
                   max_iter=max_iter, gtol=gtol, xtol=xtol, ftol=ftol, damping0=damping0, max_step=max_step)
    mse, per = problem.data_mse(res.residual)
    model = problem.model_of(res.x)
    log.info("recovery: %d iterations, cost %.4e, data MSE %.4e (%s)", res.iterations, res.cost, mse, res.reason)
    return RecoveryResult(model, res.cost, mse, res.iterations, res.converged, per, res.cost_trace, res.reason)


def bootstrap_recovery(problem: ShootingProblem, n_boot: int, seed: int, c=C_GRID,
                       base: RecoveryResult | None = None, **lm_kw) -> RecoveryResult:
    """Refit on pair sets resampled with replacement; attach per-c standard deviations.

    Replicates are warm-started from the full-data fit.  ``n_boot = 1``
    gives zero-width bands.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    if base is None:
        base = levenberg_marquardt(problem, **lm_kw)
    c = np.asarray(c, dtype=np.float64)
    mus, ds = [], []
    for rep in range(n_boot):
        rng = np.random.default_rng([int(seed), rep])
        pick = rng.integers(0, problem.n_pairs, size=problem.n_pairs)
        sub = problem.with_pairs([problem.pairs[k] for k in pick])
        fit = levenberg_marquardt(sub, x0=problem.theta_of(base.model), **lm_kw)
        mus.append(fit.model.mu(c))
        ds.append(fit.model.diffusivity(c))
    mus, ds = np.array(mus), np.array(ds)
    band = {"c": c.tolist(), "n_boot": int(n_boot), "mu_h_std": mus.std(axis=0).tolist(),
            "D_std": ds.std(axis=0).tolist(), "mu_h_mean": mus.mean(axis=0).tolist(),
            "D_mean": ds.mean(axis=0).tolist()}
    return RecoveryResult(base.model, base.final_cost, base.residual_mse, base.iterations, base.converged,
                          base.per_pair_mse, base.cost_trace, base.reason, band)
