"""Fully discrete linear implicit Euler stepper.

One step advances X_m to X_{m+1} = (I + dt*A_h(t_m))^-1 applied to
X_m + dt*P_h F(t_m, X_m) + B(t_m, X_m) dW_m, with drift and diffusion given
as Nemytskii (pointwise) operators. Additive noise injects the increment
field directly; multiplicative noise multiplies it nodewise by b(x, X).
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import BackendMismatchError, ConfigurationError, NumericalError
from .operators import (Backend, GridFunction, cosine_basis_matrix, project,
                        solve_resolvent_values)


@dataclass(frozen=True)
class Additive:
    """Additive noise: the B-term is the increment field itself."""


@dataclass(frozen=True)
class MultiplicativeNemytskii:
    """Multiplicative Nemytskii noise with pointwise factor b(x, y, u).

    The default b is the identity in u, i.e. B(t, X) dW = X * dW nodewise.
    """

    b: Optional[Callable] = None

    def factor(self, x, y, u):
        if self.b is None:
            return u
        return self.b(x, y, u)


def drift_saturating(t, u):
    """Built-in bounded drift -e^(-t) u / (1 + |u|)."""
    return -np.exp(-t) * u / (1.0 + np.abs(u))


def drift_linear_reaction(k):
    """Built-in linear drift f(t, u) = k(t) * u for a time coefficient k."""
    if not callable(k):
        kv = float(k)
        k = lambda t, _v=kv: _v
    return lambda t, u: k(t) * u


@dataclass(frozen=True)
class SchemeConfig:
    """Time grid, drift/diffusion descriptors and initial data for a run."""

    t_final: float
    steps: int
    drift: Optional[Callable] = None
    diffusion: object = field(default_factory=Additive)
    initial: object = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.t_final <= 0.0:
            raise ConfigurationError("t_final must be positive")

    @property
    def dt(self):
        return self.t_final / self.steps


@lru_cache(maxsize=8)
def _spectral_grid(fam):
    """Midpoint tensor grid and basis matrices for pointwise spectral ops.

    The (N+1) midpoint nodes per axis make the cosine basis discretely
    orthonormal, so transform -> pointwise map -> transform-back is exact
    for linear maps.
    """
    N1, N2 = fam.mode_counts
    L1, L2 = fam.domain
    n1, n2 = N1 + 1, N2 + 1
    x = (np.arange(n1) + 0.5) * (L1 / n1)
    y = (np.arange(n2) + 0.5) * (L2 / n2)
    B1 = cosine_basis_matrix(L1, N1, x)
    B2 = cosine_basis_matrix(L2, N2, y)
    w1 = L1 / n1
    w2 = L2 / n2
    return x, y, B1, B2, w1, w2


def _to_grid(fam, coeffs):
    _, _, B1, B2, _, _ = _spectral_grid(fam)
    N1, N2 = fam.mode_counts
    if coeffs.ndim == 1:
        return B1 @ coeffs.reshape(N1, N2) @ B2.T
    C = coeffs.T.reshape(-1, N1, N2)
    return np.einsum("xi,sij,yj->sxy", B1, C, B2, optimize=True)


def _from_grid(fam, vals):
    _, _, B1, B2, w1, w2 = _spectral_grid(fam)
    if vals.ndim == 2:
        return (w1 * w2) * (B1.T @ vals @ B2).ravel()
    C = (w1 * w2) * np.einsum("xi,sxy,yj->sij", B1, vals, B2, optimize=True)
    return C.reshape(C.shape[0], -1).T


def apply_nemytskii(scalar_fn, t, v):
    """Apply the pointwise operator (F(t, v))(x) = f(t, v(x)).

    FEM applies f to the nodal values and leaves Dirichlet nodes untouched;
    the spectral backend goes through the midpoint-grid transform round trip.
    """
    fam = v.family
    if fam.backend is Backend.FEM:
        out = np.asarray(scalar_fn(t, v.values), dtype=float).copy()
        bad = np.flatnonzero(~np.isfinite(out))
        if bad.size:
            raise NumericalError(f"non-finite drift/diffusion value at node {bad[0]}")
        if fam.dirichlet_idx.size:
            out[fam.dirichlet_idx] = v.values[fam.dirichlet_idx]
        return GridFunction(fam, out)
    grid = _to_grid(fam, v.values)
    mapped = np.asarray(scalar_fn(t, grid), dtype=float)
    if not np.all(np.isfinite(mapped)):
        bad = np.argwhere(~np.isfinite(mapped))[0]
        raise NumericalError(f"non-finite value at grid point {tuple(bad)}")
    return GridFunction(fam, _from_grid(fam, mapped))


def step_values(fam, t, dt, state, noise_values, config):
    """Array-level implicit Euler step; state is (size,) or (size, S)."""
    u = state
    rhs = u.copy()
    if fam.backend is Backend.FEM:
        xs, ys = fam.node_x, fam.node_y
        if config.drift is not None:
            fu = np.asarray(config.drift(t, u), dtype=float)
            if not np.all(np.isfinite(fu)):
                bad = int(np.flatnonzero(~np.isfinite(fu).reshape(fu.shape[0], -1).all(axis=1))[0])
                raise NumericalError(f"non-finite drift value at node {bad}")
            if fam.dirichlet_idx.size:
                fu[fam.dirichlet_idx] = 0.0
            rhs += dt * fu
        if noise_values is not None:
            if isinstance(config.diffusion, MultiplicativeNemytskii):
                if u.ndim == 2:
                    bvals = config.diffusion.factor(xs[:, None], ys[:, None], u)
                else:
                    bvals = config.diffusion.factor(xs, ys, u)
                term = bvals * noise_values
            else:
                term = noise_values.copy()
            if fam.dirichlet_idx.size:
                term[fam.dirichlet_idx] = 0.0
            rhs += term
    else:
        if config.drift is not None:
            grid = _to_grid(fam, u)
            fu = np.asarray(config.drift(t, grid), dtype=float)
            if not np.all(np.isfinite(fu)):
                raise NumericalError("non-finite drift value on the spectral grid")
            rhs += dt * _from_grid(fam, fu)
        if noise_values is not None:
            if isinstance(config.diffusion, MultiplicativeNemytskii):
                xg, yg, _, _, _, _ = _spectral_grid(fam)
                ug = _to_grid(fam, u)
                wg = _to_grid(fam, noise_values)
                if ug.ndim == 3:
                    bvals = config.diffusion.factor(xg[None, :, None], yg[None, None, :], ug)
                else:
                    bvals = config.diffusion.factor(xg[:, None], yg[None, :], ug)
                rhs += _from_grid(fam, bvals * wg)
            else:
                rhs += noise_values
    return solve_resolvent_values(fam, t, dt, rhs)


def step(fam, state, m, dt, config, noise_field=None):
    """One implicit Euler step from t_m = m*dt; noise_field may be None."""
    fam.check_compatible(state)
    w = None
    if noise_field is not None:
        fam.check_compatible(noise_field)
        w = noise_field.values
    t = m * dt
    return GridFunction(fam, step_values(fam, t, dt, state.values, w, config))


def initial_state(fam, config):
    """Materialize the configured initial data as a GridFunction."""
    init = config.initial
    if isinstance(init, GridFunction):
        fam.check_compatible(init)
        values = init.values.copy()
    elif init is None:
        values = np.zeros(fam.size)
    elif callable(init):
        values = project(fam, init).values
    else:
        c = float(init)
        if fam.backend is Backend.SPECTRAL:
            values = np.zeros(fam.size)
            L1, L2 = fam.domain
            values[0] = c * math.sqrt(L1 * L2)
        else:
            values = np.full(fam.size, c)
    if fam.backend is Backend.FEM and fam.dirichlet_idx.size:
        values[fam.dirichlet_idx] = fam.lift[fam.dirichlet_idx]
    return GridFunction(fam, values)


def integrate(fam, config, path=None, record="final"):
    """Run the scheme over the whole time grid.

    path carries its NoiseSpec; passing None runs the deterministic problem.
    record='final' returns the final GridFunction, record='all' the whole
    trajectory including the initial state.
    """
    from .noise import increment_field

    if record not in ("final", "all"):
        raise ConfigurationError("record must be 'final' or 'all'")
    dt = config.dt
    if path is not None:
        if path.steps != config.steps:
            raise ConfigurationError(
                f"path has {path.steps} steps but the config wants {config.steps}")
        if not math.isclose(path.dt, dt, rel_tol=1e-9, abs_tol=0.0):
            raise ConfigurationError(f"path dt {path.dt} does not match config dt {dt}")
    state = initial_state(fam, config)
    states = [state]
    for m in range(config.steps):
        w = increment_field(path.spec, path, m, fam) if path is not None else None
        state = step(fam, state, m, dt, config, w)
        if record == "all":
            states.append(state)
    if record == "all":
        return states
    return state
