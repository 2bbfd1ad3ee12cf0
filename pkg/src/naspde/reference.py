"""Reference solutions for the strong-error experiments.

The additive linear problem diagonalizes into independent scalar
Ornstein-Uhlenbeck modes dX_i = -b_i(t) X_i dt + sqrt(q_i) dbeta_i with
b_i(t) = theta(t) * lam_i + k(t); the recurrence over one step uses the exact
decay exp(-int b) and the exact step variance

    q * int_{t0}^{t1} exp(-2 int_s^{t1} b(y) dy) ds,

evaluated by adaptive Simpson quadrature (the integrand is the inner
convolution kernel folded with its decay, so it stays in (0, 1]).

For strong-error measurement a single fine Brownian path drives both the OU
recurrence and the implicit Euler scheme at every coarser step size. Within
each fine step the stochastic convolution is split into its L2 projection
onto the Brownian increment plus an independent variance-matching residual,
which reproduces the correct joint Gaussian law of (increment, convolution)
up to quadrature accuracy.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .noise import coarsen_path, mode_stream, sample_path, _STREAM_OU_RESIDUAL
from .operators import Backend, GridFunction
from .quadrature import adaptive_simpson, gauss_legendre
from .scheme import SchemeConfig, integrate


def _builtin_theta(t):
    return 0.1 * (1.0 + np.exp(-t))


def _builtin_int_theta(a, b):
    return 0.1 * (b - a + np.exp(-a) - np.exp(-b))


@dataclass(frozen=True)
class OuMode:
    """One scalar OU mode with drift rate b(t) = theta(t)*lam + reaction(t).

    int_theta / int_reaction are closed-form antiderivative differences
    (a, b) -> integral; when absent they are computed by adaptive quadrature.
    """

    lam: float
    q: float
    theta: Callable = _builtin_theta
    reaction: Callable = lambda t: 1.0
    int_theta: Optional[Callable] = _builtin_int_theta
    int_reaction: Optional[Callable] = lambda a, b: b - a


def builtin_mode(lam, q):
    """OU mode of the built-in additive problem: D(t)=(1+e^-t)/10, k=1."""
    return OuMode(float(lam), float(q))


def int_b(mode, a, b):
    """Integral of b(t) = theta*lam + reaction over [a, b]."""
    if mode.int_theta is not None and mode.int_reaction is not None:
        return mode.lam * mode.int_theta(a, b) + mode.int_reaction(a, b)
    return adaptive_simpson(lambda s: mode.lam * mode.theta(s) + mode.reaction(s),
                            a, b, tol=1e-12)


def ou_step_moments(mode, t0, t1, tol=1e-12):
    """Exact one-step decay and variance of the OU mode over [t0, t1]."""
    if not t0 < t1:
        raise ConfigurationError("t0 < t1 required")
    decay = np.exp(-int_b(mode, t0, t1))
    var = mode.q * adaptive_simpson(
        lambda s: np.exp(-2.0 * int_b(mode, s, t1)), t0, t1, tol=tol)
    return decay, var


def ou_step_coupling(mode, t0, t1, tol=1e-12):
    """(decay, variance, covariance with the Brownian increment) over a step."""
    decay, var = ou_step_moments(mode, t0, t1, tol=tol)
    cov = np.sqrt(mode.q) * adaptive_simpson(
        lambda s: np.exp(-int_b(mode, s, t1)), t0, t1, tol=tol)
    return decay, var, cov


def ou_moment_tables(lams, tgrid, int_theta=_builtin_int_theta,
                     int_reaction=lambda a, b: b - a, gl_order=16, chunk=256):
    """Vectorized per-step moments for many eigenvalues at once.

    Returns (decay, var_unit, cov_unit), each of shape (steps, len(lams)),
    with unit covariance weight q = 1 (scale var by q and cov by sqrt(q)).
    Gauss-Legendre of the given order replaces the adaptive rule; agreement
    with ou_step_moments is covered by tests.
    """
    lams = np.asarray(lams, dtype=float)
    t0s = np.asarray(tgrid[:-1], dtype=float)
    t1s = np.asarray(tgrid[1:], dtype=float)
    steps = t0s.size
    gx, gw = gauss_legendre(gl_order, -1.0, 1.0)
    # note gauss_legendre maps [a,b]; build per-step nodes manually
    gx, gw = np.polynomial.legendre.leggauss(gl_order)
    decay = np.exp(-(np.subtract.outer(int_theta(t0s, t1s), 0.0)[:, None] * 0.0
                     + int_theta(t0s, t1s)[:, None] * lams[None, :]
                     + int_reaction(t0s, t1s)[:, None]))
    var_u = np.empty((steps, lams.size))
    cov_u = np.empty((steps, lams.size))
    for a in range(0, steps, chunk):
        b = min(a + chunk, steps)
        mid = 0.5 * (t0s[a:b] + t1s[a:b])
        half = 0.5 * (t1s[a:b] - t0s[a:b])
        s = mid[:, None] + half[:, None] * gx[None, :]           # (c, g)
        w = half[:, None] * gw[None, :]
        e_th = int_theta(s, t1s[a:b, None])                       # (c, g)
        e_k = int_reaction(s, t1s[a:b, None])
        expo = e_th[:, :, None] * lams[None, None, :] + e_k[:, :, None]
        kern = np.exp(-expo)
        cov_u[a:b] = np.einsum("cg,cgl->cl", w, kern)
        var_u[a:b] = np.einsum("cg,cgl->cl", w, kern * kern)
    return decay, var_u, cov_u


def ou_exact_path(spec, fam, steps, dt, master_seed, x0=None):
    """Exact OU trajectories of every noise mode, independent Gaussian draws.

    Returns an array (steps+1, size) of full mode-coefficient vectors on the
    spectral family; modes without noise decay deterministically from x0.
    The standard-normal draw of mode (i, j) at step m is the m-th value of
    the stream derived from (master_seed, i, j, ou-tag).
    """
    if fam.backend is not Backend.SPECTRAL:
        raise ConfigurationError("ou_exact_path needs a spectral family")
    N1, N2 = spec.mode_counts
    N1o, N2o = fam.mode_counts
    if N1 + 1 > N1o or N2 + 1 > N2o:
        raise ConfigurationError("family too small for the noise truncation")
    steps = int(steps)
    tgrid = np.arange(steps + 1) * dt

    lam_noise = fam.lam[1:N1 + 1, 1:N2 + 1]
    uvals, inv = np.unique(lam_noise.ravel(), return_inverse=True)
    decay_u, var_u, _ = _tables_for_family(fam, uvals, tgrid)
    sq = np.sqrt(spec.q).ravel()
    qv = spec.q.ravel()

    draws = np.empty((steps, N1, N2))
    for i in range(1, N1 + 1):
        for j in range(1, N2 + 1):
            g = mode_stream(master_seed, i, j, tag=_STREAM_OU_RESIDUAL)
            draws[:, i - 1, j - 1] = g.normal(0.0, 1.0, size=steps)
    draws = draws.reshape(steps, -1)

    x_full0 = np.zeros((N1o, N2o)) if x0 is None else np.array(x0, dtype=float).reshape(N1o, N2o)
    traj = np.empty((steps + 1, N1o * N2o))
    traj[0] = x_full0.ravel()

    # deterministic decay of every operator mode; noise modes get the OU part
    lam_all = fam.lam.ravel()
    uall, inv_all = np.unique(lam_all, return_inverse=True)
    decay_all, _, _ = _tables_for_family(fam, uall, tgrid)

    x = x_full0.copy().ravel()
    xn = x_full0[1:N1 + 1, 1:N2 + 1].ravel().copy()
    noise_slots = (np.arange(N1o * N2o).reshape(N1o, N2o)[1:N1 + 1, 1:N2 + 1]).ravel()
    for m in range(steps):
        x = decay_all[m, inv_all] * x
        sd = np.sqrt(np.maximum(qv * var_u[m, inv], 0.0))
        xn = decay_u[m, inv] * xn + sd * draws[m]
        x[noise_slots] = xn
        traj[m + 1] = x
    return traj


def _tables_for_family(fam, lams, tgrid):
    """Moment tables for a spectral family's theta/reaction coefficients."""
    int_th = getattr(fam, "int_theta", None)
    int_k = getattr(fam, "int_reaction", None)
    if int_th is None or int_k is None:
        # generic coefficients: integrate theta and reaction on the grid once
        th_vals = _cumulative_integral(fam.theta, tgrid)
        k_vals = _cumulative_integral(fam.reaction, tgrid)
        int_th = _interp_integral(tgrid, th_vals, fam.theta)
        int_k = _interp_integral(tgrid, k_vals, fam.reaction)
    return ou_moment_tables(lams, tgrid, int_theta=int_th, int_reaction=int_k)


def _cumulative_integral(f, tgrid):
    vals = np.zeros(tgrid.size)
    for m in range(tgrid.size - 1):
        vals[m + 1] = vals[m] + adaptive_simpson(f, tgrid[m], tgrid[m + 1], tol=1e-13)
    return vals


def _interp_integral(tgrid, cum, f):
    def integral(a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        ca = np.interp(a, tgrid, cum)
        cb = np.interp(b, tgrid, cum)
        return cb - ca
    return integral


@dataclass
class CoupledResult:
    """Final-time exact and scheme states driven by one shared fine path."""

    exact_final: np.ndarray
    scheme_finals: dict
    fine_steps: int
    fine_dt: float
    master_seed: int


def coupled_exact_vs_scheme(fam, spec, t_final, fine_steps, ladder_steps,
                            master_seed, x0=None):
    """Strong-error sample: one fine path drives exact OU and all scheme runs.

    The OU recurrence advances at the fine resolution; its per-step Gaussian
    is built from the fine Brownian increment plus an independent residual
    whose variance matches the remaining convolution variance. The implicit
    Euler scheme runs at every entry of ladder_steps on the coarsened path.
    """
    if fam.backend is not Backend.SPECTRAL:
        raise ConfigurationError("the coupled additive reference is spectral")
    for M in ladder_steps:
        if fine_steps % int(M) != 0:
            raise ConfigurationError(f"ladder steps {M} do not divide {fine_steps}")
    fine_dt = t_final / fine_steps
    path = sample_path(spec, fine_steps, fine_dt, master_seed)
    exact = _ou_coupled_final(fam, spec, path, x0=x0)

    finals = {}
    for M in ladder_steps:
        M = int(M)
        cpath = coarsen_path(path, fine_steps // M)
        cfg = SchemeConfig(t_final=t_final, steps=M,
                           initial=None if x0 is None else GridFunction(fam, x0))
        finals[M] = integrate(fam, cfg, cpath).values
    return CoupledResult(exact, finals, fine_steps, fine_dt, master_seed)


def _ou_coupled_final(fam, spec, path, x0=None):
    """Exact OU final coefficients coupled to the given fine path."""
    N1, N2 = spec.mode_counts
    N1o, N2o = fam.mode_counts
    steps = path.steps
    tgrid = np.arange(steps + 1) * path.dt

    lam_noise = fam.lam[1:N1 + 1, 1:N2 + 1].ravel()
    uvals, inv = np.unique(lam_noise, return_inverse=True)
    decay_u, var_u, cov_u = _tables_for_family(fam, uvals, tgrid)

    sq = np.sqrt(spec.q).ravel()
    qv = spec.q.ravel()
    dtf = path.dt

    if x0 is None:
        x_full = np.zeros((N1o, N2o))
    else:
        x_full = np.array(x0, dtype=float).reshape(N1o, N2o)
    xn = x_full[1:N1 + 1, 1:N2 + 1].ravel().copy()

    resid = np.empty((steps, N1, N2))
    for i in range(1, N1 + 1):
        for j in range(1, N2 + 1):
            g = mode_stream(path.master_seed, i, j, tag=_STREAM_OU_RESIDUAL)
            resid[:, i - 1, j - 1] = g.normal(0.0, 1.0, size=steps)
    resid = resid.reshape(steps, -1)
    incs = path.increments.reshape(steps, -1)

    for m in range(steps):
        d = decay_u[m, inv]
        cov = sq * cov_u[m, inv]              # Cov(convolution, increment)
        c = cov / dtf                          # projection coefficient
        v = np.maximum(qv * var_u[m, inv] - cov * cov / dtf, 0.0)
        xn = d * xn + c * incs[m] + np.sqrt(v) * resid[m]

    # modes without noise decay deterministically
    lam_all = fam.lam.ravel()
    uall, inv_all = np.unique(lam_all, return_inverse=True)
    decay_all, _, _ = _tables_for_family(fam, uall, tgrid)
    total_decay = np.prod(decay_all, axis=0)
    out = x_full.ravel() * total_decay[inv_all]
    noise_slots = (np.arange(N1o * N2o).reshape(N1o, N2o)[1:N1 + 1, 1:N2 + 1]).ravel()
    out[noise_slots] = xn
    return out


def fine_reference(fam, config, path):
    """Surrogate truth: the scheme itself at the finest step size."""
    if path.steps != config.steps:
        raise ConfigurationError("fine reference must run at the path resolution")
    return integrate(fam, config, path)
