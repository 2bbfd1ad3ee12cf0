"""Q-Wiener noise: covariance spectrum, reproducible per-mode Brownian
increments, path coarsening, and synthesis of increment fields on a backend.

Mode indexing starts at (1, 1): the covariance spectrum q_ij is undefined at
(0, 0) and the operator's zero modes receive no noise. Every mode (i, j) owns
its own counter-based RNG stream derived from (master_seed, i, j), so that
enlarging the truncation never perturbs the draws of existing modes.
"""

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .operators import Backend, GridFunction, cosine_basis_matrix

_STREAM_INCREMENTS = 0
_STREAM_OU_RESIDUAL = 1


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Covariance spectrum q_ij = (i^2 + j^2)^-(beta + delta), 1 <= i, j <= N."""

    beta: float
    delta: float
    mode_counts: tuple
    domain: tuple
    q: np.ndarray
    trace: float

    def scaled(self, amplitude):
        """Spec with the covariance scaled by amplitude^2 (0 silences the noise)."""
        a2 = float(amplitude) ** 2
        return replace(self, q=self.q * a2, trace=self.trace * a2)


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Table of per-mode Brownian increments, steps x N1 x N2.

    increments[m, i-1, j-1] is Normal(0, dt) for mode (i, j); draws are
    independent across modes and steps by stream construction.
    """

    spec: NoiseSpec
    dt: float
    steps: int
    increments: np.ndarray
    master_seed: int
    stream_tag: int = _STREAM_INCREMENTS


def make_noise_spec(beta, delta, mode_counts, domain):
    beta = float(beta)
    delta = float(delta)
    if beta <= 0.0 or delta <= 0.0:
        raise ConfigurationError("beta and delta must be positive")
    N1, N2 = int(mode_counts[0]), int(mode_counts[1])
    if N1 < 1 or N2 < 1:
        raise ConfigurationError("mode counts must be >= 1")
    i = np.arange(1, N1 + 1, dtype=float)
    j = np.arange(1, N2 + 1, dtype=float)
    q = (i[:, None] ** 2 + j[None, :] ** 2) ** (-(beta + delta))
    return NoiseSpec(beta, delta, (N1, N2), (float(domain[0]), float(domain[1])),
                     q, float(q.sum()))


def mode_stream(master_seed, i, j, tag=_STREAM_INCREMENTS):
    """Counter-based generator for mode (i, j); deterministic in its key."""
    ss = np.random.SeedSequence((int(master_seed), int(i), int(j), int(tag)))
    return np.random.Generator(np.random.Philox(ss))


def sample_path(spec, steps, dt, master_seed):
    """Draw the full increment table, one Philox stream per mode."""
    steps = int(steps)
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    N1, N2 = spec.mode_counts
    table = np.empty((steps, N1, N2))
    sd = np.sqrt(dt)
    for i in range(1, N1 + 1):
        for j in range(1, N2 + 1):
            g = mode_stream(master_seed, i, j)
            table[:, i - 1, j - 1] = g.normal(0.0, sd, size=steps)
    return NoisePath(spec, float(dt), steps, table, int(master_seed))


def zero_path(spec, steps, dt):
    """All-zero path (deterministic runs)."""
    N1, N2 = spec.mode_counts
    return NoisePath(spec, float(dt), int(steps),
                     np.zeros((int(steps), N1, N2)), master_seed=0)


def coarsen_path(path, factor):
    """Aggregate groups of `factor` consecutive increments exactly.

    Power-of-two factors are applied as repeated pairwise sums so that
    coarsen(coarsen(p, 2), 2) == coarsen(p, 4) bitwise; a remaining odd
    factor is summed left to right in ascending fine index.
    """
    factor = int(factor)
    if factor < 1 or path.steps % factor != 0:
        raise ConfigurationError(f"factor {factor} does not divide {path.steps} steps")
    if factor == 1:
        return path
    table = path.increments
    f = factor
    while f % 2 == 0:
        table = table[0::2] + table[1::2]
        f //= 2
    if f > 1:
        shaped = table.reshape(table.shape[0] // f, f, *table.shape[1:])
        acc = shaped[:, 0].copy()
        for k in range(1, f):
            acc += shaped[:, k]
        table = acc
    return NoisePath(path.spec, path.dt * factor, path.steps // factor, table,
                     path.master_seed, path.stream_tag)


@lru_cache(maxsize=8)
def fem_basis_matrices(spec, fam):
    """Cosine eigenfunction values at FEM nodes for modes 1..N per axis.

    Returns (B1, B2) with B1[node_x, i-1] = sqrt(2/L1) cos(i pi x / L1),
    laid out on the per-axis node coordinates of the structured mesh.
    """
    n1, n2 = fam.cell_counts
    h1, h2 = fam.spacings
    x = np.arange(n1 + 1) * h1
    y = np.arange(n2 + 1) * h2
    B1 = cosine_basis_matrix(spec.domain[0], spec.mode_counts[0], x, include_zero=False)
    B2 = cosine_basis_matrix(spec.domain[1], spec.mode_counts[1], y, include_zero=False)
    return B1, B2


def increment_field_values(spec, fam, weighted):
    """Synthesize a nodal/modal field from sqrt(q)-weighted increments.

    `weighted` has shape (N1, N2) or (S, N1, N2) for a batch; returns the
    flat coefficient array(s), shape (size,) or (size, S).
    """
    batched = weighted.ndim == 3
    if fam.backend is Backend.SPECTRAL:
        N1o, N2o = fam.mode_counts
        N1, N2 = spec.mode_counts
        if N1 + 1 > N1o or N2 + 1 > N2o:
            raise ConfigurationError(
                "spectral family too small for the noise truncation "
                f"(needs modes up to ({N1}, {N2}))")
        if batched:
            out = np.zeros((weighted.shape[0], N1o, N2o))
            out[:, 1:N1 + 1, 1:N2 + 1] = weighted
            return out.reshape(weighted.shape[0], -1).T
        out = np.zeros((N1o, N2o))
        out[1:N1 + 1, 1:N2 + 1] = weighted
        return out.ravel()
    B1, B2 = fem_basis_matrices(spec, fam)
    if batched:
        vals = np.einsum("xi,sij,yj->xys", B1, weighted, B2, optimize=True)
        # nodes are ordered y-major: node = iy*(n1+1)+ix -> ravel as (y, x)
        flat = np.ascontiguousarray(np.transpose(vals, (1, 0, 2))).reshape(
            -1, weighted.shape[0])
    else:
        vals = B1 @ weighted @ B2.T  # (nx+1, ny+1)
        flat = vals.T.ravel()
    if fam.dirichlet_idx.size:
        flat[fam.dirichlet_idx] = 0.0
    return flat


def increment_field(spec, path, m, fam):
    """Field of the m-th noise increment: sum_ij sqrt(q_ij) dBeta_ij e_ij.

    Spectral places the weighted increments on the matching operator modes;
    FEM evaluates the truncated cosine series at the nodes and zeroes the
    Dirichlet nodes.
    """
    if not (0 <= m < path.steps):
        raise ConfigurationError(f"step index {m} out of range [0, {path.steps})")
    if spec.domain != tuple(fam.domain):
        raise ConfigurationError("noise spec and family domains differ")
    weighted = np.sqrt(spec.q) * path.increments[m]
    return GridFunction(fam, increment_field_values(spec, fam, weighted))


def dump_path(path, fname):
    """Write the increment table as CSV with columns m,i,j,increment.

    Metadata (dt, steps, mode counts, master seed) goes in '#' header lines;
    floats use shortest round-trip formatting.
    """
    N1, N2 = path.spec.mode_counts
    with open(fname, "w", encoding="utf-8") as fh:
        fh.write(f"# dt={path.dt!r} steps={path.steps} n1={N1} n2={N2} "
                 f"master_seed={path.master_seed} tag={path.stream_tag}\n")
        fh.write("m,i,j,increment\n")
        for m in range(path.steps):
            block = path.increments[m]
            for i in range(N1):
                for j in range(N2):
                    fh.write(f"{m},{i + 1},{j + 1},{block[i, j]!r}\n")


def load_path(fname, spec):
    """Rebuild a NoisePath from a dump_path CSV."""
    meta = {}
    with open(fname, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ConfigurationError("missing metadata header line")
        for tok in header[1:].split():
            k, v = tok.split("=")
            meta[k] = v
        cols = fh.readline().strip()
        if cols != "m,i,j,increment":
            raise ConfigurationError(f"unexpected column header {cols!r}")
        steps = int(meta["steps"])
        N1, N2 = int(meta["n1"]), int(meta["n2"])
        if (N1, N2) != tuple(spec.mode_counts):
            raise ConfigurationError("spec mode counts do not match the dump")
        table = np.empty((steps, N1, N2))
        for line in fh:
            m, i, j, val = line.rstrip("\n").split(",")
            table[int(m), int(i) - 1, int(j) - 1] = float(val)
    return NoisePath(spec, float(meta["dt"]), steps, table,
                     int(meta["master_seed"]), int(meta.get("tag", 0)))
