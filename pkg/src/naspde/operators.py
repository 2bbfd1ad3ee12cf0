"""Discrete non-autonomous operator families on a rectangle.

Two backends are provided:

* ``Backend.SPECTRAL`` -- Galerkin in the Neumann cosine eigenbasis of the
  Laplacian; the operator acts diagonally with eigenvalue
  ``theta(t) * lam_ij + reaction(t)`` on mode ``(i, j)``.
* ``Backend.FEM`` -- P1 finite elements on a structured triangulation of the
  rectangle (each cell split along the (+1,+1) diagonal), with optional
  advection and constant Dirichlet values on selected edges.

Both expose the resolvent solve ``(I + dt*A(t))^-1`` used by the implicit
Euler stepper, fractional powers, and the L2 projection onto the discrete
space.
"""

import enum
import threading

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import BackendMismatchError, ConfigurationError, DomainError, NumericalError
from .quadrature import gauss_legendre, triangle_rule

_EDGES = ("left", "right", "bottom", "top")


class Backend(enum.Enum):
    SPECTRAL = "spectral"
    FEM = "fem"


def _as_time_fn(f, name):
    if callable(f):
        return f
    value = float(f)
    return lambda t, _v=value: _v


def cosine_basis_matrix(length, count, x, include_zero=True):
    """Values of the orthonormal Neumann cosine basis at points x.

    Returns an array of shape (len(x), count); column i holds
    e_i(x) = sqrt(2/L) * cos(i*pi*x/L) (and e_0 = sqrt(1/L) when the zero
    mode is included).
    """
    x = np.asarray(x, dtype=float)
    start = 0 if include_zero else 1
    idx = np.arange(start, start + count)
    out = np.sqrt(2.0 / length) * np.cos(idx[None, :] * np.pi * x[:, None] / length)
    if include_zero:
        out[:, 0] = np.sqrt(1.0 / length)
    return out


class GridFunction:
    """Coefficient vector of a function in the family's discrete space.

    Spectral: cosine-mode coefficients, flattened C-order over (N1, N2).
    FEM: nodal values over all (n1+1)*(n2+1) nodes, Dirichlet nodes included.
    """

    __slots__ = ("family", "values")

    def __init__(self, family, values):
        values = np.array(values, dtype=float).ravel()
        if values.size != family.size:
            raise ConfigurationError(
                f"coefficient vector of length {values.size} does not match "
                f"family size {family.size}"
            )
        self.family = family
        self.values = values

    def copy(self):
        return GridFunction(self.family, self.values)

    def __repr__(self):
        return f"GridFunction(backend={self.family.backend.value}, size={self.values.size})"


class OperatorFamily:
    """Immutable discrete operator family A_h(t); build via the module functions.

    The only mutable member is the one-slot resolvent factorization cache,
    which is guarded by a lock: concurrent solves with equal (t, dt) return
    identical results.
    """

    def __init__(self):
        self._cache_lock = threading.Lock()
        self._resolvent_cache = None
        self._mass_lu = None

    # -- common metadata, populated by the constructors --------------------
    backend = None
    domain = None
    theta = None
    reaction = None
    garding_shift = 0.0

    @property
    def size(self):
        raise NotImplementedError

    def check_compatible(self, v):
        if not isinstance(v, GridFunction) or v.family is not self:
            raise BackendMismatchError("grid function does not belong to this family")


class SpectralFamily(OperatorFamily):
    def __init__(self, domain, mode_counts, theta, reaction, garding_shift, lam1, lam2):
        super().__init__()
        self.backend = Backend.SPECTRAL
        self.domain = domain
        self.mode_counts = mode_counts
        self.theta = theta
        self.reaction = reaction
        self.garding_shift = garding_shift
        self.lam1 = lam1
        self.lam2 = lam2
        self.lam = lam1[:, None] + lam2[None, :]

    @property
    def size(self):
        return self.mode_counts[0] * self.mode_counts[1]

    def eigenvalues(self, t):
        """Eigenvalue table theta(t)*lam_ij + reaction(t) + c0, shape (N1, N2)."""
        return self.theta(t) * self.lam + self.reaction(t) + self.garding_shift


class FemFamily(OperatorFamily):
    def __init__(self, domain, cell_counts, theta, reaction, advection, dirichlet,
                 garding_shift, mesh_data):
        super().__init__()
        self.backend = Backend.FEM
        self.domain = domain
        self.cell_counts = cell_counts
        self.theta = theta
        self.reaction = reaction
        self.advection = advection
        self.dirichlet = dirichlet
        self.garding_shift = garding_shift
        for name, value in mesh_data.items():
            setattr(self, name, value)

    @property
    def size(self):
        return self.n_nodes

    def stiffness(self, t):
        """The full time-dependent form matrix theta*(Kd+Ka) + k*Mr + c0*M."""
        out = self.theta(t) * self.k_diff
        if self.k_adv is not None:
            out = out + self.theta(t) * self.k_adv
        k = self.reaction(t)
        if k != 0.0:
            out = out + k * self.m_react
        if self.garding_shift != 0.0:
            out = out + self.garding_shift * self.mass
        return out

    def _stiffness_blocks(self, t):
        th = self.theta(t)
        k = self.reaction(t)
        c0 = self.garding_shift
        ff = th * self._kd_ff
        fd = th * self._kd_fd
        if self._ka_ff is not None:
            ff = ff + th * self._ka_ff
            fd = fd + th * self._ka_fd
        if k != 0.0:
            ff = ff + k * self._mr_ff
            fd = fd + k * self._mr_fd
        if c0 != 0.0:
            ff = ff + c0 * self._m_ff
            fd = fd + c0 * self._m_fd
        return ff, fd


def _validate_coefficients(theta, reaction, horizon):
    tgrid = np.linspace(0.0, horizon, 65)
    th = np.array([theta(t) for t in tgrid], dtype=float)
    if not np.all(np.isfinite(th)) or th.min() <= 0.0:
        raise ConfigurationError("theta(t) must be finite and strictly positive on [0, horizon]")
    kv = np.array([reaction(t) for t in tgrid], dtype=float)
    if not np.all(np.isfinite(kv)):
        raise ConfigurationError("reaction(t) must be finite on [0, horizon]")


def build_spectral_family(domain, mode_counts, theta, reaction, garding_shift=0.0,
                          horizon=1.0):
    """Spectral Galerkin family in the Neumann cosine basis.

    Mode (i, j), 0 <= i < N1, 0 <= j < N2, carries the Laplacian eigenvalue
    lam_ij = (i*pi/L1)^2 + (j*pi/L2)^2; the operator at time t multiplies it
    by theta(t) and adds reaction(t).
    """
    L1, L2 = float(domain[0]), float(domain[1])
    N1, N2 = int(mode_counts[0]), int(mode_counts[1])
    if L1 <= 0 or L2 <= 0:
        raise ConfigurationError("domain extents must be positive")
    if N1 < 1 or N2 < 1:
        raise ConfigurationError("mode counts must be >= 1")
    theta = _as_time_fn(theta, "theta")
    reaction = _as_time_fn(reaction, "reaction")
    _validate_coefficients(theta, reaction, horizon)
    lam1 = (np.arange(N1) * np.pi / L1) ** 2
    lam2 = (np.arange(N2) * np.pi / L2) ** 2
    return SpectralFamily((L1, L2), (N1, N2), theta, reaction, float(garding_shift),
                          lam1, lam2)


def _p1_local(p):
    """Area, gradients and (stiffness, mass) local matrices of one P1 triangle."""
    v1 = p[1] - p[0]
    v2 = p[2] - p[0]
    det = v1[0] * v2[1] - v1[1] * v2[0]
    area = 0.5 * abs(det)
    b = np.array([p[1, 1] - p[2, 1], p[2, 1] - p[0, 1], p[0, 1] - p[1, 1]]) / det
    c = np.array([p[2, 0] - p[1, 0], p[0, 0] - p[2, 0], p[1, 0] - p[0, 0]]) / det
    grads = np.column_stack([b, c])
    k_loc = area * (grads @ grads.T)
    m_loc = area / 12.0 * (np.ones((3, 3)) + np.eye(3))
    return area, grads, k_loc, m_loc


def build_fem_family(domain, cell_counts, theta, reaction, advection=None,
                     dirichlet=None, garding_shift=0.0, horizon=1.0):
    """P1 family on the structured right-triangle mesh of the rectangle.

    Parameters
    ----------
    domain : (L1, L2) rectangle extents.
    cell_counts : (n1, n2) rectangular cells per axis, each split along the
        (+1,+1) diagonal into two triangles.
    theta, reaction : time coefficients (callables or constants).
    advection : None, a constant pair (qx, qy), or a callable q(x, y) ->
        (qx, qy); evaluated at cell centroids.
    dirichlet : mapping from edge name ('left'/'right'/'bottom'/'top') to the
        constant boundary value; omitted edges are homogeneous Neumann.
    """
    L1, L2 = float(domain[0]), float(domain[1])
    n1, n2 = int(cell_counts[0]), int(cell_counts[1])
    if n1 < 2 or n2 < 2:
        raise ConfigurationError("cell counts must be >= 2")
    theta = _as_time_fn(theta, "theta")
    reaction = _as_time_fn(reaction, "reaction")
    _validate_coefficients(theta, reaction, horizon)

    dirichlet = dict(dirichlet or {})
    for edge in dirichlet:
        if edge not in _EDGES:
            raise ConfigurationError(f"unknown edge {edge!r}; expected one of {_EDGES}")

    h1, h2 = L1 / n1, L2 / n2
    nxn, nyn = n1 + 1, n2 + 1
    n_nodes = nxn * nyn
    ix, iy = np.meshgrid(np.arange(nxn), np.arange(nyn), indexing="xy")
    xs = (ix * h1).ravel()
    ys = (iy * h2).ravel()

    # two congruent triangle shapes per cell, split along the (+1,+1) diagonal
    cx, cy = np.meshgrid(np.arange(n1), np.arange(n2), indexing="xy")
    cx = cx.ravel()
    cy = cy.ravel()
    v00 = cy * nxn + cx
    v10 = v00 + 1
    v01 = v00 + nxn
    v11 = v01 + 1
    tris = [
        (np.column_stack([v00, v10, v11]),
         np.array([[0.0, 0.0], [h1, 0.0], [h1, h2]])),
        (np.column_stack([v00, v11, v01]),
         np.array([[0.0, 0.0], [h1, h2], [0.0, h2]])),
    ]

    if advection is not None and not callable(advection):
        qx0, qy0 = float(advection[0]), float(advection[1])
        advection_fn = lambda x, y: (np.full_like(x, qx0), np.full_like(x, qy0))
    else:
        advection_fn = advection

    rows, cols = [], []
    m_vals, kd_vals, ka_vals = [], [], []
    for conn, ref in tris:
        area, grads, k_loc, m_loc = _p1_local(ref)
        n_tri = conn.shape[0]
        r = np.repeat(conn, 3, axis=1).ravel()
        c = np.tile(conn, (1, 3)).ravel()
        rows.append(r)
        cols.append(c)
        m_vals.append(np.tile(m_loc.ravel(), n_tri))
        kd_vals.append(np.tile(k_loc.ravel(), n_tri))
        if advection_fn is not None:
            gx = xs[conn].mean(axis=1)
            gy = ys[conn].mean(axis=1)
            qx, qy = advection_fn(gx, gy)
            qgrad = np.outer(qx, grads[:, 0]) + np.outer(qy, grads[:, 1])  # (n_tri, 3)
            if not np.all(np.isfinite(qgrad)):
                raise NumericalError("advection field produced non-finite entries")
            # int (q . grad(phi_b)) phi_a = (q_c . grad(phi_b)) * area/3, same for all a;
            # entry layout is row-major in (a, b) to match (r, c)
            loc = np.broadcast_to((qgrad * (area / 3.0))[:, None, :], (n_tri, 3, 3))
            ka_vals.append(np.ascontiguousarray(loc).reshape(n_tri, 9).ravel())

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    shape = (n_nodes, n_nodes)
    mass = sp.coo_matrix((np.concatenate(m_vals), (rows, cols)), shape=shape).tocsr()
    k_diff = sp.coo_matrix((np.concatenate(kd_vals), (rows, cols)), shape=shape).tocsr()
    k_adv = None
    if advection_fn is not None:
        k_adv = sp.coo_matrix((np.concatenate(ka_vals), (rows, cols)), shape=shape).tocsr()
    m_react = mass.copy()

    # Dirichlet bookkeeping: eliminate dofs, keep a lift vector of bc values
    dir_mask = np.zeros(n_nodes, dtype=bool)
    lift = np.zeros(n_nodes)
    edge_nodes = {
        "left": ix.ravel() == 0,
        "right": ix.ravel() == n1,
        "bottom": iy.ravel() == 0,
        "top": iy.ravel() == n2,
    }
    for edge, value in dirichlet.items():
        nodes = edge_nodes[edge]
        overlap = dir_mask & nodes
        if np.any(lift[overlap] != float(value)):
            raise ConfigurationError("conflicting Dirichlet values at shared corner nodes")
        dir_mask |= nodes
        lift[nodes] = float(value)
    free = np.flatnonzero(~dir_mask)
    dir_idx = np.flatnonzero(dir_mask)

    def _blocks(mat):
        if mat is None:
            return None, None
        csr = mat.tocsr()
        return csr[free][:, free].tocsc(), csr[free][:, dir_idx].tocsc()

    m_ff, m_fd = _blocks(mass)
    kd_ff, kd_fd = _blocks(k_diff)
    ka_ff, ka_fd = _blocks(k_adv)
    mr_ff, mr_fd = _blocks(m_react)

    mesh_data = dict(
        n_nodes=n_nodes, node_x=xs, node_y=ys, spacings=(h1, h2),
        mass=mass, k_diff=k_diff, k_adv=k_adv, m_react=m_react,
        free=free, dirichlet_idx=dir_idx, lift=lift,
        _m_ff=m_ff, _m_fd=m_fd, _kd_ff=kd_ff, _kd_fd=kd_fd,
        _ka_ff=ka_ff, _ka_fd=ka_fd, _mr_ff=mr_ff, _mr_fd=mr_fd,
        _mass_free_rows=mass.tocsr()[free],
    )
    return FemFamily((L1, L2), (n1, n2), theta, reaction, advection_fn, dirichlet,
                     float(garding_shift), mesh_data)


# --------------------------------------------------------------------------
# operator actions
# --------------------------------------------------------------------------

def apply_A(fam, t, v):
    """Apply the (shifted) discrete operator at time t.

    Spectral: multiplies mode (i, j) by theta(t)*lam_ij + reaction(t) + c0.
    FEM: weak-form product of the full form matrix with the nodal vector
    (Dirichlet columns folded in via the stored boundary values); Dirichlet
    rows of the output are zero.
    """
    fam.check_compatible(v)
    if fam.backend is Backend.SPECTRAL:
        mu = fam.eigenvalues(t).ravel()
        return GridFunction(fam, mu * v.values)
    out = np.zeros(fam.n_nodes)
    full = fam.stiffness(t)
    prod = full @ v.values
    out[fam.free] = prod[fam.free]
    return GridFunction(fam, out)


def _resolvent_factorization(fam, t, dt):
    key = (float(t), float(dt))
    with fam._cache_lock:
        cached = fam._resolvent_cache
        if cached is not None and cached[0] == key:
            return cached[1], cached[2]
    ff, fd = fam._stiffness_blocks(t)
    system = (fam._m_ff + dt * ff).tocsc()
    try:
        lu = spla.splu(system)
    except RuntimeError as exc:  # pragma: no cover - cannot occur for coercive forms
        raise NumericalError(f"resolvent factorization failed at t={t}, dt={dt}: {exc}")
    g = fam.lift[fam.dirichlet_idx]
    sys_lift = (fam._m_fd + dt * fd) @ g if g.size else np.zeros(fam.free.size)
    with fam._cache_lock:
        fam._resolvent_cache = (key, lu, sys_lift)
    return lu, sys_lift


def solve_resolvent_values(fam, t, dt, rhs):
    """Array-level resolvent solve; rhs has shape (size,) or (size, k)."""
    if dt <= 0.0:
        raise ConfigurationError("dt must be positive")
    if fam.backend is Backend.SPECTRAL:
        mu = fam.eigenvalues(t).ravel()
        mult = 1.0 / (1.0 + dt * mu)
        if rhs.ndim == 1:
            return mult * rhs
        return mult[:, None] * rhs
    lu, sys_lift = _resolvent_factorization(fam, t, dt)
    b = fam._mass_free_rows @ rhs
    if rhs.ndim == 1:
        b = b - sys_lift
    else:
        b = b - sys_lift[:, None]
    x = lu.solve(b)
    out = np.zeros_like(rhs)
    out[fam.free] = x
    out[fam.dirichlet_idx] = (fam.lift[fam.dirichlet_idx, None] if rhs.ndim == 2
                              else fam.lift[fam.dirichlet_idx])
    return out


def solve_resolvent(fam, t, dt, rhs):
    """One implicit Euler resolvent step: (I + dt*A_h(t))^-1 applied to rhs.

    FEM solves (M + dt*K(t)) x = M*rhs (+ Dirichlet lift load) on free dofs
    with a fresh sparse factorization per (t, dt), cached in one slot.
    """
    fam.check_compatible(rhs)
    return GridFunction(fam, solve_resolvent_values(fam, t, dt, rhs.values))


def fractional_apply(fam, t, power, v):
    """Apply (A_h(t))^power spectrally.

    Spectral backend multiplies mode-wise by mu^power. The FEM route goes
    through a dense eigendecomposition of M^-1 K(t) on the free dofs and is
    limited to 2000 free dofs.
    """
    fam.check_compatible(v)
    power = float(power)
    if power == 0.0:
        return v.copy()
    if fam.backend is Backend.SPECTRAL:
        mu = fam.eigenvalues(t).ravel()
        if power < 0.0 and np.any(mu == 0.0):
            raise DomainError("negative power of a family with a zero eigenvalue")
        if np.any(mu < 0.0):
            raise DomainError("fractional powers require nonnegative eigenvalues")
        with np.errstate(divide="raise"):
            mult = mu ** power
        return GridFunction(fam, mult * v.values)
    nfree = fam.free.size
    if nfree > 2000:
        raise ConfigurationError(
            f"dense fractional power limited to 2000 free dofs (got {nfree})")
    ff, _ = fam._stiffness_blocks(t)
    m_dense = fam._m_ff.toarray()
    a_dense = np.linalg.solve(m_dense, ff.toarray())
    w, vec = scipy.linalg.eig(a_dense)
    if power < 0.0 and np.any(np.abs(w) < 1e-14):
        raise DomainError("negative power of a singular discrete operator")
    wp = w.astype(complex) ** power
    coeff = np.linalg.solve(vec, v.values[fam.free])
    res = vec @ (wp * coeff)
    if np.max(np.abs(res.imag)) > 1e-8 * max(1.0, np.max(np.abs(res.real))):
        raise NumericalError("fractional power produced a non-real result")
    out = np.zeros(fam.n_nodes)
    out[fam.free] = res.real
    out[fam.dirichlet_idx] = v.values[fam.dirichlet_idx]
    return GridFunction(fam, out)


def project(fam, point_function):
    """L2 projection of a point function onto the discrete space.

    Spectral: tensor Gauss-Legendre quadrature of the cosine coefficients
    (2*N+8 nodes per axis). FEM: quadrature load vector (4x4 collapsed
    Gauss-Legendre per triangle) followed by a mass solve.
    """
    L1, L2 = fam.domain
    if fam.backend is Backend.SPECTRAL:
        N1, N2 = fam.mode_counts
        nq1 = max(2 * N1 + 8, 20)
        nq2 = max(2 * N2 + 8, 20)
        xg, wx = gauss_legendre(nq1, 0.0, L1)
        yg, wy = gauss_legendre(nq2, 0.0, L2)
        B1 = cosine_basis_matrix(L1, N1, xg)
        B2 = cosine_basis_matrix(L2, N2, yg)
        F = np.asarray(point_function(xg[:, None], yg[None, :]), dtype=float)
        F = np.broadcast_to(F, (nq1, nq2))
        coeffs = (B1 * wx[:, None]).T @ F @ (B2 * wy[:, None])
        return GridFunction(fam, coeffs.ravel())
    pts, wts = triangle_rule(4)
    load = np.zeros(fam.n_nodes)
    n1, n2 = fam.cell_counts
    h1, h2 = fam.spacings
    xs, ys = fam.node_x, fam.node_y
    refs = [np.array([[0.0, 0.0], [h1, 0.0], [h1, h2]]),
            np.array([[0.0, 0.0], [h1, h2], [0.0, h2]])]
    cx, cy = np.meshgrid(np.arange(n1), np.arange(n2), indexing="xy")
    v00 = (cy * (n1 + 1) + cx).ravel()
    conns = [np.column_stack([v00, v00 + 1, v00 + n1 + 2]),
             np.column_stack([v00, v00 + n1 + 2, v00 + n1 + 1])]
    for conn, ref in zip(conns, refs):
        # map reference-triangle quadrature points into each physical triangle
        e1 = ref[1] - ref[0]
        e2 = ref[2] - ref[0]
        jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
        phi = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
        locx = ref[0, 0] + pts[:, 0] * e1[0] + pts[:, 1] * e2[0]
        locy = ref[0, 1] + pts[:, 0] * e1[1] + pts[:, 1] * e2[1]
        px = xs[conn[:, 0]][:, None] + locx[None, :]
        py = ys[conn[:, 0]][:, None] + locy[None, :]
        vals = np.asarray(point_function(px, py), dtype=float)
        vals = np.broadcast_to(vals, px.shape)
        contrib = (vals * wts[None, :]) @ phi * jac  # (n_tri, 3)
        np.add.at(load, conn, contrib)
    lu = _mass_factorization(fam)
    return GridFunction(fam, lu.solve(load))


def _mass_factorization(fam):
    with fam._cache_lock:
        if fam._mass_lu is None:
            fam._mass_lu = spla.splu(fam.mass.tocsc())
        return fam._mass_lu


def l2_norm(fam, v):
    """L2(domain) norm: Parseval sum (spectral) or M-weighted norm (FEM)."""
    values = v.values if isinstance(v, GridFunction) else np.asarray(v)
    if fam.backend is Backend.SPECTRAL:
        return float(np.linalg.norm(values))
    return float(np.sqrt(max(values @ (fam.mass @ values), 0.0)))


def evaluate_spectral(fam, v, x, y):
    """Evaluate a spectral grid function on the tensor grid x (*) y."""
    fam.check_compatible(v)
    if fam.backend is not Backend.SPECTRAL:
        raise BackendMismatchError("evaluate_spectral needs a spectral family")
    N1, N2 = fam.mode_counts
    B1 = cosine_basis_matrix(fam.domain[0], N1, np.asarray(x, dtype=float))
    B2 = cosine_basis_matrix(fam.domain[1], N2, np.asarray(y, dtype=float))
    C = v.values.reshape(N1, N2)
    return B1 @ C @ B2.T
