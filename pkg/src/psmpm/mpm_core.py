"""Particle state, grid assembly, mass-matrix modes, and the explicit step.

One time step projects particle mass, internal/body/traction forces onto
the grid basis, solves for grid accelerations, increments particle
velocities, re-projects momentum for the end-of-step velocity field
(density-weighted L2 projection), and finally updates deformation, stress,
volume, density and positions from that field.  Grid quantities are
rebuilt from scratch every step.

The mass matrix can be used consistent, fully lumped (row sums on the
diagonal), or partially lumped: only rows whose basis function has at
least one particle-free element in its support are replaced by their
lumped diagonal.  The partial system is solved by eliminating the lumped
rows into the right-hand side of the remaining consistent block, which
keeps that block symmetric positive definite and preserves every row sum
(hence the total mass).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (NonPositiveJacobian, ParticleLeftDomain,
                     ParticleOutsideMesh, SolverDiverged, ValidationError)

# Grid dofs with lumped mass below this fraction of the mean particle mass
# are excluded from solves (their coefficients are set to zero).
ZERO_MASS_REL_TOL = 1e-12

CG_RTOL = 1e-10
CG_MAXITER_FACTOR = 10

# For an SPD matrix the condition number is at least max(diag)/min(diag);
# past this ratio a 1e-10 residual no longer bounds the error and the
# consistent solve is declared diverged.  Well-supported systems measure
# below 1e2, a draining support region sweeps through 1e8 on its way to
# empty.
ILL_CONDITION_RATIO = 1e8

# A single acceleration step that kicks a particle past this multiple of the
# material wave speed marks the solve as diverged: the motions simulated
# here are far subsonic, and accelerations of that size only arise when
# weakly supported basis functions destabilise the consistent solve.
VELOCITY_BLOWUP_FACTOR = 10.0


class MassMode(enum.Enum):
    CONSISTENT = "consistent"
    LUMPED = "lumped"
    PARTIAL = "partial"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValidationError(
                f"unknown mass mode {name!r}; expected consistent|lumped|partial"
            ) from None


@dataclass
class MaterialModel:
    """Linear-elastic or neo-Hookean material defined by E and nu."""

    kind: str
    E: float
    nu: float

    def __post_init__(self):
        if self.kind not in ("linear-elastic", "neo-hookean"):
            raise ValidationError(f"unknown material kind {self.kind!r}")
        if self.E <= 0.0:
            raise ValidationError("Young's modulus must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValidationError("Poisson ratio must lie in (-1, 0.5)")

    @property
    def lam(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    def wave_speed(self, rho):
        return np.sqrt(self.E / rho)

    def stress(self, D, J):
        """Cauchy stress for a batch of deformation gradients (n, 2, 2)."""
        n = len(D)
        eye = np.zeros((n, 2, 2))
        eye[:, 0, 0] = eye[:, 1, 1] = 1.0
        if self.kind == "linear-elastic":
            strain = 0.5 * (D + np.swapaxes(D, 1, 2)) - eye
            tr = strain[:, 0, 0] + strain[:, 1, 1]
            return self.lam * tr[:, None, None] * eye + 2.0 * self.mu * strain
        b = np.einsum('pij,pkj->pik', D, D)
        return (self.lam * np.log(J) / J)[:, None, None] * eye \
            + (self.mu / J)[:, None, None] * (b - eye)


class Particles:
    """State arrays of the material points.

    Particle mass is fixed at construction (m = V0 * rho0); volume and
    density evolve through the deformation-gradient determinant so that
    m = V * rho holds at all times.
    """

    def __init__(self, positions, volumes, rho0):
        positions = np.asarray(positions, dtype=float)
        n = len(positions)
        self.x0 = positions.copy()          # reference coordinates
        self.x = positions.copy()
        self.u = np.zeros((n, 2))
        self.v = np.zeros((n, 2))
        self.D = np.zeros((n, 2, 2))
        self.D[:, 0, 0] = self.D[:, 1, 1] = 1.0
        self.J = np.ones(n)
        self.sigma = np.zeros((n, 2, 2))
        self.V0 = np.asarray(volumes, dtype=float).copy()
        self.V = self.V0.copy()
        self.rho = np.broadcast_to(np.asarray(rho0, dtype=float), (n,)).copy()
        self.m = self.V0 * self.rho
        # cached location (element/sub/eta) carried between steps
        self.loc = None

    @property
    def n(self):
        return len(self.x)

    def total_mass(self):
        return float(self.m.sum())


@dataclass
class ParticleLayout:
    """Either a global lattice (nx x ny cell centers over a rectangle) or a
    fixed per-element count placed by recursive uniform splitting."""

    kind: str                      # "lattice" | "ppe"
    nx: int = 0
    ny: int = 0
    ppe: int = 0
    domain: tuple | None = None    # (x0, y0, x1, y1); default mesh bbox


def _split_factors(ppe):
    factors = []
    r = int(ppe)
    if r < 1:
        raise ValidationError("ppe must be >= 1")
    while r % 4 == 0:
        factors.append(4)
        r //= 4
    while r % 3 == 0:
        factors.append(3)
        r //= 3
    if r != 1:
        raise ValidationError(
            f"ppe={ppe} not supported; must factor into 3s and 4s")
    return factors


def _subdivision_centroids(factors):
    """Barycentric centroids of the recursive 3/4-way uniform splits."""
    tris = [np.eye(3)]
    for f in factors:
        nxt = []
        for t in tris:
            v0, v1, v2 = t
            if f == 4:
                m01, m12, m02 = 0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v0 + v2)
                nxt += [np.array([v0, m01, m02]), np.array([m01, v1, m12]),
                        np.array([m02, m12, v2]), np.array([m01, m12, m02])]
            else:
                g = (v0 + v1 + v2) / 3.0
                nxt += [np.array([v0, v1, g]), np.array([v1, v2, g]),
                        np.array([v2, v0, g])]
        tris = nxt
    return np.array([t.mean(axis=0) for t in tris])


def init_particles(locator, layout: ParticleLayout, rho0) -> Particles:
    """Create particles over the mesh with identity deformation, zero
    velocity/stress, and total volume equal to the covered area.

    Raises:
        ParticleOutsideMesh: if a lattice point does not locate into the mesh.
    """
    tri = locator.tri
    if layout.kind == "lattice":
        if layout.nx < 1 or layout.ny < 1:
            raise ValidationError("lattice layout needs nx, ny >= 1")
        if layout.domain is None:
            lo, hi = tri.bbox()
            x0, y0, x1, y1 = lo[0], lo[1], hi[0], hi[1]
        else:
            x0, y0, x1, y1 = layout.domain
        dx = (x1 - x0) / layout.nx
        dy = (y1 - y0) / layout.ny
        xs = x0 + dx * (np.arange(layout.nx) + 0.5)
        ys = y0 + dy * (np.arange(layout.ny) + 0.5)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pos = np.column_stack([gx.ravel(), gy.ravel()])
        vol = np.full(len(pos), (x1 - x0) * (y1 - y0) / len(pos))
    elif layout.kind == "ppe":
        bary = _subdivision_centroids(_split_factors(layout.ppe))
        verts = tri.nodes[tri.elements]                    # (n_e, 3, 2)
        pos = np.einsum('kb,ebd->ekd', bary, verts).reshape(-1, 2)
        vol = np.repeat(tri.areas / layout.ppe, layout.ppe)
    else:
        raise ValidationError(f"unknown particle layout {layout.kind!r}")

    particles = Particles(pos, vol, rho0)
    elem, sub, eta = locator.locate_many(pos)
    if np.any(elem < 0):
        bad = int(np.nonzero(elem < 0)[0][0])
        raise ParticleOutsideMesh(
            f"particle {bad} at {tuple(pos[bad])} is outside the mesh")
    particles.loc = (elem, sub, eta)
    return particles


class MassOperator:
    """Assembled grid mass in one of the three modes.

    ``lumped`` always holds the row sums (equal to the consistent row sums
    by partition of unity).  ``matrix`` is the consistent matrix; it is
    None in lumped mode.  In partial mode ``marked`` flags the dofs whose
    rows are replaced by their lumped diagonal: the effective operator is
    the consistent matrix with those rows swapped for ``lumped[i] * e_i``,
    which preserves every row sum and hence the total mass.
    """

    def __init__(self, mode, lumped, matrix=None, marked=None):
        self.mode = mode
        self.lumped = lumped
        self.matrix = matrix
        self.marked = marked

    @property
    def n(self):
        return len(self.lumped)

    def total_mass(self):
        return float(self.lumped.sum())

    def row_sums(self):
        """Row sums of the effective operator (identical in all modes)."""
        if self.mode is MassMode.LUMPED or self.matrix is None:
            return self.lumped.copy()
        sums = np.asarray(self.matrix.sum(axis=1)).ravel()
        if self.mode is MassMode.PARTIAL:
            sums[self.marked] = self.lumped[self.marked]
        return sums

    def matvec(self, x):
        if self.matrix is None:
            return self.lumped * x
        y = self.matrix @ x
        if self.mode is MassMode.PARTIAL:
            y[self.marked] = self.lumped[self.marked] * x[self.marked]
        return y


class GridAssembler:
    """Scatter-add assembly of grid quantities for a fixed basis.

    The sparsity pattern of the mass matrix depends only on the mesh/basis,
    so it is built once; per step only the numeric values are accumulated
    (a flat bincount over precomputed slot indices).
    """

    def __init__(self, basis):
        self.basis = basis
        self.n_bf = basis.n_bf
        k = basis.n_active
        dofs = basis.element_dofs
        rows = np.repeat(dofs, k, axis=1).ravel()
        cols = np.tile(dofs, (1, k)).ravel()
        order = np.lexsort((cols, rows))
        pairs = np.column_stack([rows[order], cols[order]])
        keep = np.ones(len(pairs), dtype=bool)
        keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
        unique = pairs[keep]
        self._indptr = np.searchsorted(unique[:, 0], np.arange(self.n_bf + 1))
        self._indices = unique[:, 1].copy()
        self.nnz = len(unique)
        slot_of_sorted = np.cumsum(keep) - 1
        slots = np.empty(len(pairs), dtype=int)
        slots[order] = slot_of_sorted
        self.element_slots = slots.reshape(len(dofs), k * k)

        tri = basis.tri
        inc_rows = np.repeat(np.arange(tri.n_elements), 3)
        inc_cols = tri.elements.ravel()
        self.vertex_incidence = sp.csr_matrix(
            (np.ones(inc_rows.size), (inc_cols, inc_rows)),
            shape=(tri.n_nodes, tri.n_elements))

    def mass(self, elem, dofs, vals, masses, mode: MassMode) -> MassOperator:
        weighted = masses[:, None] * vals
        lumped = np.bincount(dofs.ravel(), weights=weighted.ravel(),
                             minlength=self.n_bf)
        if mode is MassMode.LUMPED:
            return MassOperator(mode, lumped)

        outer = (weighted[:, :, None] * vals[:, None, :]).reshape(len(vals), -1)
        data = np.bincount(self.element_slots[elem].ravel(),
                           weights=outer.ravel(), minlength=self.nnz)
        matrix = sp.csr_matrix((data, self._indices, self._indptr),
                               shape=(self.n_bf, self.n_bf))
        if mode is MassMode.CONSISTENT:
            return MassOperator(mode, lumped, matrix)

        counts = np.bincount(elem, minlength=self.basis.tri.n_elements)
        empty = counts == 0
        marked_vertex = np.asarray(
            self.vertex_incidence @ empty.astype(float) > 0.0)
        if self.basis.n_active == 9:
            marked = np.repeat(marked_vertex, 3)
        else:
            marked = marked_vertex
        return MassOperator(mode, lumped, matrix, marked)

    def vector(self, dofs, contributions):
        """Accumulate per-particle per-function 2-vectors into (n_bf, 2)."""
        out = np.empty((self.n_bf, 2))
        flat = dofs.ravel()
        for kcomp in range(2):
            out[:, kcomp] = np.bincount(
                flat, weights=contributions[:, :, kcomp].ravel(),
                minlength=self.n_bf)
        return out

    def forces(self, dofs, vals, grads, particles, body=None, traction=None):
        """Traction, internal and body force vectors, each (n_bf, 2)."""
        f_int = self.vector(dofs, np.matmul(
            grads, particles.V[:, None, None] * particles.sigma))
        if body is None:
            f_body = np.zeros((self.n_bf, 2))
        else:
            f_body = self.vector(
                dofs, (particles.m[:, None] * vals)[:, :, None]
                * body[:, None, :])
        if traction is None:
            f_trac = np.zeros((self.n_bf, 2))
        else:
            f_trac = self.vector(dofs,
                                 vals[:, :, None] * traction[:, None, :])
        return f_trac, f_int, f_body

    def momentum(self, dofs, vals, particles):
        return self.vector(dofs, (particles.m[:, None] * vals)[:, :, None]
                           * particles.v[:, None, :])


class ConstraintReduction:
    """Change of unknowns that makes constrained combinations explicit.

    Constraint rows touch one vertex block each (one dof for hats, three
    for splines).  Per block, an SVD of the stacked rows yields the
    particular (minimum-norm) solution and an orthonormal basis of the free
    directions; the global prolongation keeps unconstrained dofs as-is, so
    the reduced operator stays symmetric positive definite.
    """

    def __init__(self, n_bf, rows):
        self.n_bf = n_bf
        grouped = {}
        for dofs, coeffs, rhs in rows:
            key = tuple(int(d) for d in dofs)
            grouped.setdefault(key, []).append((np.asarray(coeffs, float), rhs))

        constrained = set()
        self.blocks = []          # (dofs array, nullspace (k, m), offset (k,))
        offset = np.zeros(n_bf)
        for key in sorted(grouped):
            a = np.array([r[0] for r in grouped[key]])
            b = np.array([r[1] for r in grouped[key]])
            _, s, vt = np.linalg.svd(a, full_matrices=True)
            tol = max(a.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
            rank = int((s > tol).sum())
            sol, *_ = np.linalg.lstsq(a, b, rcond=None)
            if np.linalg.norm(a @ sol - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
                raise ValidationError(f"inconsistent constraints on dofs {key}")
            offset[list(key)] = sol
            dof_arr = np.asarray(key, dtype=int)
            self.blocks.append((dof_arr, vt[rank:].T.copy(), sol))
            constrained.update(key)

        self.free_dofs = np.asarray(
            [d for d in range(n_bf) if d not in constrained], dtype=int)
        self.offset = offset
        self.homogeneous = not offset.any()
        self.P = self._prolongation()

    def _prolongation(self, dof_mask=None):
        """Sparse map from reduced to full coefficients.

        With ``dof_mask`` only the columns living on masked dofs are kept
        (constraint blocks never straddle the mask because they are
        per-vertex, as is the mask).
        """
        free = self.free_dofs
        if dof_mask is not None:
            free = free[dof_mask[free]]
        data = [np.ones(len(free))]
        rix = [free]
        cix = [np.arange(len(free))]
        ci = len(free)
        for dofs, null, _ in self.blocks:
            if dof_mask is not None and not dof_mask[dofs[0]]:
                continue
            for j in range(null.shape[1]):
                data.append(null[:, j])
                rix.append(dofs)
                cix.append(np.full(len(dofs), ci))
                ci += 1
        if not data:
            return sp.csr_matrix((self.n_bf, 0))
        return sp.csr_matrix(
            (np.concatenate(data), (np.concatenate(rix), np.concatenate(cix))),
            shape=(self.n_bf, ci))

    @classmethod
    def identity(cls, n_bf):
        red = cls.__new__(cls)
        red.n_bf = n_bf
        red.blocks = []
        red.free_dofs = np.arange(n_bf)
        red.offset = np.zeros(n_bf)
        red.homogeneous = True
        red.P = sp.identity(n_bf, format="csr")
        return red

    @property
    def n_reduced(self):
        return self.P.shape[1]


def _solve_diagonal(lumped, rhs, reduction, tol, dof_mask=None):
    """Direct solve of diag(lumped) c = rhs under the reduction.

    Unconstrained dofs divide by their mass (zero-mass dofs get zero);
    constrained vertex blocks solve their tiny projected systems exactly.
    """
    out = np.zeros(len(lumped))
    free = reduction.free_dofs
    if dof_mask is not None:
        free = free[dof_mask[free]]
    d = lumped[free]
    ok = d > tol
    out[free[ok]] = rhs[free[ok]] / d[ok]
    for dofs, null, sol in reduction.blocks:
        if dof_mask is not None and not dof_mask[dofs[0]]:
            continue
        out[dofs] = sol
        if null.shape[1] == 0:
            continue
        dblock = lumped[dofs]
        if dblock.max() <= tol:
            continue
        a = null.T @ (dblock[:, None] * null)
        b = null.T @ (rhs[dofs] - dblock * sol)
        x, *_ = np.linalg.lstsq(a, b, rcond=None)
        out[dofs] += null @ x
    return out


def _solve_spd(matrix, rhs, reduction, tol, context, dof_mask=None,
               offset=True):
    """Reduced conjugate-gradient solve of the consistent block.

    Raises SolverDiverged either when the active diagonal spans more than
    ILL_CONDITION_RATIO (an SPD lower bound on the condition number, the
    signature of basis functions whose support is draining of particles)
    or when CG fails to reach the target residual.
    """
    p = reduction.P if dof_mask is None else reduction._prolongation(dof_mask)
    if reduction.homogeneous or not offset:
        b = p.T @ rhs
        base = np.zeros(matrix.shape[0])
    else:
        base = reduction.offset
        b = p.T @ (rhs - matrix @ base)
    a = (p.T @ matrix @ p).tocsr()
    diag = a.diagonal()
    active = diag > tol
    x = np.zeros(p.shape[1])
    if active.any():
        dsub = diag[active]
        if dsub.max() > ILL_CONDITION_RATIO * dsub.min():
            raise SolverDiverged(
                f"consistent mass matrix is ill-conditioned "
                f"(diagonal ratio {dsub.max() / dsub.min():.1e} in "
                f"{context or 'solve'}); a basis function has (almost) "
                "no particle support")
        asub = a[active][:, active]
        bsub = b[active]
        if np.linalg.norm(bsub) != 0.0:
            precond = sp.diags(1.0 / dsub)
            sol, info = spla.cg(asub, bsub, rtol=CG_RTOL, atol=0.0,
                                maxiter=CG_MAXITER_FACTOR * asub.shape[0],
                                M=precond)
            if info != 0:
                raise SolverDiverged(
                    f"conjugate gradients stalled ({context or 'solve'}); "
                    "the mass matrix is ill-conditioned, typically from "
                    "basis functions with (almost) no particle support")
            x[active] = sol
    return p @ x + base


def solve_grid(mass_op: MassOperator, rhs, reduction: ConstraintReduction,
               mean_particle_mass, context=""):
    """Solve the grid system M c = rhs under the constraint reduction.

    Lumped mode is a direct diagonal solve.  Consistent mode runs reduced
    Jacobi-preconditioned conjugate gradients at relative tolerance 1e-10.
    Partial mode eliminates the marked (lumped) rows first and then solves
    the remaining consistent block with the marked coefficients moved to
    the right-hand side, which is exactly the row-replaced operator of the
    partial-lumping rule.  Dofs with vanishing mass get zero coefficients.
    """
    tol = ZERO_MASS_REL_TOL * mean_particle_mass
    if mass_op.mode is MassMode.LUMPED:
        return _solve_diagonal(mass_op.lumped, rhs, reduction, tol)
    if mass_op.mode is MassMode.CONSISTENT:
        return _solve_spd(mass_op.matrix, rhs, reduction, tol, context)

    marked = mass_op.marked
    if not marked.any():
        return _solve_spd(mass_op.matrix, rhs, reduction, tol, context)
    out = _solve_diagonal(mass_op.lumped, rhs, reduction, tol, dof_mask=marked)
    corrected = rhs - mass_op.matrix @ out
    out += _solve_spd(mass_op.matrix, corrected, reduction, tol, context,
                      dof_mask=~marked, offset=False)
    return out


class MpmSystem:
    """A configured simulation: basis, material, mass mode, step size, BCs.

    ``body_force`` is a callable ``(reference_coords, t) -> (n, 2)`` or
    None; manufactured-solution forcing uses the reference coordinates.
    ``step`` advances particles in place and reuses the location cache.
    """

    def __init__(self, basis, material: MaterialModel, dt,
                 mass_mode=MassMode.CONSISTENT, constraints=(),
                 body_force=None, traction=None, on_exit="abort"):
        self.basis = basis
        self.material = material
        self.dt = float(dt)
        self.mass_mode = mass_mode if isinstance(mass_mode, MassMode) \
            else MassMode.parse(mass_mode)
        self.body_force = body_force
        self.traction = traction
        if on_exit not in ("abort", "clamp"):
            raise ValidationError("on_exit must be 'abort' or 'clamp'")
        self.on_exit = on_exit
        self.assembler = GridAssembler(basis)

        rows = basis.constraint_rows(constraints) if constraints else {0: [], 1: []}
        for comp_rows in rows.values():
            for _, _, rhs in comp_rows:
                if rhs != 0.0:
                    raise ValidationError(
                        "time stepping supports homogeneous constraints only")
        self.reductions = [
            ConstraintReduction(basis.n_bf, rows[k]) if rows[k]
            else ConstraintReduction.identity(basis.n_bf)
            for k in (0, 1)
        ]

    def _gather(self, dofs, vals, coeffs):
        return np.matmul(vals[:, None, :], coeffs[dofs])[:, 0, :]

    def step(self, particles: Particles, t=0.0):
        """Advance one time step; mutates ``particles``."""
        basis = self.basis
        if particles.loc is None:
            elem, sub, eta = basis.locator.locate_many(particles.x)
            if np.any(elem < 0):
                raise ParticleOutsideMesh("unlocatable particle at step start")
            particles.loc = (elem, sub, eta)
        elem, sub, eta = particles.loc
        dofs, vals, grads = basis.evaluate_located(elem, sub, eta)

        mean_mass = float(particles.m.mean())
        mass_op = self.assembler.mass(elem, dofs, vals, particles.m,
                                      self.mass_mode)

        body = None
        if self.body_force is not None:
            body = np.asarray(self.body_force(particles.x0, t), dtype=float)
        f_trac, f_int, f_body = self.assembler.forces(
            dofs, vals, grads, particles, body=body, traction=self.traction)
        rhs = f_trac - f_int + f_body

        a_hat = np.empty((basis.n_bf, 2))
        for k in range(2):
            a_hat[:, k] = solve_grid(mass_op, rhs[:, k], self.reductions[k],
                                     mean_mass, context=f"acceleration[{k}]")

        dv = self.dt * self._gather(dofs, vals, a_hat)
        if self.mass_mode is not MassMode.LUMPED:
            wave = self.material.wave_speed(float(particles.rho.mean()))
            kick = float(np.abs(dv).max())
            if kick > VELOCITY_BLOWUP_FACTOR * wave:
                raise SolverDiverged(
                    f"acceleration solve produced a velocity increment of "
                    f"{kick:.3g} m/s (wave speed {wave:.3g}) at t={t:.6g}; "
                    "the consistent mass matrix is destabilised by weakly "
                    "supported basis functions")
        particles.v += dv

        momentum = self.assembler.momentum(dofs, vals, particles)
        v_hat = np.empty((basis.n_bf, 2))
        for k in range(2):
            v_hat[:, k] = solve_grid(mass_op, momentum[:, k],
                                     self.reductions[k], mean_mass,
                                     context=f"velocity[{k}]")

        grad_v = np.matmul(np.swapaxes(v_hat[dofs], 1, 2), grads)
        eps = 0.5 * (grad_v + np.swapaxes(grad_v, 1, 2))
        if self.mass_mode is not MassMode.LUMPED:
            increment = self.dt * float(np.abs(eps).max())
            if increment > 0.5:
                # a half-unit strain in one step cannot come from resolved
                # physics; the projected field has grid-scale oscillations
                # from an ill-conditioned consistent block
                raise SolverDiverged(
                    f"velocity projection produced a strain increment of "
                    f"{increment:.3g} in one step at t={t:.6g}; the "
                    "consistent mass matrix is destabilised by weakly "
                    "supported basis functions")
        eye = np.zeros_like(eps)
        eye[:, 0, 0] = eye[:, 1, 1] = 1.0
        particles.D = np.matmul(eye + self.dt * eps, particles.D)
        particles.J = (particles.D[:, 0, 0] * particles.D[:, 1, 1]
                       - particles.D[:, 0, 1] * particles.D[:, 1, 0])
        if np.any(particles.J <= 0.0):
            bad = int(np.argmin(particles.J))
            raise NonPositiveJacobian(
                f"particle {bad}: det(D) = {particles.J[bad]:.3e} at t={t:.6g}")
        particles.sigma = self.material.stress(particles.D, particles.J)
        particles.V = particles.J * particles.V0
        particles.rho = particles.m / particles.V

        vel = self._gather(dofs, vals, v_hat)
        particles.x = particles.x + self.dt * vel
        particles.u = particles.u + self.dt * vel

        new_elem, new_sub, new_eta = basis.locator.locate_many(
            particles.x, hint=elem)
        outside = new_elem < 0
        if outside.any():
            if self.on_exit == "abort":
                bad = int(np.nonzero(outside)[0][0])
                raise ParticleLeftDomain(
                    f"particle {bad} left the mesh at t={t + self.dt:.6g} "
                    f"(position {tuple(particles.x[bad])})")
            lo, hi = basis.tri.bbox()
            span = np.maximum(hi - lo, 1e-300)
            inset = 1e-12 * span
            particles.x[outside] = np.clip(particles.x[outside],
                                           lo + inset, hi - inset)
            new_elem, new_sub, new_eta = basis.locator.locate_many(
                particles.x, hint=elem)
            if np.any(new_elem < 0):
                raise ParticleLeftDomain("clamped particle still unlocatable")
        particles.loc = (new_elem, new_sub, new_eta)

    def run(self, particles: Particles, n_steps, t0=0.0, on_step=None):
        """Step ``n_steps`` times; ``on_step(i, t, particles)`` runs after
        each step with t the end-of-step time."""
        t = t0
        for i in range(n_steps):
            self.step(particles, t)
            t = t0 + (i + 1) * self.dt
            if on_step is not None:
                on_step(i, t, particles)
        return particles
