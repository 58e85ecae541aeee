"""Finite-difference ground truth on masked Cartesian grids.

Two well-posed problems are solved on a ``RasterMask``:

* ``duct``: fully developed axial flow, a Poisson problem for the axial
  velocity on the fluid pixels (5-point stencil, zero Dirichlet on every
  non-fluid neighbour), rescaled to the requested mean velocity.
* ``channel``: steady in-plane incompressible Navier-Stokes on a staggered
  (MAC) grid with inlet at column 0 and outlet at column ``w - 1``.

The channel problem is nondimensionalized internally: lengths in pixels,
velocity in units of the inlet mean velocity ``U`` and pressure in units of
``mu * U / pitch``. The only remaining parameter is the pixel Reynolds number
``rho * U * pitch / mu``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg, splu

from .errors import EmptyFluid, InvalidParams, NoThroughPath, NotConverged, ShapeMismatch, UnstableTimestep

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "duct"
    density: float = 998.0
    viscosity: float = 1.0e-3
    inlet_mean_velocity: float = 0.05
    pixel_pitch: float = 1.0e-6
    tolerance: float = 1e-6
    max_iterations: int = 5000

    def validate(self) -> None:
        if self.mode not in ("duct", "channel"):
            raise InvalidParams(f"mode must be 'duct' or 'channel', got {self.mode!r}")
        for name in ("density", "viscosity", "inlet_mean_velocity", "pixel_pitch"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be positive")
        if not 0 < self.tolerance <= 1e-2:
            raise InvalidParams("tolerance must lie in (0, 1e-2]")
        if self.max_iterations < 1:
            raise InvalidParams("max_iterations must be >= 1")

    @property
    def pixel_reynolds(self) -> float:
        return self.density * self.inlet_mean_velocity * self.pixel_pitch / self.viscosity


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    magnitude: np.ndarray
    pressure: np.ndarray | None = None
    converged_residual: float = 0.0
    iterations: int = 0
    # staggered face velocities in m/s, channel mode only: (h, w+1) and (h+1, w)
    u_faces: np.ndarray | None = None
    v_faces: np.ndarray | None = None


@dataclass
class ResidualReport:
    """Residual norms in SI units plus the scales that make them O(1)."""

    continuity_linf: float
    continuity_l2: float
    momentum_x_linf: float
    momentum_x_l2: float
    momentum_y_linf: float
    momentum_y_l2: float
    continuity_scale: float
    momentum_scale: float

    def normalized(self) -> dict[str, float]:
        c, m = self.continuity_scale, self.momentum_scale
        return {
            "continuity_linf": self.continuity_linf / c,
            "continuity_l2": self.continuity_l2 / c,
            "momentum_x_linf": self.momentum_x_linf / m,
            "momentum_x_l2": self.momentum_x_l2 / m,
            "momentum_y_linf": self.momentum_y_linf / m,
            "momentum_y_l2": self.momentum_y_l2 / m,
        }


def _fluid(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got shape {mask.shape}")
    fluid = mask == 0
    if not fluid.any():
        raise EmptyFluid("mask has no fluid pixels")
    return fluid


# ---------------------------------------------------------------- duct mode


def _duct_laplacian(fluid: np.ndarray) -> sp.csr_matrix:
    h, w = fluid.shape
    idx = -np.ones((h, w), dtype=np.int64)
    n = int(fluid.sum())
    idx[fluid] = np.arange(n)
    rows, cols = [np.arange(n)], [np.arange(n)]
    vals = [np.full(n, 4.0)]
    pad = np.pad(idx, 1, constant_values=-1)
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb = pad[1 + di:1 + di + h, 1 + dj:1 + dj + w][fluid]
        ok = nb >= 0
        rows.append(np.arange(n)[ok])
        cols.append(nb[ok])
        vals.append(-np.ones(int(ok.sum())))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def solve_duct(mask: np.ndarray, cfg: SolverConfig = SolverConfig()) -> FlowField:
    """Axial velocity of fully developed flow through the fluid cross section."""
    cfg.validate()
    fluid = _fluid(mask)
    a = _duct_laplacian(fluid)
    b = np.ones(a.shape[0])
    # the source strength is arbitrary: the problem is linear and rescaled below
    x, _ = cg(a, b, rtol=min(1e-10, cfg.tolerance), atol=0.0, maxiter=cfg.max_iterations)
    rel = float(np.linalg.norm(b - a @ x) / np.linalg.norm(b))
    if not np.isfinite(rel) or rel > cfg.tolerance:
        raise NotConverged(f"duct CG relative residual {rel:.3e} > {cfg.tolerance:.1e}")
    x *= cfg.inlet_mean_velocity / x.mean()
    w_axial = np.zeros(fluid.shape)
    w_axial[fluid] = x
    zeros = np.zeros(fluid.shape)
    return FlowField(u=zeros, v=zeros.copy(), magnitude=w_axial, converged_residual=rel)


# ------------------------------------------------------------- channel mode


def through_region(fluid: np.ndarray) -> np.ndarray:
    """Fluid cells 4-connected to both the inlet and the outlet column."""
    labels, _ = ndimage.label(fluid)
    common = np.intersect1d(labels[:, 0][labels[:, 0] > 0], labels[:, -1][labels[:, -1] > 0])
    if common.size == 0:
        raise NoThroughPath("no fluid path connects the inlet column to the outlet column")
    return np.isin(labels, common)


class _MacSystem:
    """Index bookkeeping and sparse operators for the staggered grid.

    u faces live on an ``(h, w+1)`` array (face ``j`` sits between cells
    ``j-1`` and ``j``; face ``w`` is the outlet), v faces on ``(h+1, w)``.
    Each unknown face has four neighbour values expressed as
    ``P_d @ x + B_d @ F`` where ``F`` is the full flattened face array, so
    the same operators evaluate residuals of externally supplied fields.
    """

    def __init__(self, fluid: np.ndarray):
        self.fluid = fluid
        h, w = self.shape = fluid.shape
        # u faces: left/right cells, inlet and outlet ghost cells copy the edge column
        cl = np.concatenate([fluid[:, :1], fluid], axis=1)
        cr = np.concatenate([fluid, fluid[:, -1:]], axis=1)
        self.u_unknown = cl & cr
        self.u_unknown[:, 0] = False
        self.u_inlet = np.zeros_like(self.u_unknown)
        self.u_inlet[:, 0] = fluid[:, 0]
        self.u_wall = ~cl & ~cr
        # v faces: cells above/below, outside the canvas is solid
        ct = np.concatenate([np.zeros((1, w), bool), fluid], axis=0)
        cb = np.concatenate([fluid, np.zeros((1, w), bool)], axis=0)
        self.v_unknown = ct & cb
        self.v_wall = ~ct & ~cb

        self.u_idx = -np.ones(self.u_unknown.shape, np.int64)
        self.nu = int(self.u_unknown.sum())
        self.u_idx[self.u_unknown] = np.arange(self.nu)
        self.v_idx = -np.ones(self.v_unknown.shape, np.int64)
        self.nv = int(self.v_unknown.sum())
        self.v_idx[self.v_unknown] = np.arange(self.nv)
        self.p_idx = -np.ones(fluid.shape, np.int64)
        self.np_ = int(fluid.sum())
        self.p_idx[fluid] = np.arange(self.np_)

        # u-face neighbours: x-direction never hits a wall-ghost, y-direction may
        self.u_nb = {
            "W": self._neighbours(self.u_idx, self.u_wall, 0, -1, low="self_neg", high="self_neg"),
            "E": self._neighbours(self.u_idx, self.u_wall, 0, 1, low="self_neg", high="self_pos"),
            "S": self._neighbours(self.u_idx, self.u_wall, -1, 0, low="self_neg", high="self_neg"),
            "N": self._neighbours(self.u_idx, self.u_wall, 1, 0, low="self_neg", high="self_neg"),
        }
        # v faces: v = 0 on the inlet plane (odd ghost), zero gradient at the outlet
        self.v_nb = {
            "W": self._neighbours(self.v_idx, self.v_wall, 0, -1, low="self_neg", high="self_neg"),
            "E": self._neighbours(self.v_idx, self.v_wall, 0, 1, low="self_neg", high="self_pos"),
            "S": self._neighbours(self.v_idx, self.v_wall, -1, 0, low="self_neg", high="self_neg"),
            "N": self._neighbours(self.v_idx, self.v_wall, 1, 0, low="self_neg", high="self_neg"),
        }
        self._build_pressure_ops()

    def _neighbours(self, idx, wall, di, dj, low, high):
        """Return (P, B) with neighbour value = P @ x + B @ F.ravel().

        ``low``/``high`` give the ghost rule when the neighbour index falls
        below 0 or beyond the array: ``self_neg`` mirrors with a sign flip
        (no-slip plane halfway), ``self_pos`` copies (zero gradient).
        """
        nh, nw = idx.shape
        ii, jj = np.nonzero(idx >= 0)
        k = idx[ii, jj]
        ni, nj = ii + di, jj + dj
        below = (ni < 0) | (nj < 0)
        above = (ni >= nh) | (nj >= nw)
        inside = ~below & ~above
        n = len(k)
        p_rows, p_cols, p_vals = [], [], []
        b_rows, b_cols = [], []

        for sel, rule in ((below, low), (above, high)):
            p_rows.append(k[sel])
            p_cols.append(k[sel])
            p_vals.append(np.full(int(sel.sum()), -1.0 if rule == "self_neg" else 1.0))

        nii, njj, kin = ni[inside], nj[inside], k[inside]
        nb_idx = idx[nii, njj]
        unk = nb_idx >= 0
        p_rows.append(kin[unk])
        p_cols.append(nb_idx[unk])
        p_vals.append(np.ones(int(unk.sum())))
        is_wall = ~unk & wall[nii, njj]
        p_rows.append(kin[is_wall])
        p_cols.append(kin[is_wall])
        p_vals.append(-np.ones(int(is_wall.sum())))
        known = ~unk & ~is_wall
        b_rows.append(kin[known])
        b_cols.append(nii[known] * nw + njj[known])

        p = sp.csr_matrix((np.concatenate(p_vals), (np.concatenate(p_rows), np.concatenate(p_cols))), shape=(n, n))
        br, bc = np.concatenate(b_rows), np.concatenate(b_cols)
        b = sp.csr_matrix((np.ones(len(br)), (br, bc)), shape=(n, nh * nw))
        return p, b

    def _build_pressure_ops(self):
        h, w = self.shape
        # gradient on u faces: p[i, j] - p[i, j-1]; at the outlet the ghost pressure is 0
        ii, jj = np.nonzero(self.u_unknown)
        k = self.u_idx[ii, jj]
        right = np.where(jj < w, self.p_idx[ii, np.minimum(jj, w - 1)], -1)
        left = self.p_idx[ii, jj - 1]
        rows = np.concatenate([k[right >= 0], k])
        cols = np.concatenate([right[right >= 0], left])
        vals = np.concatenate([np.ones(int((right >= 0).sum())), -np.ones(len(k))])
        self.gx = sp.csr_matrix((vals, (rows, cols)), shape=(self.nu, self.np_))
        ii, jj = np.nonzero(self.v_unknown)
        k = self.v_idx[ii, jj]
        rows = np.concatenate([k, k])
        cols = np.concatenate([self.p_idx[ii, jj], self.p_idx[ii - 1, jj]])
        vals = np.concatenate([np.ones(len(k)), -np.ones(len(k))])
        self.gy = sp.csr_matrix((vals, (rows, cols)), shape=(self.nv, self.np_))

    def laplacian(self, nb):
        """Negative Laplacian: returns (M, Bsum) with -lap x = M x - Bsum F."""
        n = nb["W"][0].shape[0]
        m = 4.0 * sp.identity(n, format="csr")
        bsum = None
        for p, b in nb.values():
            m = m - p
            bsum = b if bsum is None else bsum + b
        return m.tocsr(), bsum.tocsr()

    def stokes_matrix(self):
        mu, self.bu = self.laplacian(self.u_nb)
        mv, self.bv = self.laplacian(self.v_nb)
        k = sp.bmat([
            [mu, None, self.gx],
            [None, mv, self.gy],
            [self.gx.T, self.gy.T, None],
        ], format="csc")
        return k

    def advection(self, U, V):
        """Upwind ``(u.grad) u`` and ``(u.grad) v`` at the unknown faces."""
        uu = U[self.u_unknown]
        vv = V[self.v_unknown]
        # v interpolated to u faces: four surrounding v faces
        vpad = np.concatenate([V[:, :1], V, V[:, -1:]], axis=1)
        v_at_u = 0.25 * (vpad[:-1, :-1] + vpad[1:, :-1] + vpad[:-1, 1:] + vpad[1:, 1:])[self.u_unknown]
        hz = np.zeros((1, U.shape[1]))
        upad = np.concatenate([hz, U, hz], axis=0)
        u_at_v = 0.25 * (upad[:-1, :-1] + upad[:-1, 1:] + upad[1:, :-1] + upad[1:, 1:])[self.v_unknown]
        fu, fv = U.ravel(), V.ravel()

        def term(x, f, nb, ax, ay):
            vals = {d: p @ x + b @ f for d, (p, b) in nb.items()}
            return (np.maximum(ax, 0) * (x - vals["W"]) + np.minimum(ax, 0) * (vals["E"] - x)
                    + np.maximum(ay, 0) * (x - vals["S"]) + np.minimum(ay, 0) * (vals["N"] - x))

        return term(uu, fu, self.u_nb, uu, v_at_u), term(vv, fv, self.v_nb, u_at_v, vv)

    def scatter(self, x):
        U = np.zeros(self.u_unknown.shape)
        V = np.zeros(self.v_unknown.shape)
        U[self.u_inlet] = 1.0
        U[self.u_unknown] = x[:self.nu]
        V[self.v_unknown] = x[self.nu:self.nu + self.nv]
        P = np.zeros(self.shape)
        P[self.fluid] = x[self.nu + self.nv:]
        return U, V, P

    def divergence(self, U, V):
        return (U[:, 1:] - U[:, :-1]) + (V[1:, :] - V[:-1, :])


def solve_channel(mask: np.ndarray, cfg: SolverConfig = SolverConfig(mode="channel")) -> FlowField:
    """Steady Navier-Stokes through an open channel, inlet u=U, v=0 at x=0.

    The Stokes saddle-point operator is factored once; the upwind advection
    term is lagged (defect correction) until the relative velocity change
    per iteration drops below ``cfg.tolerance``.
    """
    cfg.validate()
    fluid = through_region(_fluid(mask))
    sysm = _MacSystem(fluid)
    re = cfg.pixel_reynolds
    k = sysm.stokes_matrix()
    lu = splu(k, permc_spec="COLAMD")
    U_bc, V_bc, _ = sysm.scatter(np.zeros(k.shape[0]))
    base_rhs = np.concatenate([
        sysm.bu @ U_bc.ravel(),
        sysm.bv @ V_bc.ravel(),
        # continuity: G^T x equals the divergence of the boundary data
        sysm.divergence(U_bc, V_bc)[fluid],
    ])
    x = lu.solve(base_rhs)
    change = np.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        U, V, _ = sysm.scatter(x)
        au, av = sysm.advection(U, V)
        rhs = base_rhs.copy()
        rhs[:sysm.nu] -= re * au
        rhs[sysm.nu:sysm.nu + sysm.nv] -= re * av
        x_new = lu.solve(rhs)
        if not np.all(np.isfinite(x_new)):
            raise UnstableTimestep(f"non-finite values at iteration {it}")
        vel = slice(0, sysm.nu + sysm.nv)
        change = float(np.max(np.abs(x_new[vel] - x[vel])) / max(np.max(np.abs(x_new[vel])), 1e-300))
        x = x_new
        if change < cfg.tolerance:
            break
    else:
        raise NotConverged(f"velocity change {change:.3e} after {cfg.max_iterations} iterations")

    U, V, P = sysm.scatter(x)
    div = np.abs(sysm.divergence(U, V)[fluid]).max()
    if div >= cfg.tolerance * 1e-2:
        raise NotConverged(f"continuity residual {div:.3e} above {cfg.tolerance * 1e-2:.1e}")
    log.debug("channel solve converged in %d iterations (change %.2e)", it, change)

    scale = cfg.inlet_mean_velocity
    uc = 0.5 * (U[:, :-1] + U[:, 1:]) * scale
    vc = 0.5 * (V[:-1, :] + V[1:, :]) * scale
    uc[~fluid] = 0.0
    vc[~fluid] = 0.0
    pressure = P * (cfg.viscosity * scale / cfg.pixel_pitch)
    return FlowField(
        u=uc, v=vc, magnitude=np.sqrt(uc ** 2 + vc ** 2), pressure=pressure,
        converged_residual=change, iterations=it, u_faces=U * scale, v_faces=V * scale,
    )


def solve(mask: np.ndarray, cfg: SolverConfig) -> FlowField:
    if cfg.mode == "duct":
        return solve_duct(mask, cfg)
    if cfg.mode == "channel":
        return solve_channel(mask, cfg)
    raise InvalidParams(f"unknown solver mode {cfg.mode!r}")


def _norms(r: np.ndarray) -> tuple[float, float]:
    if r.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(r))), float(np.sqrt(np.mean(r ** 2)))


def residual_report(field: FlowField, mask: np.ndarray, cfg: SolverConfig) -> ResidualReport:
    """Discrete residuals of continuity and both momentum equations.

    Fields carrying staggered face velocities are checked with the MAC
    stencils used by the channel solver; plain cell-centred fields with
    second-order central differences on pixels whose four neighbours are
    fluid.
    """
    mask = np.asarray(mask)
    for name in ("u", "v", "magnitude"):
        if np.shape(getattr(field, name)) != mask.shape:
            raise ShapeMismatch(f"field.{name} shape {np.shape(getattr(field, name))} != mask {mask.shape}")
    dx, U0, mu, rho = cfg.pixel_pitch, cfg.inlet_mean_velocity, cfg.viscosity, cfg.density
    c_scale = U0 / dx
    m_scale = mu * U0 / dx ** 2
    fluid = mask == 0

    if field.u_faces is not None and field.v_faces is not None:
        fluid = through_region(fluid)
        sysm = _MacSystem(fluid)
        U = field.u_faces / U0
        V = field.v_faces / U0
        P = (field.pressure if field.pressure is not None else np.zeros(mask.shape)) * dx / (mu * U0)
        cont = sysm.divergence(U, V)[fluid]
        mu_op, bu = sysm.laplacian(sysm.u_nb)
        mv_op, bv = sysm.laplacian(sysm.v_nb)
        uu, vv, pp = U[sysm.u_unknown], V[sysm.v_unknown], P[fluid]
        au, av = sysm.advection(U, V)
        rx = mu_op @ uu - bu @ U.ravel() + sysm.gx @ pp + cfg.pixel_reynolds * au
        ry = mv_op @ vv - bv @ V.ravel() + sysm.gy @ pp + cfg.pixel_reynolds * av
        cl, c2 = _norms(cont * c_scale)
        xl, x2 = _norms(rx * m_scale)
        yl, y2 = _norms(ry * m_scale)
        return ResidualReport(cl, c2, xl, x2, yl, y2, c_scale, m_scale)

    u = np.asarray(field.u, dtype=np.float64)
    v = np.asarray(field.v, dtype=np.float64)
    p = np.zeros(mask.shape) if field.pressure is None else np.asarray(field.pressure, dtype=np.float64)
    interior = np.zeros(mask.shape, dtype=bool)
    interior[1:-1, 1:-1] = (fluid[1:-1, 1:-1] & fluid[:-2, 1:-1] & fluid[2:, 1:-1]
                            & fluid[1:-1, :-2] & fluid[1:-1, 2:])

    def ddx(f):
        return (f[1:-1, 2:] - f[1:-1, :-2]) / (2 * dx)

    def ddy(f):
        return (f[2:, 1:-1] - f[:-2, 1:-1]) / (2 * dx)

    def lap(f):
        return (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4 * f[1:-1, 1:-1]) / dx ** 2

    sel = interior[1:-1, 1:-1]
    uc, vc = u[1:-1, 1:-1], v[1:-1, 1:-1]
    cont = (ddx(u) + ddy(v))[sel]
    rx = (rho * (uc * ddx(u) + vc * ddy(u)) + ddx(p) - mu * lap(u))[sel]
    ry = (rho * (uc * ddx(v) + vc * ddy(v)) + ddy(p) - mu * lap(v))[sel]
    cl, c2 = _norms(cont)
    xl, x2 = _norms(rx)
    yl, y2 = _norms(ry)
    return ResidualReport(cl, c2, xl, x2, yl, y2, c_scale, m_scale)


def nondimensionalize(field: FlowField, cfg: SolverConfig, mask: np.ndarray | None = None,
                      target: str = "components") -> np.ndarray:
    """Training channels divided by ``U`` with exact zeros off the fluid.

    ``target='components'`` gives ``(2, h, w)`` (u, v); ``'magnitude'``
    gives ``(1, h, w)``.
    """
    U0 = cfg.inlet_mean_velocity
    if target == "components":
        out = np.stack([field.u, field.v]) / U0
    elif target == "magnitude":
        out = np.asarray(field.magnitude)[None] / U0
    else:
        raise InvalidParams(f"unknown target {target!r}")
    if mask is not None:
        out = np.where((np.asarray(mask) == 0)[None], out, 0.0)
    return out.astype(np.float32)


def flow_rates(field: FlowField) -> tuple[float, float]:
    """Volumetric flux per unit depth through the inlet and outlet planes (m^2/s / pitch)."""
    if field.u_faces is None:
        raise InvalidParams("flow rates need staggered face velocities (channel mode)")
    return float(field.u_faces[:, 0].sum()), float(field.u_faces[:, -1].sum())


def write_field_dump(grid: np.ndarray, channel_id: int, path) -> None:
    """Little-endian float32 dump: b'MFLD', u32 h, u32 w, u32 channel id, then row-major data."""
    grid = np.asarray(grid, dtype="<f4")
    h, w = grid.shape
    header = b"MFLD" + np.array([h, w, channel_id], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(grid).tobytes())


def read_field_dump(path) -> tuple[np.ndarray, int]:
    data = open(path, "rb").read()
    if len(data) < 16 or data[:4] != b"MFLD":
        raise ShapeMismatch("not an MFLD field dump")
    h, w, cid = np.frombuffer(data[4:16], dtype="<u4")
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != int(h) * int(w):
        raise ShapeMismatch("field dump length does not match its header")
    return body.reshape(int(h), int(w)).astype(np.float32), int(cid)
