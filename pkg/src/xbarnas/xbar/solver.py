"""Nodal analysis of a crossbar with wire, driver and sink resistance and a
voltage-dependent device conductance.

Node numbering: row-wire node r(i, j) = i*N + j, column-wire node
c(i, j) = N*N + i*N + j.  Row i is driven from V_i through R_source + R_wire
into r(i, 0) and continues along R_wire segments; column j runs down from
c(0, j) to c(N-1, j) and leaves through R_wire + R_sink to virtual ground.
The device at (i, j) joins r(i, j) and c(i, j).

Zero resistances are handled by merging the nodes they join, so the ideal
limit needs no special case: when every node is pinned to a terminal the
column currents reduce to ``V @ G``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from ..errors import ConfigError, ConvergenceError, ShapeError
from .config import CrossbarConfig

METHODS = ("direct", "relaxation")
SHORT_OHMS = 1e-6  # resistances below this are merged as ideal shorts


@dataclass
class SolverReport:
    node_voltages: np.ndarray  # 2*N*N: row nodes then column nodes
    currents: np.ndarray  # N, amperes into the sinks
    iterations: int
    residual: float  # max KCL residual, amperes

    @property
    def row_voltages(self):
        n = self.currents.shape[0]
        return self.node_voltages[: n * n].reshape(n, n)

    @property
    def col_voltages(self):
        n = self.currents.shape[0]
        return self.node_voltages[n * n :].reshape(n, n)


def device_conductance(g0, dv, cfg):
    """G(dv) = G0*(1 + beta*(|dv| - V_supply/2)), clamped to [G_min, G_max]."""
    if cfg.beta == 0:
        return g0
    g = g0 * (1.0 + cfg.beta * (np.abs(dv) - 0.5 * cfg.v_supply))
    return np.clip(g, cfg.g_min, cfg.g_max)


def _series(*rs):
    return sum(rs)


class CrossbarNetwork:
    """Reusable nodal system for one programmed conductance matrix.

    The linear operator is built with the programmed conductances G0.  The
    nonlinear part of each device current, (G(dv) - G0)*dv, is treated as a
    current injection and resolved by damped fixed-point iteration, so the
    factorization is computed once and reused for every drive vector.
    """

    def __init__(self, g, cfg: CrossbarConfig, method="direct"):
        g = np.asarray(g, dtype=np.float64)
        n = cfg.N
        if g.shape != (n, n):
            raise ShapeError(f"conductance matrix must be {n}x{n}, got {g.shape}")
        if method not in METHODS:
            raise ConfigError(f"unknown solver method {method!r}; choose from {METHODS}")
        self.cfg = cfg
        self.n = n
        self.g0 = g
        nn = n * n
        self.n_nodes = 2 * nn
        self.drivers = 2 * nn + np.arange(n)
        self.ground = 2 * nn + n
        total = self.ground + 1

        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        rnode = (ii * n + jj).ravel()
        cnode = nn + rnode
        self._rnode, self._cnode = rnode, cnode

        # wire edges: (a, b, resistance)
        a_list, b_list, r_list = [], [], []
        row_pairs = (ii[:, :-1] * n + jj[:, :-1]).ravel()
        a_list.append(row_pairs)
        b_list.append(row_pairs + 1)
        r_list.append(np.full(row_pairs.size, cfg.r_wire))
        col_pairs = nn + (ii[:-1, :] * n + jj[:-1, :]).ravel()
        a_list.append(col_pairs)
        b_list.append(col_pairs + n)
        r_list.append(np.full(col_pairs.size, cfg.r_wire))
        a_list.append(self.drivers)
        b_list.append(np.arange(n) * n)
        r_list.append(np.full(n, _series(cfg.r_source, cfg.r_wire)))
        a_list.append(nn + (n - 1) * n + np.arange(n))
        b_list.append(np.full(n, self.ground))
        r_list.append(np.full(n, _series(cfg.r_sink, cfg.r_wire)))
        wa = np.concatenate(a_list)
        wb = np.concatenate(b_list)
        wr = np.concatenate(r_list)
        self.wire_a, self.wire_b, self.wire_r = wa, wb, wr

        # merge nodes joined by zero resistance
        short = wr < SHORT_OHMS
        adj = sp.coo_matrix((np.ones(short.sum()), (wa[short], wb[short])), shape=(total, total))
        _, label = connected_components(adj, directed=False)
        terminal = np.full(label.max() + 1, -2)  # -2 free, -1 ground, k driver k
        terminal[label[self.ground]] = -1
        for k, d in enumerate(self.drivers):
            if terminal[label[d]] != -2:
                raise ConfigError("zero-resistance path shorts a driver to another terminal")
            terminal[label[d]] = k
        free_comp = np.flatnonzero(terminal == -2)
        comp_free = np.full(terminal.size, -1)
        comp_free[free_comp] = np.arange(free_comp.size)
        self.label = label
        self.node_free = comp_free[label]  # free index per node, -1 if pinned
        self.node_terminal = terminal[label]  # -2 free, -1 ground, k driver
        self.n_free = free_comp.size

        keep = ~short
        self._cond_a = wa[keep]
        self._cond_b = wb[keep]
        self._cond_g = 1.0 / wr[keep]

        self.method = method
        if method == "relaxation" and (cfg.r_wire < SHORT_OHMS or self.n_free != 2 * nn):
            # line relaxation needs every node free; fall back to elimination
            self.method = "direct"
        if self.n_free:
            self._assemble(g)

    # linear system ------------------------------------------------------

    def _assemble(self, g):
        n, f = self.n, self.n_free
        ea = np.concatenate([self._cond_a, self._rnode])
        eb = np.concatenate([self._cond_b, self._cnode])
        eg = np.concatenate([self._cond_g, g.ravel()])
        fa, fb = self.node_free[ea], self.node_free[eb]
        ta, tb = self.node_terminal[ea], self.node_terminal[eb]
        rows, cols, vals = [], [], []
        drv_r, drv_c, drv_v = [], [], []
        for fx, fy, ty in ((fa, fb, tb), (fb, fa, ta)):
            m = fx >= 0
            rows.append(fx[m])
            cols.append(fx[m])
            vals.append(eg[m])
            both = m & (fy >= 0) & (fx != fy)
            rows.append(fx[both])
            cols.append(fy[both])
            vals.append(-eg[both])
            same = m & (fx == fy)
            rows.append(fx[same])
            cols.append(fx[same])
            vals.append(-eg[same])
            to_drv = m & (fy < 0) & (ty >= 0)
            drv_r.append(fx[to_drv])
            drv_c.append(ty[to_drv])
            drv_v.append(eg[to_drv])
        self.matrix = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(f, f)
        )
        self.drive = sp.csr_matrix(
            (np.concatenate(drv_v), (np.concatenate(drv_r), np.concatenate(drv_c))), shape=(f, n)
        )
        # net injection at free nodes from a per-cell current flowing row -> column
        fr, fc = self.node_free[self._rnode], self.node_free[self._cnode]
        cells = np.arange(n * n)
        mr, mc = fr >= 0, fc >= 0
        self.inject = sp.csr_matrix(
            (
                np.concatenate([-np.ones(mr.sum()), np.ones(mc.sum())]),
                (np.concatenate([fr[mr], fc[mc]]), np.concatenate([cells[mr], cells[mc]])),
            ),
            shape=(f, n * n),
        )
        if self.method == "direct":
            # symmetric, diagonally dominant: no pivoting needed
            self._lu = splu(
                self.matrix,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )

    def _linear_solve(self, v, extra, warm):
        """Free-node voltages for drive ``v`` [N, B] and extra cell currents [N*N, B]."""
        rhs = self.drive @ v
        if extra is not None:
            rhs = rhs + self.inject @ extra
        if self.method == "direct":
            return self._lu.solve(np.asarray(rhs, dtype=np.float64))
        by_node = self._line_relaxation(v, extra, warm)
        out = np.empty_like(by_node)
        out[self.node_free[: self.n_nodes]] = by_node
        return out

    def _line_relaxation(self, v, extra, warm):
        """Alternating row-line / column-line block Gauss-Seidel with exact
        tridiagonal line solves (every node free, all wires resistive)."""
        n, nn, cfg = self.n, self.n * self.n, self.cfg
        b = v.shape[1]
        gw = 1.0 / cfg.r_wire
        gs = 1.0 / (cfg.r_source + cfg.r_wire)
        gk = 1.0 / (cfg.r_sink + cfg.r_wire)
        g = self.g0
        if not hasattr(self, "_line_factors"):
            pos = np.arange(n)
            row_diag = g + gw * ((pos > 0).astype(float) + (pos < n - 1))[None, :]
            row_diag[:, 0] += gs
            col_diag = g.T + gw * ((pos > 0).astype(float) + (pos < n - 1))[None, :]
            col_diag[:, n - 1] += gk
            self._line_factors = (_thomas_factor(row_diag, -gw), _thomas_factor(col_diag, -gw))
        row_f, col_f = self._line_factors
        if warm is None:
            rows = np.repeat(v[:, None, :], n, axis=1)
            cols = np.zeros((n, n, b))
        else:
            rows = warm[:nn].reshape(n, n, b)
            cols = warm[nn:].reshape(n, n, b)
        ext = np.zeros((n, n, b)) if extra is None else extra.reshape(n, n, b)
        scale = cfg.v_supply
        for _ in range(100 * n):
            rhs = g[:, :, None] * cols - ext
            rhs[:, 0, :] += gs * v
            new_rows = _thomas_solve(*row_f, -gw, rhs)
            rhs = (g[:, :, None] * new_rows + ext).transpose(1, 0, 2)  # [column, position, B]
            new_cols = _thomas_solve(*col_f, -gw, rhs).transpose(1, 0, 2)
            delta = max(np.max(np.abs(new_rows - rows)), np.max(np.abs(new_cols - cols)))
            rows, cols = new_rows, new_cols
            if delta <= 1e-15 * scale:
                break
        return np.concatenate([rows.reshape(nn, b), cols.reshape(nn, b)])

    # full solve ---------------------------------------------------------

    def node_values(self, v, free):
        """Voltages of all 2N^2 wire nodes given drive [N, B] and free values."""
        b = v.shape[1]
        out = np.zeros((self.n_nodes, b))
        idx = self.node_free[: self.n_nodes]
        term = self.node_terminal[: self.n_nodes]
        if free is not None:
            out[idx >= 0] = free[idx[idx >= 0]]
        pinned = term >= 0
        out[pinned] = v[term[pinned]]
        return out

    def kcl_residual(self, v, nodes, g_cell):
        """Max net current leaving any free node group, amperes."""
        if not self.n_free:
            return 0.0
        b = v.shape[1]
        full = np.zeros((self.ground + 1, b))
        full[: self.n_nodes] = nodes
        full[self.drivers] = v
        net = np.zeros((self.n_free, b))
        flow = self._cond_g[:, None] * (full[self._cond_a] - full[self._cond_b])
        cell = g_cell * (full[self._rnode] - full[self._cnode])
        for a, bnode, cur in ((self._cond_a, self._cond_b, flow), (self._rnode, self._cnode, cell)):
            fa, fb = self.node_free[a], self.node_free[bnode]
            np.add.at(net, fa[fa >= 0], cur[fa >= 0])
            np.add.at(net, fb[fb >= 0], -cur[fb >= 0])
        return float(np.max(np.abs(net)))

    def solve(self, v):
        """Solve for drive voltages ``v`` of shape [N] or [N, B].

        Returns (node voltages [2N^2, B], column currents [N, B], iterations,
        residual).
        """
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        if single:
            v = v[:, None]
        if v.shape[0] != self.n:
            raise ShapeError(f"drive vector length {v.shape[0]} does not match N={self.n}")
        cfg, nn = self.cfg, self.n * self.n
        g0 = self.g0.reshape(nn, 1)
        free = self._linear_solve(v, None, None) if self.n_free else None
        nodes = self.node_values(v, free)
        iterations = 1
        if cfg.beta != 0:
            for iterations in range(1, cfg.max_iters + 1):
                dv = nodes[:nn] - nodes[nn:]
                g = device_conductance(g0, dv, cfg)
                if self.n_free == 0:
                    break
                resid = self.kcl_residual(v, nodes, g)
                if resid < cfg.tol and iterations > 1:
                    break
                target = self._linear_solve(v, (g - g0) * dv, nodes)
                free = free + cfg.relaxation * (target - free)
                nodes = self.node_values(v, free)
            else:
                raise ConvergenceError(
                    f"crossbar solve did not converge in {cfg.max_iters} iterations",
                    residual=resid,
                    iterations=cfg.max_iters,
                )
        dv = nodes[:nn] - nodes[nn:]
        g = device_conductance(g0, dv, cfg)
        residual = self.kcl_residual(v, nodes, g)
        if residual >= cfg.tol:
            raise ConvergenceError(
                f"KCL residual {residual:.3e} A exceeds tolerance {cfg.tol:.1e} A",
                residual=residual,
                iterations=iterations,
            )
        currents = (g * dv).reshape(self.n, self.n, -1).sum(axis=0)
        return nodes, currents, iterations, residual

    def transfer_matrix(self, v_operating=None):
        """Linear map A with column currents = V @ A, taken at an operating point.

        Device conductances are frozen at their values for ``v_operating``
        (default: every row at V_supply) and the resulting linear network is
        probed with unit drives.  Exact when beta = 0.
        """
        cfg, n = self.cfg, self.n
        g = self.g0
        if cfg.beta != 0:
            if v_operating is None:
                v_operating = np.full(n, cfg.v_supply)
            nodes, _, _, _ = self.solve(v_operating)
            dv = (nodes[: n * n] - nodes[n * n :])[:, 0]
            g = device_conductance(self.g0.ravel(), dv, cfg).reshape(n, n)
        if self.n_free == 0:
            return g.copy()
        linear = CrossbarNetwork(g, _linear_cfg(cfg), self.method)
        eye = np.eye(n)
        free = linear._linear_solve(eye, None, None)
        nodes = linear.node_values(eye, free)
        dv = nodes[: n * n] - nodes[n * n :]
        return (g.reshape(-1, 1) * dv).reshape(n, n, n).sum(axis=0).T


def _linear_cfg(cfg):
    from dataclasses import replace

    return replace(cfg, beta=0.0)


def _thomas_factor(diag, off):
    """Forward-elimination coefficients for tridiagonal systems with constant
    off-diagonal ``off``; ``diag`` is [lines, positions]."""
    lines, p = diag.shape
    cp = np.empty((lines, p))
    den = np.empty((lines, p))
    den[:, 0] = diag[:, 0]
    cp[:, 0] = off / den[:, 0]
    for k in range(1, p):
        den[:, k] = diag[:, k] - off * cp[:, k - 1]
        cp[:, k] = off / den[:, k]
    return cp, den


def _thomas_solve(cp, den, off, rhs):
    lines, p, b = rhs.shape
    d = np.empty_like(rhs)
    d[:, 0] = rhs[:, 0] / den[:, 0, None]
    for k in range(1, p):
        d[:, k] = (rhs[:, k] - off * d[:, k - 1]) / den[:, k, None]
    x = np.empty_like(rhs)
    x[:, p - 1] = d[:, p - 1]
    for k in range(p - 2, -1, -1):
        x[:, k] = d[:, k] - cp[:, k, None] * x[:, k + 1]
    return x


def solve_crossbar(v, g, cfg: CrossbarConfig, method="direct") -> SolverReport:
    """Solve one drive vector; see :class:`CrossbarNetwork`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("solve_crossbar takes a single drive vector")
    net = CrossbarNetwork(g, cfg, method)
    nodes, currents, iterations, residual = net.solve(v)
    return SolverReport(nodes[:, 0], currents[:, 0], iterations, residual)


def ideal_mvm(v, g):
    """Column currents I_j = sum_i V_i G_ij of an ideal crossbar."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or v.shape[-1] != g.shape[0]:
        raise ShapeError(f"ideal_mvm needs V of length N and an NxN G, got {v.shape} and {g.shape}")
    return v @ g
