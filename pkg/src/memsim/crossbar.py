"""Resistive crossbar model: ideal dot product, IR-drop DC solve, DAC/ADC.

Topology: every word line i is driven by ``v_in[i]`` through one wire
segment into its first node and is left open at the far end. Every bit line
is open at the top and terminated through one wire segment into a
virtual-ground sense node after the last row; the column current is the
current through that final segment.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .numerics import TridiagonalFactor, solve_dense

ADC_MODES = ("worst_case", "dynamic")


@dataclass(frozen=True)
class CrossbarConfig:
    rows: int = 64
    cols: int = 64
    r_wire: float = 2.93
    v_read: float = 0.2
    rdac: int = 256
    radc: int = 1024
    adc_range_mode: str = "worst_case"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"rows/cols must be >= 1, got {self.rows}x{self.cols}")
        if self.r_wire < 0:
            raise ValueError(f"r_wire must be >= 0, got {self.r_wire}")
        if not self.v_read > 0:
            raise ValueError(f"v_read must be > 0, got {self.v_read}")
        if self.rdac < 2 or self.radc < 2:
            raise ValueError(f"rdac and radc must be >= 2, got rdac={self.rdac}, radc={self.radc}")
        if self.adc_range_mode not in ADC_MODES:
            raise ValueError(f"adc_range_mode must be one of {ADC_MODES}, got {self.adc_range_mode!r}")

    def replace(self, **kw) -> "CrossbarConfig":
        return CrossbarConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NodeVoltages:
    word_line: np.ndarray
    bit_line: np.ndarray


@dataclass
class IRDropResult:
    currents: np.ndarray
    voltages: NodeVoltages
    iterations: int
    converged: bool
    changes: list[float] = field(default_factory=list)


def _check(v_in, g):
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v_in, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"conductance matrix must be 2-D, got {g.shape}")
    if v.shape[-1] != g.shape[0]:
        raise ValueError(f"input length {v.shape[-1]} does not match {g.shape[0]} rows")
    return v, g


def solve_ideal(v_in, g) -> np.ndarray:
    v, g = _check(v_in, g)
    return v @ g


def build_kcl_system(v_in, g, cfg: CrossbarConfig):
    """Nodal equations for all 2*rows*cols wire nodes.

    Unknown ordering: word-line node (i, j) at ``i*cols + j``, bit-line node
    (i, j) at ``rows*cols + i*cols + j``. Returns a CSR matrix and rhs.
    """
    v, g = _check(v_in, g)
    if v.ndim != 1:
        raise ValueError("build_kcl_system takes a single input vector")
    if not cfg.r_wire > 0:
        raise ValueError("KCL system needs r_wire > 0; use solve_ideal for ideal wires")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("conductances must be finite and non-negative")
    R, C = g.shape
    gw = 1.0 / cfg.r_wire
    n = R * C
    wl = np.arange(n).reshape(R, C)
    bl = wl + n
    rows, cols, vals = [], [], []

    def add(r, c, x):
        rows.append(np.ravel(r))
        cols.append(np.ravel(c))
        vals.append(np.broadcast_to(x, np.shape(r)).ravel())

    # device between word-line and bit-line node
    add(wl, wl, g)
    add(bl, bl, g)
    add(wl, bl, -g)
    add(bl, wl, -g)
    # word-line segments, plus the driving segment into column 0
    add(wl[:, 0], wl[:, 0], gw)
    add(wl[:, :-1], wl[:, :-1], gw)
    add(wl[:, 1:], wl[:, 1:], gw)
    add(wl[:, :-1], wl[:, 1:], -gw)
    add(wl[:, 1:], wl[:, :-1], -gw)
    # bit-line segments, plus the sensing segment out of the last row
    add(bl[-1, :], bl[-1, :], gw)
    add(bl[:-1, :], bl[:-1, :], gw)
    add(bl[1:, :], bl[1:, :], gw)
    add(bl[:-1, :], bl[1:, :], -gw)
    add(bl[1:, :], bl[:-1, :], -gw)

    a = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * n, 2 * n)).tocsr()
    rhs = np.zeros(2 * n)
    rhs[wl[:, 0]] = gw * v
    return a, rhs


def solve_kcl(v_in, g, cfg: CrossbarConfig, dense_limit: int = 1024) -> IRDropResult:
    """Direct solve of the full nodal system (reference for the iterative solver)."""
    v, g = _check(v_in, g)
    a, rhs = build_kcl_system(v, g, cfg)
    if a.shape[0] <= dense_limit:
        x = solve_dense(a.toarray(), rhs)
    else:
        x = spla.spsolve(a.tocsc(), rhs)
    R, C = g.shape
    wl = x[:R * C].reshape(R, C)
    bl = x[R * C:].reshape(R, C)
    return IRDropResult(bl[-1] / cfg.r_wire, NodeVoltages(wl, bl), 1, True)


def _line_factor(g_lines: np.ndarray, gw: float, grounded_end: bool) -> TridiagonalFactor:
    # g_lines has the chain index on axis 0, one column per independent line.
    n = g_lines.shape[0]
    diag = g_lines + 2 * gw
    if grounded_end:
        # bit line: open at the top, one segment to ground after the last node
        diag[0] -= gw
        if n == 1:
            diag[0] = g_lines[0] + gw
    else:
        # word line: driven segment before node 0, open after the last node
        diag[-1] -= gw
        if n == 1:
            diag[0] = g_lines[0] + gw
    off = np.full(n - 1, -gw)
    return TridiagonalFactor(off, diag[..., None], off)


def solve_irdrop(v_in, g, cfg: CrossbarConfig, tol: float = 1e-6, max_iter: int = 20) -> IRDropResult:
    """Cross-iteration DC solve.

    Alternates two half-sweeps: with bit-line voltages frozen every word line
    is a tridiagonal chain; with word-line voltages frozen every bit line is.
    Stops when the largest node-voltage update, relative to ``v_read``, is
    at most ``tol``. ``v_in`` may be one vector or a (batch, rows) stack.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v, g = _check(v_in, g)
    single = v.ndim == 1
    vb = v.reshape(-1, g.shape[0])
    R, C = g.shape
    if cfg.r_wire == 0:
        cur = vb @ g
        wl = np.broadcast_to(vb[:, :, None], (vb.shape[0], R, C)).copy()
        bl = np.zeros_like(wl)
        res = IRDropResult(cur, NodeVoltages(wl, bl), 0, True)
        return _squeeze(res) if single else res

    gw = 1.0 / cfg.r_wire
    # word-line chains run along columns: axis 0 = column index j, lines = rows
    wl_fac = _line_factor(g.T.copy(), gw, grounded_end=False)
    bl_fac = _line_factor(g.copy(), gw, grounded_end=True)
    gT = g.T[:, :, None]          # (C, R, 1)
    gB = g[:, :, None]            # (R, C, 1)
    drive = gw * vb.T             # (R, batch)

    bl = np.zeros((R, C, vb.shape[0]))   # bit-line nodes, chain axis first
    wl = np.zeros((C, R, vb.shape[0]))   # word-line nodes, chain axis first
    changes: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        rhs = gT * bl.transpose(1, 0, 2)
        rhs[0] += drive
        wl_new = wl_fac.solve(rhs)
        bl_new = bl_fac.solve(gB * wl_new.transpose(1, 0, 2))
        change = max(float(np.max(np.abs(wl_new - wl))), float(np.max(np.abs(bl_new - bl)))) / cfg.v_read
        wl, bl = wl_new, bl_new
        changes.append(change)
        if change <= tol:
            converged = True
            break

    currents = (gw * bl[-1]).T
    res = IRDropResult(currents, NodeVoltages(wl.transpose(2, 1, 0), bl.transpose(2, 0, 1)),
                       it, converged, changes)
    return _squeeze(res) if single else res


def _squeeze(res: IRDropResult) -> IRDropResult:
    return IRDropResult(res.currents[0], NodeVoltages(res.voltages.word_line[0], res.voltages.bit_line[0]),
                        res.iterations, res.converged, res.changes)


def kcl_residual(v_in, g, cfg: CrossbarConfig, voltages: NodeVoltages) -> np.ndarray:
    """Net current (A) leaving each node; zero for an exact solution."""
    a, rhs = build_kcl_system(v_in, g, cfg)
    x = np.concatenate([voltages.word_line.ravel(), voltages.bit_line.ravel()])
    return a @ x - rhs


# -- converters -------------------------------------------------------------

def _round_half_up(x):
    return np.floor(x + 0.5)


def dac_quantize(values, cfg: CrossbarConfig) -> np.ndarray:
    """Nearest of ``rdac`` uniform levels on [0, 1], scaled to volts."""
    u = np.asarray(values, dtype=np.float64)
    if np.any(u < -1e-12) or np.any(u > 1 + 1e-12):
        raise ValueError("DAC input must lie in [0, 1]")
    steps = cfg.rdac - 1
    return cfg.v_read * _round_half_up(np.clip(u, 0.0, 1.0) * steps) / steps


def adc_full_scale(cfg: CrossbarConfig, hgs: float, currents=None) -> float:
    worst = cfg.v_read * hgs * cfg.rows
    if cfg.adc_range_mode == "dynamic" and currents is not None:
        peak = float(np.max(currents, initial=0.0))
        if peak > 0:
            return peak
    return worst


def adc_quantize(currents, cfg: CrossbarConfig, full_scale: float) -> np.ndarray:
    if not np.all(np.asarray(full_scale) > 0):
        raise ValueError(f"ADC full scale must be positive, got {full_scale}")
    i = np.clip(np.asarray(currents, dtype=np.float64), 0.0, full_scale)
    return _round_half_up(i / full_scale * (cfg.radc - 1)).astype(np.int64)


def adc_decode(codes, cfg: CrossbarConfig, full_scale: float) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * (full_scale / (cfg.radc - 1))
