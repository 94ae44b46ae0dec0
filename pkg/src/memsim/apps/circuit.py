"""Word-line circuit solving with a conjugate-gradient loop whose matrix-vector
products run on the simulated crossbar."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import dpe
from ..numerics import CGResult, conjugate_gradient, solve_dense, stream


@dataclass(frozen=True)
class WordLineCircuit:
    """A driven wire with ``n`` taps, each loaded by a device to ground.

    The source connects through one wire segment to node 0; consecutive
    nodes are one segment apart; the far end is open.
    """
    n: int
    r_wire: float
    conductances: tuple
    v_drive: float = 0.2

    def __post_init__(self):
        g = np.asarray(self.conductances, dtype=np.float64).ravel()
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if not self.r_wire > 0:
            raise ValueError(f"r_wire must be positive, got {self.r_wire}")
        if g.size != self.n:
            raise ValueError(f"need {self.n} conductances, got {g.size}")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ValueError("conductances must be finite and non-negative")
        object.__setattr__(self, "conductances", tuple(g.tolist()))

    @classmethod
    def random(cls, n: int, seed: int = 0, r_wire: float = 2.93, g_min: float = 1e-7,
               g_max: float = 1e-5, v_drive: float = 0.2) -> "WordLineCircuit":
        g = stream(seed, "signal", 0, n).uniform(g_min, g_max, n)
        return cls(n, r_wire, tuple(g), v_drive)


def build_wordline_system(circuit: WordLineCircuit):
    """Tridiagonal nodal equations A V = b for the tap voltages."""
    n = circuit.n
    gw = 1.0 / circuit.r_wire
    g = np.asarray(circuit.conductances)
    a = np.zeros((n, n))
    idx = np.arange(n)
    a[idx, idx] = 2 * gw + g
    a[-1, -1] = gw + g[-1]
    a[idx[:-1], idx[1:]] = -gw
    a[idx[1:], idx[:-1]] = -gw
    b = np.zeros(n)
    b[0] = gw * circuit.v_drive
    return a, b


@dataclass
class CircuitReport:
    voltages: np.ndarray
    software_voltages: np.ndarray
    reference: np.ndarray
    hw_history: list[float]
    sw_history: list[float]
    hw_converged: bool
    sw_converged: bool
    hw_status: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def rms_error(self) -> float:
        """RMS deviation from the direct solve, relative to the RMS reference voltage."""
        ref = self.reference
        return float(np.sqrt(np.mean((self.voltages - ref) ** 2)) / np.sqrt(np.mean(ref ** 2)))

    def iterations_to(self, level: float, which: str = "hw") -> int | None:
        hist = self.hw_history if which == "hw" else self.sw_history
        for i, r in enumerate(hist, 1):
            if r <= level:
                return i
        return None


def solve_circuit_hw(circuit: WordLineCircuit, engine: dpe.EngineConfig, tol: float = 1e-3,
                     max_iter: int | None = None, cycle: int = 0) -> CircuitReport:
    """CG with A programmed once on the crossbar; software CG and a direct
    solve run alongside for comparison."""
    if engine.weight_scheme.kind != "fp":
        raise ValueError(f"circuit solving maps A with an FP pre-alignment scheme, got {engine.weight_scheme}")
    a, b = build_wordline_system(circuit)
    pw = dpe.program_weights(a, engine, cycle)

    # A is symmetric, so p @ A on the array equals A @ p
    def hw_apply(p):
        return dpe.matmul(p[None, :], pw, engine).result[0]

    hw: CGResult = conjugate_gradient(hw_apply, b, tol=tol, max_iter=max_iter)
    sw: CGResult = conjugate_gradient(lambda p: a @ p, b, tol=tol, max_iter=max_iter)
    ref = solve_dense(a, b)
    return CircuitReport(hw.x, sw.x, ref, hw.history, sw.history, hw.converged, sw.converged, hw.status,
                         {"n_groups": pw.n_groups, "block": engine.block_shape})
