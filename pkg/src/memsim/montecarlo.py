"""Monte Carlo sweeps of dot-product relative error over hardware parameters."""
from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dpe import EngineConfig, matmul, program_weights, relative_error
from .numerics import matmul_exact, stream
from .slicing import parse_scheme

GRID_KEYS = ("cv", "block", "scheme", "noise_mode")
HEADER = ("cv", "block", "scheme", "path", "cycle", "re")


@dataclass
class MCRow:
    cv: float
    block: int
    scheme: str
    path: str
    cycle: int
    re: float

    def as_tuple(self):
        return (self.cv, self.block, self.scheme, self.path, self.cycle, self.re)


def path_of(scheme) -> str:
    return "quantization" if parse_scheme(scheme).kind == "int" else "pre-alignment"


def grid_points(grid: dict, base: EngineConfig):
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ValueError(f"unknown Monte Carlo grid key(s): {sorted(unknown)}")
    axes = {
        "cv": grid.get("cv", [base.device.cv]),
        "block": grid.get("block", [base.crossbar.rows]),
        "scheme": grid.get("scheme", [str(base.weight_scheme)]),
        "noise_mode": grid.get("noise_mode", [base.noise_mode]),
    }
    for cv, block, scheme, mode in itertools.product(*axes.values()):
        cfg = base.replace(
            device=base.device.replace(cv=float(cv)),
            crossbar=base.crossbar.replace(rows=int(block), cols=int(block)),
            weight_scheme=scheme, input_scheme=scheme, noise_mode=mode,
        )
        yield (float(cv), int(block), str(parse_scheme(scheme))), cfg


def operands(seed: int, m: int, k: int, n: int):
    a = stream(seed, "operand", 0).standard_normal((m, k))
    b = stream(seed, "operand", 1).standard_normal((k, n))
    return a, b


def monte_carlo(grid: dict, cycles: int, base: EngineConfig | None = None,
                size: tuple[int, int, int] = (128, 128, 128)) -> list[MCRow]:
    """Run ``cycles`` programming+multiply trials at every grid point.

    Operands are drawn once from the base seed so every grid point sees the
    same A and B; each cycle re-programs B with a fresh variation draw.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    base = base or EngineConfig()
    a, b = operands(base.seed, *size)
    ideal = matmul_exact(a, b)
    rows: list[MCRow] = []
    for (cv, block, scheme), cfg in grid_points(grid, base):
        inner = cfg.replace(threads=1)

        def trial(cycle, cfg=inner):
            pw = program_weights(b, cfg, cycle)
            return relative_error(matmul(a, pw, cfg).result, ideal)

        if base.threads > 1:
            with ThreadPoolExecutor(max_workers=base.threads) as pool:
                res = list(pool.map(trial, range(cycles)))
        else:
            res = [trial(c) for c in range(cycles)]
        path = path_of(scheme)
        rows.extend(MCRow(cv, block, scheme, path, c, r) for c, r in enumerate(res))
    return rows


def summarize(rows: list[MCRow]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.cv, r.block, r.scheme, r.path), []).append(r.re)
    out = []
    for (cv, block, scheme, path), res in groups.items():
        q1, med, q3 = np.percentile(res, [25, 50, 75])
        out.append({"cv": cv, "block": block, "scheme": scheme, "path": path,
                    "n": len(res), "median": float(med), "q1": float(q1), "q3": float(q3)})
    return out


def write_rows(path, rows: list[MCRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in rows:
            w.writerow([r.cv, r.block, r.scheme, r.path, r.cycle, repr(r.re)])


def write_summary(path, summary: list[dict]) -> None:
    keys = ("cv", "block", "scheme", "path", "n", "median", "q1", "q3")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for s in summary:
            w.writerow([s[k] for k in keys])
