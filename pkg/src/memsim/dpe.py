"""Dot-product engine: bit-sliced matrix multiplication on simulated crossbars."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import crossbar as xb
from .device import DeviceModel, sample_programmed
from .numerics import stream
from .slicing import (BlockPlan, SliceScheme, parse_scheme, partition_blocks, reassemble,
                      slice_signed, to_integers)

NOISE_MODES = ("ideal", "variation_only", "variation_plus_irdrop")


class IncompatibleSchemeError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    device: DeviceModel = field(default_factory=DeviceModel)
    crossbar: xb.CrossbarConfig = field(default_factory=xb.CrossbarConfig)
    weight_scheme: SliceScheme = field(default_factory=lambda: parse_scheme("int8:1,1,2,4"))
    input_scheme: SliceScheme = field(default_factory=lambda: parse_scheme("int8:1,1,2,4"))
    noise_mode: str = "variation_only"
    seed: int = 0
    # separates the noise streams of engines that share a seed (e.g. NN layers)
    stream_tag: int = 0
    irdrop_tol: float = 1e-6
    irdrop_max_iter: int = 20
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "weight_scheme", parse_scheme(self.weight_scheme))
        object.__setattr__(self, "input_scheme", parse_scheme(self.input_scheme))
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if 2 ** self.weight_scheme.max_width > self.device.g_levels:
            raise IncompatibleSchemeError(
                f"weight slice width {self.weight_scheme.max_width} needs "
                f"{2 ** self.weight_scheme.max_width} levels, device has g_levels={self.device.g_levels}")
        if 2 ** self.input_scheme.max_width > self.crossbar.rdac:
            raise IncompatibleSchemeError(
                f"input slice width {self.input_scheme.max_width} exceeds rdac={self.crossbar.rdac}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def block_shape(self) -> tuple[int, int]:
        return self.crossbar.rows, self.crossbar.cols

    def replace(self, **kw) -> "EngineConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "device": self.device.to_dict(),
            "crossbar": self.crossbar.to_dict(),
            "weight_scheme": str(self.weight_scheme),
            "input_scheme": str(self.input_scheme),
            "noise_mode": self.noise_mode,
            "seed": self.seed,
        }


def level_strides(scheme: SliceScheme, device: DeviceModel) -> np.ndarray:
    """Level-code spacing per slice so that each slice's maximum lands near HGS."""
    return np.array([(device.g_levels - 1) // (2 ** w - 1) for w in scheme.widths], dtype=np.int64)


@dataclass
class ProgrammedWeights:
    plan: BlockPlan
    scheme: SliceScheme
    scales: np.ndarray            # (gk, gn) per-block quantization scale
    levels: np.ndarray            # (gk, gn, S, bk, bn) ideal level codes
    conductances: np.ndarray      # (gk, gn, S, bk, bn) programmed siemens
    strides: np.ndarray
    significances: np.ndarray
    cycle: int

    @property
    def n_groups(self) -> int:
        """Array groups that must be active: one per weight slice."""
        return self.scheme.n_slices

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape


def program_weights(w, cfg: EngineConfig, cycle: int = 0) -> ProgrammedWeights:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"weights must be 2-D, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    scheme, dev = cfg.weight_scheme, cfg.device
    plan, blocks = partition_blocks(w, *cfg.block_shape)
    q, scales = to_integers(blocks, scheme)
    slices, sig = slice_signed(q, scheme)                 # (S, gk, gn, bk, bn)
    strides = level_strides(scheme, dev)
    levels = np.moveaxis(slices, 0, 2) * strides[None, None, :, None, None]
    ideal = dev.lgs + levels * dev.level_step
    if cfg.noise_mode == "ideal" or dev.cv == 0:
        g = ideal
    else:
        g = np.empty_like(ideal)
        gk, gn, n_s = levels.shape[:3]
        for c in range(gk):
            for d in range(gn):
                for s in range(n_s):
                    rng = stream(cfg.seed, "program", cfg.stream_tag, c, d, s, cycle)
                    g[c, d, s] = sample_programmed(ideal[c, d, s], dev, rng)
    return ProgrammedWeights(plan, scheme, np.asarray(scales, dtype=np.float64), levels, g,
                             strides, sig, cycle)


@dataclass
class MatmulReport:
    result: np.ndarray
    relative_error: float | None = None
    iterations: int = 0
    converged: bool = True
    cycle: int = 0
    block_stats: dict = field(default_factory=dict)


@dataclass
class _Inputs:
    volts: np.ndarray        # (S_in, M, K) applied voltages
    unit_sum: np.ndarray     # (S_in, M, gk) sum of normalized DAC levels per row and block
    levels: np.ndarray       # (S_in,) 2**w - 1
    sig: np.ndarray
    row_scale: np.ndarray    # (M, gk)
    bk: int


def _prepare_inputs(x: np.ndarray, cfg: EngineConfig) -> _Inputs:
    bk = cfg.crossbar.rows
    m = x.shape[0]
    plan, blocks = partition_blocks(x, bk, bk)            # (gm, gk, bm, bk)
    q, scales = to_integers(blocks, cfg.input_scheme)
    # scales need whole tiles; the sliced integers only need the true extent
    slices, sig = slice_signed(reassemble(plan, q), cfg.input_scheme)   # (S, M, K)
    levels = np.array([2 ** w - 1 for w in cfg.input_scheme.widths], dtype=np.float64)
    # each slice takes only 2**w values, so the DAC is a lookup table
    volts = np.stack([xb.dac_quantize(np.arange(2 ** w) / (2 ** w - 1), cfg.crossbar)[slices[i]]
                      for i, w in enumerate(cfg.input_scheme.widths)])
    unit_sum = np.add.reduceat(volts, np.arange(0, x.shape[1], bk), axis=-1) / cfg.crossbar.v_read
    row_scale = np.repeat(np.asarray(scales, dtype=np.float64), plan.l_blk_m, axis=0)[:m]
    return _Inputs(volts, unit_sum, levels, sig, row_scale, bk)


def _evaluate_block(inp: _Inputs, pw: ProgrammedWeights, cfg: EngineConfig, c: int, d: int):
    """Integer-domain partial product of input column-block c with weight block (c, d)."""
    dev, xcfg = cfg.device, cfg.crossbar
    g = pw.conductances[c, d]                             # (S_w, bk, bn)
    irdrop = cfg.noise_mode == "variation_plus_irdrop" and xcfg.r_wire > 0
    bk, bn = g.shape[1:]
    kv = min(bk, pw.shape[0] - c * bk)
    nv = min(bn, pw.shape[1] - d * bn)
    if not irdrop:
        # padded rows carry 0 V and padded columns are discarded, so the
        # ideal product over the valid sub-array is identical
        g = g[:, :kv, :nv]
    gain = (pw.strides * dev.level_step)[:, None, None]   # siemens per slice unit
    acc = np.zeros((inp.volts.shape[1], nv))
    iters, converged = 0, True
    for i in range(inp.volts.shape[0]):
        v = inp.volts[i, :, c * bk:c * bk + kv]
        if irdrop:
            v = np.pad(v, ((0, 0), (0, bk - kv)))
            cur = np.empty((g.shape[0], v.shape[0], nv))
            for j in range(g.shape[0]):
                res = xb.solve_irdrop(v, g[j], xcfg, cfg.irdrop_tol, cfg.irdrop_max_iter)
                cur[j] = res.currents[:, :nv]
                iters = max(iters, res.iterations)
                converged &= res.converged
        else:
            cur = np.matmul(v[None], g)
        if xcfg.adc_range_mode == "dynamic":
            fs = np.array([xb.adc_full_scale(xcfg, dev.hgs, cur[j]) for j in range(cur.shape[0])])
            fs = fs[:, None, None]
        else:
            fs = xb.adc_full_scale(xcfg, dev.hgs)
        sensed = xb.adc_decode(xb.adc_quantize(cur, xcfg, fs), xcfg, fs)
        # remove the LGS offset carried by every cell, convert to slice units
        dots = (sensed / xcfg.v_read - dev.lgs * inp.unit_sum[i, :, c, None]) / gain * inp.levels[i]
        dots = np.floor(dots + 0.5)
        acc += inp.sig[i] * np.tensordot(pw.significances, dots, axes=1)
    return acc, iters, converged


def matmul(x, pw: ProgrammedWeights, cfg: EngineConfig, ideal=None) -> MatmulReport:
    """x @ W on the simulated hardware holding ``pw``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    k, n = pw.shape
    if x.shape[1] != k:
        raise ValueError(f"inner dimensions differ: x has {x.shape[1]} columns, weights have {k} rows")
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs must be finite")
    inp = _prepare_inputs(x, cfg)
    gk, gn = pw.plan.grid
    bn = pw.plan.l_blk_n
    tasks = [(c, d) for d in range(gn) for c in range(gk)]

    def run(task):
        c, d = task
        return _evaluate_block(inp, pw, cfg, c, d)

    if cfg.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, tasks))
    else:
        parts = [run(t) for t in tasks]

    out = np.zeros((x.shape[0], gn * bn))
    iters, converged = 0, True
    for (c, d), (acc, it, ok) in zip(tasks, parts):
        out[:, d * bn:d * bn + acc.shape[1]] += acc * (inp.row_scale[:, c, None] * pw.scales[c, d])
        iters = max(iters, it)
        converged &= ok
    result = out[:, :n]
    report = MatmulReport(result, None, iters, converged, pw.cycle,
                          {"weight_scales": pw.scales, "n_groups": pw.n_groups})
    if ideal is not None:
        report.relative_error = relative_error(result, ideal)
    return report


def dot(x, w, cfg: EngineConfig, cycle: int = 0) -> np.ndarray:
    """Program ``w`` and multiply once."""
    return matmul(x, program_weights(w, cfg, cycle), cfg).result


def relative_error(sim, ideal) -> float:
    sim = np.asarray(sim, dtype=np.float64)
    ideal = np.asarray(ideal, dtype=np.float64)
    if sim.shape != ideal.shape:
        raise ValueError(f"shape mismatch {sim.shape} vs {ideal.shape}")
    denom = np.linalg.norm(ideal)
    if denom == 0:
        raise ZeroDivisionError("ideal result has zero norm")
    return float(np.linalg.norm(sim - ideal) / denom)


def max_resolution(cfg: EngineConfig) -> EngineConfig:
    """Converters fine enough that the analog path is lossless without noise."""
    return cfg.replace(crossbar=cfg.crossbar.replace(rdac=2 ** 16, radc=2 ** 24))
