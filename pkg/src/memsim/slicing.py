"""Variable-precision operand decomposition.

A matrix is tiled into array-sized blocks. Each block is turned into signed
integers either by symmetric quantization (one real scale per block) or by
shared-exponent pre-alignment (one power-of-two scale per block). The
integers are then split MSB-first into nonnegative bit fields ("slices"),
each of which is programmed onto its own array group. Shift-add with the
slice significances plus the block scales recovers the product.

Notation used in configs and on the command line::

    int8:1,1,2,4      signed 8-bit integer, slices of 1, 1, 2 and 4 bits
    uint8:4,4         unsigned 8-bit integer
    fp:16:1,1,2,4,4   FP16 operand pre-aligned to 12 effective bits
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FP_LABELS = ("16", "32", "64", "bf16", "flex16")


@dataclass(frozen=True)
class SliceScheme:
    widths: tuple[int, ...]
    kind: str = "int"          # "int" or "fp"
    signed: bool = True
    label: str = ""            # nominal FP format for kind == "fp"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"slice widths must be >= 1, got {self.widths}")
        if self.kind not in ("int", "fp"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "fp" and not self.signed:
            raise ValueError("FP schemes are always signed")
        if self.signed and self.widths[0] != 1:
            raise ValueError(f"signed schemes need a 1-bit leading sign slice, got {self.widths}")
        if self.signed and self.bits < 2:
            raise ValueError("signed schemes need at least 2 bits")

    @property
    def bits(self) -> int:
        """Total integer bits (INT) or effective aligned bits (FP)."""
        return sum(self.widths)

    @property
    def n_slices(self) -> int:
        return len(self.widths)

    @property
    def max_width(self) -> int:
        return max(self.widths)

    def significances(self) -> np.ndarray:
        offsets = np.cumsum((0,) + self.widths[::-1])[:-1][::-1]
        sig = np.ldexp(1.0, offsets.astype(int))
        if self.signed:
            sig[0] = -sig[0]
        return sig

    def __str__(self) -> str:
        w = ",".join(map(str, self.widths))
        if self.kind == "fp":
            return f"fp:{self.label}:{w}"
        return f"{'' if self.signed else 'u'}int{self.bits}:{w}"


_INT_RE = re.compile(r"^(u?)int(\d+):([\d,\s]+)$")
_FP_RE = re.compile(r"^fp:([a-z0-9]+):([\d,\s]+)$")


def parse_scheme(text) -> SliceScheme:
    if isinstance(text, SliceScheme):
        return text
    s = str(text).strip().lower()
    m = _INT_RE.match(s)
    if m:
        widths = tuple(int(w) for w in m.group(3).split(",") if w.strip())
        bits = int(m.group(2))
        if sum(widths) != bits:
            raise ValueError(f"scheme {text!r}: widths sum to {sum(widths)}, expected {bits}")
        return SliceScheme(widths, "int", signed=not m.group(1))
    m = _FP_RE.match(s)
    if m:
        label = m.group(1)
        if label not in FP_LABELS and not label.isdigit():
            raise ValueError(f"scheme {text!r}: unknown FP format {label!r}")
        widths = tuple(int(w) for w in m.group(2).split(",") if w.strip())
        return SliceScheme(widths, "fp", signed=True, label=label)
    raise ValueError(f"cannot parse slice scheme {text!r} (expected e.g. int8:1,1,2,4 or fp:16:1,1,2,4,4)")


def one_bit_scheme(bits: int) -> SliceScheme:
    return SliceScheme((1,) * bits, "int")


# -- block tiling -----------------------------------------------------------

@dataclass(frozen=True)
class BlockPlan:
    l_blk_m: int
    l_blk_n: int
    shape: tuple[int, int]
    padded_shape: tuple[int, int]

    @property
    def grid(self) -> tuple[int, int]:
        return self.padded_shape[0] // self.l_blk_m, self.padded_shape[1] // self.l_blk_n

    def block_index(self, i: int, j: int) -> tuple[int, int]:
        return i // self.l_blk_m, j // self.l_blk_n


def make_plan(shape, l_blk_m: int, l_blk_n: int) -> BlockPlan:
    if l_blk_m < 1 or l_blk_n < 1:
        raise ValueError("block dimensions must be >= 1")
    m, n = shape
    pm = -(-m // l_blk_m) * l_blk_m
    pn = -(-n // l_blk_n) * l_blk_n
    return BlockPlan(l_blk_m, l_blk_n, (m, n), (pm, pn))


def partition_blocks(x, l_blk_m: int, l_blk_n: int):
    """Zero-pad ``x`` and return it as a (grid_m, grid_n, l_blk_m, l_blk_n) stack."""
    x = np.asarray(x, dtype=np.float64)
    plan = make_plan(x.shape, l_blk_m, l_blk_n)
    padded = np.zeros(plan.padded_shape)
    padded[: x.shape[0], : x.shape[1]] = x
    gm, gn = plan.grid
    blocks = padded.reshape(gm, l_blk_m, gn, l_blk_n).transpose(0, 2, 1, 3)
    return plan, blocks


def reassemble(plan: BlockPlan, blocks) -> np.ndarray:
    gm, gn = plan.grid
    full = np.asarray(blocks).transpose(0, 2, 1, 3).reshape(plan.padded_shape)
    return full[: plan.shape[0], : plan.shape[1]]


# -- integer conversion -----------------------------------------------------

def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _block_absmax(blocks):
    return np.max(np.abs(blocks), axis=(-2, -1)) if blocks.ndim >= 2 else np.max(np.abs(blocks))


def quantize_blocks_int(blocks, total_bits: int, signed: bool = True):
    """Symmetric linear quantization with one scale per trailing 2-D block."""
    if total_bits < 2:
        raise ValueError("total_bits must be >= 2")
    blocks = np.asarray(blocks, dtype=np.float64)
    if not np.all(np.isfinite(blocks)):
        raise ValueError("cannot quantize non-finite values")
    qmax = 2 ** (total_bits - 1) - 1 if signed else 2 ** total_bits - 1
    if not signed and np.any(blocks < 0):
        raise ValueError("unsigned quantization of negative values")
    peak = _block_absmax(blocks)
    scale = np.where(peak > 0, peak / qmax, 1.0)
    s = scale[..., None, None] if blocks.ndim >= 2 else scale
    q = round_half_away(blocks / s)
    return np.clip(q, -qmax if signed else 0, qmax).astype(np.int64), scale


def quantize_block_int(block, total_bits: int):
    q, scale = quantize_blocks_int(np.atleast_2d(np.asarray(block, dtype=np.float64)), total_bits)
    return q.reshape(np.shape(block)), float(scale)


def cast_to_format(x, label: str) -> np.ndarray:
    """Round values to the nominal FP storage format before pre-alignment."""
    x = np.asarray(x, dtype=np.float64)
    if label == "16":
        return np.clip(x, -65504.0, 65504.0).astype(np.float16).astype(np.float64)
    if label == "32":
        return x.astype(np.float32).astype(np.float64)
    if label == "bf16":
        u = x.astype(np.float32).view(np.uint32).astype(np.uint64)
        u = (u + 0x7FFF + ((u >> 16) & 1)) & 0xFFFF0000   # round to nearest even
        return u.astype(np.uint32).view(np.float32).astype(np.float64)
    return x


def prealign_blocks_fp(blocks, effective_bits: int, exp_bits: int | None = None):
    """Shared-exponent alignment of every trailing 2-D block.

    With ``e`` the largest binary exponent in a block (``2**e <= max|x| <
    2**(e+1)``) the block scale is ``2**(e - (effective_bits - 2))``, which
    leaves one bit for sign and keeps the aligned integers within
    ``effective_bits`` two's-complement bits. If rounding pushes the largest
    magnitude past the range, the exponent is bumped by one.
    """
    if effective_bits < 2:
        raise ValueError("effective_bits must be >= 2")
    blocks = np.asarray(blocks, dtype=np.float64)
    if not np.all(np.isfinite(blocks)):
        raise ValueError("cannot pre-align non-finite values")
    peak = _block_absmax(blocks)
    _, e = np.frexp(np.where(peak > 0, peak, 1.0))
    e_max = np.where(peak > 0, e - 1, 0).astype(np.int64)
    if exp_bits is not None:
        lo, hi = -(2 ** (exp_bits - 1)), 2 ** (exp_bits - 1) - 1
        e_max = np.clip(e_max, lo, hi)
    limit = 2 ** (effective_bits - 1) - 1
    shift = (effective_bits - 2) - e_max
    s = shift[..., None, None] if blocks.ndim >= 2 else shift
    a = round_half_away(np.ldexp(blocks, s))
    over = _block_absmax(a) > limit
    if np.any(over):
        e_max = np.where(over & (peak > 0), e_max + 1, e_max)
        shift = (effective_bits - 2) - e_max
        s = shift[..., None, None] if blocks.ndim >= 2 else shift
        a = round_half_away(np.ldexp(blocks, s))
    a = np.clip(a, -limit, limit).astype(np.int64)
    scale = np.ldexp(1.0, -shift)
    return a, e_max, scale


def prealign_block_fp(block, effective_bits: int):
    a, e, scale = prealign_blocks_fp(np.atleast_2d(np.asarray(block, dtype=np.float64)), effective_bits)
    return a.reshape(np.shape(block)), int(e), float(scale)


def to_integers(blocks, scheme: SliceScheme):
    """Dispatch to quantization (INT) or pre-alignment (FP); returns (ints, scales)."""
    if scheme.kind == "int":
        return quantize_blocks_int(blocks, scheme.bits, scheme.signed)
    data = cast_to_format(blocks, scheme.label)
    a, _, scale = prealign_blocks_fp(data, scheme.bits, 5 if scheme.label == "flex16" else None)
    return a, scale


# -- bit slicing ------------------------------------------------------------

def slice_signed(q, scheme: SliceScheme):
    """Split integers into nonnegative fields, MSB first.

    Returns ``(slices, significances)`` with ``slices`` of shape
    ``(n_slices,) + q.shape``; ``sum(sig[i] * slices[i]) == q``.
    """
    q = np.asarray(q)
    if q.dtype.kind == "f":
        if not np.all(q == np.round(q)):
            raise ValueError("slice_signed expects integer values")
    q = q.astype(np.int64)
    n = scheme.bits
    lo, hi = (-(2 ** (n - 1)), 2 ** (n - 1) - 1) if scheme.signed else (0, 2 ** n - 1)
    if q.size and (q.min() < lo or q.max() > hi):
        raise OverflowError(f"values outside [{lo}, {hi}] for {scheme}")
    pattern = q & ((1 << n) - 1)
    out = np.empty((scheme.n_slices,) + q.shape, dtype=np.int64)
    offset = 0
    for k in range(scheme.n_slices - 1, -1, -1):
        w = scheme.widths[k]
        out[k] = (pattern >> offset) & ((1 << w) - 1)
        offset += w
    return out, scheme.significances()


def shift_add(dots, x_sig, w_sig) -> np.ndarray:
    """Combine per-slice-pair dot results: sum_ij x_sig[i] * w_sig[j] * dots[i, j]."""
    dots = np.asarray(dots, dtype=np.float64)
    if dots.shape[:2] != (len(x_sig), len(w_sig)):
        raise ValueError(f"expected {len(x_sig)}x{len(w_sig)} slice pairs, got {dots.shape[:2]}")
    weights = np.outer(x_sig, w_sig)
    return np.tensordot(weights, dots, axes=([0, 1], [0, 1]))


def recombine(dots, w_sig, x_sig, w_scales, x_scales) -> np.ndarray:
    """Shift-add slice-pair results and undo the block scales.

    ``dots[i, j, a, c, d]`` is the (bm, bn) product of input slice ``i`` of
    input block (a, c) with weight slice ``j`` of weight block (c, d).
    ``x_scales`` is (gm, gk), ``w_scales`` is (gk, gn). Partial sums over the
    shared dimension c are accumulated in ascending order. Returns the padded
    (gm*bm, gn*bn) product.
    """
    y = shift_add(dots, x_sig, w_sig)                   # (gm, gk, gn, bm, bn)
    x_scales = np.asarray(x_scales, dtype=np.float64)
    w_scales = np.asarray(w_scales, dtype=np.float64)
    gm, gk, gn, bm, bn = y.shape
    out = np.zeros((gm, gn, bm, bn))
    for c in range(gk):
        out += y[:, c] * (x_scales[:, c, None, None, None] * w_scales[None, c, :, None, None])
    return out.transpose(0, 2, 1, 3).reshape(gm * bm, gn * bn)
