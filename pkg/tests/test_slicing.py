import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memsim.slicing import (SliceScheme, cast_to_format, make_plan, one_bit_scheme, parse_scheme,
                            partition_blocks, prealign_block_fp, prealign_blocks_fp, quantize_block_int,
                            quantize_blocks_int, reassemble, recombine, round_half_away, shift_add,
                            slice_signed, to_integers)


def compositions(n):
    """All width tuples summing to n with a leading 1-bit slice."""
    rest = n - 1
    if rest == 0:
        return [(1,)]
    out = []
    for cuts in itertools.product((0, 1), repeat=rest - 1):
        widths, w = [], 1
        for c in cuts:
            if c:
                widths.append(w)
                w = 1
            else:
                w += 1
        widths.append(w)
        out.append((1,) + tuple(widths))
    return out


def test_parse_schemes():
    s = parse_scheme("int8:1,1,2,4")
    assert s.widths == (1, 1, 2, 4) and s.bits == 8 and s.kind == "int" and s.signed
    assert str(s) == "int8:1,1,2,4"
    f = parse_scheme("fp:16:1,1,2,4,4")
    assert f.kind == "fp" and f.bits == 12 and f.label == "16"
    assert str(f) == "fp:16:1,1,2,4,4"
    u = parse_scheme("uint8:4,4")
    assert not u.signed and list(u.significances()) == [16, 1]
    assert parse_scheme(s) is s


@pytest.mark.parametrize("text", ["int8:1,1,2", "int4:2,2", "fp:99x:1,2", "float:1,2", "int8:1,0,3,4"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        parse_scheme(text)


def test_significances_examples():
    assert list(parse_scheme("int4:1,1,2").significances()) == [-8, 4, 1]
    assert list(one_bit_scheme(4).significances()) == [-8, 4, 2, 1]


def test_slice_examples():
    s, sig = slice_signed(np.array(-5), parse_scheme("int4:1,1,2"))
    assert s.tolist() == [1, 0, 3] and sig.tolist() == [-8, 4, 1]
    s, sig = slice_signed(np.array(7), one_bit_scheme(4))
    assert s.tolist() == [0, 1, 1, 1]
    s, _ = slice_signed(np.zeros((3, 3), dtype=int), parse_scheme("int8:1,1,2,4"))
    assert not s.any()


def test_slice_overflow():
    with pytest.raises(OverflowError):
        slice_signed(np.array([8]), parse_scheme("int4:1,1,2"))
    with pytest.raises(OverflowError):
        slice_signed(np.array([-9]), parse_scheme("int4:1,1,2"))


@pytest.mark.parametrize("n", range(2, 11))
def test_round_trip_exhaustive(n):
    values = np.arange(-(2 ** (n - 1)), 2 ** (n - 1))
    for widths in compositions(n):
        scheme = SliceScheme(widths)
        slices, sig = slice_signed(values, scheme)
        assert np.all(slices >= 0)
        for k, w in enumerate(widths):
            assert slices[k].max() <= 2 ** w - 1
        assert np.array_equal(np.tensordot(sig, slices, axes=1).astype(np.int64), values)


def test_unsigned_round_trip():
    values = np.arange(256)
    slices, sig = slice_signed(values, parse_scheme("uint8:4,4"))
    assert np.array_equal(np.tensordot(sig, slices, axes=1), values)


def test_partition_examples():
    plan, blocks = partition_blocks(np.ones((64, 64)), 64, 64)
    assert plan.grid == (1, 1) and plan.padded_shape == (64, 64)
    plan, blocks = partition_blocks(np.ones((65, 64)), 64, 64)
    assert plan.grid == (2, 1)
    assert np.count_nonzero(blocks[1, 0].any(axis=1) == 0) == 63
    assert make_plan((128, 128), 32, 32).grid == (4, 4)
    with pytest.raises(ValueError):
        make_plan((4, 4), 0, 4)


def test_partition_round_trip_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m, n = rng.integers(1, 90, 2)
        bm, bn = rng.integers(1, 40, 2)
        x = rng.standard_normal((m, n))
        plan, blocks = partition_blocks(x, bm, bn)
        assert np.array_equal(reassemble(plan, blocks), x)


def test_round_half_away():
    assert round_half_away(np.array([0.5, -0.5, 1.5, -2.5, 0.49])).tolist() == [1, -1, 2, -3, 0]


def test_quantize_examples():
    q, scale = quantize_block_int(np.zeros((2, 2)), 8)
    assert not q.any() and scale == 1.0
    q, scale = quantize_block_int(np.array([[1.0, -0.5]]), 4)
    assert scale == pytest.approx(1 / 7) and q.tolist() == [[7, -4]]
    with pytest.raises(ValueError):
        quantize_block_int(np.array([[np.nan]]), 8)
    with pytest.raises(ValueError):
        quantize_block_int(np.ones((2, 2)), 1)


def test_quantize_error_bound_many_blocks():
    rng = np.random.default_rng(1)
    blocks = rng.standard_normal((10 ** 5, 2, 2)) * rng.lognormal(0, 2, (10 ** 5, 1, 1))
    for bits in (4, 8):
        q, scale = quantize_blocks_int(blocks, bits)
        assert np.all(np.abs(q) <= 2 ** (bits - 1) - 1)
        err = np.abs(q * scale[:, None, None] - blocks)
        assert np.all(err <= scale[:, None, None] / 2 * (1 + 1e-12))


@pytest.mark.parametrize("c", [0.5, 3.0, 100.0])
def test_quantize_scale_equivariant(c):
    block = np.random.default_rng(2).standard_normal((8, 8))
    q1, s1 = quantize_block_int(block, 8)
    q2, s2 = quantize_block_int(c * block, 8)
    assert np.array_equal(q1, q2) and s2 == pytest.approx(c * s1, rel=1e-14)


def test_prealign_example():
    # the exponent leaves one guard bit so the aligned integers fit eb-bit two's complement
    a, e, scale = prealign_block_fp(np.array([1.5, 0.25]), 5)
    assert e == 0 and a.tolist() == [12, 2] and scale == 2.0 ** -3
    assert np.array_equal(a * scale, [1.5, 0.25])
    a, e, scale = prealign_block_fp(np.zeros(3), 5)
    assert not a.any() and e == 0
    with pytest.raises(ValueError):
        prealign_block_fp(np.array([np.inf]), 5)


def test_prealign_error_bound_many_blocks():
    rng = np.random.default_rng(3)
    blocks = rng.standard_normal((10 ** 5, 2, 2)) * rng.lognormal(0, 3, (10 ** 5, 1, 1))
    for eb in (5, 12, 25):
        a, e, scale = prealign_blocks_fp(blocks, eb)
        assert np.all(np.abs(a) <= 2 ** (eb - 1) - 1)
        err = np.abs(a * scale[:, None, None] - blocks)
        assert np.all(err <= scale[:, None, None] / 2 * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 16), st.integers(-20, 20), st.data())
def test_prealign_powers_of_two_exact(eb, top, data):
    # spread < eb - 1 keeps every entry on the aligned grid
    spread = data.draw(st.integers(0, eb - 2))
    ks = data.draw(st.lists(st.integers(top - spread, top), min_size=1, max_size=12))
    signs = data.draw(st.lists(st.sampled_from([-1.0, 1.0]), min_size=len(ks), max_size=len(ks)))
    block = np.array(signs) * np.ldexp(1.0, ks)
    a, _, scale = prealign_block_fp(block, eb)
    assert np.array_equal(a * scale, block)


def test_cast_to_format():
    x = np.array([1 + 2 ** -12, 1 + 2 ** -30, 70000.0])
    assert cast_to_format(x, "16")[0] == 1.0
    assert cast_to_format(x, "16")[2] == 65504.0
    assert cast_to_format(x, "32")[1] == 1.0
    assert cast_to_format(np.array([1 + 2 ** -8, 1 + 3 * 2 ** -8]), "bf16").tolist() == [1.0, 1 + 2 ** -6]
    assert np.array_equal(cast_to_format(x, "64"), x)


def test_shift_add_identity_and_missing_pair():
    d = np.random.default_rng(4).standard_normal((1, 1, 3, 3))
    assert np.array_equal(shift_add(d, [1.0], [1.0]), d[0, 0])
    with pytest.raises(ValueError):
        shift_add(np.ones((2, 1, 3)), [1.0], [1.0])


def sliced_product(x, w, xs, ws, bm, bk, bn):
    px, xb = partition_blocks(x, bm, bk)
    pw, wb = partition_blocks(w, bk, bn)
    qx, sx = to_integers(xb, xs)
    qw, sw = to_integers(wb, ws)
    sl_x, sig_x = slice_signed(qx, xs)
    sl_w, sig_w = slice_signed(qw, ws)
    # dots[i, j, a, c, d] = slice_x[i][a, c] @ slice_w[j][c, d]
    dots = np.einsum("iacmk,jcdkn->ijacdmn", sl_x.astype(float), sl_w.astype(float))
    out = recombine(dots, sig_w, sig_x, sw, sx)
    return out[: x.shape[0], : w.shape[1]], (qx, sx, qw, sw, px, pw)


def test_recombine_int4_matches_integer_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.integers(-7, 8, (8, 8)).astype(float)
        w = rng.integers(-7, 8, (8, 8)).astype(float)
        s = parse_scheme("int4:1,1,2")
        got, (qx, sx, qw, sw, px, pw) = sliced_product(x, w, s, s, 8, 8, 8)
        oracle = (qx[0, 0] @ qw[0, 0]) * (sx[0, 0] * sw[0, 0])
        assert np.array_equal(got, oracle)


def test_recombine_multi_block_accumulates():
    rng = np.random.default_rng(6)
    x, w = rng.standard_normal((10, 13)), rng.standard_normal((13, 7))
    s = parse_scheme("int8:1,1,2,4")
    got, (qx, sx, qw, sw, px, pw) = sliced_product(x, w, s, s, 4, 5, 3)
    xq = reassemble(px, qx * sx[..., None, None])
    wq = reassemble(pw, qw * sw[..., None, None])
    assert np.allclose(got, xq @ wq, rtol=1e-13, atol=1e-13)


def test_recombine_fp_within_alignment_bound():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((16, 16)).astype(np.float32).astype(float)
    w = rng.standard_normal((16, 16)).astype(np.float32).astype(float)
    s = parse_scheme("fp:32:1,1,2,4,4")
    got, (qx, sx, qw, sw, _, _) = sliced_product(x, w, s, s, 16, 16, 16)
    ex, ew = sx[0, 0] / 2, sw[0, 0] / 2
    bound = (np.abs(x) @ np.full_like(w, ew) + np.full_like(x, ex) @ np.abs(w) + 16 * ex * ew)
    assert np.all(np.abs(got - x @ w) <= bound * (1 + 1e-9))
