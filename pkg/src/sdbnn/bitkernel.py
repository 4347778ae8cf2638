"""Bit-packed {-1,+1} tensors and exact XNOR+popcount convolution.

Bit layout (stable, documented for the packed-model format): rows are the
leading logical dimension, all remaining dimensions flatten into the row,
little-endian by 64-bit word index, bit i of word j = logical position
64*j + i. Convention: bit 1 means +1, bit 0 means -1. Row padding past the
valid length is all 1-bits.

Borders are padded with +1 (there is no 0 in {-1,+1}), and the float
reference applies the same +1.0 padding, so binary convolution here is
exactly equal to `conv2d_ref` on the unpacked tensors: integer outputs,
zero tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .tensor import ConvGeometry, ShapeError, Tensor, conv2d_ref
from . import opcount

_WORD = 64


class BitPackError(ValueError):
    """Packed operands are inconsistent (word counts, plans, shapes)."""


def _words_per_row(bits: int) -> int:
    return (bits + _WORD - 1) // _WORD


def _pack_bool_rows(rows: np.ndarray) -> np.ndarray:
    """Pack a [R, L] bool array into [R, words] uint64, pad bits set to 1."""
    r, length = rows.shape
    wpr = _words_per_row(length)
    padded = np.ones((r, wpr * _WORD), dtype=bool)
    padded[:, :length] = rows
    u8 = np.packbits(padded, axis=1, bitorder="little")
    return u8.view("<u8")


def _unpack_bool_rows(words: np.ndarray, length: int) -> np.ndarray:
    u8 = words.view("<u1")
    bits = np.unpackbits(u8, axis=1, bitorder="little")
    return bits[:, :length].astype(bool)


@dataclass
class BitTensor:
    """1-bit tensor: leading dim = rows, remaining dims packed per row."""

    logical_shape: tuple[int, ...]
    words: np.ndarray  # uint64 [rows, words_per_row]
    valid_bits: int    # logical bits per row

    @property
    def rows(self) -> int:
        return self.words.shape[0]

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]


def pack(x: Tensor) -> BitTensor:
    """Binarize and pack: bit 1 where x >= 0 (negative zero counts as 0)."""
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    rows = x.shape[0] if x.ndim > 1 else 1
    bools = (x >= 0).reshape(rows, -1)
    return BitTensor(logical_shape=tuple(x.shape), words=_pack_bool_rows(bools),
                     valid_bits=bools.shape[1])


def unpack(b: BitTensor, dtype=np.float32) -> Tensor:
    """Expand to a +-1 float tensor in the logical shape."""
    bools = _unpack_bool_rows(b.words, b.valid_bits)
    return np.where(bools, 1.0, -1.0).astype(dtype).reshape(b.logical_shape)


def xnor_popcount_dot(a_row: np.ndarray, b_row: np.ndarray, n: int) -> int:
    """Exact +-1 dot product over n valid positions of two packed rows.

    agreements - disagreements, computed as 2*popcount(XNOR) corrected for
    the all-ones padding both rows carry past position n.
    """
    a_row = np.atleast_1d(a_row)
    b_row = np.atleast_1d(b_row)
    if a_row.shape != b_row.shape:
        raise BitPackError(f"word-count mismatch: {a_row.shape} vs {b_row.shape}")
    total = a_row.size * _WORD
    pad = total - n
    pc = int(np.bitwise_count(~(a_row ^ b_row)).sum())
    return 2 * pc - total - pad


@dataclass
class PackedConvPlan:
    """Precomputed im2row gather for one (input shape, geometry) pair."""

    geometry: ConvGeometry
    input_shape: tuple[int, ...]   # [N, Cin, H, W]
    out_hw: tuple[int, int]
    gather: np.ndarray             # [Ho*Wo*K*K] flat indices into padded [Cin groups]
    padded_hw: tuple[int, int]
    n_bits: int                    # valid bits per output row = Cin*K*K


def make_plan(input_shape: tuple[int, ...], geom: ConvGeometry) -> PackedConvPlan:
    n, cin, h, w = input_shape
    if cin != geom.in_channels:
        raise ShapeError(f"plan: input Cin={cin} != geometry {geom.in_channels}")
    ho, wo = geom.out_hw(h, w)
    p, s, k = geom.padding, geom.stride, geom.kernel
    hp, wp = h + 2 * p, w + 2 * p
    # flat spatial indices of each receptive field, one channel's worth;
    # channels are contiguous planes so the full row index adds c*hp*wp
    oy = (np.arange(ho) * s)[:, None, None, None]
    ox = (np.arange(wo) * s)[None, :, None, None]
    ky = np.arange(k)[None, None, :, None]
    kx = np.arange(k)[None, None, None, :]
    idx = ((oy + ky) * wp + (ox + kx)).reshape(ho * wo, k * k)
    return PackedConvPlan(
        geometry=geom,
        input_shape=tuple(input_shape),
        out_hw=(ho, wo),
        gather=idx,
        padded_hw=(hp, wp),
        n_bits=cin * k * k,
    )


def _im2row_bits(a: BitTensor, plan: PackedConvPlan) -> np.ndarray:
    """Gather packed receptive-field rows: uint64 [N*Ho*Wo, words]."""
    n, cin, h, w = plan.input_shape
    hp, wp = plan.padded_hw
    p = plan.geometry.padding
    bools = _unpack_bool_rows(a.words, a.valid_bits).reshape(n, cin, h, w)
    if p:
        padded = np.ones((n, cin, hp, wp), dtype=bool)  # +1 border
        padded[:, :, p : p + h, p : p + w] = bools
    else:
        padded = bools
    flat = padded.reshape(n, cin, hp * wp)
    # [N, Cin, P, K*K] -> [N, P, Cin*K*K]
    patches = flat[:, :, plan.gather]
    rows = np.moveaxis(patches, 1, 2).reshape(n * plan.gather.shape[0], plan.n_bits)
    return _pack_bool_rows(rows)


def bitconv2d(a_b: BitTensor, w_b: BitTensor, plan: PackedConvPlan,
              row_chunk: int = 4096) -> Tensor:
    """Exact binary convolution via XNOR+popcount; integer-valued floats.

    Equals conv2d_ref(unpack(a), unpack(w), geom, pad_value=+1.0) with zero
    tolerance; every output value has the parity of n = Cin*K*K.
    """
    if tuple(a_b.logical_shape) != plan.input_shape:
        raise BitPackError(f"plan built for {plan.input_shape}, input is {a_b.logical_shape}")
    geom = plan.geometry
    cout = w_b.logical_shape[0]
    if w_b.logical_shape != (cout, geom.in_channels, geom.kernel, geom.kernel):
        raise BitPackError(f"weights {w_b.logical_shape} inconsistent with geometry {geom}")
    if w_b.valid_bits != plan.n_bits:
        raise BitPackError(f"weight row bits {w_b.valid_bits} != plan bits {plan.n_bits}")
    rows = _im2row_bits(a_b, plan)
    wpr = rows.shape[1]
    if wpr != w_b.words_per_row:
        raise BitPackError("word-count mismatch between activation rows and weight rows")
    total = wpr * _WORD
    pad = total - plan.n_bits
    out = np.empty((rows.shape[0], cout), dtype=np.int32)
    wt = w_b.words
    for lo in range(0, rows.shape[0], row_chunk):
        chunk = rows[lo : lo + row_chunk]
        xnor = ~(chunk[:, None, :] ^ wt[None, :, :])
        pc = np.bitwise_count(xnor).sum(axis=2, dtype=np.int32)
        out[lo : lo + row_chunk] = 2 * pc - total - pad
    n, (ho, wo) = plan.input_shape[0], plan.out_hw
    return np.ascontiguousarray(
        np.moveaxis(out.reshape(n, ho, wo, cout), 3, 1)
    ).astype(np.float32)


def scaled_bitconv2d(a_b: BitTensor, w_b: BitTensor, plan: PackedConvPlan,
                     alpha_s: np.ndarray, beta_mean: float) -> Tensor:
    """Multiplicative-baseline inference path: bitconv then channel scales.

    The two per-element scaling passes are recorded on the instrumentation
    counter; this is the cost the additive shifts remove.
    """
    out = bitconv2d(a_b, w_b, plan)
    out = out * alpha_s[None, :, None, None].astype(out.dtype)
    out = out * np.float32(beta_mean)
    opcount.add_post_conv_muls(2 * out.size)
    return out


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class BenchCase:
    name: str
    batch: int
    channels: int
    out_channels: int
    hw: int
    kernel: int
    stride: int = 1
    padding: int = 1


DEFAULT_CASES = (
    BenchCase("c16_16x16_k3", batch=1, channels=16, out_channels=16, hw=16, kernel=3),
    BenchCase("c64_32x32_k3", batch=1, channels=64, out_channels=64, hw=32, kernel=3),
)


def _time_median_p95(fn, reps: int, warmup: int = 1) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    samples.sort()
    med = samples[len(samples) // 2]
    p95 = samples[min(len(samples) - 1, int(0.95 * len(samples)))]
    return med, p95


def bench(cases=DEFAULT_CASES, reps: int = 7, seed: int = 0) -> list[dict]:
    """Latency comparison: naive float conv vs bitconv vs scaled baseline.

    Correctness gate first: for each case the packed kernel must equal the
    float reference exactly before any timing is recorded.
    """
    rng = np.random.default_rng(seed)
    results = []
    for case in cases:
        geom = ConvGeometry(case.channels, case.out_channels, case.kernel,
                            stride=case.stride, padding=case.padding)
        x = np.where(rng.standard_normal((case.batch, case.channels, case.hw, case.hw)) >= 0,
                     1.0, -1.0).astype(np.float32)
        w = np.where(rng.standard_normal((case.out_channels, case.channels, case.kernel, case.kernel)) >= 0,
                     1.0, -1.0).astype(np.float32)
        plan = make_plan(x.shape, geom)
        w_packed = pack(w)
        alpha = np.abs(rng.standard_normal(case.out_channels)).astype(np.float32) + 0.1

        ref = conv2d_ref(x, w, geom, pad_value=1.0)
        got = bitconv2d(pack(x), w_packed, plan)
        if not np.array_equal(ref, got):
            raise AssertionError(f"bench gate failed: bitconv2d != conv2d_ref on {case.name}")

        med_ref, p95_ref = _time_median_p95(lambda: conv2d_ref(x, w, geom, pad_value=1.0), reps)
        med_bit, p95_bit = _time_median_p95(lambda: bitconv2d(pack(x), w_packed, plan), reps)
        med_sc, p95_sc = _time_median_p95(
            lambda: scaled_bitconv2d(pack(x), w_packed, plan, alpha, 0.7), reps)
        results.append({
            "case": case.name,
            "batch": case.batch,
            "cin": case.channels,
            "cout": case.out_channels,
            "hw": case.hw,
            "k": case.kernel,
            "float_ref_median_s": med_ref,
            "float_ref_p95_s": p95_ref,
            "bitconv_median_s": med_bit,
            "bitconv_p95_s": p95_bit,
            "scaled_median_s": med_sc,
            "scaled_p95_s": p95_sc,
            "speedup_vs_float": med_ref / med_bit if med_bit > 0 else float("inf"),
        })
    return results


def bench_report_lines(results: list[dict]) -> list[str]:
    lines = ["# latency per op (seconds); shift-based path does no post-conv multiplies"]
    for row in results:
        kv = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                      for k, v in row.items())
        lines.append(kv)
    lines.append("note=shift_path_post_conv_multiplies_per_element 0")
    lines.append("note=scaled_baseline_post_conv_multiplies_per_element 2")
    return lines
