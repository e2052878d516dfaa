"""Counter-based Gaussian streams (Philox4x64-10 + inverse-CDF transform).

Normal number ``k`` of stream ``(seed, index)`` is a pure function of the
triple: it is word ``k % 4`` of ``philox(counter=(k // 4, 0, 0, 0),
key=(seed, index))`` pushed through the inverse normal CDF. Streams can be
resumed at any position, split across workers, and replayed bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

MASK64 = (1 << 64) - 1

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_S12 = np.uint64(12)
_TWO_M52 = 1.0 / 4503599627370496.0


@intrinsic
def _mulhilo(typingctx, a, b):
    """Full 64x64 -> 128-bit product as (high word, low word)."""
    sig = types.UniTuple(types.uint64, 2)(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        x, y = args
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(x, i128), builder.zext(y, i128))
        hi = builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))
        lo = builder.trunc(prod, ir.IntType(64))
        return context.make_tuple(builder, signature.return_type, [hi, lo])

    return sig, codegen


@njit(cache=True, inline="always")
def philox4x64(c0, c1, c2, c3, k0, k1, out):
    """Ten-round Philox4x64 block; writes four uint64 words into ``out``."""
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    out[0] = c0
    out[1] = c1
    out[2] = c2
    out[3] = c3


@njit(cache=True)
def norm_ppf(p):
    """Inverse standard normal CDF (Wichura AS241, ~1e-16 relative)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    if q < 0.0:
        r = p
    else:
        r = 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    if q < 0.0:
        return -val
    return val


@njit(cache=True, inline="always")
def word_to_uniform(w):
    """Map a 64-bit word to the open interval (0, 1) using its top 52 bits.

    The midpoint offset keeps both ends strictly inside; with 53 bits the
    largest word would round to exactly 1.
    """
    return (float(w >> _S12) + 0.5) * _TWO_M52


@njit(cache=True)
def fill_normals(k0, k1, position, out):
    """Write ``len(out)`` normals of stream key ``(k0, k1)`` starting at ``position``.

    Returns the position following the last normal written.
    """
    buf = np.empty(4, dtype=np.uint64)
    n = out.shape[0]
    block = np.uint64(position // 4)
    philox4x64(block, np.uint64(0), np.uint64(0), np.uint64(0), k0, k1, buf)
    slot = position % 4
    for i in range(n):
        if slot == 4:
            block += np.uint64(1)
            philox4x64(block, np.uint64(0), np.uint64(0), np.uint64(0), k0, k1, buf)
            slot = 0
        out[i] = norm_ppf(word_to_uniform(buf[slot]))
        slot += 1
    return position + n


@dataclass
class RngStream:
    """Position in the normal sequence keyed by ``(master_seed, stream_index)``.

    ``counter`` counts normals already consumed; it is the only mutable field.
    """

    master_seed: int
    stream_index: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must fit in 64 unsigned bits")
        if not 0 <= self.stream_index <= MASK64:
            raise ValueError("stream_index must fit in 64 unsigned bits")
        if self.counter < 0:
            raise ValueError("counter must be non-negative")

    @property
    def key(self) -> tuple[np.uint64, np.uint64]:
        return np.uint64(self.master_seed), np.uint64(self.stream_index)

    def spawn(self, stream_index: int) -> "RngStream":
        return RngStream(self.master_seed, stream_index, 0)


def gaussian_block(stream: RngStream, n: int) -> np.ndarray:
    """Draw ``n`` standard normals from ``stream`` and advance its counter."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = np.empty(n, dtype=np.float64)
    k0, k1 = stream.key
    stream.counter = int(fill_normals(k0, k1, stream.counter, out))
    return out


def raw_block(master_seed: int, stream_index: int, block: int) -> np.ndarray:
    """The four raw Philox words for one counter value (testing and audits)."""
    out = np.empty(4, dtype=np.uint64)
    philox4x64(np.uint64(block), np.uint64(0), np.uint64(0), np.uint64(0),
               np.uint64(master_seed), np.uint64(stream_index), out)
    return out


@njit(cache=True, inline="always")
def next_normal(k0, k1, pos, buf, loaded):
    """Normal number ``pos`` of a stream; ``buf``/``loaded`` cache the current block.

    ``loaded`` is a length-1 int64 array holding the block index held in
    ``buf`` (-1 when empty).
    """
    blk = pos >> 2
    if blk != loaded[0]:
        philox4x64(np.uint64(blk), np.uint64(0), np.uint64(0), np.uint64(0), k0, k1, buf)
        loaded[0] = blk
    return norm_ppf(word_to_uniform(buf[pos & 3]))
