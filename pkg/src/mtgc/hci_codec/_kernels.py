"""Scalar inner loops of the range coder.

Every function here is plain Python over numpy arrays so that the identical
source can be compiled by numba or run interpreted (see ``mtgc._accel``).
Keep them free of Python objects, closures and exceptions.

Coder state: ``low`` is a 48-bit window plus one carry bit, ``rng`` is kept in
``[2**40, 2**48)`` after normalisation. Carries are propagated through a cached
byte and a run of pending 0xFF bytes (the LZMA scheme, widened to 48 bits so the
``rng >> 16`` division of a 16-bit frequency table loses < 2**-24 per symbol).
All intermediate values stay below 2**63, so int64 suffices everywhere.
"""

import numpy as np

CARRY = 1 << 48
RANGE_INIT = (1 << 48) - 1
BOT = 1 << 40
LOW_KEEP = (1 << 40) - 1
TOP_FF = 0xFF << 40
PRECISION = 16
NBITS_FIELD = 6
CHUNK_BITS = 16
MAX_ESCAPE_BITS = 32


def encode_symbols(values, hw, cdf, cdf_len, offset, out):
    """Range-code ``values`` (flattened C x h x w) and return the byte count.

    ``cdf[c, :cdf_len[c]]`` is the cumulative frequency table of channel ``c``
    (first entry 0, last ``2**PRECISION``); its final symbol is the escape used
    for values outside ``[offset[c], offset[c] + cdf_len[c] - 2)``. Escaped values
    follow as a 6-bit length and 16-bit chunks of their zigzag code.
    """
    low = 0
    rng = RANGE_INIT
    cache = 0
    cache_size = 1
    pos = 0
    cums = np.zeros(4, dtype=np.int64)
    freqs = np.zeros(4, dtype=np.int64)
    bits = np.zeros(4, dtype=np.int64)
    n = values.shape[0]
    for i in range(n):
        c = i // hw
        esc = cdf_len[c] - 2
        v = values[i]
        idx = v - offset[c]
        m = 1
        if idx < 0 or idx >= esc:
            s = esc
        else:
            s = idx
        cums[0] = cdf[c, s]
        freqs[0] = cdf[c, s + 1] - cdf[c, s]
        bits[0] = PRECISION
        if s == esc:
            if v >= 0:
                u = v << 1
            else:
                u = ((-v) << 1) - 1
            nb = 0
            t = u
            while t > 0:
                nb += 1
                t >>= 1
            cums[1] = nb
            freqs[1] = 1
            bits[1] = NBITS_FIELD
            m = 2
            k = (nb + CHUNK_BITS - 1) // CHUNK_BITS
            for j in range(k - 1, -1, -1):
                cums[m] = (u >> (CHUNK_BITS * j)) & 0xFFFF
                freqs[m] = 1
                bits[m] = CHUNK_BITS
                m += 1
        for j in range(m):
            r = rng >> bits[j]
            low += r * cums[j]
            rng = r * freqs[j]
            while rng < BOT:
                rng <<= 8
                if low < TOP_FF or low >= CARRY:
                    carry = low >> 48
                    temp = cache
                    while True:
                        out[pos] = (temp + carry) & 0xFF
                        pos += 1
                        temp = 0xFF
                        cache_size -= 1
                        if cache_size == 0:
                            break
                    cache = (low >> 40) & 0xFF
                cache_size += 1
                low = (low & LOW_KEEP) << 8

    # pick the point of [low, low + rng) with the most trailing zero bits; the
    # decoder reads zeros past the end, so those bytes need not be stored
    k = 48
    target = low
    while k > 0:
        mask = (1 << k) - 1
        cand = (low + mask) & ~mask
        if cand - low < rng:
            target = cand
            break
        k -= 1
    low = target
    for _ in range(7):
        if low < TOP_FF or low >= CARRY:
            carry = low >> 48
            temp = cache
            while True:
                out[pos] = (temp + carry) & 0xFF
                pos += 1
                temp = 0xFF
                cache_size -= 1
                if cache_size == 0:
                    break
            cache = (low >> 40) & 0xFF
        cache_size += 1
        low = (low & LOW_KEEP) << 8
    return pos


def decode_symbols(data, n, hw, cdf, cdf_len, offset, out):
    """Inverse of :func:`encode_symbols`. Returns 0, or -1 on an inconsistent stream.

    ``data`` excludes the always-zero leading byte and any trailing zeros.
    """
    nbytes = data.shape[0]
    pos = 0
    code = 0
    rng = RANGE_INIT
    for _ in range(6):
        b = 0
        if pos < nbytes:
            b = data[pos]
        pos += 1
        code = (code << 8) | b
    top = 1 << PRECISION
    for i in range(n):
        c = i // hw
        last = cdf_len[c] - 1
        esc = last - 1
        r = rng >> PRECISION
        value = code // r
        if value >= top:
            return -1
        lo_i = 0
        hi_i = last
        while hi_i - lo_i > 1:
            mid = (lo_i + hi_i) >> 1
            if cdf[c, mid] <= value:
                lo_i = mid
            else:
                hi_i = mid
        s = lo_i
        code -= r * cdf[c, s]
        rng = r * (cdf[c, s + 1] - cdf[c, s])
        while rng < BOT:
            b = 0
            if pos < nbytes:
                b = data[pos]
            pos += 1
            code = (code << 8) | b
            rng <<= 8
        if s != esc:
            out[i] = offset[c] + s
            continue
        r = rng >> NBITS_FIELD
        nb = code // r
        if nb > MAX_ESCAPE_BITS:
            return -1
        code -= r * nb
        rng = r
        while rng < BOT:
            b = 0
            if pos < nbytes:
                b = data[pos]
            pos += 1
            code = (code << 8) | b
            rng <<= 8
        u = 0
        k = (nb + CHUNK_BITS - 1) // CHUNK_BITS
        for _ in range(k):
            r = rng >> CHUNK_BITS
            chunk = code // r
            if chunk > 0xFFFF:
                return -1
            code -= r * chunk
            rng = r
            while rng < BOT:
                b = 0
                if pos < nbytes:
                    b = data[pos]
                pos += 1
                code = (code << 8) | b
                rng <<= 8
            u = (u << CHUNK_BITS) | chunk
        if u & 1:
            out[i] = -((u + 1) >> 1)
        else:
            out[i] = u >> 1
    return 0


def histogram_u8(flat, counts):
    """Accumulate a 256-bin histogram of uint8 ``flat`` into ``counts``."""
    for i in range(flat.shape[0]):
        counts[flat[i]] += 1
    return counts
