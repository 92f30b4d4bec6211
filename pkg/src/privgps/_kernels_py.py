"""Pure-Python randomized-response kernels.

Stream-identical to the compiled ``_kernels`` module: both read doubles from
the same PCG64 bit generator in the same order. Uniforms are drawn in bulk
for speed, then the generator is rewound and advanced by exactly the number
of draws consumed.
"""

import numpy as np

_CHUNK_BITS = 1 << 16


def _walk(truth: list, p: float, q: float, bit_generator) -> list:
    state = bit_generator.state
    u = np.random.Generator(bit_generator).random(2 * len(truth)).tolist()
    out = [0] * len(truth)
    j = 0
    for i, t in enumerate(truth):
        if u[j] < p:
            out[i] = t
            j += 1
        else:
            out[i] = 1 if u[j + 1] < q else 0
            j += 2
    bit_generator.state = state
    bit_generator.advance(j)
    return out


def rr_bits(truth, p, q, bit_generator):
    truth = np.asarray(truth, dtype=np.uint8)
    out = np.empty(truth.shape[0], dtype=np.uint8)
    for start in range(0, truth.shape[0], _CHUNK_BITS):
        chunk = truth[start:start + _CHUNK_BITS].tolist()
        out[start:start + len(chunk)] = _walk(chunk, p, q, bit_generator)
    return out


def rr_counts(cells, n_cells, p, q, bit_generator):
    cells = np.asarray(cells, dtype=np.int64)
    counts = np.zeros(n_cells, dtype=np.int64)
    per_chunk = max(1, _CHUNK_BITS // n_cells)
    for start in range(0, cells.shape[0], per_chunk):
        block = cells[start:start + per_chunk]
        truth = (block[:, None] == np.arange(n_cells)[None, :]).astype(np.uint8)
        bits = _walk(truth.ravel().tolist(), p, q, bit_generator)
        counts += np.asarray(bits, dtype=np.int64).reshape(-1, n_cells).sum(axis=0)
    return counts
