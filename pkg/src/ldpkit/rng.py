"""Counter-based random streams.

Every Monte Carlo sample owns an independent Philox stream keyed by the
user seed, with the sample index and a purpose tag written into the high
words of the counter. Draws for sample ``i`` therefore never depend on
how samples are chunked or which worker thread produced them.
"""

import numpy as np

NOISE = 0
CONTROL = 1
RESTART = 2
PROBE = 3


def generator(seed: int, index: int = 0, stream: int = NOISE) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and sample index must be non-negative")
    bitgen = np.random.Philox(key=int(seed), counter=[0, 0, int(index), int(stream)])
    return np.random.Generator(bitgen)


def normals(seed: int, start: int, count: int, shape, stream: int = NOISE) -> np.ndarray:
    """Standard normals for samples ``start .. start+count-1``.

    Returns an array of shape ``(count, *shape)``; row ``j`` is a pure
    function of ``(seed, start + j, stream)``.
    """
    shape = tuple(shape)
    out = np.empty((count,) + shape)
    for j in range(count):
        out[j] = generator(seed, start + j, stream).standard_normal(shape)
    return out


def uniforms(seed: int, start: int, count: int, shape, stream: int = CONTROL) -> np.ndarray:
    shape = tuple(shape)
    out = np.empty((count,) + shape)
    for j in range(count):
        out[j] = generator(seed, start + j, stream).random(shape)
    return out
