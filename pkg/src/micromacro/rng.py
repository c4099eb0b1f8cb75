"""Counter-based random streams and Brownian spatial-correlation strategies.

Every standard normal drawn by the package comes from an SFC64 generator
seeded through ``SeedSequence`` with a bijective packing of
``(seed, tag, cell, step, retry)``.  A value therefore depends only on where
it sits in the simulation, never on execution order or thread count.
"""

from enum import Enum

import numpy as np

# Bit layout of the second key word: tag | cell | step | retry.
_TAG_BITS, _CELL_BITS, _STEP_BITS, _RETRY_BITS = 4, 20, 32, 8

TAG_STEP = 0
TAG_INIT = 1
TAG_RB = 2

#: cell whose stream supplies increments shared by every cell; using cell 0
#: makes all strategies coincide on a single cell
SHARED_CELL = 0


def stream_key(seed, tag, cell, step, retry=0):
    """Pack a stream address into two uint64 words ``(seed, address)``."""
    fields = ((tag, _TAG_BITS), (cell, _CELL_BITS), (step, _STEP_BITS), (retry, _RETRY_BITS))
    word = 0
    for value, bits in fields:
        value = int(value)
        if not 0 <= value < (1 << bits):
            raise ValueError(f"stream field {value} does not fit in {bits} bits")
        word = (word << bits) | value
    seed = int(seed)
    if not 0 <= seed < (1 << 64):
        raise ValueError("seed must be a non-negative 64-bit integer")
    return np.array([seed, word], dtype=np.uint64)


def keyed_generator(seed, *, step, cell=0, tag=TAG_STEP, retry=0):
    entropy = [int(w) for w in stream_key(seed, tag, cell, step, retry)]
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence(entropy)))


def keyed_normals(seed, shape, *, step, cell=0, tag=TAG_STEP, retry=0, out=None):
    """Standard normals of the given shape from the stream at one address."""
    gen = keyed_generator(seed, step=step, cell=cell, tag=tag, retry=retry)
    if out is not None:
        return gen.standard_normal(out=out)
    return gen.standard_normal(shape)


class BrownianStrategy(str, Enum):
    """Spatial covariance of the Brownian motions driving per-cell ensembles."""

    CONSTANT = "constant"  # one Brownian motion shared by all cells
    IID = "iid"  # mutually independent per cell
    ALTERNATING = "alternating"  # shared motion times (-1)**cell

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {
            "constantinspace": cls.CONSTANT,
            "independentpercell": cls.IID,
            "independent": cls.IID,
            "alternatingsign": cls.ALTERNATING,
        }
        key = str(value).lower().replace("_", "").replace("-", "")
        if key in aliases:
            return aliases[key]
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown Brownian strategy {value!r}") from None


def brownian_normals(strategy, seed, step, n_cells, n_replicas, dim, *, tag=TAG_STEP, retry=0,
                     shared_components=()):
    """Per-cell standard normal increments, shape ``(n_cells, n_replicas, dim)``.

    Components listed in ``shared_components`` are constant in space under
    every strategy; the strategy governs the others.  Multiply by sqrt(dt)
    to obtain Brownian increments.
    """
    strategy = BrownianStrategy.parse(strategy)
    out = np.empty((n_cells, n_replicas, dim))
    shared = list(shared_components)
    if strategy is BrownianStrategy.IID:
        for c in range(n_cells):
            keyed_normals(seed, None, step=step, cell=c, tag=tag, retry=retry, out=out[c])
        if shared:
            out[:, :, shared] = out[SHARED_CELL][:, shared]
        return out
    keyed_normals(seed, None, step=step, cell=SHARED_CELL, tag=tag, retry=retry, out=out[0])
    out[1:] = out[0]
    if strategy is BrownianStrategy.ALTERNATING:
        flip = [i for i in range(dim) if i not in shared]
        out[1::2, :, flip] *= -1.0
    return out
