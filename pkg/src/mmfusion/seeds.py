"""Named RNG substreams derived from a single root seed.

Every source of randomness in the repo (weight init, shuffling, data
synthesis, augmentation) draws from its own substream so that reruns of
any one component are stable regardless of what the others consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _words(names: tuple[object, ...]) -> list[int]:
    tag = hashlib.sha256("/".join(str(n) for n in names).encode("utf-8")).digest()
    return [int.from_bytes(tag[i:i + 4], "little") for i in range(0, 16, 4)]


def substream(root_seed: int, *names: object) -> np.random.Generator:
    """Generator for the substream identified by ``names``.

    The same (root_seed, names) pair yields the same stream on every run
    and platform; distinct names yield statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *_words(names)]))


def derive_seed(root_seed: int, *names: object) -> int:
    """Stable integer seed for handing to APIs that take a plain seed."""
    seq = np.random.SeedSequence([int(root_seed), *_words(names)])
    return int(seq.generate_state(1, np.uint64)[0])
