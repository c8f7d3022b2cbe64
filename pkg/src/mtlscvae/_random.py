"""Named random substreams derived from a single top-level seed."""

import zlib

import numpy as np

STREAMS = ("sim", "split", "init", "train", "val", "mc")


def substream(seed, name):
    """Return a Generator for the substream ``name`` of ``seed``.

    Each name maps to an independent child of ``SeedSequence(seed)`` so that
    consuming one stream never perturbs another.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,)))
