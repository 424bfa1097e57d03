"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np

STREAMS = ("split", "init", "negatives", "keys", "noise", "sample", "synth")


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for sub-stream ``name`` of ``seed``.

    Extra integers (epoch, batch index, entity index, ...) select independent
    children, so e.g. negatives for epoch 3 never share state with key sampling.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    entropy = [int(seed) & 0xFFFFFFFF, tag] + [int(x) & 0xFFFFFFFF for x in extra]
    return np.random.default_rng(np.random.SeedSequence(entropy))
