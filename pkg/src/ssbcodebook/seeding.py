"""Named random sub-streams derived from one master seed."""
import zlib

import numpy as np

STAGES = ("placement", "activity", "fading", "noise", "init", "shuffle", "split")


def substream(seed: int, stage: str, *index: int) -> np.random.Generator:
    """Independent generator for ``stage`` (and optional indices) under ``seed``.

    Each stage hashes to its own spawn key, so adding draws to one stage never
    shifts the numbers another stage sees.
    """
    key = (zlib.crc32(stage.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
