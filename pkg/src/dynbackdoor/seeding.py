"""Derive every stage seed from one run seed.

A stage seed is the first 32-bit word of
``SeedSequence(root, spawn_key=(crc32(stage), *indices))``. Stage names are
stable strings, so adding a new stage never shifts the seeds of existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(root: int, stage: str, *indices: int) -> int:
    key = (zlib.crc32(stage.encode("utf-8")), *(int(i) for i in indices))
    return int(np.random.SeedSequence(int(root), spawn_key=key).generate_state(1, np.uint32)[0])


def stage_rng(root: int, stage: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, *indices))
