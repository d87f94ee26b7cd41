"""Labeled seed derivation: one master seed, independent per-subsystem streams."""

import hashlib

import numpy as np


def label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2 ** 63 - 1), label_key(label)])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
