"""
Module: seeds.py
Description: Expands one master seed into independent, purpose-labelled random streams.

Each stream is a counter-based Philox generator keyed by (master seed, stream id, index...),
so adding a new consumer never shifts the draws of an existing one.

Functions:
    make_rng(master_seed, stream, *index): Returns the generator of a labelled stream.
"""

import numpy as np

from src.models.errors import InvalidParameterError

STREAMS = {
    "bank": 1,
    "assignment": 2,
    "train_data": 3,
    "test_data": 4,
    "init": 5,
    "class_prompts": 6,
    "batches": 7,
    "mc": 8,
    "verify": 9,
}


def make_rng(master_seed: int, stream: str, *index: int) -> np.random.Generator:
    """
    Returns the random generator of one labelled sub-stream.

    Args:
        master_seed (int): Non-negative master seed of the run.
        stream (str): Stream label, one of STREAMS.
        *index (int): Optional extra keys, e.g. a client id.

    Returns:
        np.random.Generator: A Philox-backed generator.
    """
    if stream not in STREAMS:
        raise InvalidParameterError(f"unknown random stream '{stream}'")
    if int(master_seed) < 0:
        raise InvalidParameterError("seeds must be non-negative")
    sequence = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(STREAMS[stream], *(int(i) for i in index)),
    )
    return np.random.Generator(np.random.Philox(sequence))
