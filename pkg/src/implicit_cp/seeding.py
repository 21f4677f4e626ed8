"""Seeded random streams, one independent stream per purpose."""
import numpy as np

STREAMS = {
    "init": 0,
    "ground_truth": 1,
    "observations": 2,
    "measurements": 3,
    "shuffle": 4,
    "variant": 5,
    "rip": 6,
    "companion": 7,
}


def rng(seed, purpose, *extra):
    """Generator for `purpose`, independent of every other purpose's stream.

    `extra` integers further split a stream (e.g. per task or per trial).
    """
    if seed is None:
        raise ValueError("a seed is required for reproducible runs")
    key = (STREAMS[purpose],) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
