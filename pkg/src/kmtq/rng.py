"""Seed-stream derivation for replications.

Every random object in a replication draws from its own stream, fixed by
(master seed, n, replication id, role). Streams never depend on which worker
runs the replication or in what order.
"""
import numpy as np

ROLES = ("bridge", "dropout", "service", "placement", "permutation", "aux")


def role_index(role: str) -> int:
    """Stable integer for a stream role."""
    if role not in ROLES:
        raise ValueError(f"Unknown stream role: {role}")
    return ROLES.index(role)


def stream(master_seed: int, n: int, rep: int, role: str) -> np.random.Generator:
    """Independent generator for one (n, replication, role) triple."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(n, rep, role_index(role)))
    return np.random.default_rng(seq)


def streams(master_seed: int, n: int, rep: int) -> dict[str, np.random.Generator]:
    """All role streams for one replication."""
    return {role: stream(master_seed, n, rep, role) for role in ROLES}


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
