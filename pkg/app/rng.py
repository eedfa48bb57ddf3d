########################
# Random Substreams     #
########################

from enum import IntEnum

import numpy as np

from app.exceptions import DesignError

DESIGN_CODES = {'A': 1, 'B': 2, 'C1': 3, 'C2': 4, 'D': 5}

# Dedicated key for the cached Design D target integration
THETA0_KEY = 9_000


class StreamRole(IntEnum):
    COVARIATES = 0
    OUTCOMES = 1
    ASSIGNMENT = 2
    POLICY = 3


def substream(master_seed: int, design: str, replication: int, role: StreamRole) -> np.random.Generator:
    """
    Counter-based generator for one (master seed, design, replication, role) key.

    Streams are Philox generators keyed through a SeedSequence, so every key
    gets an independent stream that does not depend on how replications are
    scheduled across workers.

    Raises:
        DesignError: On an unknown design or negative seed/replication.
    """
    if design not in DESIGN_CODES:
        raise DesignError(f"Unknown design: {design}")
    if master_seed < 0 or replication < 0:
        raise DesignError(f"Seed and replication index must be non-negative, got {master_seed}, {replication}")
    entropy = [int(master_seed), DESIGN_CODES[design], int(replication), int(role)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
