"""Shared constructions for the test suite."""

import numpy as np

from recalx.data import Dataset


def population_dataset(joint, n):
    """Deterministic dataset whose empirical frequencies match the joint to about 1/n."""
    counts = np.round(joint.probs * n).astype(int)
    rows = np.repeat(np.arange(joint.probs.size), counts)
    names = tuple(f"x{j}" for j in range(joint.d))
    return Dataset(joint.support_x[rows], joint.support_y[rows], names, joint.n_classes)


# PASS/FAIL lines from the acceptance tests, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
