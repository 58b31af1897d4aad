"""Deliberately broken problem used by the CLI failure-path test."""

import numpy as np

from ddsemi.problems import SemilinearProblem


def negative_alpha():
    return SemilinearProblem(
        alpha=lambda x, y: -np.ones_like(x),
        beta=lambda x, y, u: u,
        beta_y=lambda x, y, u: np.ones_like(u),
        source=lambda x, y: np.ones_like(x),
        name="negative-alpha")
