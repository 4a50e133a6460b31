"""
Experiment grids as general full-factorial designs.

Every factor of an experiment (architecture, domain set, strategy, fraction,
seed) is a categorical factor; the matrix of cells is its full factorial.
"""

from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np

__all__ = ["fullfact", "full_grid"]


def fullfact(levels: Sequence[int]) -> np.ndarray:
    """
    Create a general full-factorial design

    Parameters
    ----------
    levels : array-like
        An array of integers that indicate the number of levels of each
        factor.

    Returns
    -------
    mat : 2d-array of int
        The design matrix with coded levels 0 to k-1 for a k-level factor;
        the first factor varies fastest.

    Example
    -------
    ::

        >>> fullfact([2, 3])
        array([[0, 0],
               [1, 0],
               [0, 1],
               [1, 1],
               [0, 2],
               [1, 2]])

    """
    levels = [int(n) for n in levels]
    if any(n < 1 for n in levels):
        raise ValueError(f"Every factor needs at least one level, got {levels}")
    n_runs = int(np.prod(levels)) if levels else 0
    design = np.zeros((n_runs, len(levels)), dtype=int)

    level_repeat = 1
    range_repeat = n_runs
    for i, n in enumerate(levels):
        range_repeat //= n
        column = np.repeat(np.arange(n), level_repeat)
        design[:, i] = np.tile(column, range_repeat)
        level_repeat *= n

    return design


def full_grid(factors: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """
    Enumerate every combination of factor values.

    Parameters
    ----------
    factors : dict
        ``name -> list of values``; the first factor varies slowest, the
        last one fastest.

    Returns
    -------
    cells : list of dict

    Example
    -------
    ::

        >>> full_grid({"strategy": ["top", "bottom"], "fraction": [0.0, 0.2]})
        [{'strategy': 'top', 'fraction': 0.0},
         {'strategy': 'top', 'fraction': 0.2},
         {'strategy': 'bottom', 'fraction': 0.0},
         {'strategy': 'bottom', 'fraction': 0.2}]

    """
    names = list(factors)
    for name in names:
        if len(factors[name]) == 0:
            raise ValueError(f"Factor {name!r} has no levels")
    design = fullfact([len(factors[name]) for name in reversed(names)])
    return [
        {name: factors[name][code] for name, code in zip(names, row[::-1])}
        for row in design
    ]
