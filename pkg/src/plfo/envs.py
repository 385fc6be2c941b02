"""Canonical hand-checkable MDP fixtures shared across the package."""

from __future__ import annotations

import numpy as np

from .mdp import TabularMdp

# Chain2 actions
LEFT, RIGHT = 0, 1
# Grid actions: up, right, down, left
GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def loop1(gamma: float = 0.9) -> TabularMdp:
    """One state, one action, self-loop paying 1 per step."""
    return TabularMdp(
        transition=np.ones((1, 1, 1)),
        reward=np.ones((1, 1)),
        gamma=gamma,
        initial_dist=np.ones(1),
        r_max=1.0,
    )


def chain2(gamma: float = 0.5) -> TabularMdp:
    """Two states; LEFT always leads to state 0, RIGHT to state 1.

    Landing in state 1 pays 1, everything else pays 0. Starts in state 0.
    """
    P = np.zeros((2, 2, 2))
    P[:, LEFT, 0] = 1.0
    P[:, RIGHT, 1] = 1.0
    R = np.zeros((2, 2))
    R[:, 1] = 1.0
    return TabularMdp(P, R, gamma=gamma, initial_dist=np.array([1.0, 0.0]), r_max=1.0)


def grid_state(row: int, col: int, size: int = 5) -> int:
    return row * size + col


def grid5(slip: float = 0.1, gamma: float = 0.95, size: int = 5) -> TabularMdp:
    """Square gridworld from the top-left corner to a terminal bottom-right goal.

    With probability ``slip`` the move direction is replaced by a uniformly
    random one; bumping into a wall leaves the agent in place. Entering the
    goal pays 1, all other transitions pay 0.
    """
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must be a probability")
    S, A = size * size, len(GRID_MOVES)
    goal = grid_state(size - 1, size - 1, size)

    def step(s: int, move: int) -> int:
        r, c = divmod(s, size)
        dr, dc = GRID_MOVES[move]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < size and 0 <= c2 < size:
            return grid_state(r2, c2, size)
        return s

    P = np.zeros((S, A, S))
    for s in range(S):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        for a in range(A):
            P[s, a, step(s, a)] += 1.0 - slip
            for m in range(A):
                P[s, a, step(s, m)] += slip / A
    R = np.zeros((S, S))
    R[:, goal] = 1.0
    R[goal, goal] = 0.0
    d0 = np.zeros(S)
    d0[0] = 1.0
    return TabularMdp(P, R, gamma=gamma, initial_dist=d0, r_max=1.0, terminal_states=frozenset({goal}))


FIXTURES = {"loop1": loop1, "chain2": chain2, "grid5": grid5}


def goal_states(mdp: TabularMdp) -> frozenset[int]:
    """States whose entry counts as task success (the terminal set)."""
    return mdp.terminal_states


def make_fixture(name: str, **kwargs) -> TabularMdp:
    try:
        factory = FIXTURES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown MDP fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return factory(**kwargs)
