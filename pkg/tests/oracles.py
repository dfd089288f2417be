"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from moeq.qlearning import TransitionBatch

# Two-state deterministic MDP with a 2-dim action of 3 bins each.
# state 0: (1, 2) moves to state 1; anything else stays in state 0.
# state 1: (2, 0) ends with reward 1, (0, 1) ends with reward 0.5; anything else returns to state 0.
GAMMA = 0.9
JOINT = list(itertools.product(range(3), range(3)))


def toy_step(s, a):
    """-> (next_state, reward, terminal)"""
    if s == 0:
        return (1, 0.0, False) if a == (1, 2) else (0, 0.0, False)
    if a == (2, 0):
        return (None, 1.0, True)
    if a == (0, 1):
        return (None, 0.5, True)
    return (0, 0.0, False)


def value_iteration(gamma=GAMMA, iters=500):
    """Joint-action Q* by brute force over all 9 joint actions."""
    Q = np.zeros((2, 9))
    for _ in range(iters):
        new = np.zeros_like(Q)
        for s in range(2):
            for j, a in enumerate(JOINT):
                s2, r, term = toy_step(s, a)
                new[s, j] = r + (0.0 if term else gamma * Q[s2].max())
        Q = new
    return Q


def full_coverage_batch():
    states, nxt, acts, rew, term = [], [], [], [], []
    for s in range(2):
        for a in JOINT:
            s2, r, t = toy_step(s, a)
            states.append(s)
            nxt.append(0 if s2 is None else s2)
            acts.append(a)
            rew.append(r)
            term.append(t)
    return TransitionBatch(np.array(states), np.array(nxt), np.array(acts), np.array(rew), np.array(term))


def brute_force_targets(q_table, batch, gamma):
    """Per-dimension targets computed entry by entry from a tabular Q (list of per-dim arrays)."""
    V = q_table[0].shape[-1]
    d = len(q_table)
    y = np.zeros((len(batch), d))
    for n in range(len(batch)):
        s, a = int(batch.context[n]), batch.actions[n]
        for i in range(d - 1):
            row = s
            for j in range(i + 1):
                row = row * V + int(a[j])
            y[n, i] = max(q_table[i + 1][row, b] for b in range(V))
        boot = 0.0 if batch.terminal[n] else max(q_table[0][int(batch.next_context[n]), b] for b in range(V))
        y[n, d - 1] = batch.rewards[n] + gamma * boot
    return np.clip(y, 0.0, 1.0)
