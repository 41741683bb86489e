"""Grid predator-prey with a miscoordination penalty.

The grid is a torus. The state records each predator's offset from the
prey, so the state space is (width * height) ** n_predators. Actions per
predator: 0 stay (null), 1 up, 2 down, 3 left, 4 right, 5 capture.

A capture succeeds when at least two predators adjacent to the prey choose
the capture action in the same step (+capture_reward, episode ends). A
lone adjacent predator choosing capture earns ``penalty``. Capture actions
away from the prey do nothing. Predators cannot step onto the prey; the
prey moves uniformly among staying and its four neighbours, and stays put
if the chosen cell holds a predator.
"""
from __future__ import annotations

import itertools

import numpy as np

from .base import TabularEnv

STAY, UP, DOWN, LEFT, RIGHT, CAPTURE = range(6)
MOVES = {STAY: (0, 0), UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0), CAPTURE: (0, 0)}
PREY_MOVES = ((0, 0), (0, -1), (0, 1), (-1, 0), (1, 0))


class GridPredatorPrey(TabularEnv):
    def __init__(self, width=4, height=4, n_predators=2, capture_reward=10.0, penalty=-1.0,
                 max_steps=25, gamma=0.9):
        if width < 3 or height < 3:
            raise ValueError("grid must be at least 3x3")
        self.width, self.height = int(width), int(height)
        self.n_predators = int(n_predators)
        self.capture_reward = float(capture_reward)
        self.penalty = float(penalty)
        self.max_steps = int(max_steps)
        self.gamma = float(gamma)
        self.actions_per_agent = (6,) * self.n_predators
        self.n_cells = self.width * self.height
        self.n_states = self.n_cells ** self.n_predators
        self._offsets = None
        self._t = 0

    # encoding -----------------------------------------------------------
    def encode(self, offsets):
        idx = 0
        for k, (dx, dy) in enumerate(offsets):
            idx += ((dy % self.height) * self.width + dx % self.width) * self.n_cells ** k
        return idx

    def decode(self, index):
        out = []
        for _ in range(self.n_predators):
            cell = index % self.n_cells
            index //= self.n_cells
            out.append((cell % self.width, cell // self.width))
        return tuple(out)

    def valid_states(self):
        """States with no predator on the prey's cell."""
        return [s for s in range(self.n_states) if (0, 0) not in self.decode(s)]

    def adjacent(self, offset):
        dx, dy = offset[0] % self.width, offset[1] % self.height
        return (dy == 0 and dx in (1, self.width - 1)) or (dx == 0 and dy in (1, self.height - 1))

    # dynamics -----------------------------------------------------------
    def outcomes(self, state, actions):
        """All (probability, next_state, reward, terminal) branches of a step."""
        offsets = self.decode(state)
        attempts = sum(1 for off, a in zip(offsets, actions) if a == CAPTURE and self.adjacent(off))
        if attempts >= 2:
            return [(1.0, state, self.capture_reward, True)]
        reward = self.penalty if attempts == 1 else 0.0
        moved = []
        for (dx, dy), a in zip(offsets, actions):
            mx, my = MOVES[a]
            nxt = ((dx + mx) % self.width, (dy + my) % self.height)
            moved.append((dx % self.width, dy % self.height) if nxt == (0, 0) else nxt)
        branches = {}
        p = 1.0 / len(PREY_MOVES)
        for mx, my in PREY_MOVES:
            target = (mx % self.width, my % self.height)
            if (mx, my) != (0, 0) and target in moved:
                mx, my = 0, 0
            nxt = self.encode([(dx - mx, dy - my) for dx, dy in moved])
            branches[nxt] = branches.get(nxt, 0.0) + p
        return [(prob, s2, reward, False) for s2, prob in sorted(branches.items())]

    def reset(self, rng):
        self._t = 0
        cells = [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) != (0, 0)]
        picks = rng.integers(len(cells), size=self.n_predators)
        self._state = self.encode([cells[k] for k in picks])
        return self._state

    def step(self, actions, rng):
        branches = self.outcomes(self._state, actions)
        if len(branches) == 1:
            _, nxt, reward, terminal = branches[0]
        else:
            u = rng.random()
            acc = 0.0
            for prob, nxt, reward, terminal in branches:
                acc += prob
                if u < acc:
                    break
        self._t += 1
        self._state = nxt
        truncated = not terminal and self._t >= self.max_steps
        return nxt, reward, terminal, truncated

    # exact analysis -----------------------------------------------------
    def capture_probability(self, policy=None, horizon=None):
        """Probability of a capture within ``horizon`` steps from a uniform reset.

        ``policy`` is an (S, n) array of per-agent actions; ``None`` means
        the best joint action at every (state, steps-left), i.e. the
        optimum over all policies. Computed by exact backward induction.
        """
        horizon = self.max_steps if horizon is None else int(horizon)
        states = self.valid_states()
        joint = list(itertools.product(range(6), repeat=self.n_predators))
        table = {}
        for s in states:
            acts = joint if policy is None else [tuple(int(a) for a in policy[s])]
            table[s] = [(acts_k, self.outcomes(s, acts_k)) for acts_k in acts]
        value = {s: 0.0 for s in states}
        for _ in range(horizon):
            new = {}
            for s in states:
                best = 0.0
                for _, branches in table[s]:
                    p = sum(prob * (1.0 if term else value[s2]) for prob, s2, _, term in branches)
                    best = max(best, p)
                new[s] = best
            value = new
        return float(np.mean([value[s] for s in states]))
