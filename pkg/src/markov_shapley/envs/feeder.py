"""Radial feeder voltage control with the chained two-bus approximation.

Bus 0 is the slack bus at ``v0``. Line k connects bus k-1 to bus k and
carries the net demand of every bus downstream of it. Each bus voltage
solves the two-bus drop equation

    (v_up - v) * v = r * dp + x * dq

on its high-voltage root. Each PV inverter is one agent; its action
a in [-c, c] sets q = a * sqrt(s_max^2 - p_pv^2).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, VoltageCollapseError
from .base import TabularEnv

BARRIERS = ("l1", "l2", "bowl")
BOWL_SLOPE, BOWL_OFFSET, BOWL_SCALE, BOWL_LIFT = 2.0, 0.095, 0.01, 0.04
BOWL_SIGMA = 0.1
BOWL_KNEE = 0.05


def barrier_eval(kind, v, v_ref=1.0):
    """Voltage barrier l_v for a single voltage or an array."""
    if np.any(np.asarray(v) <= 0):
        raise ValueError("voltage must be positive")
    dev = np.abs(np.asarray(v, dtype=float) - v_ref)
    if kind == "l1":
        out = dev
    elif kind == "l2":
        out = dev ** 2
    elif kind == "bowl":
        density = np.exp(-0.5 * (dev / BOWL_SIGMA) ** 2) / (BOWL_SIGMA * math.sqrt(2 * math.pi))
        out = np.where(dev > BOWL_KNEE, BOWL_SLOPE * dev - BOWL_OFFSET, -BOWL_SCALE * density + BOWL_LIFT)
    else:
        raise ValueError(f"unknown barrier {kind!r}; choose from {BARRIERS}")
    return float(out) if np.ndim(out) == 0 else out


def solve_bus_voltage(v_upstream, r, x, dp, dq):
    """High-voltage root of (v_up - v) v = r dp + x dq."""
    k = r * dp + x * dq
    disc = v_upstream * v_upstream - 4.0 * k
    if disc < 0:
        raise VoltageCollapseError(f"no voltage solution: v_up^2 - 4K = {disc:.4g} < 0")
    return (v_upstream + math.sqrt(disc)) / 2.0


def zero_deviation_q(r, x, p_load, p_pv, q_load):
    """PV reactive power that makes r dp + x dq vanish on a two-bus line."""
    return (r / x) * (p_load - p_pv) + q_load


def droop_control(v, k=5.0, q_min=-1.0, q_max=1.0, v_ref=1.0):
    """q = clamp(-k (v - v_ref), q_min, q_max)."""
    return min(q_max, max(q_min, -k * (v - v_ref)))


@dataclass(frozen=True)
class FeederModel:
    n_buses: int = 3
    r: tuple = (0.03, 0.03)
    x: tuple = (0.03, 0.03)
    v0: float = 1.0
    pv_buses: tuple = (1, 2)
    s_max: tuple = (1.2, 1.2)
    c: float = 1.0
    barrier: str = "bowl"
    alpha_reward: float = 0.1
    band: tuple = (0.95, 1.05)
    penalty: float = -200.0
    loading_limit: float = 0.2   # |v - 1| beyond this counts as collapse
    v_ref: float = 1.0

    def __post_init__(self):
        lines = self.n_buses - 1
        if self.n_buses < 2:
            raise ConfigError("a feeder needs at least two buses")
        if len(self.r) != lines or len(self.x) != lines:
            raise ConfigError(f"need {lines} line impedances")
        if min(self.r) <= 0 or min(self.x) <= 0:
            raise ConfigError("line resistance and reactance must be positive")
        if len(self.s_max) != len(self.pv_buses):
            raise ConfigError("one s_max per PV bus")
        if any(not 1 <= b < self.n_buses for b in self.pv_buses):
            raise ConfigError("PV buses must be non-slack buses")
        if self.barrier not in BARRIERS:
            raise ConfigError(f"unknown barrier {self.barrier!r}")
        if self.c <= 0:
            raise ConfigError("action range c must be positive")

    @property
    def n_agents(self):
        return len(self.pv_buses)

    @classmethod
    def chain(cls, n_buses, r=0.03, x=0.03, s_max=1.2, **kw):
        """Uniform chain with a PV inverter at every non-slack bus."""
        lines = n_buses - 1
        return cls(n_buses=n_buses, r=(r,) * lines, x=(x,) * lines,
                   pv_buses=tuple(range(1, n_buses)), s_max=(s_max,) * lines, **kw)


@dataclass(frozen=True, eq=False)
class FeederTrace:
    """Per-step injections at the non-slack buses, arrays (T, n_buses - 1)."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_pv: np.ndarray

    def __len__(self):
        return self.p_load.shape[0]

    def row(self, t):
        return self.p_load[t], self.q_load[t], self.p_pv[t]


def synthetic_trace(n_buses=3, steps=240, pv_peak=1.3, load_base=0.15, seed=None):
    """Half-day diurnal profile at 3-minute steps (06:00 to 18:00).

    PV follows a clipped sine between 06:30 and 17:30; loads carry a
    morning and an evening bump. ``seed`` adds small deterministic noise.
    """
    m = n_buses - 1
    hours = 6.0 + 12.0 * np.arange(steps) / steps
    sun = np.clip(np.sin(np.pi * (hours - 6.5) / 11.0), 0.0, None)
    sun[(hours < 6.5) | (hours > 17.5)] = 0.0
    bump = 0.08 * np.exp(-((hours - 8.0) / 1.2) ** 2) + 0.12 * np.exp(-((hours - 17.5) / 1.0) ** 2)
    scale = np.linspace(1.0, 0.9, m)
    p_pv = pv_peak * sun[:, None] * scale[None, :]
    p_load = (load_base + bump)[:, None] * np.linspace(1.0, 1.2, m)[None, :]
    if seed is not None:
        rng = np.random.default_rng(seed)
        p_load = p_load * (1 + 0.02 * rng.standard_normal(p_load.shape))
    q_load = 0.25 * p_load
    return FeederTrace(np.round(p_load, 6), np.round(q_load, 6), np.round(p_pv, 6))


def save_trace(trace, path):
    m = trace.p_load.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{k}_{b}" for b in range(1, m + 1) for k in ("p_load", "q_load", "p_pv")])
        for t in range(len(trace)):
            row = [t]
            for j in range(m):
                row += [repr(float(trace.p_load[t, j])), repr(float(trace.q_load[t, j])),
                        repr(float(trace.p_pv[t, j]))]
            w.writerow(row)


def load_trace(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from exc
    header, body = rows[0], rows[1:]
    if (len(header) - 1) % 3 or header[0] != "t":
        raise ConfigError("trace header must be t followed by p_load/q_load/p_pv triples")
    data = np.array([[float(v) for v in r[1:]] for r in body])
    return FeederTrace(data[:, 0::3], data[:, 1::3], data[:, 2::3])


def default_trace_path():
    return Path(__file__).resolve().parent.parent / "data" / "benign_trace.csv"


# Benign 3-bus setting used for tabular training: midday PV pushes the
# uncontrolled feeder above 1.05 p.u., droop keeps it in band, and the
# 5-point action grid over [-0.3, 0.3] never collapses the voltage.
BENIGN_MODEL = dict(r=0.03, x=0.08, s_max=1.43, c=0.3, alpha_reward=0.02)
BENIGN_POINTS = 5


def benign_model(**overrides):
    kw = dict(BENIGN_MODEL)
    kw.update(overrides)
    return FeederModel.chain(3, **kw)


def benign_trace():
    return load_trace(default_trace_path())


def q_capacity(model, p_pv):
    """sqrt(s_max^2 - p_pv^2) per PV."""
    out = []
    for smax, p in zip(model.s_max, p_pv):
        if p > smax + 1e-12:
            raise ConfigError(f"PV output {p} exceeds s_max {smax}")
        out.append(math.sqrt(max(0.0, smax * smax - p * p)))
    return np.array(out)


@dataclass(frozen=True, eq=False)
class FlowResult:
    voltages: np.ndarray     # all buses, slack first
    dp: np.ndarray           # per line
    dq: np.ndarray
    v_send: np.ndarray


def power_flow(model, p_load, q_load, p_pv, q_pv):
    """Chain the two-bus solution down the feeder.

    ``q_pv`` holds one value per PV agent. Raises VoltageCollapseError.
    """
    m = model.n_buses - 1
    net_p = np.asarray(p_load, dtype=float) - _per_bus(model, p_pv, pv_indexed=False)
    q_inj = np.zeros(m)
    for k, b in enumerate(model.pv_buses):
        q_inj[b - 1] += q_pv[k]
    net_q = np.asarray(q_load, dtype=float) - q_inj
    dp = np.cumsum(net_p[::-1])[::-1]
    dq = np.cumsum(net_q[::-1])[::-1]
    v = np.empty(model.n_buses)
    v[0] = model.v0
    for k in range(m):
        v[k + 1] = solve_bus_voltage(v[k], model.r[k], model.x[k], dp[k], dq[k])
    return FlowResult(v, dp, dq, v[:-1].copy())


def _per_bus(model, values, pv_indexed=True):
    values = np.asarray(values, dtype=float)
    if not pv_indexed:
        return values
    out = np.zeros(model.n_buses - 1)
    for k, b in enumerate(model.pv_buses):
        out[b - 1] = values[k]
    return out


def power_loss(model, dp, dq, v_send):
    """sum over lines of r (dp^2 + dq^2) / v_send^2."""
    return math.fsum(r * (p * p + q * q) / (v * v) for r, p, q, v in zip(model.r, dp, dq, v_send))


def reward_eval(model, voltages, q_pv):
    """Returns (reward, terminal) for controlled-bus voltages and PV q."""
    v = np.asarray(voltages, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(np.abs(v - model.v_ref) > model.loading_limit):
        return model.penalty, True
    volt = float(np.mean(barrier_eval(model.barrier, v, model.v_ref)))
    qpen = model.alpha_reward * float(np.mean(np.abs(q_pv)))
    return -volt - qpen, False


def in_band(model, voltages):
    v = np.asarray(voltages, dtype=float)
    return bool(np.all(np.isfinite(v)) and np.all(v >= model.band[0]) and np.all(v <= model.band[1]))


@dataclass(frozen=True, eq=False)
class FeederStep:
    observations: tuple
    reward: float
    terminal: bool
    voltages: np.ndarray
    q_pv: np.ndarray
    loss: float
    in_band: bool


def feeder_step(model, actions, row, prev_q=None):
    """Apply PV actions (ratios in [-c, c]) for one trace row."""
    p_load, q_load, p_pv = (np.asarray(a, dtype=float) for a in row)
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (model.n_agents,):
        raise ValueError(f"expected {model.n_agents} actions")
    if np.any(np.abs(actions) > model.c + 1e-12):
        raise ValueError(f"actions must lie in [-{model.c}, {model.c}]")
    pv_p = np.array([p_pv[b - 1] for b in model.pv_buses])
    q_pv = actions * q_capacity(model, pv_p)
    return _finish_step(model, p_load, q_load, p_pv, q_pv, prev_q)


def _finish_step(model, p_load, q_load, p_pv, q_pv, prev_q):
    prev_q = np.zeros(model.n_agents) if prev_q is None else np.asarray(prev_q, dtype=float)
    try:
        flow = power_flow(model, p_load, q_load, p_pv, q_pv)
    except VoltageCollapseError:
        nan = np.full(model.n_buses, np.nan)
        obs = tuple((np.nan,) * 6 for _ in model.pv_buses)
        return FeederStep(obs, model.penalty, True, nan, q_pv, float("nan"), False)
    controlled = flow.voltages[1:]
    reward, terminal = reward_eval(model, controlled, q_pv)
    loss = power_loss(model, flow.dp, flow.dq, flow.v_send)
    obs = tuple(
        (flow.voltages[b], p_load[b - 1], q_load[b - 1], p_pv[b - 1], prev_q[k], flow.voltages[b - 1])
        for k, b in enumerate(model.pv_buses))
    return FeederStep(obs, reward, terminal, flow.voltages, q_pv, loss, in_band(model, controlled))


def droop_step(model, row, k=5.0, max_iters=200, tol=1e-12):
    """Droop baseline at its static equilibrium q = clamp(-k (v - 1)).

    Caps are the inverter's dynamic limits c * sqrt(s_max^2 - p_pv^2).
    Solved by damped fixed-point iteration from q = 0.
    """
    p_load, q_load, p_pv = (np.asarray(a, dtype=float) for a in row)
    pv_p = np.array([p_pv[b - 1] for b in model.pv_buses])
    cap = model.c * q_capacity(model, pv_p)
    q = np.zeros(model.n_agents)
    for _ in range(max_iters):
        v = power_flow(model, p_load, q_load, p_pv, q).voltages
        target = np.array([droop_control(v[b], k, -cap[j], cap[j], model.v_ref)
                           for j, b in enumerate(model.pv_buses)])
        new = 0.5 * q + 0.5 * target
        if np.max(np.abs(new - q)) <= tol:
            q = new
            break
        q = new
    return _finish_step(model, p_load, q_load, p_pv, q, None)


@dataclass
class FeederRun:
    """Per-step results of one pass over a trace plus CR/PL summaries."""

    steps: list = field(default_factory=list)

    @property
    def control_rate(self):
        return float(np.mean([s.in_band for s in self.steps])) if self.steps else 0.0

    @property
    def power_loss(self):
        losses = [s.loss for s in self.steps if np.isfinite(s.loss)]
        return float(np.mean(losses)) if losses else float("nan")

    @property
    def total_reward(self):
        return math.fsum(s.reward for s in self.steps)


class FeederSimulator:
    """Steps a model along a trace and accumulates CR/PL counters."""

    def __init__(self, model, trace, episode_len=240):
        if episode_len > len(trace):
            raise ConfigError(f"trace has {len(trace)} rows, episode needs {episode_len}")
        self.model = model
        self.trace = trace
        self.episode_len = int(episode_len)

    def run(self, controller):
        """``controller(t, row, prev_q)`` returns PV actions, or the string
        ``'droop'`` / ``'none'`` for the built-in baselines."""
        run = FeederRun()
        prev_q = np.zeros(self.model.n_agents)
        for t in range(self.episode_len):
            row = self.trace.row(t)
            if controller == "droop":
                step = droop_step(self.model, row)
            elif controller == "none":
                step = feeder_step(self.model, np.zeros(self.model.n_agents), row, prev_q)
            else:
                step = feeder_step(self.model, controller(t, row, prev_q), row, prev_q)
            run.steps.append(step)
            prev_q = step.q_pv
            if step.terminal:
                break
        return run


def action_grid(c=1.0, points=5):
    """Odd grid of ``points`` ratios over [-c, c] including 0."""
    if points < 3 or points % 2 == 0:
        raise ValueError("action grid needs an odd number of points >= 3")
    return np.linspace(-c, c, points)


class FeederEnv(TabularEnv):
    """The feeder as a finite cooperative game for tabular learning.

    State is the time index along the trace; each agent picks an index into
    ``action_grid``. Injections follow the trace regardless of actions, so
    ``gamma`` defaults to 0. ``reward_shift`` is added to every reward so
    that non-collapse rewards are nonnegative. With ``random_start`` each
    episode begins at a uniformly drawn time index and wraps around the
    trace, still lasting ``episode_len`` steps, so every time index is
    visited equally often in expectation.
    """

    def __init__(self, model, trace, episode_len=240, points=5, reward_shift=1.0, gamma=0.0,
                 random_start=True):
        self.model = model
        self.trace = trace
        self.episode_len = int(episode_len)
        self.grid = action_grid(model.c, points)
        self.actions_per_agent = (len(self.grid),) * model.n_agents
        self.n_states = self.episode_len
        self.gamma = float(gamma)
        self.reward_shift = float(reward_shift)
        self.random_start = bool(random_start)
        n_joint = len(self.grid) ** model.n_agents
        self.reward_table = np.empty((self.episode_len, n_joint))
        self.terminal_table = np.empty((self.episode_len, n_joint), dtype=bool)
        self.band_table = np.empty((self.episode_len, n_joint), dtype=bool)
        self.loss_table = np.empty((self.episode_len, n_joint))
        for t in range(self.episode_len):
            row = trace.row(t)
            for j in range(n_joint):
                step = feeder_step(model, self.grid[list(self.decode(j))], row)
                self.reward_table[t, j] = step.reward
                self.terminal_table[t, j] = step.terminal
                self.band_table[t, j] = step.in_band
                self.loss_table[t, j] = step.loss
        self._t = 0
        self._elapsed = 0

    def decode(self, j):
        k = len(self.grid)
        return tuple((j // k ** i) % k for i in range(self.model.n_agents))

    def encode(self, actions):
        k = len(self.grid)
        return int(sum(int(a) * k ** i for i, a in enumerate(actions)))

    def reset(self, rng):
        self._t = int(rng.integers(self.episode_len)) if self.random_start else 0
        self._elapsed = 0
        return self._t

    def step(self, actions, rng):
        j = self.encode(actions)
        t = self._t
        reward = float(self.reward_table[t, j]) + self.reward_shift
        self._elapsed += 1
        terminal = bool(self.terminal_table[t, j]) or self._elapsed >= self.episode_len
        self._t = (t + 1) % self.episode_len
        return self._t, reward, terminal, False

    def evaluate(self, policy):
        """CR and PL of a per-agent index policy (T, n) along the trace."""
        joint = [self.encode(policy[t]) for t in range(self.episode_len)]
        band = [self.band_table[t, j] for t, j in enumerate(joint)]
        loss = [self.loss_table[t, j] for t, j in enumerate(joint)]
        return float(np.mean(band)), float(np.mean(loss))

    def best_feasible_policy(self):
        """Exhaustive search: per step, the in-band joint action with the
        highest reward (None where no grid action keeps all buses in band)."""
        out = []
        for t in range(self.episode_len):
            ok = np.flatnonzero(self.band_table[t])
            if ok.size == 0:
                out.append(None)
                continue
            j = ok[np.argmax(self.reward_table[t, ok])]
            out.append(self.decode(j))
        return out
