"""Wisconsin Card Sorting Test environment, A2C agent loss and task metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .core import ActorCriticNet

# row i is the one-hot code for index i, highest bit first
CODE_TABLE = np.array([[0, 0, 0, 1], [0, 0, 1, 0], [0, 1, 0, 0], [1, 0, 0, 0]], dtype=np.float64)
RULES = {"color": 0, "shape": 1, "number": 2}
N_ACTIONS = 4
EPISODE_LEN = 16
SOLVE_STREAK = 48
SWITCH_WINDOW = 50


def encode_card(code_indices) -> np.ndarray:
    return CODE_TABLE[list(code_indices)].reshape(-1)


def decode_card(encoding) -> list[int]:
    rows = np.asarray(encoding).reshape(3, 4)
    return [int(np.flatnonzero(CODE_TABLE @ r == 1)[0]) for r in rows]


@dataclass
class Card:
    code_indices: tuple[int, int, int]
    encoding: np.ndarray
    target: int
    target_prev: int | None


@dataclass
class TaskRecord:
    task_index: int
    rule: int
    updates_to_solve: int | None
    perseveration_errors: int
    errors: int
    episodes: int
    diverged: bool = False

    @property
    def solved(self) -> bool:
        return self.updates_to_solve is not None


class WCST:
    """Card generator plus solve/switch bookkeeping.

    A task is solved after ``SOLVE_STREAK`` consecutive correct answers.  The
    rule then switches at the end of an episode drawn uniformly from the next
    1..``SWITCH_WINDOW`` episodes; nothing in the observation reveals this.
    """

    def __init__(self, seed: int = 0, allow_same_task: bool = False,
                 switch_window: int = SWITCH_WINDOW, episode_len: int = EPISODE_LEN,
                 solve_streak: int = SOLVE_STREAK):
        self.rng = np.random.default_rng(seed)
        self.allow_same_task = allow_same_task
        self.switch_window = switch_window
        self.episode_len = episode_len
        self.solve_streak = solve_streak

        self.current_rule: int | None = None
        self.old_rule: int | None = None
        self.consecutive_correct = 0
        self.episode_card_index = 0
        self.episodes_until_switch: int | None = None
        self.total_trials = 0
        self.total_tasks = 0
        self.current_trial_task = 0
        self.tasks_taken: list[int] = []
        self.solved = False
        self.pending: Card | None = None

    def next_task(self, allow_same_task: bool | None = None) -> None:
        allow = self.allow_same_task if allow_same_task is None else allow_same_task
        self.old_rule = self.current_rule
        rule = int(self.rng.integers(3))
        while rule == self.old_rule and not allow:
            rule = int(self.rng.integers(3))
        self.current_rule = rule
        self.consecutive_correct = 0
        self.current_trial_task = 0
        self.episodes_until_switch = None
        self.solved = False
        self.total_tasks += 1
        self.tasks_taken.append(rule)

    def next_card(self) -> tuple[np.ndarray, int, int | None]:
        if self.current_rule is None:
            self.next_task()
        codes = tuple(int(c) for c in self.rng.choice(4, size=3, replace=False))
        target = codes[self.current_rule]
        target_prev = codes[self.old_rule] if self.old_rule is not None else None
        enc = encode_card(codes)
        self.pending = Card(codes, enc, target, target_prev)
        self.current_trial_task += 1
        self.total_trials += 1
        return enc, target, target_prev

    def step(self, action: int) -> tuple[float, bool, bool]:
        """Answer the pending card: ``(reward, solved_now, perseveration)``."""
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} out of range 0..{N_ACTIONS - 1}")
        card = self.pending
        if card is None:
            raise RuntimeError("step called without a pending card")
        self.pending = None
        correct = action == card.target
        persev = (not correct) and card.target_prev is not None and action == card.target_prev
        solved_now = False
        if correct:
            self.consecutive_correct = min(self.consecutive_correct + 1, self.solve_streak)
            if self.consecutive_correct == self.solve_streak and not self.solved:
                self.solved = True
                solved_now = True
                self.episodes_until_switch = int(self.rng.integers(1, self.switch_window + 1))
        else:
            self.consecutive_correct = 0
        self.episode_card_index = (self.episode_card_index + 1) % self.episode_len
        return (1.0 if correct else -1.0), solved_now, persev

    def end_episode(self) -> bool:
        """Advance the switch schedule; returns True when a new task starts."""
        if self.episodes_until_switch is None:
            return False
        self.episodes_until_switch -= 1
        if self.episodes_until_switch <= 0:
            self.next_task()
            return True
        return False


# -- A2C ------------------------------------------------------------------------


@dataclass
class A2CConfig:
    discount: float = 0.9
    value_coef: float = 0.5
    entropy_coef: float = 0.01


def discounted_returns(rewards, discount: float) -> np.ndarray:
    """Per-step return within one terminal rollout (no bootstrap)."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + discount * acc
        out[i] = acc
    return out


def a2c_loss(tape: Tape, logits: Tensor, values: Tensor, actions, rewards,
             cfg: A2CConfig = A2CConfig()) -> tuple[Tensor, dict]:
    """Actor-critic loss for one rollout.

    ``policy = -mean(adv * log pi(a))`` with the advantage held constant,
    ``value = mean((R - V)^2)``, ``entropy = mean(H(pi))``; total is
    ``policy + value_coef * value - entropy_coef * entropy``.
    """
    actions = np.asarray(actions, dtype=np.int64)
    if actions.size == 0:
        raise ValueError("empty trajectory")
    n = actions.size
    returns = discounted_returns(np.asarray(rewards, dtype=np.float64), cfg.discount)
    v = tape.reshape(values, (n,))
    adv = returns - v.value
    logp = tape.log_softmax(logits)
    policy = tape.scale(tape.mean(tape.mul(tape.pick(logp, actions), adv)), -1.0)
    value = tape.mean(tape.square(tape.sub(returns, v)))
    entropy = tape.scale(tape.sum(tape.mul(tape.exp(logp), logp)), -1.0 / n)
    total = tape.sub(tape.add(policy, tape.scale(value, cfg.value_coef)),
                     tape.scale(entropy, cfg.entropy_coef))
    parts = {"policy": float(policy.value), "value": float(value.value),
             "entropy": float(entropy.value), "advantage": adv}
    return total, parts


@dataclass
class Episode:
    """Cards issued at the start of an episode.  Actions are sampled in ``wcst_loss``."""
    env: WCST
    rng: np.random.Generator
    cards: list[Card]
    a2c: A2CConfig = field(default_factory=A2CConfig)


def draw_episode(env: WCST, rng: np.random.Generator, a2c: A2CConfig | None = None) -> Episode:
    cards = []
    for _ in range(env.episode_len):
        env.next_card()
        cards.append(env.pending)
        env.pending = None
    return Episode(env, rng, cards, a2c or A2CConfig())


def wcst_loss(tape: Tape, net: ActorCriticNet, ep: Episode) -> tuple[Tensor, dict]:
    """Play one episode with the current weights and return its A2C loss."""
    logits, values = net.forward(tape, np.stack([c.encoding for c in ep.cards]))
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    actions, rewards = [], []
    n_persev = n_correct = 0
    solved_at = None
    for i, card in enumerate(ep.cards):
        p = probs[i]
        if not np.all(np.isfinite(p)):
            a = int(ep.rng.integers(N_ACTIONS))
        else:
            a = int(ep.rng.choice(N_ACTIONS, p=p))
        ep.env.pending = card
        r, solved_now, persev = ep.env.step(a)
        actions.append(a)
        rewards.append(r)
        n_persev += persev
        n_correct += r > 0
        if solved_now:
            solved_at = i
    loss, parts = a2c_loss(tape, logits, values, actions, rewards, ep.a2c)
    info = {"correct": n_correct, "total": len(actions), "perseveration": n_persev,
            "solved": solved_at is not None, **{k: v for k, v in parts.items() if k != "advantage"}}
    return loss, info


def hidden_all_zero(net: ActorCriticNet, x) -> bool:
    """True when some trunk layer outputs exactly zero for every unit and input."""
    tape = Tape()
    acts = net.trunk(tape, x)
    tape.truncate()
    return any(not np.any(a.value) for a in acts)


# -- agent loop -------------------------------------------------------------------


ALL_CARDS = np.stack([encode_card(c) for c in
                      [(a, b, c) for a in range(4) for b in range(4) for c in range(4)
                       if len({a, b, c}) == 3]])


def make_agent_net(seed: int, hidden=(256, 256), fast: bool = True, max_restarts: int = 100) -> ActorCriticNet:
    """Build the actor-critic net, moving to the next seed while any trunk layer is dead on all cards."""
    for s in range(seed, seed + max_restarts):
        net = ActorCriticNet(ALL_CARDS.shape[1], list(hidden), N_ACTIONS, seed=s, fast=fast)
        if not hidden_all_zero(net, ALL_CARDS):
            return net
    raise RuntimeError(f"no live initialization within {max_restarts} seeds from {seed}")


def run_agent(learner, env: WCST, rng: np.random.Generator, n_tasks: int,
              max_episodes_per_task: int = 1000, a2c: A2CConfig | None = None,
              on_task_start=None, sink=None) -> list[TaskRecord]:
    """Drive ``learner`` (anything with ``step(batch, t)``) through ``n_tasks`` rule switches.

    ``updates_to_solve`` counts every learner step (gradient or fast-weight)
    from the start of a task to the episode that solves it.  A task that is
    not solved within ``max_episodes_per_task`` episodes is closed with
    ``updates_to_solve = None`` and the rule is switched anyway.
    """
    records: list[TaskRecord] = []
    if env.current_rule is None:
        env.next_task()
    t = 0
    while len(records) < n_tasks:
        task_index = len(records)
        if on_task_start is not None:
            on_task_start(task_index)
        rule = env.current_rule
        episodes = persev = errors = 0
        solved_after = None
        while True:
            ep = draw_episode(env, rng, a2c)
            t += 1
            rec = learner.step(ep, t)
            episodes += 1
            persev += rec.info["perseveration"]
            errors += rec.total - rec.correct
            if rec.info["solved"]:
                solved_after = episodes
            switched = env.end_episode()
            if not switched and solved_after is None and episodes >= max_episodes_per_task:
                env.next_task()
                switched = True
            if switched:
                break
        task = TaskRecord(task_index, rule, solved_after, persev, errors, episodes,
                          bool(getattr(learner, "diverged", False)))
        records.append(task)
        if sink is not None:
            sink(task)
    return records
