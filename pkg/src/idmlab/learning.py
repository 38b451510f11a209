"""BC, IDM learning, VM-IDM composition and IDM labeling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .datasets import idm_relabel
from .gridworld import N_ACTIONS, DomainError, ExpertPolicy, Grid, Pos, Transition
from .models import ArchSpec, Model, build

log = logging.getLogger(__name__)

BATCH_RULES = {"min32": 32, "min512": 512, "full": None}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_rule: str = "full"
    max_epochs: int = 2000
    early_stop_loss: float = 1e-4
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.batch_rule not in BATCH_RULES:
            raise ValueError(f"unknown batch rule {self.batch_rule!r}")

    def batch_size(self, n: int) -> int:
        cap = BATCH_RULES[self.batch_rule]
        return n if cap is None else min(cap, n)


def default_config(kind: str, **overrides) -> TrainConfig:
    """Learning rate and batch rule per architecture for the maze experiments."""
    if kind in ("CNN1", "CNN5"):
        base = TrainConfig(lr=1e-4, batch_rule="min32")
    else:
        base = TrainConfig(lr=1e-3, batch_rule="full")
    return replace(base, **overrides)


@dataclass
class TrainResult:
    model: Model
    epochs_run: int
    final_loss: float
    history: list[dict] = field(default_factory=list)


def fit_classifier(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    evaluate: Callable[[Model], dict] | None = None,
) -> TrainResult:
    """Minimise mean cross-entropy of ``y`` given ``x`` with Adam."""
    n = len(y)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = ad.Adam(model.params, lr=config.lr)
    rng = np.random.default_rng(config.seed + 7919)
    bs = config.batch_size(n)
    history = []
    epoch_loss = float("inf")
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = np.arange(n) if bs == n else rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            opt.zero_grad()
            loss = ad.cross_entropy_loss(model.logits(x[idx]), y[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        epoch_loss = total / n
        record = {"epoch": epoch, "train_loss": epoch_loss}
        if evaluate is not None and config.eval_every and epoch % config.eval_every == 0:
            record.update(evaluate(model))
        history.append(record)
        if not np.isfinite(epoch_loss):
            raise ad.TrainingError(f"training loss diverged at epoch {epoch}")
        if epoch_loss < config.early_stop_loss:
            break
    if evaluate is not None and config.eval_every and epoch % config.eval_every:
        history[-1].update(evaluate(model))
    return TrainResult(model, epoch, epoch_loss, history)


def _labeled(records) -> tuple[list[Transition], np.ndarray]:
    records = list(records)
    if not records:
        raise ValueError("labeled dataset is empty")
    if any(t.a is None for t in records):
        raise ValueError("every record needs an action label")
    return records, np.array([t.a for t in records], dtype=np.int64)


def _image_shape(spec: ArchSpec, grid: Grid):
    return (grid.height, grid.width) if spec.state_format == "img" else None


def train_bc(labeled, spec: ArchSpec, config: TrainConfig, grid: Grid, evaluate=None) -> TrainResult:
    if spec.role != "policy":
        raise ValueError("behavior cloning trains a policy-role model")
    records, y = _labeled(labeled)
    model = build(spec, config.seed, _image_shape(spec, grid))
    return fit_classifier(model, model.encode(records, grid), y, config, evaluate)


def train_idm(labeled, spec: ArchSpec, config: TrainConfig, grid: Grid, evaluate=None) -> TrainResult:
    if spec.role != "idm":
        raise ValueError("IDM learning trains an idm-role model")
    records, y = _labeled(labeled)
    model = build(spec, config.seed, _image_shape(spec, grid))
    return fit_classifier(model, model.encode(records, grid), y, config, evaluate)


# policies -------------------------------------------------------------------

@dataclass
class ComposedPolicy:
    """pi(a|s) = sum_s' h(a|s,s') v(s'|s) with a deterministic or sampled VM.

    ``vm`` maps a state (and goal, for goal-conditioned VMs) to the next
    state. ``idm`` is a trained idm-role model or an exact (s, s') table.
    """

    vm: Callable
    idm: object
    grid: Grid
    goal_conditioned_vm: bool = False

    def _next(self, t: Transition) -> Pos:
        s2 = self.vm(t.s, t.goal) if self.goal_conditioned_vm else self.vm(t.s)
        if not self.grid.is_free(s2):
            raise DomainError(f"video model produced infeasible state {s2}")
        return s2

    def action_probs(self, records) -> np.ndarray:
        pairs = [Transition(t.s, None, self._next(t), t.goal) for t in records]
        if isinstance(self.idm, dict):
            try:
                return np.stack([self.idm[(t.s, t.s_next)] for t in pairs])
            except KeyError as exc:
                raise DomainError(f"pair {exc.args[0]} missing from IDM table") from None
        return self.idm.predict(self.idm.encode(pairs, self.grid))


def compose_vm_idm(vm, idm, grid: Grid, goal_conditioned_vm: bool = False) -> ComposedPolicy:
    if isinstance(idm, Model) and idm.spec.role != "idm":
        raise DomainError("compose_vm_idm needs an idm-role model")
    return ComposedPolicy(vm, idm, grid, goal_conditioned_vm)


def action_probs(policy, records, grid: Grid) -> np.ndarray:
    """Action distributions of any supported policy at the records' states."""
    records = list(records)
    if isinstance(policy, ComposedPolicy):
        return policy.action_probs(records)
    if isinstance(policy, ExpertPolicy):
        return np.stack([policy.probs(t.s) for t in records])
    if isinstance(policy, Model):
        if policy.spec.role != "policy":
            raise DomainError("an idm-role model is not a policy; compose it with a VM")
        return policy.predict(policy.encode(records, grid))
    raise TypeError(f"unsupported policy type {type(policy).__name__}")


def act(policy, s: Pos, rng: np.random.Generator, grid: Grid, goal: Pos | None = None) -> int:
    """Ancestral sampling: next state from the VM (if any), then the action."""
    p = action_probs(policy, [Transition(s, None, s, goal)], grid)[0]
    return int(rng.choice(N_ACTIONS, p=p / p.sum()))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


# IDM labeling ---------------------------------------------------------------

@dataclass
class LabelingResult:
    policy: Model
    idm: object
    relabeled: list[Transition]
    idm_result: TrainResult | None
    policy_result: TrainResult


def train_idm_labeling(
    labeled,
    unlabeled,
    idm_spec: ArchSpec | None,
    policy_spec: ArchSpec,
    config: TrainConfig,
    grid: Grid,
    policy_config: TrainConfig | None = None,
    idm=None,
    mode: str = "sample",
) -> LabelingResult:
    """Train an IDM on the labeled set, label the unlabeled set, then clone.

    Pass ``idm`` (a model or exact table) to skip the first stage.
    """
    unlabeled = list(unlabeled)
    if not unlabeled:
        raise ValueError("unlabeled dataset is empty")
    idm_result = None
    if idm is None:
        idm_result = train_idm(labeled, idm_spec, config, grid)
        idm = idm_result.model
    rng = np.random.default_rng(config.seed + 104729)
    relabeled = idm_relabel(unlabeled, idm, grid, mode=mode, rng=rng)
    pol = train_bc(relabeled, policy_spec, policy_config or config, grid)
    return LabelingResult(pol.model, idm, relabeled, idm_result, pol)
