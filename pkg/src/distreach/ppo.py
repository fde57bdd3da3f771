"""PPO learner: GAE, clipped surrogate with adaptive KL penalty, minibatch Adam.

Everything here is a pure function of its inputs; a worker owns one learner
"instance" only in the sense that it carries its own adaptive ``kl_coeff``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import kernels
from .policy import HeadGradient, ParamVector, backward, forward_batch, gaussian_log_prob

ENTROPY_CONST = 0.5 * math.log(2.0 * math.pi * math.e)


class ConfigError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite {term}" + (f": {detail}" if detail else ""))


@dataclass
class PpoConfig:
    # keys shared with the original hyperparameter listings
    gamma: float = 0.995
    horizon: int = 2048
    kl_coeff: float = 0.2
    num_sgd_iter: int = 30
    sgd_stepsize: float = 1e-4
    rollout_batchsize: int = 1
    sgd_batchsize: int = 128
    vf_loss_coeff: float = 1.0
    timesteps_per_batch: int = 16000
    min_steps_per_task: int = 2048
    num_workers: int = 1
    # knobs the listings leave implicit
    kl_target: float = 0.01
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    entropy_coeff: float = 0.0
    optimizer: str = "adam"
    normalize_advantages: bool = True
    kl_early_stop: bool = True
    local_rounds: int = 1
    merge_weighting: str = "uniform"
    hidden_sizes: tuple[int, ...] = (64, 64)
    vf_share_layers: bool = False

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self) -> None:
        problems = []
        if not 0.0 < self.gamma <= 1.0:
            problems.append("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            problems.append("gae_lambda must be in [0, 1]")
        if self.num_sgd_iter < 1:
            problems.append("num_sgd_iter must be >= 1")
        if self.sgd_batchsize < 1 or self.sgd_batchsize > self.timesteps_per_batch:
            problems.append("need 1 <= sgd_batchsize <= timesteps_per_batch")
        if self.horizon < 1 or self.min_steps_per_task < 1:
            problems.append("horizon and min_steps_per_task must be >= 1")
        if self.num_workers < 1 or self.local_rounds < 1 or self.rollout_batchsize != 1:
            problems.append("num_workers, local_rounds >= 1 and rollout_batchsize == 1 required")
        if not self.clip_epsilon > 0:
            problems.append("clip_epsilon must be > 0")
        for name in ("kl_coeff", "kl_target", "sgd_stepsize", "vf_loss_coeff", "entropy_coeff"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                problems.append(f"{name} must be finite and >= 0")
        if self.optimizer not in ("adam", "sgd"):
            problems.append("optimizer must be 'adam' or 'sgd'")
        if self.merge_weighting not in ("uniform", "steps"):
            problems.append("merge_weighting must be 'uniform' or 'steps'")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "PpoConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base: "PpoConfig | None" = None) -> "PpoConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = (base or cls()).to_dict()
        for key, raw in doc.items():
            default = values[key]
            try:
                if isinstance(default, bool):
                    if not isinstance(raw, bool):
                        raise TypeError
                    values[key] = raw
                elif isinstance(default, int):
                    if isinstance(raw, bool) or float(raw) != int(raw):
                        raise TypeError
                    values[key] = int(raw)
                elif isinstance(default, float):
                    values[key] = float(raw)
                elif isinstance(default, list):
                    values[key] = [int(v) for v in raw]
                else:
                    values[key] = str(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**values)


def load_config(path: str | Path, base: PpoConfig | None = None) -> PpoConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    return PpoConfig.from_dict(doc, base)


def dump_config(cfg: PpoConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcessedBatch:
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray
    raw_advantages: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.advantages)

    def take(self, idx: np.ndarray) -> "ProcessedBatch":
        return ProcessedBatch(self.observations[idx], self.actions[idx], self.old_log_probs[idx],
                              self.advantages[idx], self.value_targets[idx], self.raw_advantages[idx])


def compute_advantages(rollout, gamma: float, lam: float, normalize: bool = True) -> ProcessedBatch:
    """GAE over a rollout whose episodes end at ``dones``; the value after an episode end is 0."""
    rewards = np.asarray(rollout.rewards, dtype=np.float64)
    values = np.asarray(rollout.values, dtype=np.float64)
    dones = np.asarray(rollout.dones, dtype=np.bool_)
    if len(rewards) == 0:
        raise ValueError("empty rollout")
    if not np.all(np.isfinite(rewards)):
        raise ValueError("non-finite reward in rollout")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value estimate in rollout")
    raw = kernels.gae(rewards, values, dones, float(gamma), float(lam))
    targets = raw + values
    adv = raw
    if normalize:
        adv = (raw - raw.mean()) / max(raw.std(), 1e-8)
    return ProcessedBatch(np.asarray(rollout.observations, dtype=np.float64),
                          np.asarray(rollout.actions, dtype=np.float64),
                          np.asarray(rollout.log_probs, dtype=np.float64), adv, targets, raw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    surrogate: float
    kl_penalty: float
    value_loss: float
    entropy: float
    total: float
    mean_kl: float
    clip_fraction: float


@dataclass(frozen=True)
class OldPolicy:
    """Action distribution of the pre-update policy on a batch, for the KL term."""

    mean: np.ndarray
    log_std: np.ndarray

    @classmethod
    def of(cls, params: ParamVector, observations: np.ndarray) -> "OldPolicy":
        cache = forward_batch(params, observations)
        return cls(cache.mean, cache.log_std)

    def take(self, idx) -> "OldPolicy":
        return OldPolicy(self.mean[idx], self.log_std)


def _check(term: str, value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(term)
    return value


def ppo_loss_and_grad(params: ParamVector, old: OldPolicy, batch: ProcessedBatch, cfg: PpoConfig,
                      kl_coeff: float | None = None, need_grad: bool = True):
    """Loss breakdown and (optionally) its gradient w.r.t. ``params``."""
    kl_coeff = cfg.kl_coeff if kl_coeff is None else kl_coeff
    n = len(batch)
    cache = forward_batch(params, batch.observations)
    mean, log_std, value = cache.mean, cache.log_std, cache.value
    sigma2 = np.exp(2.0 * log_std)

    log_prob = gaussian_log_prob(batch.actions, mean, log_std)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(log_prob - batch.old_log_probs)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if len(bad):
        raise NonFiniteLoss("ratio", f"sample index {int(bad[0])}")
    adv = batch.advantages
    eps = cfg.clip_epsilon
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surrogate = _check("surrogate", -float(np.mean(np.minimum(unclipped, clipped))))
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > eps))

    old_sigma2 = np.exp(2.0 * old.log_std)
    diff = old.mean - mean
    kl_per = np.sum(log_std - old.log_std + (old_sigma2 + diff * diff) / (2.0 * sigma2) - 0.5, axis=1)
    mean_kl = _check("kl", float(np.mean(kl_per)))

    resid = value - batch.value_targets
    value_loss = _check("value_loss", float(np.mean(resid * resid)))
    entropy = float(np.sum(log_std) + len(log_std) * ENTROPY_CONST)

    kl_penalty = kl_coeff * mean_kl
    total = surrogate + kl_penalty + cfg.vf_loss_coeff * value_loss - cfg.entropy_coeff * entropy
    _check("total", total)
    breakdown = LossBreakdown(surrogate, kl_penalty, value_loss, entropy, total, mean_kl, clip_fraction)
    if not need_grad:
        return breakdown, None

    # surrogate: only samples where the unclipped branch is the minimum carry gradient
    g_logp = np.where(unclipped <= clipped, -adv * ratio / n, 0.0)
    delta = batch.actions - mean
    d_mean = g_logp[:, None] * delta / sigma2
    d_log_std = g_logp @ (delta * delta / sigma2 - 1.0)
    # kl(old || new)
    d_mean += (kl_coeff / n) * (-diff) / sigma2
    d_log_std = d_log_std + (kl_coeff / n) * np.sum(1.0 - (old_sigma2 + diff * diff) / sigma2, axis=0)
    d_log_std = d_log_std - cfg.entropy_coeff
    d_value = cfg.vf_loss_coeff * 2.0 * resid / n
    grad = backward(params, cache, HeadGradient(d_mean, d_value, d_log_std))
    return breakdown, grad


def ppo_loss(params: ParamVector, old_params: ParamVector, batch: ProcessedBatch, cfg: PpoConfig,
             kl_coeff: float | None = None) -> LossBreakdown:
    return ppo_loss_and_grad(params, OldPolicy.of(old_params, batch.observations), batch, cfg,
                             kl_coeff, need_grad=False)[0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    cols = zip(*(dataclasses.astuple(b) for b in items))
    return LossBreakdown(*(float(np.mean(c)) for c in cols))


def sgd_update(params: ParamVector, batch: ProcessedBatch, cfg: PpoConfig, rng: np.random.Generator,
               kl_coeff: float | None = None) -> tuple[ParamVector, list[LossBreakdown]]:
    """``num_sgd_iter`` shuffled epochs of minibatch steps; returns new params and per-epoch losses.

    Partial trailing minibatches are dropped. Optimizer moments start fresh on
    every call. The epoch loop stops early once an epoch's mean KL exceeds
    ``4 * kl_target`` (when ``kl_early_stop`` is on).
    """
    n = len(batch)
    bs = cfg.sgd_batchsize
    if n < bs:
        raise ValueError(f"batch of {n} samples is smaller than sgd_batchsize={bs}")
    old = OldPolicy.of(params, batch.observations)
    theta = params.values.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    history = []
    current = params
    for _ in range(cfg.num_sgd_iter):
        perm = rng.permutation(n)
        records = []
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            loss, grad = ppo_loss_and_grad(current, old.take(idx), batch.take(idx), cfg, kl_coeff)
            records.append(loss)
            g = grad.values
            step += 1
            if cfg.optimizer == "adam":
                m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
                v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
                m_hat = m / (1.0 - ADAM_BETA1 ** step)
                v_hat = v / (1.0 - ADAM_BETA2 ** step)
                theta = theta - cfg.sgd_stepsize * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            else:
                theta = theta - cfg.sgd_stepsize * g
            current = params.replace_values(theta)
        epoch = _mean_breakdown(records)
        history.append(epoch)
        if cfg.kl_early_stop and epoch.mean_kl > 4.0 * cfg.kl_target:
            break
    return params.replace_values(theta, version=params.version + 1), history


KL_COEFF_MIN = 1e-4
KL_COEFF_MAX = 64.0


def adapt_kl_coeff(kl_coeff: float, measured_kl: float, kl_target: float) -> float:
    if kl_coeff == 0.0:
        return 0.0  # penalty disabled
    if measured_kl > 1.5 * kl_target:
        kl_coeff = kl_coeff * 2.0
    elif measured_kl < kl_target / 1.5:
        kl_coeff = kl_coeff / 2.0
    return min(KL_COEFF_MAX, max(KL_COEFF_MIN, kl_coeff))
