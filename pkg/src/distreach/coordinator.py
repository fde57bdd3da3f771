"""Global policy lifecycle: broadcast, synchronous gather, merge, stop rule.

The coordinator never touches an environment during training. It owns the
global parameter vector, pushes it to every worker behind an Ack barrier,
waits for every local model of the round, averages them and logs one metrics
row per round.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .kinematics import ReacherEnvSpec, sample_target
from .policy import MlpSpec, ParamVector, init_params
from .ppo import PpoConfig
from .transport import (ConnectionClosed, LocalModelStats, MsgType, ProtocolError, decode_ack,
                        decode_local_model, encode_params_msg)
from .worker import run_episode

log = logging.getLogger(__name__)

CURVE_HEADER = ("round", "timesteps", "wall_clock_s", "mean_reward", "workers", "seed")


class MergeError(ValueError):
    pass


class RoundAborted(RuntimeError):
    """A round could not complete. ``worker_id`` names the culprit when known."""

    def __init__(self, message: str, worker_id: int | None = None):
        self.worker_id = worker_id
        super().__init__(message)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, metrics: "TrainingMetrics"):
        self.metrics = metrics
        super().__init__(message)


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

def _tree_sum(rows: list[np.ndarray]) -> np.ndarray:
    # fixed pairwise order, so the float result depends only on the input order
    while len(rows) > 1:
        paired = [rows[i] + rows[i + 1] for i in range(0, len(rows) - 1, 2)]
        if len(rows) % 2:
            paired.append(rows[-1])
        rows = paired
    return rows[0]


def merge_models(models: Sequence[ParamVector], worker_ids: Sequence[int] | None = None,
                 weights: Sequence[float] | None = None) -> ParamVector:
    """Element-wise mean of the local models.

    Models are put in a canonical order first (by worker id when given,
    otherwise by their value bytes), so any permutation of the same inputs
    gives bit-identical output. The mean is computed as
    ``ref + tree_sum(w_i * (x_i - ref)) / sum(w)`` with ``ref`` the first model
    in canonical order, which makes k identical copies merge to exactly that copy.
    """
    if not models:
        raise MergeError("nothing to merge")
    ids = list(range(len(models))) if worker_ids is None else [int(w) for w in worker_ids]
    if len(ids) != len(models) or len(set(ids)) != len(ids):
        raise MergeError("worker ids must be unique, one per model")
    w = [1.0] * len(models) if weights is None else [float(x) for x in weights]
    if len(w) != len(models) or any(not (math.isfinite(x) and x > 0) for x in w):
        raise MergeError("weights must be positive and finite, one per model")

    if worker_ids is None:
        order = sorted(range(len(models)), key=lambda i: (models[i].values.tobytes(), w[i]))
    else:
        order = sorted(range(len(models)), key=lambda i: ids[i])
    ref = models[order[0]]
    for i in order:
        if models[i].manifest != ref.manifest:
            raise MergeError(f"model from worker {ids[i]} has a manifest that does not match "
                             f"worker {ids[order[0]]}")

    total = _tree_sum([np.full(1, w[i]) for i in order])[0]
    deltas = [(models[i].values - ref.values) * w[i] if weights is not None
              else models[i].values - ref.values for i in order]
    merged = ref.values + _tree_sum(deltas) / total
    version = max(m.version for m in models) + 1
    return ParamVector(merged, ref.manifest, version)


# ---------------------------------------------------------------------------
# metrics and stopping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StopCriterion:
    reward_threshold: float = -0.01
    max_rounds: int | None = 300
    max_wall_clock_seconds: float = math.inf

    def __post_init__(self):
        if self.max_rounds is None and not math.isfinite(self.max_wall_clock_seconds):
            raise ValueError("need a finite max_rounds or max_wall_clock_seconds")
        if self.max_rounds is not None and self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if not self.max_wall_clock_seconds > 0:
            raise ValueError("max_wall_clock_seconds must be > 0")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    timesteps: int
    wall_clock_s: float
    mean_reward: float
    workers: int
    seed: int

    def cells(self) -> list[str]:
        return [str(self.round), str(self.timesteps), repr(float(self.wall_clock_s)),
                repr(float(self.mean_reward)), str(self.workers), str(self.seed)]


@dataclass
class TrainingMetrics:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if row.round <= last.round or row.wall_clock_s <= last.wall_clock_s:
                raise ValueError("metrics rows must be strictly increasing in round and wall clock")
            if row.timesteps < last.timesteps:
                raise ValueError("cumulative timesteps went backwards")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for row in self.rows:
            writer.writerow(row.cells())
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "TrainingMetrics":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CURVE_HEADER:
                raise ValueError(f"{path}: unexpected curve header {header}")
            metrics = cls()
            for rec in reader:
                metrics.rows.append(MetricsRow(int(rec[0]), int(rec[1]), float(rec[2]),
                                               float(rec[3]), int(rec[4]), int(rec[5])))
        return metrics


@dataclass
class GlobalPolicy:
    params: ParamVector
    round: int = 0
    cumulative_timesteps: int = 0
    started_at: float = field(default_factory=time.perf_counter)

    def advance(self, params: ParamVector, steps: int) -> None:
        if steps < 0:
            raise ValueError("steps must be >= 0")
        self.params = params
        self.round += 1
        self.cumulative_timesteps += steps


# ---------------------------------------------------------------------------
# round protocol
# ---------------------------------------------------------------------------

def broadcast(params: ParamVector, round_: int, cluster, timeout: float = 60.0) -> dict[int, str]:
    """Send Params to every worker and wait for all Acks (the barrier).

    Each Ack carries the sha256 of the values the worker decoded; a mismatch or
    a missing Ack aborts the round and names the worker.
    """
    payload = encode_params_msg(round_, params)
    expected = params.digest()
    for wid, chan in cluster.channels.items():
        try:
            chan.send(MsgType.PARAMS, payload)
        except ConnectionClosed as exc:
            raise RoundAborted(f"round {round_}: worker {wid} is gone ({exc})", wid) from exc
    deadline = time.monotonic() + timeout
    acks = {}
    for wid, chan in cluster.channels.items():
        frame = _recv(chan, wid, round_, deadline, "Ack")
        if frame.msg_type != MsgType.ACK:
            raise RoundAborted(f"round {round_}: worker {wid} sent {frame.msg_type.name} "
                               f"instead of Ack", wid)
        ack_round, digest = decode_ack(frame.payload)
        if ack_round != round_ or digest != expected:
            raise RoundAborted(f"round {round_}: worker {wid} acknowledged different parameters", wid)
        acks[wid] = digest
    return acks


def gather(cluster, round_: int, timeout: float | None = None) -> list[tuple[LocalModelStats, ParamVector]]:
    """Wait for one LocalModel from every worker; returned in worker-id order."""
    deadline = None if timeout is None else time.monotonic() + timeout
    out = []
    for wid in sorted(cluster.channels):
        frame = _recv(cluster.channels[wid], wid, round_, deadline, "LocalModel")
        if frame.msg_type != MsgType.LOCAL_MODEL:
            raise RoundAborted(f"round {round_}: worker {wid} sent {frame.msg_type.name} "
                               f"instead of LocalModel", wid)
        stats, params = decode_local_model(frame.payload)
        if stats.round != round_ or stats.worker_id != wid:
            raise RoundAborted(f"round {round_}: worker {wid} answered for round {stats.round} "
                               f"as worker {stats.worker_id}", wid)
        out.append((stats, params))
    return out


def _recv(chan, wid: int, round_: int, deadline: float | None, what: str):
    remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
    try:
        frame = chan.recv(remaining)
    except TimeoutError:
        raise RoundAborted(f"round {round_}: worker {wid} sent no {what} before the timeout", wid) from None
    except (ConnectionClosed, ProtocolError) as exc:
        raise RoundAborted(f"round {round_}: worker {wid} failed while waiting for {what}: {exc}",
                           wid) from exc
    if frame.msg_type == MsgType.ERROR:
        text = frame.payload.decode("utf-8", "replace")
        raise RoundAborted(f"round {round_}: worker {wid} reported an error: {text}", wid)
    return frame


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamVector
    metrics: TrainingMetrics
    reason: str
    rounds: int


def step_weighted_reward(stats: Sequence[LocalModelStats]) -> float:
    steps = np.array([s.total_steps for s in stats], dtype=np.float64)
    rewards = np.array([s.mean_episode_reward for s in stats])
    return float(np.dot(steps, rewards) / steps.sum())


def train(cluster, cfg: PpoConfig, stop: StopCriterion, seed: int,
          init: ParamVector | None = None, metrics_path: str | Path | None = None,
          ack_timeout: float = 60.0, round_timeout: float | None = 3600.0,
          on_round: Callable[[MetricsRow], None] | None = None) -> TrainResult:
    """Run synchronous rounds until the reward threshold or a bound is hit.

    ``cluster`` needs ``channels`` (worker id -> Channel) and ``env``.
    On failure the partial metrics are written to ``metrics_path`` (if given)
    and :class:`TrainingAborted` carries them.
    """
    env: ReacherEnvSpec = cluster.env
    mlp = MlpSpec(env.obs_dim, env.chain.dof, cfg.hidden_sizes, cfg.vf_share_layers)
    params = init if init is not None else init_params(mlp, seed)
    if params.manifest != mlp.manifest():
        raise ValueError("initial parameters do not match the configured policy")
    policy = GlobalPolicy(params)
    metrics = TrainingMetrics()
    workers = len(cluster.channels)
    reason = "max_rounds"
    try:
        while True:
            if stop.max_rounds is not None and policy.round >= stop.max_rounds:
                reason = "max_rounds"
                break
            if time.perf_counter() - policy.started_at >= stop.max_wall_clock_seconds:
                reason = "max_wall_clock"
                break
            round_ = policy.round + 1
            broadcast(policy.params, round_, cluster, ack_timeout)
            results = gather(cluster, round_, round_timeout)
            stats = [s for s, _ in results]
            weights = [s.total_steps for s in stats] if cfg.merge_weighting == "steps" else None
            merged = merge_models([p for _, p in results], [s.worker_id for s in stats], weights)
            policy.advance(merged, sum(s.total_steps for s in stats))
            row = MetricsRow(round_, policy.cumulative_timesteps,
                             time.perf_counter() - policy.started_at,
                             step_weighted_reward(stats), workers, int(seed))
            metrics.append(row)
            if on_round is not None:
                on_round(row)
            log.info("round %d steps %d reward %.5f", row.round, row.timesteps, row.mean_reward)
            if row.mean_reward >= stop.reward_threshold:
                reason = "threshold"
                break
    except (RoundAborted, ProtocolError) as exc:
        if metrics_path is not None:
            metrics.write(metrics_path)
        raise TrainingAborted(str(exc), metrics) from exc
    if metrics_path is not None:
        metrics.write(metrics_path)
    return TrainResult(policy.params, metrics, reason, policy.round)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AccuracyReport:
    accuracy_mm: float
    repeatability_mm: float
    target: np.ndarray
    final_positions: np.ndarray


def accuracy_repeatability(targets, finals) -> tuple[float, float]:
    """RMS target error and RMS spread around the mean final position, in mm.

    Inputs are in meters, shape (n, 3) (a single target broadcasts).
    """
    finals_mm = np.asarray(finals, dtype=np.float64) * 1000.0
    targets_mm = np.broadcast_to(np.asarray(targets, dtype=np.float64) * 1000.0, finals_mm.shape)
    if finals_mm.ndim != 2 or finals_mm.shape[0] < 2:
        raise ValueError("need at least 2 runs to define repeatability")
    err = targets_mm - finals_mm
    accuracy = math.sqrt(float(np.mean(np.sum(err * err, axis=1))))
    spread = finals_mm - finals_mm.mean(axis=0)
    repeatability = math.sqrt(float(np.mean(np.sum(spread * spread, axis=1))))
    return accuracy, repeatability


def evaluate_policy(params: ParamVector, env: ReacherEnvSpec, n_runs: int = 10, seed: int = 0,
                    start_jitter: float = 0.025) -> AccuracyReport:
    """Deterministic-action runs towards one common seeded target.

    Every run starts from the mid-range pose perturbed by a seeded uniform
    offset of ``start_jitter`` times each joint's range, so repeatability
    measures how consistently the policy lands, not just replay determinism.
    """
    if n_runs < 2:
        raise ValueError("n_runs must be >= 2 (repeatability is undefined for one run)")
    chain = env.chain
    target, _ = sample_target(env, seed)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    span = chain.hi - chain.lo
    finals = np.empty((n_runs, 3))
    zeros = np.zeros((env.horizon, chain.dof))
    for i in range(n_runs):
        q0 = np.clip(chain.mid_range + rng.uniform(-start_jitter, start_jitter, chain.dof) * span,
                     chain.lo, chain.hi)
        *_, q_final = run_episode(params, env, target, zeros, stochastic=False, q0=q0)
        finals[i] = env_position(env, q_final)
    acc, rep = accuracy_repeatability(target, finals)
    return AccuracyReport(acc, rep, target, finals)


def env_position(env: ReacherEnvSpec, q: np.ndarray) -> np.ndarray:
    c = env.chain
    return kernels.fk_position(c.kinds, c.axes, c.offsets, c.tool, np.asarray(q, dtype=np.float64))
