"""Rollout worker: one environment, one local learner, one channel to the coordinator.

Per round the worker receives the global parameters, collects whole episodes
until it has at least ``min_steps_per_task`` transitions, runs a local PPO
update and sends its local model back. Every random draw in a round comes from
a generator keyed by ``(global_seed, worker_id, round)``.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kinematics import ReacherEnvSpec, env_spec_from_dict, env_spec_to_dict, resolve_env, sample_target
from .policy import MlpSpec, ParamVector, unpack_for_kernel
from .ppo import PpoConfig, adapt_kl_coeff, compute_advantages, load_config, sgd_update
from .transport import (Channel, ConnectionClosed, Hello, LocalModelStats, MsgType, ProtocolError,
                        SocketChannel, decode_json, decode_params_msg, encode_ack, encode_json,
                        encode_local_model)

log = logging.getLogger(__name__)


class WorkerError(RuntimeError):
    def __init__(self, worker_id: int, message: str):
        self.worker_id = worker_id
        super().__init__(f"worker {worker_id}: {message}")


def round_rng(global_seed: int, worker_id: int, round_: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(global_seed) & (2**63 - 1), int(worker_id), int(round_)])
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    episode_ends: list[int]
    collection_seconds: float = 0.0

    @property
    def total_steps(self) -> int:
        return len(self.rewards)

    def episode_rewards(self) -> np.ndarray:
        """Per-episode mean per-step reward (negative mean distance to target)."""
        starts = [0] + self.episode_ends[:-1]
        return np.array([self.rewards[s:e].mean() for s, e in zip(starts, self.episode_ends)])

    @property
    def mean_episode_reward(self) -> float:
        return float(self.episode_rewards().mean())


@dataclass
class WorkerState:
    worker_id: int
    env: ReacherEnvSpec
    cfg: PpoConfig
    global_seed: int
    params: ParamVector | None = None
    kl_coeff: float = field(default=-1.0)
    round: int = 0
    cumulative_steps: int = 0

    def __post_init__(self):
        if self.kl_coeff < 0:
            self.kl_coeff = self.cfg.kl_coeff

    @property
    def mlp(self) -> MlpSpec:
        return MlpSpec(self.env.obs_dim, self.env.chain.dof, self.cfg.hidden_sizes, self.cfg.vf_share_layers)


def run_episode(params: ParamVector, env: ReacherEnvSpec, target: np.ndarray, noise: np.ndarray,
                stochastic: bool = True, q0: np.ndarray | None = None):
    """One episode of ``len(noise)`` steps through the rollout kernel."""
    chain = env.chain
    net = unpack_for_kernel(params)
    episode = kernels.run_episode if net[0] else kernels.run_episode_numpy
    start = chain.mid_range if q0 is None else np.asarray(q0, dtype=np.float64)
    return episode(*net, chain.kinds, chain.axes, chain.offsets, chain.tool, chain.lo, chain.hi,
                   env.scale_array, env.offset_gain, start, np.ascontiguousarray(target, dtype=np.float64),
                   np.ascontiguousarray(noise, dtype=np.float64), stochastic)


def collect_rollouts(worker: WorkerState, min_steps: int, rng: np.random.Generator) -> RolloutBatch:
    """Whole episodes until at least ``min_steps`` transitions are collected."""
    if min_steps < 1:
        raise ValueError("min_steps must be >= 1")
    env = worker.env
    started = time.perf_counter()
    cols: list[list[np.ndarray]] = [[] for _ in range(5)]
    ends = []
    total = 0
    try:
        while total < min_steps:
            target, _ = sample_target(env, int(rng.integers(2**63)))
            noise = rng.standard_normal((env.horizon, env.chain.dof))
            obs, act, logp, val, rew, _ = run_episode(worker.params, env, target, noise)
            for col, arr in zip(cols, (obs, act, logp, rew, val)):
                col.append(arr)
            total += len(rew)
            ends.append(total)
    except (ValueError, FloatingPointError) as exc:
        raise WorkerError(worker.worker_id, f"environment failure: {exc}") from exc
    dones = np.zeros(total, dtype=np.bool_)
    dones[np.array(ends) - 1] = True
    obs, act, logp, rew, val = (np.concatenate(c) for c in cols)
    return RolloutBatch(obs, act, logp, rew, val, dones, ends, time.perf_counter() - started)


def local_update(worker: WorkerState, batch: RolloutBatch, rng: np.random.Generator) -> ParamVector:
    """GAE, PPO epochs and KL-coefficient adaptation; stores and returns theta_local."""
    cfg = worker.cfg
    processed = compute_advantages(batch, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages)
    new_params, history = sgd_update(worker.params, processed, cfg, rng, worker.kl_coeff)
    worker.kl_coeff = adapt_kl_coeff(worker.kl_coeff, history[-1].mean_kl, cfg.kl_target)
    worker.params = new_params
    return new_params


def run_round(worker: WorkerState, params: ParamVector, round_: int) -> tuple[ParamVector, LocalModelStats]:
    """Overwrite theta_local with ``params`` and do ``local_rounds`` collect/update cycles."""
    worker.params = params
    worker.round = round_
    rng = round_rng(worker.global_seed, worker.worker_id, round_)
    steps = 0
    episode_rewards = []
    collect_s = update_s = 0.0
    for _ in range(worker.cfg.local_rounds):
        batch = collect_rollouts(worker, worker.cfg.min_steps_per_task, rng)
        t0 = time.perf_counter()
        local_update(worker, batch, rng)
        update_s += time.perf_counter() - t0
        collect_s += batch.collection_seconds
        steps += batch.total_steps
        episode_rewards.extend(batch.episode_rewards())
    worker.cumulative_steps += steps
    stats = LocalModelStats(
        round=round_, worker_id=worker.worker_id, total_steps=steps,
        cumulative_steps=worker.cumulative_steps, episodes=len(episode_rewards),
        mean_episode_reward=float(np.mean(episode_rewards)), collection_seconds=collect_s,
        update_seconds=update_s, kl_coeff=worker.kl_coeff,
    )
    return worker.params, stats


# ---------------------------------------------------------------------------
# message loop
# ---------------------------------------------------------------------------

def assignment_payload(worker_id: int, env: ReacherEnvSpec, cfg: PpoConfig, seed: int) -> bytes:
    return encode_json({"worker_id": worker_id, "env": env_spec_to_dict(env),
                        "config": cfg.to_dict(), "seed": int(seed)})


def handshake(channel: Channel, requested_id: int = -1, env_name: str = "",
              timeout: float | None = 60.0) -> WorkerState:
    """Send Hello and build the worker from the coordinator's AssignConfig."""
    channel.send(MsgType.HELLO, Hello(requested_id, os.getpid(), env_name).encode())
    frame = channel.recv(timeout)
    if frame.msg_type != MsgType.ASSIGN_CONFIG:
        raise ProtocolError(f"expected AssignConfig, got {frame.msg_type.name}")
    doc = decode_json(frame.payload)
    cfg = PpoConfig.from_dict(doc["config"])
    env = env_spec_from_dict(doc["env"], cfg.horizon, check_reachable=False)
    return WorkerState(int(doc["worker_id"]), env, cfg, int(doc["seed"]))


def worker_serve(channel: Channel, worker: WorkerState) -> int:
    """Serve Params rounds until Shutdown. Returns a process exit status."""
    expected = worker.mlp.manifest()
    while True:
        try:
            frame = channel.recv()
        except (ConnectionClosed, ProtocolError) as exc:
            log.warning("worker %d: lost coordinator: %s", worker.worker_id, exc)
            return 3
        if frame.msg_type == MsgType.SHUTDOWN:
            return 0
        try:
            if frame.msg_type != MsgType.PARAMS:
                raise ProtocolError(f"unexpected {frame.msg_type.name} message")
            round_, params = decode_params_msg(frame.payload)
            if params.manifest != expected:
                raise ProtocolError("parameter manifest does not match this worker's policy")
            channel.send(MsgType.ACK, encode_ack(round_, params))
            local, stats = run_round(worker, params, round_)
            channel.send(MsgType.LOCAL_MODEL, encode_local_model(stats, local))
        except ConnectionClosed:
            return 3
        except Exception as exc:  # report anything else to the coordinator, then exit
            log.error("worker %d: %s", worker.worker_id, exc)
            try:
                channel.send(MsgType.ERROR, f"worker {worker.worker_id}: {exc}".encode("utf-8"))
            except ConnectionClosed:
                pass
            return 1


def serve_channel(channel: Channel, requested_id: int = -1, env_name: str = "") -> int:
    try:
        worker = handshake(channel, requested_id, env_name)
    except (ConnectionClosed, TimeoutError, ProtocolError, KeyError, ValueError) as exc:
        log.error("handshake failed: %s", exc)
        return 3
    try:
        return worker_serve(channel, worker)
    finally:
        channel.close()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="distreach-worker", description="rollout worker process")
    parser.add_argument("--connect", required=True, metavar="HOST:PORT")
    parser.add_argument("--worker-id", type=int, default=-1)
    parser.add_argument("--env", default="", help="scara3 | arm6 | env file (the coordinator's assignment wins)")
    parser.add_argument("--config", default=None, help="PPO config file (checked only; the assignment wins)")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s worker %(process)d %(message)s")
    if args.config:
        load_config(args.config)
    if args.env:
        resolve_env(args.env)
    host, _, port = args.connect.rpartition(":")
    try:
        sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=30)
    except OSError as exc:
        log.error("cannot connect to %s: %s", args.connect, exc)
        return 3
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return serve_channel(SocketChannel(sock), args.worker_id, args.env)


if __name__ == "__main__":
    sys.exit(main())
