"""Kinematic chains and the point-reaching environment.

The environment is a pure function pair: :func:`env_reset` and :func:`env_step`
take and return immutable :class:`EnvState` values. Actions are per-step joint
position deltas in ``[-1, 1]`` (scaled by ``action_scale``); the reward is the
negative Euclidean distance from end effector to target. Observations are the
normalized joint positions, the end-effector position and the target offset
``(target - ee) * offset_gain``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import kernels

JOINT_KINDS = ("revolute", "prismatic")


class ChainError(ValueError):
    """Invalid chain definition or joint vector."""


@dataclass(frozen=True)
class Joint:
    kind: str
    axis: tuple[float, float, float]
    origin_offset: tuple[float, float, float]
    limit_lo: float
    limit_hi: float

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise ChainError(f"unknown joint kind {self.kind!r}")
        if abs(math.sqrt(sum(a * a for a in self.axis)) - 1.0) > 1e-12:
            raise ChainError(f"joint axis {self.axis} is not unit length")
        if not self.limit_lo < self.limit_hi:
            raise ChainError(f"joint limits must satisfy lo < hi, got [{self.limit_lo}, {self.limit_hi}]")


@dataclass(frozen=True)
class KinematicChain:
    """Serial chain of revolute/prismatic joints anchored at the identity base frame.

    Each joint first translates by ``origin_offset`` (expressed in the previous
    joint's frame) and then moves along/about its ``axis``. ``tool_offset`` is the
    end-effector point in the last joint's frame.
    """

    joints: tuple[Joint, ...]
    tool_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "chain"
    # packed arrays for the kernels
    kinds: np.ndarray = field(init=False, repr=False, compare=False)
    axes: np.ndarray = field(init=False, repr=False, compare=False)
    offsets: np.ndarray = field(init=False, repr=False, compare=False)
    tool: np.ndarray = field(init=False, repr=False, compare=False)
    lo: np.ndarray = field(init=False, repr=False, compare=False)
    hi: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.joints) < 1:
            raise ChainError("a chain needs at least one joint")
        arrays = {
            "kinds": np.array([JOINT_KINDS.index(j.kind) for j in self.joints], dtype=np.int64),
            "axes": np.array([j.axis for j in self.joints], dtype=np.float64),
            "offsets": np.array([j.origin_offset for j in self.joints], dtype=np.float64),
            "tool": np.array(self.tool_offset, dtype=np.float64),
            "lo": np.array([j.limit_lo for j in self.joints], dtype=np.float64),
            "hi": np.array([j.limit_hi for j in self.joints], dtype=np.float64),
        }
        for key, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def mid_range(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def reach(self) -> float:
        """Upper bound on ``|FK(q)|``: summed link offsets plus prismatic travel."""
        total = float(np.linalg.norm(self.tool))
        for j in self.joints:
            total += float(np.linalg.norm(j.origin_offset))
            if j.kind == "prismatic":
                total += max(abs(j.limit_lo), abs(j.limit_hi))
        return total


def forward_kinematics(chain: KinematicChain, q) -> np.ndarray:
    """End-effector position (meters) for joint vector ``q``."""
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.shape != (chain.dof,):
        raise ChainError(f"expected {chain.dof} joint values, got shape {q.shape}")
    if np.any(q < chain.lo) or np.any(q > chain.hi):
        raise ChainError(f"joint vector {q} outside limits")
    return kernels.fk_position(chain.kinds, chain.axes, chain.offsets, chain.tool, q)


# ---------------------------------------------------------------------------
# chain files and presets
# ---------------------------------------------------------------------------

def chain_from_dict(doc: dict[str, Any]) -> KinematicChain:
    joints = []
    for entry in doc["joints"]:
        lo, hi = entry["limits"]
        joints.append(Joint(
            kind=entry["kind"],
            axis=tuple(float(v) for v in entry["axis"]),
            origin_offset=tuple(float(v) for v in entry.get("offset", (0.0, 0.0, 0.0))),
            limit_lo=float(lo),
            limit_hi=float(hi),
        ))
    tool = tuple(float(v) for v in doc.get("tool_offset", (0.0, 0.0, 0.0)))
    return KinematicChain(tuple(joints), tool_offset=tool, name=str(doc.get("name", "chain")))


def chain_to_dict(chain: KinematicChain) -> dict[str, Any]:
    return {
        "name": chain.name,
        "joints": [
            {"kind": j.kind, "axis": list(j.axis), "offset": list(j.origin_offset),
             "limits": [j.limit_lo, j.limit_hi]}
            for j in chain.joints
        ],
        "tool_offset": list(chain.tool_offset),
    }


def load_chain(path: str | Path) -> KinematicChain:
    with open(path, encoding="utf-8") as fh:
        return chain_from_dict(yaml.safe_load(fh))


def dump_chain(chain: KinematicChain, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(chain_to_dict(chain), fh, sort_keys=False)


Z = (0.0, 0.0, 1.0)
Y = (0.0, 1.0, 0.0)


def scara3() -> KinematicChain:
    """Revolute-z (0.30 m link) -> revolute-z (0.25 m link) -> prismatic-z (0-0.20 m)."""
    return KinematicChain((
        Joint("revolute", Z, (0.0, 0.0, 0.0), -2.6, 2.6),
        Joint("revolute", Z, (0.30, 0.0, 0.0), -2.6, 2.6),
        Joint("prismatic", Z, (0.25, 0.0, 0.0), 0.0, 0.20),
    ), name="scara3")


def arm6() -> KinematicChain:
    """Alternating z/y revolute joints, link lengths 0.20, 0.20, 0.20, 0.15, 0.15, 0.10 m."""
    lengths = (0.20, 0.20, 0.20, 0.15, 0.15, 0.10)
    limits = ((-2.6, 2.6), (-0.6, 1.8), (-2.6, 2.6), (-0.4, 2.2), (-2.6, 2.6), (-1.6, 1.6))
    joints = []
    prev = 0.0
    for i, (lo, hi) in enumerate(limits):
        joints.append(Joint("revolute", Z if i % 2 == 0 else Y, (0.0, 0.0, prev), lo, hi))
        prev = lengths[i]
    return KinematicChain(tuple(joints), tool_offset=(0.0, 0.0, prev), name="arm6")


CHAIN_PRESETS = {"scara3": scara3, "arm6": arm6}


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReacherEnvSpec:
    chain: KinematicChain
    target_lo: tuple[float, float, float]
    target_hi: tuple[float, float, float]
    horizon: int = 2048
    reward_stop_threshold: float = -0.01
    action_scale: tuple[float, ...] = ()
    offset_gain: float = 50.0
    check_reachable: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.reward_stop_threshold > 0:
            raise ValueError("reward_stop_threshold must be <= 0")
        if any(not lo < hi for lo, hi in zip(self.target_lo, self.target_hi)):
            raise ValueError("target region must have positive extent on every axis")
        scale = self.action_scale or (0.02,) * self.chain.dof
        if len(scale) != self.chain.dof or any(s <= 0 for s in scale):
            raise ValueError("action_scale needs one positive entry per joint")
        object.__setattr__(self, "action_scale", tuple(float(s) for s in scale))
        if not (math.isfinite(self.offset_gain) and self.offset_gain > 0):
            raise ValueError("offset_gain must be positive and finite")
        if self.check_reachable:
            bad = unreachable_targets(self.chain, self.target_lo, self.target_hi)
            if len(bad):
                raise ValueError(f"target region not inside workspace, e.g. {bad[0].tolist()}")

    @property
    def obs_dim(self) -> int:
        return self.chain.dof + 6

    @property
    def scale_array(self) -> np.ndarray:
        return np.asarray(self.action_scale)


def _solve_ik(chain: KinematicChain, goal: np.ndarray, q: np.ndarray, iters: int = 120) -> float:
    """Damped least squares IK with a finite-difference Jacobian; returns final miss distance."""
    fk = kernels.fk_position
    args = (chain.kinds, chain.axes, chain.offsets, chain.tool)
    h = 1e-7
    for _ in range(iters):
        pos = fk(*args, q)
        err = goal - pos
        if np.linalg.norm(err) < 1e-6:
            break
        jac = np.empty((3, chain.dof))
        for j in range(chain.dof):
            dq = q.copy()
            dq[j] += h
            jac[:, j] = (fk(*args, dq) - pos) / h
        step = jac.T @ np.linalg.solve(jac @ jac.T + 1e-4 * np.eye(3), err)
        q = np.clip(q + step, chain.lo, chain.hi)
    return float(np.linalg.norm(goal - fk(*args, q)))


def unreachable_targets(chain: KinematicChain, lo, hi, n_samples: int = 24,
                        restarts: int = 6, tol: float = 1e-3, seed: int = 0) -> np.ndarray:
    """Sample box corners plus random interior points; keep those IK cannot reach."""
    rng = np.random.Generator(np.random.Philox(seed))
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[lo[0] if i & 1 else hi[0], lo[1] if i & 2 else hi[1], lo[2] if i & 4 else hi[2]]
                        for i in range(8)])
    points = np.vstack([corners, lo + (hi - lo) * rng.random((n_samples, 3))])
    bad = []
    for p in points:
        starts = [chain.mid_range] + [chain.lo + (chain.hi - chain.lo) * rng.random(chain.dof)
                                      for _ in range(restarts - 1)]
        if min(_solve_ik(chain, p, s.copy()) for s in starts) > tol:
            bad.append(p)
    return np.array(bad)


@functools.lru_cache(maxsize=None)
def preset_spec(name: str, horizon: int = 2048) -> ReacherEnvSpec:
    """Built-in reacher tasks for the ``scara3`` and ``arm6`` chains."""
    if name == "scara3":
        return ReacherEnvSpec(
            scara3(), target_lo=(0.20, -0.05, 0.0), target_hi=(0.45, 0.25, 0.20),
            horizon=horizon, action_scale=(0.02, 0.02, 0.005),
        )
    if name == "arm6":
        return ReacherEnvSpec(
            arm6(), target_lo=(0.20, -0.15, 0.30), target_hi=(0.50, 0.15, 0.60),
            horizon=horizon, action_scale=(0.02,) * 6,
        )
    raise KeyError(f"unknown env preset {name!r}; choose from {sorted(CHAIN_PRESETS)}")


@dataclass(frozen=True)
class EnvState:
    joint_positions: np.ndarray
    target: np.ndarray
    steps_elapsed: int
    rng_state: dict = field(repr=False, compare=False)


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    distance: float


def observe(spec: ReacherEnvSpec, q: np.ndarray, target: np.ndarray) -> np.ndarray:
    chain = spec.chain
    ee = kernels.fk_position(chain.kinds, chain.axes, chain.offsets, chain.tool, q)
    # normalized joints, end effector, gained offset to the target
    return np.concatenate((2.0 * (q - chain.lo) / (chain.hi - chain.lo) - 1.0, ee,
                           (target - ee) * spec.offset_gain))


def sample_target(spec: ReacherEnvSpec, seed: int) -> tuple[np.ndarray, dict]:
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1))
    u = np.random.Generator(bitgen).random(3)
    lo = np.asarray(spec.target_lo)
    hi = np.asarray(spec.target_hi)
    return lo + (hi - lo) * u, bitgen.state


def env_reset(spec: ReacherEnvSpec, seed: int) -> tuple[EnvState, np.ndarray]:
    target, rng_state = sample_target(spec, seed)
    q = spec.chain.mid_range.copy()
    state = EnvState(q, target, 0, rng_state)
    return state, observe(spec, q, target)


def env_step(spec: ReacherEnvSpec, state: EnvState, action: Sequence[float]) -> tuple[EnvState, StepResult]:
    action = np.asarray(action, dtype=np.float64)
    chain = spec.chain
    if action.shape != (chain.dof,):
        raise ValueError(f"action must have {chain.dof} entries, got shape {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError(f"non-finite action {action}")
    if state.steps_elapsed >= spec.horizon:
        raise ValueError("episode already finished; call env_reset")
    q = np.clip(state.joint_positions + np.clip(action, -1.0, 1.0) * spec.scale_array, chain.lo, chain.hi)
    obs = observe(spec, q, state.target)
    ee = obs[chain.dof:chain.dof + 3]
    d = ee - state.target
    distance = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    steps = state.steps_elapsed + 1
    new_state = replace(state, joint_positions=q, steps_elapsed=steps)
    return new_state, StepResult(obs, -distance, steps >= spec.horizon, distance)


def env_spec_to_dict(spec: ReacherEnvSpec) -> dict[str, Any]:
    return {
        "chain": chain_to_dict(spec.chain),
        "target_lo": list(spec.target_lo),
        "target_hi": list(spec.target_hi),
        "horizon": spec.horizon,
        "reward_stop_threshold": spec.reward_stop_threshold,
        "action_scale": list(spec.action_scale),
        "offset_gain": spec.offset_gain,
    }


def env_spec_from_dict(doc: dict[str, Any], horizon: int | None = None,
                       check_reachable: bool = True) -> ReacherEnvSpec:
    return ReacherEnvSpec(
        chain_from_dict(doc["chain"]),
        target_lo=tuple(float(v) for v in doc["target_lo"]),
        target_hi=tuple(float(v) for v in doc["target_hi"]),
        horizon=int(horizon if horizon is not None else doc.get("horizon", 2048)),
        reward_stop_threshold=float(doc.get("reward_stop_threshold", -0.01)),
        action_scale=tuple(float(v) for v in doc.get("action_scale", ())),
        offset_gain=float(doc.get("offset_gain", 50.0)),
        check_reachable=check_reachable,
    )


def resolve_env(name: str, horizon: int = 2048) -> ReacherEnvSpec:
    """A preset name (``scara3``/``arm6``) or the path of a YAML env file."""
    if name in CHAIN_PRESETS:
        return preset_spec(name, horizon)
    with open(name, encoding="utf-8") as fh:
        return env_spec_from_dict(yaml.safe_load(fh), horizon)
