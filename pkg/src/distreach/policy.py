"""Gaussian MLP policy: tanh trunk(s), a linear mean head, a linear value head and a free log-std.

Parameters live in a single flat float64 vector (:class:`ParamVector`) together with
a manifest of ``(name, shape)`` entries, which is what workers and the coordinator
exchange. Gradients are computed by hand in :func:`backward`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

Manifest = tuple[tuple[str, tuple[int, ...]], ...]


class ManifestMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    manifest: Manifest
    version: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        manifest = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in self.manifest)
        total = sum(math.prod(shape) for _, shape in manifest)
        if values.size != total:
            raise ManifestMismatch(f"{values.size} values but manifest describes {total}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "manifest", manifest)

    def __len__(self) -> int:
        return self.values.size

    def tensors(self) -> dict[str, np.ndarray]:
        """Read-only views into ``values`` keyed by manifest name."""
        out = {}
        offset = 0
        for name, shape in self.manifest:
            n = math.prod(shape)
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def replace_values(self, values: np.ndarray, version: int | None = None) -> "ParamVector":
        return ParamVector(values, self.manifest, self.version if version is None else version)

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def same_values(self, other: "ParamVector") -> bool:
        return self.manifest == other.manifest and self.values.tobytes() == other.values.tobytes()


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes. With ``share_trunk`` off the value head gets its own tanh trunk."""

    input_dim: int
    action_dim: int
    hidden_sizes: tuple[int, ...] = (64, 64)
    share_trunk: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1 or self.action_dim < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError(f"all layer sizes must be >= 1: {self}")

    def _trunk(self, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        entries = []
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_sizes):
            entries.append((f"{prefix}.{i}.weight", (fan_in, width)))
            entries.append((f"{prefix}.{i}.bias", (width,)))
            fan_in = width
        return entries

    def manifest(self) -> Manifest:
        top = self.hidden_sizes[-1] if self.hidden_sizes else self.input_dim
        entries = self._trunk("trunk")
        if not self.share_trunk:
            entries += self._trunk("value_trunk")
        entries += [
            ("mean.weight", (top, self.action_dim)),
            ("mean.bias", (self.action_dim,)),
            ("value.weight", (top, 1)),
            ("value.bias", (1,)),
            ("log_std", (self.action_dim,)),
        ]
        return tuple(entries)

    @property
    def num_params(self) -> int:
        return sum(math.prod(shape) for _, shape in self.manifest())

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "MlpSpec":
        names = dict(manifest)
        hidden = []
        while f"trunk.{len(hidden)}.weight" in names:
            hidden.append(names[f"trunk.{len(hidden)}.weight"][1])
        input_dim = names["trunk.0.weight"][0] if hidden else names["mean.weight"][0]
        spec = cls(input_dim, names["log_std"][0], tuple(hidden),
                   share_trunk="value_trunk.0.weight" not in names)
        if spec.manifest() != tuple(manifest):
            raise ManifestMismatch("manifest does not describe a policy MLP")
        return spec


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and log_std start at zero."""
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    chunks = []
    for name, shape in spec.manifest():
        if name.endswith("weight"):
            bound = 1.0 / math.sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, size=shape).ravel())
        else:
            chunks.append(np.zeros(math.prod(shape)))
    return ParamVector(np.concatenate(chunks), spec.manifest(), version=0)


@dataclass(frozen=True)
class GaussianPolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    value: np.ndarray | float


@dataclass
class ForwardCache:
    """Activations kept by :func:`forward_batch` for the backward pass."""

    obs: np.ndarray
    hidden: list[np.ndarray] = field(default_factory=list)
    value_hidden: list[np.ndarray] = field(default_factory=list)
    mean: np.ndarray | None = None
    value: np.ndarray | None = None
    raw_log_std: np.ndarray | None = None
    log_std: np.ndarray | None = None


def _layers(params: ParamVector):
    t = params.tensors()
    spec = MlpSpec.from_manifest(params.manifest)
    n = len(spec.hidden_sizes)
    hidden = [(t[f"trunk.{i}.weight"], t[f"trunk.{i}.bias"]) for i in range(n)]
    if spec.share_trunk:
        value_hidden = hidden
    else:
        value_hidden = [(t[f"value_trunk.{i}.weight"], t[f"value_trunk.{i}.bias"]) for i in range(n)]
    return spec, t, hidden, value_hidden


def _run_trunk(x: np.ndarray, layers) -> list[np.ndarray]:
    out = []
    for w, b in layers:
        x = np.tanh(x @ w + b)
        out.append(x)
    return out


def forward_batch(params: ParamVector, obs: np.ndarray) -> ForwardCache:
    spec, t, hidden, value_hidden = _layers(params)
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != spec.input_dim:
        raise ValueError(f"observations must have shape (n, {spec.input_dim}), got {obs.shape}")
    cache = ForwardCache(obs=obs)
    cache.hidden = _run_trunk(obs, hidden)
    cache.value_hidden = cache.hidden if spec.share_trunk else _run_trunk(obs, value_hidden)
    h = cache.hidden[-1] if cache.hidden else obs
    hv = cache.value_hidden[-1] if cache.value_hidden else obs
    cache.mean = h @ t["mean.weight"] + t["mean.bias"]
    cache.value = (hv @ t["value.weight"] + t["value.bias"])[:, 0]
    cache.raw_log_std = t["log_std"]
    cache.log_std = np.clip(t["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return cache


def policy_forward(params: ParamVector, obs) -> GaussianPolicyOutput:
    """Evaluate pi_theta on one observation (1-D) or a batch (2-D)."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    cache = forward_batch(params, obs[None, :] if single else obs)
    if single:
        return GaussianPolicyOutput(cache.mean[0], cache.log_std.copy(), float(cache.value[0]))
    return GaussianPolicyOutput(cache.mean, np.broadcast_to(cache.log_std, cache.mean.shape).copy(), cache.value)


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - mean.shape[-1] * HALF_LOG_2PI


def sample_action(out: GaussianPolicyOutput, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Draw ``mean + exp(log_std) * eps``; the action is left unclamped."""
    eps = rng.standard_normal(out.mean.shape)
    action = out.mean + np.exp(out.log_std) * eps
    return action, float(gaussian_log_prob(action, out.mean, out.log_std))


@dataclass(frozen=True)
class HeadGradient:
    """dL/d(outputs) for a batch: mean (n, A), value (n,), clamped log_std (A,)."""

    mean: np.ndarray
    value: np.ndarray
    log_std: np.ndarray


def _backprop_trunk(grads: dict, prefix: str, layers, acts: list[np.ndarray], obs: np.ndarray,
                    d_h: np.ndarray) -> None:
    for i in range(len(layers) - 1, -1, -1):
        h = acts[i]
        d_z = d_h * (1.0 - h * h)
        below = acts[i - 1] if i > 0 else obs
        grads[f"{prefix}.{i}.weight"] = below.T @ d_z
        grads[f"{prefix}.{i}.bias"] = d_z.sum(axis=0)
        if i > 0:
            d_h = d_z @ layers[i][0].T


def backward(params: ParamVector, cache: ForwardCache, grad: HeadGradient) -> ParamVector:
    """Reverse-mode pass through both heads and the trunk(s).

    ``cache`` must come from :func:`forward_batch` on the same ``params``.
    Returns dL/dtheta as a ParamVector with the same manifest.
    """
    spec, t, hidden, value_hidden = _layers(params)
    grads: dict[str, np.ndarray] = {}
    h = cache.hidden[-1] if cache.hidden else cache.obs
    hv = cache.value_hidden[-1] if cache.value_hidden else cache.obs
    d_mean = np.asarray(grad.mean, dtype=np.float64)
    d_value = np.asarray(grad.value, dtype=np.float64)[:, None]
    grads["mean.weight"] = h.T @ d_mean
    grads["mean.bias"] = d_mean.sum(axis=0)
    grads["value.weight"] = hv.T @ d_value
    grads["value.bias"] = d_value.sum(axis=0)
    in_range = (cache.raw_log_std >= LOG_STD_MIN) & (cache.raw_log_std <= LOG_STD_MAX)
    grads["log_std"] = np.where(in_range, grad.log_std, 0.0)

    d_h = d_mean @ t["mean.weight"].T
    d_hv = d_value @ t["value.weight"].T
    if spec.share_trunk:
        _backprop_trunk(grads, "trunk", hidden, cache.hidden, cache.obs, d_h + d_hv)
    else:
        _backprop_trunk(grads, "trunk", hidden, cache.hidden, cache.obs, d_h)
        _backprop_trunk(grads, "value_trunk", value_hidden, cache.value_hidden, cache.obs, d_hv)
    flat = np.concatenate([grads[name].ravel() for name, _ in params.manifest])
    return ParamVector(flat, params.manifest, params.version)


def unpack_for_kernel(params: ParamVector):
    """Contiguous arrays in the argument order of :func:`distreach.kernels.run_episode`."""
    spec, t, hidden, value_hidden = _layers(params)

    def pack(layers):
        return (tuple(np.ascontiguousarray(w) for w, _ in layers),
                tuple(np.ascontiguousarray(b) for _, b in layers))

    hw, hb = pack(hidden)
    vw, vb = pack(value_hidden)
    return (hw, hb, vw, vb, spec.share_trunk,
            np.ascontiguousarray(t["mean.weight"]), np.ascontiguousarray(t["mean.bias"]),
            np.ascontiguousarray(t["value.weight"]), np.ascontiguousarray(t["value.bias"]),
            np.clip(t["log_std"], LOG_STD_MIN, LOG_STD_MAX))
