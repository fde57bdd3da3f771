"""Independent reference implementations used as test oracles.

None of these share code with the package: FK composes 4x4 homogeneous
matrices, the network is a naive per-sample loop, GAE is a brute-force
double sum.
"""

import math

import numpy as np


def homogeneous_rotation(axis, angle):
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    t = 1.0 - c
    m = np.eye(4)
    m[:3, :3] = [[t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                 [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                 [t * x * z - s * y, t * y * z + s * x, t * z * z + c]]
    return m


def homogeneous_translation(v):
    m = np.eye(4)
    m[:3, 3] = v
    return m


def fk_oracle(chain, q):
    """Base -> (offset, joint motion) per joint -> tool, as 4x4 products."""
    T = np.eye(4)
    for joint, qi in zip(chain.joints, q):
        T = T @ homogeneous_translation(joint.origin_offset)
        if joint.kind == "revolute":
            T = T @ homogeneous_rotation(joint.axis, qi)
        else:
            T = T @ homogeneous_translation(np.asarray(joint.axis) * qi)
    T = T @ homogeneous_translation(chain.tool_offset)
    return T[:3, 3]


def dense_oracle(tensors, obs, share_trunk):
    """Per-sample naive forward pass; returns (mean, value) lists."""
    def trunk(prefix, x):
        i = 0
        while f"{prefix}.{i}.weight" in tensors:
            w, b = tensors[f"{prefix}.{i}.weight"], tensors[f"{prefix}.{i}.bias"]
            x = [math.tanh(b[o] + sum(x[k] * w[k, o] for k in range(len(x)))) for o in range(w.shape[1])]
            i += 1
        return x

    means, values = [], []
    for row in obs:
        h = trunk("trunk", list(row))
        hv = h if share_trunk else trunk("value_trunk", list(row))
        mw, mb = tensors["mean.weight"], tensors["mean.bias"]
        means.append([mb[a] + sum(h[k] * mw[k, a] for k in range(len(h))) for a in range(len(mb))])
        vw, vb = tensors["value.weight"], tensors["value.bias"]
        values.append(vb[0] + sum(hv[k] * vw[k, 0] for k in range(len(hv))))
    return np.array(means), np.array(values)


def gae_oracle(rewards, values, dones, gamma, lam):
    """A_t = sum_k (gamma*lam)^k delta_{t+k} inside the episode, V after an episode end = 0."""
    n = len(rewards)
    ends = [t for t in range(n) if dones[t] or t == n - 1]
    out = np.zeros(n)
    for t in range(n):
        end = next(e for e in ends if e >= t)
        total = 0.0
        for k in range(t, end + 1):
            nxt = values[k + 1] if k < end else 0.0
            delta = rewards[k] + gamma * nxt - values[k]
            total += (gamma * lam) ** (k - t) * delta
        out[t] = total
    return out


def gaussian_log_density(x, mean, std):
    return sum(-math.log(s) - 0.5 * math.log(2 * math.pi) - 0.5 * ((xi - m) / s) ** 2
               for xi, m, s in zip(x, mean, std))


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _unflatten_stack(stack, manifest):
    out, offset = {}, 0
    for name, shape in manifest:
        n = math.prod(shape)
        out[name] = stack[:, offset:offset + n].reshape((stack.shape[0],) + tuple(shape))
        offset += n
    return out


def ppo_total_stacked(stack, manifest, obs, actions, old_log_probs, advantages, value_targets,
                      old_mean, old_log_std, clip_eps, kl_coeff, vf_coeff, ent_coeff,
                      log_std_bounds=(-5.0, 2.0)):
    """Total PPO loss for each row of ``stack`` (K, P) of flat parameter vectors.

    Written from the loss definition directly: clipped surrogate, KL(old || new)
    of diagonal Gaussians, squared value error and Gaussian entropy.
    """
    t = _unflatten_stack(np.atleast_2d(stack), manifest)

    def trunk(prefix):
        x = np.broadcast_to(obs, (t["mean.bias"].shape[0],) + obs.shape)
        i = 0
        while f"{prefix}.{i}.weight" in t:
            x = np.tanh(x @ t[f"{prefix}.{i}.weight"] + t[f"{prefix}.{i}.bias"][:, None, :])
            i += 1
        return x

    h = trunk("trunk")
    hv = trunk("value_trunk") if "value_trunk.0.weight" in t else h
    mean = h @ t["mean.weight"] + t["mean.bias"][:, None, :]
    value = (hv @ t["value.weight"])[:, :, 0] + t["value.bias"]
    log_std = np.clip(t["log_std"], *log_std_bounds)[:, None, :]
    std = np.exp(log_std)
    a_dim = mean.shape[-1]
    logp = (-0.5 * np.sum(((actions - mean) / std) ** 2, axis=-1) - np.sum(log_std, axis=-1)
            - 0.5 * a_dim * math.log(2 * math.pi))
    ratio = np.exp(logp - old_log_probs)
    surrogate = -np.mean(np.minimum(ratio * advantages,
                                    np.clip(ratio, 1 - clip_eps, 1 + clip_eps) * advantages), axis=1)
    old_var = np.exp(2 * old_log_std)
    kl = np.mean(np.sum(log_std - old_log_std + (old_var + (old_mean - mean) ** 2) / (2 * std ** 2) - 0.5,
                        axis=-1), axis=1)
    value_loss = np.mean((value - value_targets) ** 2, axis=1)
    entropy = np.sum(log_std[:, 0, :] + 0.5 * math.log(2 * math.pi * math.e), axis=-1)
    return surrogate + kl_coeff * kl + vf_coeff * value_loss - ent_coeff * entropy


def stacked_central_difference(f, base, h=1e-5, chunk=1024):
    """Central differences of a row-vectorised function ``f`` at ``base``."""
    n = len(base)
    out = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        up = np.tile(base, (len(idx), 1))
        down = up.copy()
        up[np.arange(len(idx)), idx] += h
        down[np.arange(len(idx)), idx] -= h
        out[idx] = (f(up) - f(down)) / (2 * h)
    return out
