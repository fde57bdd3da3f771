"""Hot numeric loops: forward kinematics, whole-episode rollout, GAE.

Every kernel exists twice. The ``*_loop`` functions are written as explicit
scalar loops and get compiled by numba; the ``*_numpy`` functions are the
pure-numpy fallback. The public names (``fk_position``, ``run_episode``,
``gae``) point at whichever path :mod:`distreach._accel` selected. The two
paths agree to rounding error, not bit-for-bit; determinism is guaranteed
within one path.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit


def njit_or_none(fn):
    compiled = njit(fn)
    return fn if compiled is None else compiled


REVOLUTE = 0
PRISMATIC = 1

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def _fk_loop(kinds, axes, offsets, tool, q):
    r00, r01, r02 = 1.0, 0.0, 0.0
    r10, r11, r12 = 0.0, 1.0, 0.0
    r20, r21, r22 = 0.0, 0.0, 1.0
    px, py, pz = 0.0, 0.0, 0.0
    for j in range(kinds.shape[0]):
        ox, oy, oz = offsets[j, 0], offsets[j, 1], offsets[j, 2]
        px += r00 * ox + r01 * oy + r02 * oz
        py += r10 * ox + r11 * oy + r12 * oz
        pz += r20 * ox + r21 * oy + r22 * oz
        x, y, z = axes[j, 0], axes[j, 1], axes[j, 2]
        if kinds[j] == 0:
            c = math.cos(q[j])
            s = math.sin(q[j])
            t = 1.0 - c
            a00 = c + x * x * t
            a01 = x * y * t - z * s
            a02 = x * z * t + y * s
            a10 = y * x * t + z * s
            a11 = c + y * y * t
            a12 = y * z * t - x * s
            a20 = z * x * t - y * s
            a21 = z * y * t + x * s
            a22 = c + z * z * t
            n00 = r00 * a00 + r01 * a10 + r02 * a20
            n01 = r00 * a01 + r01 * a11 + r02 * a21
            n02 = r00 * a02 + r01 * a12 + r02 * a22
            n10 = r10 * a00 + r11 * a10 + r12 * a20
            n11 = r10 * a01 + r11 * a11 + r12 * a21
            n12 = r10 * a02 + r11 * a12 + r12 * a22
            n20 = r20 * a00 + r21 * a10 + r22 * a20
            n21 = r20 * a01 + r21 * a11 + r22 * a21
            n22 = r20 * a02 + r21 * a12 + r22 * a22
            r00, r01, r02 = n00, n01, n02
            r10, r11, r12 = n10, n11, n12
            r20, r21, r22 = n20, n21, n22
        else:
            d = q[j]
            px += (r00 * x + r01 * y + r02 * z) * d
            py += (r10 * x + r11 * y + r12 * z) * d
            pz += (r20 * x + r21 * y + r22 * z) * d
    tx, ty, tz = tool[0], tool[1], tool[2]
    out = np.empty(3)
    out[0] = px + r00 * tx + r01 * ty + r02 * tz
    out[1] = py + r10 * tx + r11 * ty + r12 * tz
    out[2] = pz + r20 * tx + r21 * ty + r22 * tz
    return out


def _axis_rotation(axis, angle):
    # Rodrigues
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def fk_numpy(kinds, axes, offsets, tool, q):
    rot = np.eye(3)
    pos = np.zeros(3)
    for j in range(len(kinds)):
        pos = pos + rot @ offsets[j]
        if kinds[j] == REVOLUTE:
            rot = rot @ _axis_rotation(axes[j], q[j])
        else:
            pos = pos + rot @ (axes[j] * q[j])
    return pos + rot @ tool


fk_jit = njit(_fk_loop)


# ---------------------------------------------------------------------------
# whole-episode rollout (policy forward + Gaussian sampling + env step)
# ---------------------------------------------------------------------------

@njit_or_none
def _dense_tanh(h, hidden_w, hidden_b):
    for layer in range(len(hidden_w)):
        w = hidden_w[layer]
        b = hidden_b[layer]
        nxt = np.empty(w.shape[1])
        for o in range(w.shape[1]):
            acc = b[o]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, o]
            nxt[o] = math.tanh(acc)
        h = nxt
    return h


# compiled only; calls the compiled FK and trunk kernels
def _episode_loop(hidden_w, hidden_b, value_hw, value_hb, share_trunk, mean_w, mean_b, value_w,
                  value_b, log_std, kinds, axes, offsets, tool, lo, hi, scale, offset_gain, q0,
                  target, noise, stochastic):
    horizon = noise.shape[0]
    dof = kinds.shape[0]
    act_dim = mean_b.shape[0]
    obs_dim = dof + 6
    obs = np.empty((horizon, obs_dim))
    actions = np.empty((horizon, act_dim))
    log_probs = np.empty(horizon)
    values = np.empty(horizon)
    rewards = np.empty(horizon)
    sigma = np.exp(log_std)
    logp_const = 0.0
    for k in range(act_dim):
        logp_const -= log_std[k] + 0.9189385332046727
    q = q0.copy()
    ee = fk_jit(kinds, axes, offsets, tool, q)
    for t in range(horizon):
        x = np.empty(obs_dim)
        for j in range(dof):
            x[j] = 2.0 * (q[j] - lo[j]) / (hi[j] - lo[j]) - 1.0
        for k in range(3):
            x[dof + k] = ee[k]
            x[dof + 3 + k] = (target[k] - ee[k]) * offset_gain
        obs[t, :] = x
        h = _dense_tanh(x, hidden_w, hidden_b)
        hv = h if share_trunk else _dense_tanh(x, value_hw, value_hb)
        v = value_b[0]
        for i in range(hv.shape[0]):
            v += hv[i] * value_w[i, 0]
        values[t] = v
        lp = logp_const
        for k in range(act_dim):
            mu = mean_b[k]
            for i in range(h.shape[0]):
                mu += h[i] * mean_w[i, k]
            if stochastic:
                a = mu + sigma[k] * noise[t, k]
            else:
                a = mu
            actions[t, k] = a
            z = (a - mu) / sigma[k]
            lp -= 0.5 * z * z
        log_probs[t] = lp
        for j in range(dof):
            a = min(1.0, max(-1.0, actions[t, j]))
            q[j] = min(hi[j], max(lo[j], q[j] + a * scale[j]))
        ee = fk_jit(kinds, axes, offsets, tool, q)
        d0 = ee[0] - target[0]
        d1 = ee[1] - target[1]
        d2 = ee[2] - target[2]
        rewards[t] = -math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    return obs, actions, log_probs, values, rewards, q


def _episode_numpy(hidden_w, hidden_b, value_hw, value_hb, share_trunk, mean_w, mean_b, value_w,
                   value_b, log_std, kinds, axes, offsets, tool, lo, hi, scale, offset_gain, q0,
                   target, noise, stochastic):
    horizon = noise.shape[0]
    dof = len(kinds)
    obs = np.empty((horizon, dof + 6))
    actions = np.empty((horizon, mean_b.shape[0]))
    log_probs = np.empty(horizon)
    values = np.empty(horizon)
    rewards = np.empty(horizon)
    sigma = np.exp(log_std)
    logp_const = -np.sum(log_std) - mean_b.shape[0] * _HALF_LOG_2PI
    q = q0.copy()
    ee = fk_numpy(kinds, axes, offsets, tool, q)
    span = hi - lo
    for t in range(horizon):
        x = np.concatenate((2.0 * (q - lo) / span - 1.0, ee, (target - ee) * offset_gain))
        obs[t] = x
        h = x
        for w, b in zip(hidden_w, hidden_b):
            h = np.tanh(h @ w + b)
        hv = x
        if share_trunk:
            hv = h
        else:
            for w, b in zip(value_hw, value_hb):
                hv = np.tanh(hv @ w + b)
        values[t] = (hv @ value_w + value_b)[0]
        mu = h @ mean_w + mean_b
        a = mu + sigma * noise[t] if stochastic else mu
        actions[t] = a
        z = (a - mu) / sigma
        log_probs[t] = logp_const - 0.5 * np.dot(z, z)
        q = np.clip(q + np.clip(a, -1.0, 1.0) * scale, lo, hi)
        ee = fk_numpy(kinds, axes, offsets, tool, q)
        rewards[t] = -np.linalg.norm(ee - target)
    return obs, actions, log_probs, values, rewards, q


episode_jit = njit(_episode_loop)


# ---------------------------------------------------------------------------
# generalized advantage estimation
# ---------------------------------------------------------------------------

def _gae_loop(rewards, values, dones, gamma, lam):
    n = rewards.shape[0]
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t] or t == n - 1:
            next_value = 0.0
            running = 0.0
        else:
            next_value = values[t + 1]
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def gae_numpy(rewards, values, dones, gamma, lam):
    n = len(rewards)
    cont = np.ones(n)
    cont[dones] = 0.0
    cont[-1] = 0.0
    next_values = np.append(values[1:], 0.0) * cont
    deltas = rewards + gamma * next_values - values
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = deltas[t] + gamma * lam * cont[t] * running
        adv[t] = running
    return adv


gae_jit = njit(_gae_loop)


if USE_NUMBA:
    fk_position = fk_jit
    run_episode = episode_jit
    gae = gae_jit
else:
    fk_position = fk_numpy
    run_episode = _episode_numpy
    gae = gae_numpy

run_episode_numpy = _episode_numpy
