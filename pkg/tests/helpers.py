"""Shared builders for the test suite."""

import numpy as np

from distreach.policy import MlpSpec, init_params
from distreach.ppo import OldPolicy, PpoConfig, ProcessedBatch, ppo_loss_and_grad

from oracles import ppo_total_stacked, relative_error, stacked_central_difference


def synthetic_batch(rng, n, obs_dim=9, act_dim=3, old=None):
    obs = rng.normal(size=(n, obs_dim))
    actions = rng.normal(size=(n, act_dim))
    if old is None:
        old_logp = rng.normal(-3.0, 0.5, n)
    else:
        from distreach.policy import gaussian_log_prob
        c = OldPolicy.of(old, obs)
        old_logp = gaussian_log_prob(actions, c.mean, c.log_std)
    adv = rng.normal(size=n)
    adv = (adv - adv.mean()) / adv.std()
    targets = rng.normal(size=n)
    return ProcessedBatch(obs, actions, old_logp, adv, targets, adv.copy())


def gradient_case(seed, spec=MlpSpec(9, 3, (64, 64)), n=8):
    """Random (params, old policy, batch, cfg, kl_coeff) with every loss term active."""
    rng = np.random.default_rng(seed)
    old = init_params(spec, seed)
    old = old.replace_values(old.values + rng.normal(0, 0.05, len(old)))
    params = old.replace_values(old.values + rng.normal(0, 0.02, len(old)))
    batch = synthetic_batch(rng, n, spec.input_dim, spec.action_dim, old=old)
    cfg = PpoConfig(entropy_coeff=float(rng.uniform(0, 0.05)), vf_loss_coeff=float(rng.uniform(0.5, 1.5)))
    return params, OldPolicy.of(old, batch.observations), batch, cfg, float(rng.uniform(0.1, 1.0))


def oracle_loss(params, old, batch, cfg, kl_coeff):
    def f(stack):
        return ppo_total_stacked(stack, params.manifest, batch.observations, batch.actions,
                                 batch.old_log_probs, batch.advantages, batch.value_targets,
                                 old.mean, old.log_std, cfg.clip_epsilon, kl_coeff,
                                 cfg.vf_loss_coeff, cfg.entropy_coeff)
    return f


def max_gradient_error(seed, h=1e-5, **kw):
    """Max relative error between the analytic PPO gradient and central differences."""
    params, old, batch, cfg, kl = gradient_case(seed, **kw)
    loss, grad = ppo_loss_and_grad(params, old, batch, cfg, kl)
    f = oracle_loss(params, old, batch, cfg, kl)
    assert abs(f(params.values[None, :])[0] - loss.total) < 1e-12
    fd = stacked_central_difference(f, params.values, h)
    return float(np.max(relative_error(grad.values, fd, floor=1e-6)))
