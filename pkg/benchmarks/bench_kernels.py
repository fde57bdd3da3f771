"""Compare the numba and pure-numpy paths of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--env scara3]

Both paths are called directly, so ``DISTREACH_NUMBA`` does not matter here.
The first jit call (compilation or cache load) is excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from distreach import kernels
from distreach._accel import HAVE_NUMBA
from distreach.kinematics import preset_spec, sample_target
from distreach.policy import MlpSpec, init_params, unpack_for_kernel


def fk_case(env, rng, n=2000):
    c = env.chain
    qs = c.lo + (c.hi - c.lo) * rng.random((n, c.dof))
    args = (c.kinds, c.axes, c.offsets, c.tool)

    def run(fk):
        def go():
            for q in qs:
                fk(*args, q)
        return go
    return f"fk x{n}", run(kernels.fk_jit), run(kernels.fk_numpy)


def episode_case(env, rng):
    c = env.chain
    p = init_params(MlpSpec(env.obs_dim, c.dof, (64, 64)), 0)
    target, _ = sample_target(env, 1)
    noise = rng.standard_normal((env.horizon, c.dof))
    args = (*unpack_for_kernel(p), c.kinds, c.axes, c.offsets, c.tool, c.lo, c.hi, env.scale_array,
            env.offset_gain, c.mid_range, target, noise, True)
    return (f"episode h={env.horizon}", lambda: kernels.episode_jit(*args),
            lambda: kernels.run_episode_numpy(*args))


def gae_case(rng, n=20_000):
    rewards, values = rng.normal(size=n), rng.normal(size=n)
    dones = np.zeros(n, dtype=np.bool_)
    dones[2047::2048] = True
    dones[-1] = True
    args = (rewards, values, dones, 0.995, 0.95)
    return f"gae n={n}", lambda: kernels.gae_jit(*args), lambda: kernels.gae_numpy(*args)


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--env", default="scara3")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; only the numpy path exists")

    rng = np.random.default_rng(0)
    env = preset_spec(args.env)
    print(f"{'kernel':<20} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow in (fk_case(env, rng), episode_case(env, rng), gae_case(rng)):
        fast()  # compile or load from cache
        t_fast, t_slow = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<20} {t_fast * 1e3:>10.2f} {t_slow * 1e3:>10.2f} {t_slow / t_fast:>7.1f}x")


if __name__ == "__main__":
    main()
