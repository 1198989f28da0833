"""Deterministic random-stream derivation.

Every experiment owns a single master seed.  All randomness is drawn from
counter-based Philox generators keyed by ``(master_seed, stream, *indices)``
through ``numpy.random.SeedSequence`` spawn keys, so any stream can be
re-created independently of evaluation order or thread count:

===================  =========================================================
stream constant      used for
===================  =========================================================
TRUTH_INIT           initial truth state draw v0 ~ N(m0, C0)
TRUTH_PROCESS        process-noise sequence of the truth run
TRUTH_OBS            observation-noise sequence of the truth run
MC_SAMPLES           Monte Carlo z-draws of the objective; sub-indexed by the
                     assimilation step so draws are shared between the offline
                     and online objectives (common random numbers)
ENSEMBLE_INIT        initial EnKF ensemble draw
MODEL                random model construction (stable matrix, process noise);
                     sub-indexed per constructed object
MEMBER_NOISE         optional stochastic member perturbation in the EnKF;
                     sub-indexed by (step, member)
===================  =========================================================
"""

import numpy as np

TRUTH_INIT = 0
TRUTH_PROCESS = 1
TRUTH_OBS = 2
MC_SAMPLES = 3
ENSEMBLE_INIT = 4
MODEL = 5
MEMBER_NOISE = 6


def substream(seed, stream, *indices):
    """Return a fresh ``numpy.random.Generator`` for one derived stream.

    Parameters
    ----------
    seed : int
        Master experiment seed.
    stream : int
        One of the stream constants above.
    *indices : int
        Optional sub-indices (step, member, ...) giving order-independent
        per-item streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(ss))


def mc_normal_draws(seed, step, n_samples, dim):
    """Reparameterization z-draws for one assimilation step.

    The draws depend only on ``(seed, step)``, never on how many times or in
    which order objective evaluations happen, which makes every objective a
    deterministic function of theta.
    """
    return substream(seed, MC_SAMPLES, step).standard_normal((n_samples, dim))
