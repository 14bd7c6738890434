"""Deterministic random-stream derivation.

Every consumer derives its own generator from the master seed plus a
structural key (purpose, step, index, ...). Streams therefore depend only on
what they are for, never on which worker or in which order they are drawn,
which keeps runs bitwise reproducible under any worker count.
"""

import numpy as np

# purpose codes (first component of every spawn key)
DATASET = 1        # synthetic embedding generation
EPISODE = 2        # drawing episode contents during training
ADAPT_NOISE = 3    # latent/parameter sampling and dropout inside adaptation
INIT = 4           # meta-parameter initialization
EVAL_EPISODE = 5   # evaluation episode stream
EVAL_NOISE = 6     # sampling during evaluation (regression keeps it on)
ANALYSIS = 7       # analysis-time episode stream


def stream(seed, *key):
    """Generator for (seed, key); equal arguments give identical streams."""
    ss = np.random.SeedSequence(
        entropy=int(seed), spawn_key=tuple(int(k) for k in key)
    )
    return np.random.default_rng(ss)


def state_bytes(gen):
    """Serializable snapshot of a generator's position."""
    import json

    state = gen.bit_generator.state
    return json.dumps(state, sort_keys=True).encode("utf-8")


def from_state_bytes(raw):
    import json

    state = json.loads(raw.decode("utf-8"))
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen
