#!/usr/bin/env python3
"""Compare the compiled and pure-numpy kernel backends.

Runs each measurement in a subprocess with ``LEO_BACKEND`` pinned, because
the backend is chosen once at import. Reports per-op microbenchmarks at the
array sizes the models actually use, plus one full meta-training outer step
on each task family.

Usage: python3 benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = """
import json, time
import numpy as np
from leo import adaptation, backend, model, rng, tasks, trainer


def time_call(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def micro_ops(repeats):
    rng_np = np.random.default_rng(0)
    a64 = rng_np.normal(size=(64, 64))
    b64 = rng_np.normal(size=(64, 64))
    a5 = rng_np.normal(size=(5, 64))
    wide = rng_np.normal(size=(25, 128))
    results = {}
    results["matmul_64x64"] = time_call(lambda: backend.matmul(a64, b64),
                                        repeats * 20)
    results["matmul_5x64_64x64"] = time_call(lambda: backend.matmul(a5, b64),
                                             repeats * 20)
    results["exp_25x128"] = time_call(lambda: backend.exp(wide), repeats * 20)
    results["relu_25x128"] = time_call(lambda: backend.relu(wide),
                                       repeats * 20)
    results["mul_add_64x64"] = time_call(
        lambda: backend.add(backend.mul(a64, b64), a64), repeats * 20)
    results["reduce_sum_64x64"] = time_call(
        lambda: backend.reduce_sum(a64, None), repeats * 20)
    return results


def outer_step_classification(repeats):
    arch = model.classification_architecture(n_x=16, n_z=8,
                                             relation_width=16)
    hypers = trainer.Hyperparameters(meta_batch=4, latent_steps=5,
                                     finetune_steps=5, seed=0)
    state = trainer.init_train_state("leo", arch, hypers)
    cfg = trainer.adaptation_config_for(hypers, "leo")
    dataset = tasks.generate_synthetic_embeddings(
        rng.stream(0, rng.DATASET), class_count=20, samples_per_class=20,
        n_x=16, cluster_spread=1.0)
    pool = tuple(range(20))

    def episode_fn(stream):
        return tasks.sample_classification_episode(stream, dataset, pool,
                                                   5, 1, 15)

    def step():
        fresh = trainer.init_train_state("leo", arch, hypers)
        trainer.outer_step(fresh, hypers, cfg, arch, episode_fn)

    return time_call(step, repeats, warmup=1)


def outer_step_regression(repeats):
    arch = model.regression_architecture()
    hypers = trainer.Hyperparameters(meta_batch=4, latent_steps=5,
                                     finetune_steps=5, seed=0)
    state = trainer.init_train_state("leo", arch, hypers)
    cfg = trainer.adaptation_config_for(hypers, "leo")

    def episode_fn(stream):
        return tasks.sample_regression_episode(stream)

    def step():
        fresh = trainer.init_train_state("leo", arch, hypers)
        trainer.outer_step(fresh, hypers, cfg, arch, episode_fn)

    return time_call(step, repeats, warmup=1)


repeats = int(%d)
out = {"backend": backend.NAME, "micro": micro_ops(repeats)}
out["outer_step_classification"] = outer_step_classification(repeats)
out["outer_step_regression"] = outer_step_regression(repeats)
print(json.dumps(out))
"""


def run_backend(name, repeats):
    env = dict(os.environ, LEO_BACKEND=name)
    proc = subprocess.run([sys.executable, "-c", WORKER % repeats],
                          capture_output=True, text=True, env=env)
    if proc.returncode != 0:
        sys.stderr.write(proc.stderr)
        raise SystemExit("backend %r failed" % (name,))
    result = json.loads(proc.stdout.strip().split("\n")[-1])
    assert result["backend"] == ("python" if name == "python" else name)
    return result


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    results = {}
    for name in ("compiled", "python"):
        try:
            results[name] = run_backend(name, args.repeats)
        except SystemExit as err:
            print("skipping %s: %s" % (name, err))
    if not results:
        raise SystemExit("no backend ran")

    keys = sorted(next(iter(results.values()))["micro"])
    print("%-24s" % "op", end="")
    for name in results:
        print("%14s" % name, end="")
    print("   speedup" if len(results) == 2 else "")
    for key in keys:
        print("%-24s" % key, end="")
        times = [results[name]["micro"][key] for name in results]
        for value in times:
            print("%12.2fus" % (value * 1e6), end="")
        if len(times) == 2:
            print("%9.2fx" % (times[1] / times[0]))
        else:
            print()
    for key in ("outer_step_classification", "outer_step_regression"):
        print("%-24s" % key, end="")
        times = [results[name][key] for name in results]
        for value in times:
            print("%12.2fms" % (value * 1e3), end="")
        if len(times) == 2:
            print("%9.2fx" % (times[1] / times[0]))
        else:
            print()


if __name__ == "__main__":
    main()
