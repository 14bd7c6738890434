"""Command-line interface.

Commands: ``train``, ``eval``, ``ablate``, ``sample-regression``,
``analyze``, and ``gen-data``. Every command honors ``--config`` /
``--set`` / ``--seed`` / ``--workers`` / ``--out``; with equal seeds the
CSV/JSON artifacts are byte-identical across runs, so wall-clock timings go
to a separate file. Exit codes: 0 success, 2 configuration problem,
3 numerical divergence, 4 unreadable or mismatched checkpoint. Verbosity
comes from the ``LEO_LOG`` environment variable (error, info, or debug).
"""

import argparse
import dataclasses
import json
import logging
import os
import pathlib
import sys

import numpy as np

from . import adaptation, analysis, autodiff as ad, config, model
from . import rng as rng_mod
from . import svg, tasks, trainer

log = logging.getLogger("leo")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging():
    name = os.environ.get("LEO_LOG", "info").strip().lower()
    if name not in _LOG_LEVELS:
        name = "info"
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(levelname)s %(message)s",
                        stream=sys.stderr)


# ---------------------------------------------------------------------------
# shared plumbing


def _add_common_flags(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="flat dotted-key JSON config file")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override hypers.seed")
    parser.add_argument("--workers", type=int,
                        help="episode worker processes (0 = all cores)")
    parser.add_argument("--out", metavar="DIR",
                        help="artifact output directory")


def _resolve(args, base_values=None):
    file_values = dict(base_values or {})
    if args.config:
        file_values.update(config.load_file(args.config))
    overrides = [config.parse_override(text) for text in args.overrides]
    if args.seed is not None:
        overrides.append(("hypers.seed", args.seed))
    if args.workers is not None:
        overrides.append(("run.workers", args.workers))
    if args.out is not None:
        overrides.append(("run.out", args.out))
    return config.resolve(file_values, overrides)


def _worker_count(resolved):
    requested = resolved["run.workers"]
    return requested if requested > 0 else (os.cpu_count() or 1)


def _out_dir(resolved):
    path = pathlib.Path(resolved["run.out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            cell if isinstance(cell, str) else repr(cell) for cell in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_checkpoint_problem(args, checkpoint_path):
    """Load a checkpoint and rebuild its problem, layering any CLI
    overrides on top of the config embedded at save time."""
    try:
        state, blob = trainer.load_checkpoint(checkpoint_path)
    except OSError as err:
        raise trainer.CheckpointError(
            "cannot read %s: %s" % (checkpoint_path, err)) from err
    embedded = blob.get("config")
    if embedded is not None and not isinstance(embedded, dict):
        raise trainer.CheckpointError("embedded config is not an object")
    resolved = _resolve(args, base_values=embedded)
    problem = config.build_problem(resolved)
    if trainer.kind_for_mode(problem.mode) != state.kind:
        raise config.ConfigError(
            "checkpoint holds %r parameters; adapt.mode %r needs %r"
            % (state.kind, problem.mode, trainer.kind_for_mode(problem.mode)))
    return state, blob, resolved, problem


def _metric_name(problem):
    return ("accuracy" if problem.task_kind == tasks.CLASSIFICATION
            else "mse")


# ---------------------------------------------------------------------------
# train


def _run_training(resolved, problem, workers):
    state = trainer.init_train_state(problem.mode, problem.arch,
                                     problem.hypers, n_way=problem.n_way)

    def progress(row):
        log.info("step %d  train %.6f  val %.6f  (%.1fs)", row["step"],
                 row["train_loss"], row["val_metric"], row["elapsed"])

    return trainer.train(state, problem.hypers, problem.mode, problem.arch,
                         problem.episode_fn("train"),
                         problem.episode_fn("validation"),
                         workers=workers, progress=progress)


def _write_training_artifacts(out, resolved, state, history):
    (out / "run.json").write_text(config.dumps(resolved), encoding="utf-8")
    _write_csv(out / "metrics.csv", ("step", "train_loss", "val_metric"),
               [(row["step"], row["train_loss"], row["val_metric"])
                for row in history])
    _write_csv(out / "timings.csv", ("step", "elapsed_seconds"),
               [(row["step"], "%.3f" % row["elapsed"]) for row in history])
    extra = {"mode": state_mode(resolved), "config": resolved}
    trainer.save_checkpoint(out / "final.leoc", state, extra=extra)
    if state.best_params is not None:
        best_state = dataclasses.replace(state, params=state.best_params)
        trainer.save_checkpoint(out / "best.leoc", best_state, extra=extra)


def state_mode(resolved):
    return resolved["adapt.mode"]


def cmd_train(args):
    resolved = _resolve(args)
    problem = config.build_problem(resolved)
    out = _out_dir(resolved)
    workers = _worker_count(resolved)
    log.info("training %s on %s (seed %d, %d workers)", problem.mode,
             resolved["task.kind"], problem.hypers.seed, workers)
    state, history = _run_training(resolved, problem, workers)
    _write_training_artifacts(out, resolved, state, history)
    if history:
        last = history[-1]
        print("final step %d  train %r  val %s %r" %
              (last["step"], last["train_loss"], _metric_name(problem),
               last["val_metric"]))
    if state.best_step >= 0:
        print("best val %s %r at step %d" %
              (_metric_name(problem), state.best_metric, state.best_step))
    print("artifacts in %s" % (out,))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args):
    state, _, resolved, problem = _load_checkpoint_problem(args,
                                                           args.checkpoint)
    count = args.episodes if args.episodes is not None \
        else problem.hypers.eval_episodes
    cfg = trainer.adaptation_config_for(problem.hypers, problem.mode)
    seed = problem.hypers.seed
    report = trainer.evaluate(state, problem.arch, cfg,
                              problem.episode_fn(args.split), count, seed,
                              samples=resolved["run.eval_samples"],
                              grid_points=resolved["run.grid_points"])
    name = _metric_name(problem)
    print("%s %s: %.4f +/- %.4f (%d episodes)"
          % (args.split, name, report.mean, report.stderr, report.count))
    out = _out_dir(resolved)
    _write_json(out / "eval.json", {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "metric": name,
        "mode": problem.mode,
        "seed": seed,
        **dataclasses.asdict(report),
    })
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args):
    base = _resolve(args)
    if base["task.kind"] == config.REGRESSION:
        raise config.ConfigError(
            "ablate compares classification modes; task.kind is regression")
    if args.seeds < 1:
        raise config.ConfigError("--seeds must be positive")
    out = _out_dir(base)
    workers = _worker_count(base)
    base_seed = base["hypers.seed"]
    runs = {}
    for mode in adaptation.MODES:
        scores = []
        for offset in range(args.seeds):
            seed = base_seed + offset
            resolved = config.resolve(base, [("adapt.mode", mode),
                                             ("hypers.seed", seed)])
            problem = config.build_problem(resolved)
            log.info("ablate %s seed %d", mode, seed)
            state, _ = _run_training(resolved, problem, workers)
            params = state.best_params if state.best_params is not None \
                else state.params
            final = dataclasses.replace(state, params=params)
            cfg = trainer.adaptation_config_for(problem.hypers, mode)
            report = trainer.evaluate(final, problem.arch, cfg,
                                      problem.episode_fn("test"),
                                      problem.hypers.eval_episodes, seed)
            scores.append(report.mean)
        runs[mode] = scores
    rows = []
    for mode in adaptation.MODES:
        arr = np.asarray(runs[mode])
        rows.append((mode, float(arr.mean()), float(arr.std()), args.seeds))
        print("%-32s %.4f +/- %.4f" % (mode, arr.mean(), arr.std()))
    _write_csv(out / "ablation.csv",
               ("mode", "mean_accuracy", "std_accuracy", "seeds"), rows)
    _write_json(out / "ablation.json",
                {"base_seed": base_seed, "seeds": args.seeds,
                 "accuracy": runs})
    return 0


# ---------------------------------------------------------------------------
# sample-regression


def cmd_sample_regression(args):
    state, _, resolved, problem = _load_checkpoint_problem(args,
                                                           args.checkpoint)
    if problem.task_kind != tasks.REGRESSION:
        raise config.ConfigError(
            "sample-regression needs a regression checkpoint; this one is "
            "for %s" % (resolved["task.kind"],))
    if args.samples < 0:
        raise config.ConfigError("--samples must be non-negative")
    episode_seed = args.episode_seed
    episode = problem.episode_fn("test")(
        rng_mod.stream(episode_seed, rng_mod.EVAL_EPISODE, 0))
    eval_cfg = trainer.adaptation_config_for(
        problem.hypers, problem.mode).for_evaluation(tasks.REGRESSION)
    pv, _ = model.lift(state.params)
    lo, hi = tasks.INPUT_RANGE
    grid = np.linspace(lo, hi, resolved["run.grid_points"]).reshape(-1, 1)
    grid_var = ad.constant(grid)
    curves = []
    for s in range(args.samples):
        noise = rng_mod.stream(episode_seed, rng_mod.EVAL_NOISE, 0, s)
        result = adaptation.adapt_episode(problem.arch, pv, episode,
                                          eval_cfg, noise, track_meta=False)
        with ad.no_grad():
            pred = model.regression_predict(problem.arch, result.theta,
                                            grid_var)
        curves.append(pred.data[:, 0])
    clean = episode.regression_params.clean(grid)[:, 0]

    out = _out_dir(resolved)
    figure = svg.regression_figure(
        grid[:, 0], clean, episode.train_x[:, 0], episode.train_y[:, 0],
        curves, title="%s episode, seed %d"
        % (episode.regression_params.mode, episode_seed))
    (out / "samples.svg").write_text(figure, encoding="utf-8")
    header = ["x", "true_y"] + ["sample%d" % s for s in range(len(curves))]
    rows = [tuple(float(v) for v in (grid[i, 0], clean[i])
                  + tuple(curve[i] for curve in curves))
            for i in range(grid.shape[0])]
    _write_csv(out / "samples.csv", header, rows)
    print("wrote %s and %s (%d sampled curves)"
          % (out / "samples.svg", out / "samples.csv", len(curves)))
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args):
    groups = []
    out = None
    seen = {}
    for path in args.checkpoints:
        state, _, resolved, problem = _load_checkpoint_problem(args, path)
        if problem.task_kind != tasks.CLASSIFICATION:
            raise config.ConfigError(
                "analyze needs classification checkpoints; %s is for %s"
                % (path, resolved["task.kind"]))
        out = out or _out_dir(resolved)
        seed = problem.hypers.seed
        cfg = trainer.adaptation_config_for(problem.hypers, problem.mode)
        report = analysis.curvature_report(
            state, problem.arch, cfg, problem.episode_fn("test"),
            args.episodes, seed, point=args.point)
        stem = pathlib.Path(path).stem
        seen[stem] = seen.get(stem, 0) + 1
        if seen[stem] > 1:
            stem = "%s-%d" % (stem, seen[stem])
        _write_json(out / ("analysis-%s.json" % stem), {
            "checkpoint": str(path), "mode": problem.mode, "seed": seed,
            **report.to_dict(),
        })
        theta_values = [v for eigs in report.theta_eigenvalues for v in eigs]
        if report.z_eigenvalues:
            z_values = [v for eigs in report.z_eigenvalues for v in eigs]
            groups.append(("%s:z" % stem, z_values))
            print("%s: median |eig| z %.4g  theta %.4g"
                  % (stem, np.median(z_values), np.median(theta_values)))
            analysis.export_latents(state, problem.arch, cfg,
                                    problem.episode_fn("test"),
                                    args.episodes, seed,
                                    out / ("latents-%s.csv" % stem))
        else:
            print("%s: median |eig| theta %.4g"
                  % (stem, np.median(theta_values)))
        groups.append(("%s:theta" % stem, theta_values))
    figure = svg.box_plot(groups, title="|eigenvalue| at the %s point"
                          % (args.point,))
    (out / "eigenvalues.svg").write_text(figure, encoding="utf-8")
    print("artifacts in %s" % (out,))
    return 0


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    resolved = _resolve(args)
    seed = resolved["hypers.seed"]
    dataset = tasks.generate_synthetic_embeddings(
        rng_mod.stream(seed, rng_mod.DATASET),
        class_count=resolved["data.classes"],
        samples_per_class=resolved["data.samples_per_class"],
        n_x=resolved["data.n_x"],
        cluster_spread=resolved["data.cluster_spread"],
    )
    out = _out_dir(resolved)
    path = out / "embeddings.leoe"
    tasks.save_embedding_file(dataset, path)
    print("wrote %s (%d classes x %d samples, n_x=%d, seed %d)"
          % (path, dataset.class_count, resolved["data.samples_per_class"],
             dataset.n_x, seed))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="leo",
        description="Few-shot meta-learning in a latent parameter-"
                    "generating space, with a Meta-SGD baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="meta-train one model")
    _add_common_flags(train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--split", default="test",
                          choices=("train", "validation", "test"))
    evaluate.add_argument("--episodes", type=int,
                          help="evaluation episode count")
    _add_common_flags(evaluate)

    ablate = sub.add_parser(
        "ablate", help="train and compare all adaptation modes")
    ablate.add_argument("--seeds", type=int, default=5,
                        help="independent runs per mode")
    _add_common_flags(ablate)

    sample = sub.add_parser(
        "sample-regression",
        help="plot sampled curves for one regression episode")
    sample.add_argument("checkpoint")
    sample.add_argument("--episode-seed", type=int, default=0)
    sample.add_argument("--samples", type=int, default=5)
    _add_common_flags(sample)

    analyze = sub.add_parser(
        "analyze", help="curvature spectra, step coverage, latent export")
    analyze.add_argument("checkpoints", nargs="+")
    analyze.add_argument("--episodes", type=int, default=10)
    analyze.add_argument("--point", default="adapted",
                         choices=("adapted", "initial"))
    _add_common_flags(analyze)

    gen = sub.add_parser("gen-data",
                         help="write a synthetic embedding dataset file")
    _add_common_flags(gen)

    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sample-regression": cmd_sample_regression,
    "analyze": cmd_analyze,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except config.ConfigError as err:
        log.error("%s", err)
        return 2
    except tasks.TaskError as err:
        log.error("%s", err)
        return 2
    except trainer.CheckpointError as err:
        log.error("checkpoint: %s", err)
        return 4
    except ArithmeticError as err:
        log.error("numerical divergence: %s", err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
