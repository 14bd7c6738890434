"""Acceptance gate: one test per numbered end-to-end contract.

These go beyond the unit suites: they train real models at the default desk
scale (a regression run and a full ablation grid), so the file takes over an
hour of single-core CPU. Each test finishes by printing one PASS/FAIL line
with the measured numbers behind the verdict.

Run everything else first if iterating: pytest --ignore=tests/test_acceptance.py
"""

import dataclasses
import json
import time
import types

import numpy as np
import pytest

import oracles
from leo import adaptation, analysis, autodiff as ad, cli, config, model
from leo import rng as rng_mod
from leo import tasks, trainer

# Matched per-run budget for the ablation grid: small enough that the full
# 7-mode x 5-seed sweep stays far inside the hour, large enough that the
# mode ordering is out of the noise.
GRID_OVERRIDES = (
    ("hypers.max_steps", 600),
    ("hypers.meta_batch", 8),
    ("hypers.eval_interval", 100),
    ("hypers.eval_episodes", 40),
)
GRID_SEEDS = 5
GRID_TEST_EPISODES = 200


def _report(number, ok, detail):
    print("criterion %d: %s — %s" % (number, "PASS" if ok else "FAIL", detail))
    assert ok, "criterion %d failed: %s" % (number, detail)


# ---------------------------------------------------------------------------
# 1. autodiff vs central finite differences, first and second order


def _softplus(v):
    return ad.log(ad.add(ad.exp(v), ad.constant(1.0)))


def _random_net(rng):
    """Layer sizes, data, and a loss builder for one small smooth network."""
    depth = int(rng.integers(2, 4))
    sizes = [int(rng.integers(2, 6))]
    for _ in range(depth - 1):
        sizes.append(int(rng.integers(3, 8)))
    sizes.append(int(rng.integers(1, 4)))
    weights = [rng.uniform(-0.7, 0.7, (a, b)) / np.sqrt(a)
               for a, b in zip(sizes[:-1], sizes[1:])]
    assert sum(w.size for w in weights) <= 200
    x_tr = rng.uniform(-1.0, 1.0, (5, sizes[0]))
    y_tr = rng.uniform(-1.0, 1.0, (5, sizes[-1]))
    x_val = rng.uniform(-1.0, 1.0, (4, sizes[0]))
    y_val = rng.uniform(-1.0, 1.0, (4, sizes[-1]))

    def loss(params, x, y):
        h = ad.constant(x)
        for i, w in enumerate(params):
            h = ad.matmul(h, w)
            if i < len(params) - 1:
                h = _softplus(h)
        return ad.reduce_sum(ad.square(ad.sub(h, ad.constant(y))))

    return weights, (x_tr, y_tr, x_val, y_val), loss


def _flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def _unflatten(flat, like):
    out = []
    start = 0
    for a in like:
        out.append(np.asarray(flat[start:start + a.size]).reshape(a.shape))
        start += a.size
    return out


def test_criterion_1_gradients_match_finite_differences():
    started = time.monotonic()
    rng = np.random.default_rng(11)
    alpha = 0.05
    worst_first = 0.0
    worst_meta = 0.0
    for net in range(100):
        weights, (x_tr, y_tr, x_val, y_val), loss = _random_net(rng)
        flat0 = _flatten(weights)

        # first order
        params = [ad.variable(w) for w in weights]
        grads = ad.gradients(loss(params, x_tr, y_tr), params)
        got = _flatten([g.data for g in grads])

        def first_scalar(flat):
            ws = _unflatten(flat, weights)
            return loss([ad.constant(w) for w in ws], x_tr, y_tr).item()

        fd = oracles.central_difference(first_scalar, flat0)
        worst_first = max(worst_first, oracles.rel_error(got, fd))

        # second order: differentiate through 1-3 inner gradient steps
        steps = 1 + net % 3

        def meta(ws_data, as_vars=True):
            leaves = [ad.variable(w) for w in ws_data]
            cur = leaves
            for _ in range(steps):
                inner = ad.gradients(loss(cur, x_tr, y_tr), cur,
                                     create_graph=True)
                cur = [ad.sub(c, ad.mul(ad.constant(alpha), g))
                       for c, g in zip(cur, inner)]
            return leaves, loss(cur, x_val, y_val)

        leaves, val = meta(weights)
        got_meta = _flatten(
            [g.data for g in ad.gradients(val, leaves)])

        def meta_scalar(flat):
            return meta(_unflatten(flat, weights))[1].item()

        fd_meta = oracles.central_difference(meta_scalar, flat0)
        worst_meta = max(worst_meta, oracles.rel_error(got_meta, fd_meta))
    elapsed = time.monotonic() - started
    ok = worst_first < 1e-6 and worst_meta < 1e-4 and elapsed < 60.0
    _report(1, ok,
            "100 nets: max first-order rel err %.3g (< 1e-6), max meta rel "
            "err %.3g (< 1e-4), %.1fs (< 60s)"
            % (worst_first, worst_meta, elapsed))


# ---------------------------------------------------------------------------
# 2. closed-form oracles


def test_criterion_2_closed_form_oracles():
    # KL of the standard normal against itself vanishes exactly
    way, n_z = 3, 4
    kl_zero = model.kl_to_standard_normal(
        ad.constant(np.zeros((way, n_z))), ad.constant(np.ones((way, n_z))))
    exact_zero = kl_zero.item() == 0.0

    # closed form vs 1e5-draw Monte Carlo, within three standard errors
    rng = np.random.default_rng(21)
    mu = rng.uniform(-1.5, 1.5, (way, n_z))
    sigma = np.exp(rng.uniform(-1.0, 0.7, (way, n_z)))
    closed = model.kl_to_standard_normal(
        ad.constant(mu), ad.constant(sigma)).item()
    mc, se = oracles.kl_monte_carlo(rng, mu, sigma, 10 ** 5)
    mc_gap_se = abs(closed - mc) / se

    # the orthogonality penalty vanishes for orthonormal decoder rows
    arch = model.classification_architecture(6, 6)
    params = model.init_meta_params(arch, rng_mod.stream(2, rng_mod.INIT))
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    params.decoder[0] = q[:6, :]  # six exactly orthonormal rows
    pv, _ = model.lift(params)
    ortho = model.regularizer(pv, 0.0, 1.0).item()

    # first Adam step against the hand-derived formula
    g = rng.standard_normal((4, 3)) * 10.0 ** rng.integers(-3, 4)
    theta0 = rng.standard_normal((4, 3))
    lr = 0.0007
    (theta1,) = trainer.adam_update(
        [theta0.copy()], [g.copy()], [np.zeros_like(g)], [np.zeros_like(g)],
        1, lr)
    adam_err = float(np.max(np.abs(
        (theta1 - theta0) - oracles.adam_first_step_reference(g, lr))))

    ok = (exact_zero and mc_gap_se <= 3.0 and ortho < 1e-10
          and adam_err <= 1e-12)
    _report(2, ok,
            "KL(std||std) == 0 exactly: %s; |closed - MC| = %.2f SE (<= 3); "
            "orthonormal-row penalty %.2g (< 1e-10); Adam first-step err "
            "%.2g (<= 1e-12)" % (exact_zero, mc_gap_se, ortho, adam_err))


# ---------------------------------------------------------------------------
# 3. mode identity: leo-deterministic with zero steps == generator-only


def test_criterion_3_zero_step_deterministic_identity():
    resolved = config.resolve(None, [("hypers.max_steps", 25),
                                     ("hypers.meta_batch", 4),
                                     ("adapt.mode", "conditional-generator-only")])
    problem = config.build_problem(resolved)
    hypers = problem.hypers
    state = trainer.init_train_state(problem.mode, problem.arch, hypers,
                                     problem.n_way)
    cfg = trainer.adaptation_config_for(hypers, problem.mode)
    for _ in range(25):
        trainer.outer_step(state, hypers, cfg, problem.arch,
                           problem.episode_fn("train"))
    episode_fn = problem.episode_fn("test")

    identical = True
    for params in (model.init_meta_params(problem.arch,
                                          rng_mod.stream(0, rng_mod.INIT)),
                   state.params):
        probe = dataclasses.replace(state, params=params)
        reports = []
        for mode, latent, finetune in (
                (adaptation.LEO_DETERMINISTIC, 0, 0),
                (adaptation.COND_GEN_ONLY,
                 hypers.latent_steps, hypers.finetune_steps)):
            cfg_mode = adaptation.AdaptationConfig(
                mode=mode, latent_steps=latent, finetune_steps=finetune,
                stochastic=True, p_keep=hypers.p_keep)
            reports.append(trainer.evaluate(
                probe, problem.arch, cfg_mode, episode_fn, 100, 314))
        blobs = [json.dumps(dataclasses.asdict(r), sort_keys=True)
                 for r in reports]
        identical = identical and blobs[0] == blobs[1] and (
            np.asarray(reports[0].per_episode).tobytes()
            == np.asarray(reports[1].per_episode).tobytes())
    _report(3, identical,
            "100-episode evaluation output bitwise identical at init and "
            "after 25 training steps: %s" % identical)


# ---------------------------------------------------------------------------
# 4. regression behaviour at the default desk scale


@pytest.fixture(scope="module")
def regression_run():
    resolved = config.resolve(None, [("task.kind", config.REGRESSION)])
    problem = config.build_problem(resolved)
    hypers = problem.hypers
    state = trainer.init_train_state(problem.mode, problem.arch, hypers,
                                     problem.n_way)
    started = time.monotonic()
    state, _ = trainer.train(state, hypers, problem.mode, problem.arch,
                             problem.episode_fn("train"),
                             problem.episode_fn("validation"), workers=1)
    if state.best_params is not None:
        state = dataclasses.replace(state, params=state.best_params)
    report = trainer.evaluate(state, problem.arch,
                              trainer.adaptation_config_for(hypers,
                                                            problem.mode),
                              problem.episode_fn("test"), 200, 424242)
    return types.SimpleNamespace(report=report,
                                 elapsed=time.monotonic() - started)


def test_criterion_4_regression_fit_and_uncertainty(regression_run):
    med = regression_run.report.extras["median_near_mse"]
    win = regression_run.report.extras["spread_win_rate"]
    elapsed = regression_run.elapsed
    ok = med < 0.15 and win >= 0.8 and elapsed <= 1800.0
    _report(4, ok,
            "200 held-out episodes: median near-data MSE of the sampled-mean "
            "curve %.4f (< 0.15); far-spread > near-spread in %.0f%% of "
            "episodes (>= 80%%); train+eval %.0fs (<= 1800s)"
            % (med, win * 100.0, elapsed))


# ---------------------------------------------------------------------------
# 5. ablation-grid ordering at matched budgets


@pytest.fixture(scope="module")
def ablation_grid():
    started = time.monotonic()
    accuracies = {mode: [] for mode in adaptation.MODES}
    kept = {}
    for seed in range(GRID_SEEDS):
        for mode in adaptation.MODES:
            overrides = list(GRID_OVERRIDES) + [
                ("adapt.mode", mode), ("hypers.seed", seed)]
            problem = config.build_problem(config.resolve(None, overrides))
            hypers = problem.hypers
            state = trainer.init_train_state(problem.mode, problem.arch,
                                             hypers, problem.n_way)
            state, _ = trainer.train(state, hypers, problem.mode,
                                     problem.arch,
                                     problem.episode_fn("train"),
                                     problem.episode_fn("validation"),
                                     workers=1)
            if state.best_params is not None:
                state = dataclasses.replace(state, params=state.best_params)
            report = trainer.evaluate(
                state, problem.arch,
                trainer.adaptation_config_for(hypers, problem.mode),
                problem.episode_fn("test"), GRID_TEST_EPISODES, 9000 + seed)
            accuracies[mode].append(report.mean)
            if seed == 0 and mode in (adaptation.LEO, adaptation.META_SGD):
                kept[mode] = (state, problem)
    means = {mode: float(np.mean(vals)) for mode, vals in accuracies.items()}
    return types.SimpleNamespace(accuracies=accuracies, means=means,
                                 kept=kept,
                                 elapsed=time.monotonic() - started)


def test_criterion_5_classification_ordering(ablation_grid):
    means = ablation_grid.means
    ranked = sorted(adaptation.MODES, key=lambda m: means[m], reverse=True)
    leo_rank = ranked.index(adaptation.LEO) + 1
    ok = (means[adaptation.LEO] >= means[adaptation.META_SGD]
          and leo_rank <= 2 and ablation_grid.elapsed <= 3600.0)
    table = ", ".join("%s %.3f" % (m, means[m]) for m in ranked)
    _report(5, ok,
            "5-seed means: %s; leo >= meta-sgd: %s; leo rank %d (top-2); "
            "grid %.0fs (<= 3600s)"
            % (table, means[adaptation.LEO] >= means[adaptation.META_SGD],
               leo_rank, ablation_grid.elapsed))


# ---------------------------------------------------------------------------
# 6. curvature direction and step-size geometry on the trained model


def test_criterion_6_latent_curvature_exceeds_parameter_curvature(
        ablation_grid):
    leo_state, leo_problem = ablation_grid.kept[adaptation.LEO]
    msgd_state, msgd_problem = ablation_grid.kept[adaptation.META_SGD]
    leo_cfg = trainer.adaptation_config_for(leo_problem.hypers,
                                            adaptation.LEO)
    msgd_cfg = trainer.adaptation_config_for(msgd_problem.hypers,
                                             adaptation.META_SGD)
    leo_report = analysis.curvature_report(
        leo_state, leo_problem.arch, leo_cfg,
        leo_problem.episode_fn("test"), 100, 77)
    msgd_report = analysis.curvature_report(
        msgd_state, msgd_problem.arch, msgd_cfg,
        msgd_problem.episode_fn("test"), 100, 77)
    med_z = leo_report.percentiles["z_eigenvalues"][1]
    med_theta = leo_report.percentiles["theta_eigenvalues"][1]
    leo_step = leo_report.percentiles["theta_step_norms"][1]
    msgd_step = msgd_report.percentiles["theta_step_norms"][1]
    ok = med_z > med_theta and leo_step > msgd_step
    _report(6, ok,
            "median |eigenvalue|: z-space %.3g vs theta-space %.3g (ratio "
            "%.2f > 1); median per-step ‖Δθ‖: leo %.3g vs meta-sgd %.3g"
            % (med_z, med_theta, med_z / max(med_theta, 1e-300),
               leo_step, msgd_step))


# ---------------------------------------------------------------------------
# 7. eigensolver and singular values vs the power-iteration oracle


def _separated_symmetric(rng, n, ratio, top=3.0):
    # geometrically separated |eigenvalues| keep the oracle's power
    # iteration converging tightly
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    values = top * ratio ** np.arange(n) * rng.choice([-1.0, 1.0], n)
    return (q * values) @ q.T


def test_criterion_7_spectra_match_power_iteration_oracle():
    rng = np.random.default_rng(71)
    worst = 0.0
    for case in range(100):
        n = int(rng.integers(2, 65))
        ratio = float(rng.uniform(0.85, 0.95))
        if case % 5 == 0:
            # decoder route: singular values of the mean half of a linear map
            n_z = n
            n_x = max(2, n - int(rng.integers(0, min(n - 1, 4))))
            arch = model.classification_architecture(n_x, n_z)
            u, _ = np.linalg.qr(rng.standard_normal((n_z, n_z)))
            v, _ = np.linalg.qr(rng.standard_normal((n_x, n_x)))
            values = 3.0 * ratio ** np.arange(n_x)
            mu_half = u[:, :n_x] @ (values[:, None] * v.T)
            params = types.SimpleNamespace(
                decoder=[np.concatenate(
                    [mu_half, rng.standard_normal((n_z, n_x))], axis=1)])
            got = np.asarray(
                analysis.decoder_singular_values(arch, params))
            want = np.sqrt(oracles.power_iteration_spectrum(
                mu_half.T @ mu_half))
        else:
            a = _separated_symmetric(rng, n, ratio)
            values, _ = analysis.jacobi_eigh(a)
            got = np.sort(np.abs(values))[::-1]
            want = oracles.power_iteration_spectrum(a)
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok = worst <= 1e-8
    _report(7, ok,
            "100 matrices (n <= 64, 20 via the decoder SVD route): max "
            "|spectrum - oracle| %.3g (<= 1e-8)" % worst)


# ---------------------------------------------------------------------------
# 8. clipping contract


def test_criterion_8_clipping_contract():
    rng = np.random.default_rng(81)
    worst_comp = 0.0
    worst_norm = 0.0
    for trial in range(1000):
        tensors = []
        for _ in range(int(rng.integers(1, 5))):
            shape = tuple(rng.integers(1, 7, size=int(rng.integers(1, 3))))
            scale = 10.0 ** rng.uniform(-12.0, 12.0)
            t = rng.standard_normal(shape) * scale
            if trial % 17 == 0:
                t[...] = 0.0
            tensors.append(t)
        clipped = trainer.clip_meta_gradient(tensors)
        worst_comp = max(worst_comp,
                         max(float(np.max(np.abs(c))) for c in clipped))
        worst_norm = max(worst_norm, float(np.sqrt(
            sum(float(np.sum(c * c)) for c in clipped))))
    ok = worst_comp <= 0.1 and worst_norm <= 0.1 + 1e-12
    _report(8, ok,
            "1000 trials: max component %.17g (<= 0.1), max global norm "
            "%.17g (<= 0.1 + 1e-12)" % (worst_comp, worst_norm))


# ---------------------------------------------------------------------------
# 9. byte-level reproducibility


def test_criterion_9_reproducibility(tmp_path):
    values = {
        "data.classes": 20, "data.samples_per_class": 8, "data.n_x": 6,
        "data.train_classes": 12, "data.val_classes": 4,
        "data.test_classes": 4, "task.way": 3, "task.val_per_class": 3,
        "arch.n_z": 4, "arch.relation_width": 8,
        "hypers.meta_batch": 3, "hypers.max_steps": 12,
        "hypers.eval_interval": 4, "hypers.eval_episodes": 6,
        "hypers.latent_steps": 2, "hypers.finetune_steps": 2,
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(values))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--config", str(cfg),
                         "--out", str(out), "--workers", "1"]) == 0
        outs.append(out)
    metrics_same = ((outs[0] / "metrics.csv").read_bytes()
                    == (outs[1] / "metrics.csv").read_bytes())
    checkpoints_same = ((outs[0] / "final.leoc").read_bytes()
                        == (outs[1] / "final.leoc").read_bytes())

    # checkpoint round-trip: load and re-save bitwise
    state, extra = trainer.load_checkpoint(outs[0] / "final.leoc")
    resaved = tmp_path / "resaved.leoc"
    trainer.save_checkpoint(resaved, state, extra)
    ckpt_roundtrip = (resaved.read_bytes()
                      == (outs[0] / "final.leoc").read_bytes())

    # embedding-file round-trip: load and re-save bitwise
    dataset = tasks.generate_synthetic_embeddings(
        rng_mod.stream(3, rng_mod.DATASET), class_count=18,
        samples_per_class=5, n_x=7, cluster_spread=1.0)
    first = tmp_path / "one.leoe"
    second = tmp_path / "two.leoe"
    tasks.save_embedding_file(dataset, first)
    tasks.save_embedding_file(tasks.load_embedding_file(first), second)
    emb_roundtrip = first.read_bytes() == second.read_bytes()

    ok = (metrics_same and checkpoints_same and ckpt_roundtrip
          and emb_roundtrip)
    _report(9, ok,
            "equal-seed reruns: metrics.csv identical %s, final.leoc "
            "identical %s; checkpoint re-save bitwise %s; embedding file "
            "re-save bitwise %s"
            % (metrics_same, checkpoints_same, ckpt_roundtrip, emb_roundtrip))
