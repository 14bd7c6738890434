"""Outer loop: meta-batched objective, clipped Adam updates, early stopping,
the evaluation protocol, and checkpoint I/O.

Each meta-batch episode is backpropagated independently and the per-tensor
gradients are summed in episode order; that makes single-process and
worker-pool runs bitwise identical, since every episode derives its random
streams from (seed, purpose, outer-step, episode-index) rather than from
worker identity.
"""

import concurrent.futures
import dataclasses
import json
import math
import struct
import time

import numpy as np

from . import adaptation
from . import autodiff as ad
from . import model
from . import rng as rng_mod
from . import tasks

CLIP_LIMIT = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_SAMPLES = 10
GRID_POINTS = 201
NEAR_RADIUS = 0.5
MID_RADIUS = 1.0
FAR_RADIUS = 2.0

LEO_KIND = "leo"
BASELINE_KIND = "meta-sgd"

CHECKPOINT_MAGIC = b"LEOC"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(ArithmeticError):
    """Non-finite meta-gradient or objective; carries the offending tensors."""

    def __init__(self, message, step=None, tensors=()):
        super().__init__(message)
        self.step = step
        self.tensors = tuple(tensors)


class CheckpointError(ValueError):
    """Unreadable, truncated, or wrong-version checkpoint file."""


@dataclasses.dataclass(frozen=True)
class Hyperparameters:
    """Outer-loop settings; defaults follow the published tuned values."""

    outer_lr: float = 0.00043653954
    beta: float = 0.124171967
    gamma: float = 1.33365371e-09
    lambda1: float = 0.000108982953
    lambda2: float = 303.216647
    p_keep: float = 0.711524088
    meta_batch: int = 12
    latent_steps: int = 5
    finetune_steps: int = 5
    max_steps: int = 5000
    eval_interval: int = 100
    patience: int = 20
    eval_episodes: int = 200
    seed: int = 0

    def __post_init__(self):
        for name in ("outer_lr", "beta", "gamma", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be non-negative" % name)
        if not 0.0 < self.p_keep <= 1.0:
            raise ValueError("p_keep must lie in (0, 1]")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be at least 1")
        if self.max_steps < 0 or self.eval_interval < 1 or self.patience < 0:
            raise ValueError("bad step/interval/patience settings")


def adaptation_config_for(hypers, mode):
    return adaptation.AdaptationConfig(
        mode=mode,
        latent_steps=hypers.latent_steps,
        finetune_steps=hypers.finetune_steps,
        stochastic=True,
        p_keep=hypers.p_keep,
    )


def kind_for_mode(mode):
    return BASELINE_KIND if mode == adaptation.META_SGD else LEO_KIND


@dataclasses.dataclass
class TrainState:
    kind: str
    params: object
    moments_m: dict
    moments_v: dict
    step: int = 0
    best_params: object = None
    best_metric: float = None
    best_step: int = -1
    seed: int = 0


@dataclasses.dataclass
class EvalReport:
    count: int
    mean: float
    std: float
    stderr: float
    per_episode: list
    extras: dict = dataclasses.field(default_factory=dict)


def init_train_state(mode, arch, hypers, n_way=None):
    rng = rng_mod.stream(hypers.seed, rng_mod.INIT)
    if kind_for_mode(mode) == BASELINE_KIND:
        if n_way is None:
            raise ValueError("the baseline needs the episode way count up front")
        params = model.init_meta_sgd_params(arch.n_x, n_way, rng)
    else:
        params = model.init_meta_params(arch, rng)
    zeros = {name: np.zeros_like(t) for name, t in params.named_tensors()}
    return TrainState(
        kind=kind_for_mode(mode),
        params=params,
        moments_m=zeros,
        moments_v={name: np.array(t) for name, t in zeros.items()},
        seed=hypers.seed,
    )


def copy_params(params):
    return params.replace_named(
        {name: np.array(t) for name, t in params.named_tensors()})


# ---------------------------------------------------------------------------
# objective


def episode_objective(arch, pv, episode, cfg, beta, gamma, noise_rng,
                      track_meta=True):
    """One episode's term of the meta-objective: adapted validation loss
    plus the weighted code-distribution and code-drift terms.

    Returns (objective Var, validation-loss Var).
    """
    result = adaptation.adapt_episode(arch, pv, episode, cfg, noise_rng,
                                      track_meta)
    if arch.is_classification:
        val_y = episode.val_y
    else:
        val_y = ad.constant(episode.val_y)
    val_loss = model.inner_loss(arch, result.theta, ad.constant(episode.val_x),
                                val_y)
    objective = val_loss
    if beta != 0.0:
        kl = model.kl_to_standard_normal(result.mu_e, result.sigma_e)
        objective = ad.add(objective, ad.mul(ad.constant(beta), kl))
    if gamma != 0.0:
        drift = model.encoder_penalty(result.z_init, result.z_final)
        objective = ad.add(objective, ad.mul(ad.constant(gamma), drift))
    return objective, val_loss


def baseline_objective(pv, episode, cfg, noise_rng, track_meta=True):
    result = adaptation.meta_sgd_adapt(
        pv.theta, pv.alpha, episode, adaptation.meta_sgd_steps(cfg), cfg,
        noise_rng, track_meta)
    logits = ad.matmul(ad.constant(episode.val_x), result.theta)
    loss = ad.softmax_cross_entropy(logits, episode.val_y)
    return loss, loss


def meta_objective(arch, pv, episodes, hypers, cfg, noise_rngs):
    """Summed objective over a meta-batch plus the weight regularizer once."""
    total = None
    for episode, noise_rng in zip(episodes, noise_rngs):
        term, _ = episode_objective(arch, pv, episode, cfg, hypers.beta,
                                    hypers.gamma, noise_rng)
        total = term if total is None else ad.add(total, term)
    if hypers.lambda1 != 0.0 or hypers.lambda2 != 0.0:
        reg = model.regularizer(pv, hypers.lambda1, hypers.lambda2)
        total = reg if total is None else ad.add(total, reg)
    return total


def _episode_job(payload):
    """Worker body: one episode's objective value and parameter gradients."""
    (kind, arch, params, episode, cfg, beta, gamma, seed, step, index) = payload
    pv, plist = model.lift(params)
    noise = rng_mod.stream(seed, rng_mod.ADAPT_NOISE, step, index)
    if kind == BASELINE_KIND:
        objective, val_loss = baseline_objective(pv, episode, cfg, noise)
    else:
        objective, val_loss = episode_objective(arch, pv, episode, cfg, beta,
                                                gamma, noise)
    grads = ad.gradients(objective, plist, allow_unused=True)
    return objective.item(), val_loss.item(), [g.data for g in grads]


# ---------------------------------------------------------------------------
# clipping and Adam


def clip_meta_gradient(grads, limit=CLIP_LIMIT):
    """Component clip to [-limit, limit], then joint rescale so the global
    norm across all tensors is at most limit."""
    clipped = [np.clip(g, -limit, limit) for g in grads]
    total = math.sqrt(sum(float(np.sum(g * g)) for g in clipped))
    if total > limit:
        scale = limit / total
        clipped = [g * scale for g in clipped]
    return clipped


def adam_update(values, grads, m, v, t, lr,
                beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """In-place moment update; returns new parameter arrays. t is 1-based."""
    out = []
    for value, g, m_t, v_t in zip(values, grads, m, v):
        m_t *= beta1
        m_t += (1.0 - beta1) * g
        v_t *= beta2
        v_t += (1.0 - beta2) * g * g
        m_hat = m_t / (1.0 - beta1 ** t)
        v_hat = v_t / (1.0 - beta2 ** t)
        out.append(value - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def ensure_finite_gradients(names, grads, step):
    bad = [name for name, g in zip(names, grads)
           if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDivergedError(
            "non-finite meta-gradient at step %d in: %s"
            % (step, ", ".join(bad)),
            step=step, tensors=bad)


# ---------------------------------------------------------------------------
# the outer step


def outer_step(state, hypers, cfg, arch, episode_fn, mapper=None):
    """Sample a meta-batch, accumulate clipped gradients, apply Adam.

    mapper: an order-preserving map (e.g. executor.map) for the per-episode
    jobs; defaults to the builtin.
    """
    if mapper is None:
        mapper = map
    step = state.step
    episodes = [
        episode_fn(rng_mod.stream(state.seed, rng_mod.EPISODE, step, i))
        for i in range(hypers.meta_batch)
    ]
    payloads = [
        (state.kind, arch, state.params, episodes[i], cfg, hypers.beta,
         hypers.gamma, state.seed, step, i)
        for i in range(hypers.meta_batch)
    ]
    names = [name for name, _ in state.params.named_tensors()]
    totals = None
    objective_total = 0.0
    val_total = 0.0
    for obj_value, val_value, grads in mapper(_episode_job, payloads):
        objective_total += obj_value
        val_total += val_value
        if totals is None:
            totals = [np.array(g) for g in grads]
        else:
            for acc, g in zip(totals, grads):
                acc += g
    if state.kind == LEO_KIND and (hypers.lambda1 != 0.0
                                   or hypers.lambda2 != 0.0):
        pv, plist = model.lift(state.params)
        reg = model.regularizer(pv, hypers.lambda1, hypers.lambda2)
        reg_grads = ad.gradients(reg, plist, allow_unused=True)
        objective_total += reg.item()
        for acc, g in zip(totals, reg_grads):
            acc += g.data
    ensure_finite_gradients(names, totals, step)
    if not math.isfinite(objective_total):
        raise TrainingDivergedError(
            "non-finite objective at step %d" % step, step=step)
    clipped = clip_meta_gradient(totals)
    values = [t for _, t in state.params.named_tensors()]
    m = [state.moments_m[name] for name in names]
    v = [state.moments_v[name] for name in names]
    new_values = adam_update(values, clipped, m, v, step + 1, hypers.outer_lr)
    state.params = state.params.replace_named(dict(zip(names, new_values)))
    state.step = step + 1
    return {
        "step": state.step,
        "objective": objective_total,
        "objective_per_episode": objective_total / hypers.meta_batch,
        "val_loss_per_episode": val_total / hypers.meta_batch,
    }


# ---------------------------------------------------------------------------
# evaluation


def _classification_accuracy(theta_data, episode, kind):
    if kind == BASELINE_KIND:
        logits = episode.val_x @ theta_data
    else:
        logits = episode.val_x @ theta_data.T
    predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == episode.val_y))


def _evaluate_classification(state, arch, cfg, episode_fn, count, seed):
    eval_cfg = cfg.for_evaluation(tasks.CLASSIFICATION)
    pv, _ = model.lift(state.params)
    scores = []
    for i in range(count):
        episode = episode_fn(rng_mod.stream(seed, rng_mod.EVAL_EPISODE, i))
        noise = rng_mod.stream(seed, rng_mod.EVAL_NOISE, i)
        if state.kind == BASELINE_KIND:
            result = adaptation.meta_sgd_adapt(
                pv.theta, pv.alpha, episode,
                adaptation.meta_sgd_steps(cfg), eval_cfg, noise,
                track_meta=False)
        else:
            result = adaptation.adapt_episode(arch, pv, episode, eval_cfg,
                                              noise, track_meta=False)
        scores.append(_classification_accuracy(result.theta.data, episode,
                                               state.kind))
    return _finish_report(scores, {})


def _evaluate_regression(state, arch, cfg, episode_fn, count, seed,
                         samples, grid_points):
    eval_cfg = cfg.for_evaluation(tasks.REGRESSION)
    pv, _ = model.lift(state.params)
    lo, hi = tasks.INPUT_RANGE
    grid = np.linspace(lo, hi, grid_points).reshape(-1, 1)
    grid_var = ad.constant(grid)
    scores = []
    near_mses = []
    spread_pairs = []
    for i in range(count):
        episode = episode_fn(rng_mod.stream(seed, rng_mod.EVAL_EPISODE, i))
        curves = []
        for s in range(samples):
            noise = rng_mod.stream(seed, rng_mod.EVAL_NOISE, i, s)
            result = adaptation.adapt_episode(arch, pv, episode, eval_cfg,
                                              noise, track_meta=False)
            with ad.no_grad():
                pred = model.regression_predict(arch, result.theta, grid_var)
            curves.append(pred.data[:, 0])
        curves = np.stack(curves)
        mean_curve = curves.mean(axis=0)
        spread = curves.std(axis=0)
        clean = episode.regression_params.clean(grid)[:, 0]
        distance = np.min(
            np.abs(grid - episode.train_x[:, 0]), axis=1)
        scores.append(float(np.mean((mean_curve - clean) ** 2)))
        mid = distance <= MID_RADIUS
        near = distance <= NEAR_RADIUS
        far = distance > FAR_RADIUS
        near_mses.append(
            float(np.mean((mean_curve[mid] - clean[mid]) ** 2))
            if np.any(mid) else float("nan"))
        if np.any(near) and np.any(far):
            spread_pairs.append((float(np.mean(spread[near])),
                                 float(np.mean(spread[far]))))
    valid_near = [v for v in near_mses if not math.isnan(v)]
    wins = sum(1 for near_s, far_s in spread_pairs if far_s > near_s)
    extras = {
        "near_mse": near_mses,
        "median_near_mse": float(np.median(valid_near)) if valid_near
        else float("nan"),
        "spread_pairs": spread_pairs,
        "spread_valid": len(spread_pairs),
        "spread_win_rate": wins / len(spread_pairs) if spread_pairs
        else float("nan"),
        "samples": samples,
        "grid_points": grid_points,
    }
    return _finish_report(scores, extras)


def _finish_report(scores, extras):
    arr = np.asarray(scores, dtype=np.float64)
    std = float(arr.std()) if arr.size else 0.0
    return EvalReport(
        count=int(arr.size),
        mean=float(arr.mean()) if arr.size else float("nan"),
        std=std,
        stderr=std / math.sqrt(arr.size) if arr.size else 0.0,
        per_episode=[float(s) for s in scores],
        extras=extras,
    )


def evaluate(state, arch, cfg, episode_fn, count, seed,
             samples=EVAL_SAMPLES, grid_points=GRID_POINTS):
    """Held-out metric with evaluation-mode stochasticity rules.

    Classification reports per-episode accuracy. Regression reports the MSE
    of the mean sampled prediction against the noiseless function on an
    input grid, with across-sample spread statistics near and far from the
    train points in extras.
    """
    if count < 1:
        raise ValueError("need at least one evaluation episode")
    if state.kind == BASELINE_KIND or arch.is_classification:
        return _evaluate_classification(state, arch, cfg, episode_fn, count,
                                        seed)
    return _evaluate_regression(state, arch, cfg, episode_fn, count, seed,
                                samples, grid_points)


# ---------------------------------------------------------------------------
# the training loop


class BestTracker:
    """Patience-based early stopping: stop after `patience` consecutive
    evaluations without improvement on the best metric."""

    def __init__(self, higher_better, patience):
        self.higher_better = higher_better
        self.patience = patience
        self.best = None
        self.best_index = -1
        self.bad_count = 0
        self.evals = 0

    def update(self, metric):
        """Record one evaluation; returns (improved, should_stop)."""
        index = self.evals
        self.evals += 1
        improved = self.best is None or (
            metric > self.best if self.higher_better else metric < self.best)
        if improved:
            self.best = metric
            self.best_index = index
            self.bad_count = 0
            return True, False
        self.bad_count += 1
        return False, self.bad_count >= self.patience


def train(state, hypers, mode, arch, train_episode_fn, val_episode_fn,
          workers=1, progress=None):
    """Run outer steps with periodic evaluation and early stopping.

    Returns (state, history); history has one row per evaluation with the
    outer step, mean per-episode objective since the previous row, the
    validation metric, and elapsed seconds. state.params holds the final
    parameters; state.best_params the best-evaluation snapshot.
    """
    cfg = adaptation_config_for(hypers, mode)
    higher_better = state.kind == BASELINE_KIND or arch.is_classification
    tracker = BestTracker(higher_better, hypers.patience)
    history = []
    window = []
    started = time.monotonic()
    executor = None
    mapper = None
    if workers > 1:
        executor = concurrent.futures.ProcessPoolExecutor(max_workers=workers)
        mapper = executor.map
    try:
        while state.step < hypers.max_steps:
            metrics = outer_step(state, hypers, cfg, arch, train_episode_fn,
                                 mapper)
            window.append(metrics["objective_per_episode"])
            if state.step % hypers.eval_interval == 0:
                report = evaluate(state, arch, cfg, val_episode_fn,
                                  hypers.eval_episodes, hypers.seed)
                row = {
                    "step": state.step,
                    "train_loss": float(np.mean(window)),
                    "val_metric": report.mean,
                    "elapsed": time.monotonic() - started,
                }
                history.append(row)
                window = []
                improved, stop = tracker.update(report.mean)
                if improved:
                    state.best_params = copy_params(state.params)
                    state.best_metric = report.mean
                    state.best_step = state.step
                if progress is not None:
                    progress(row)
                if stop:
                    break
    finally:
        if executor is not None:
            executor.shutdown()
    return state, history


# ---------------------------------------------------------------------------
# checkpoints


def _state_tensors(state):
    for name, t in state.params.named_tensors():
        yield "params." + name, np.asarray(t, dtype=np.float64)
    if state.best_params is not None:
        for name, t in state.best_params.named_tensors():
            yield "best." + name, np.asarray(t, dtype=np.float64)
    for name, _ in state.params.named_tensors():
        yield "adam_m." + name, np.asarray(state.moments_m[name],
                                           dtype=np.float64)
    for name, _ in state.params.named_tensors():
        yield "adam_v." + name, np.asarray(state.moments_v[name],
                                           dtype=np.float64)
    yield "step", np.float64(state.step)
    yield "best_step", np.float64(state.best_step)
    if state.best_metric is not None:
        yield "best_metric", np.float64(state.best_metric)


def save_checkpoint(path, state, extra=None):
    """Little-endian container: magic, version, tensor table, opaque blob."""
    blob_doc = {"kind": state.kind, "seed": state.seed, "step": state.step}
    if extra:
        blob_doc.update(extra)
    blob = json.dumps(blob_doc, sort_keys=True).encode("utf-8")
    tensors = list(_state_tensors(state))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, t in tensors:
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(np.atleast_1d(t), dtype="<f8")
            shape = np.asarray(t).shape
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("B", len(shape)))
            for extent in shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint while reading %s" % what)
    return data


def load_checkpoint(path):
    """Returns (TrainState, blob dict)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version %d" % version)
        table = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("B", _read_exact(fh, 1, "rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "extent"))[0]
                for _ in range(rank))
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = _read_exact(fh, size * 8, "payload")
            arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
            table[name] = arr.reshape(shape) if shape else np.float64(arr[0])
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "blob length"))
        blob = json.loads(_read_exact(fh, blob_len, "blob").decode("utf-8"))
        if fh.read(1):
            raise CheckpointError("trailing bytes after checkpoint blob")
    kind = blob.get("kind")
    if kind not in (LEO_KIND, BASELINE_KIND):
        raise CheckpointError("unknown model kind %r" % (kind,))

    def group(prefix):
        sub = {name[len(prefix):]: t for name, t in table.items()
               if name.startswith(prefix)}
        return sub

    def build_params(mapping):
        if kind == BASELINE_KIND:
            return model.MetaSgdParams(theta=mapping["theta"],
                                       alpha=mapping["alpha"])
        def chain(stem):
            keys = sorted((k for k in mapping if k.startswith(stem + ".")),
                          key=lambda k: int(k.rsplit(".", 1)[1]))
            return [mapping[k] for k in keys]
        return model.MetaParams(
            encoder=chain("encoder"),
            relation=chain("relation"),
            decoder=chain("decoder"),
            alpha_z=mapping["alpha_z"],
            alpha_theta=mapping["alpha_theta"],
        )

    params = build_params(group("params."))
    best_group = group("best.")
    state = TrainState(
        kind=kind,
        params=params,
        moments_m=group("adam_m."),
        moments_v=group("adam_v."),
        step=int(table["step"]),
        best_params=build_params(best_group) if best_group else None,
        best_metric=float(table["best_metric"])
        if "best_metric" in table else None,
        best_step=int(table["best_step"]),
        seed=int(blob.get("seed", 0)),
    )
    return state, blob
