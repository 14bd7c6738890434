"""Inner loops: latent-space adaptation, parameter-space fine-tuning, and
the direct parameter-adaptation baseline.

Two tracking regimes share the forward code. During meta-training the chain
of inner updates stays in one graph (``track_meta=True``) so the outer
update can differentiate through it. During evaluation each step is cut
loose after the update, which keeps memory flat; only current values matter
then.
"""

import dataclasses

import numpy as np

from . import autodiff as ad
from . import model
from . import tasks

LEO = "leo"
LEO_DETERMINISTIC = "leo-deterministic"
LEO_RANDOM_PRIOR = "leo-random-prior"
LEO_NO_FINETUNE = "leo-no-finetune"
COND_GEN_ONLY = "conditional-generator-only"
COND_GEN_FINETUNE = "conditional-generator-finetune"
META_SGD = "meta-sgd"

# fixed comparison-table order
MODES = (
    META_SGD,
    COND_GEN_ONLY,
    COND_GEN_FINETUNE,
    LEO_RANDOM_PRIOR,
    LEO_DETERMINISTIC,
    LEO_NO_FINETUNE,
    LEO,
)


class AdaptationDivergedError(ArithmeticError):
    """Non-finite value met during inner-loop adaptation."""


@dataclasses.dataclass(frozen=True)
class AdaptationConfig:
    mode: str = LEO
    latent_steps: int = 5
    finetune_steps: int = 5
    stochastic: bool = True
    p_keep: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError("unknown adaptation mode %r" % (self.mode,))
        if self.latent_steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be non-negative")
        if not 0.0 < self.p_keep <= 1.0:
            raise ValueError("p_keep must lie in (0, 1]")

    def resolved(self):
        """Apply the mode's structural constraints to the step counts."""
        latent, finetune, stochastic = (
            self.latent_steps,
            self.finetune_steps,
            self.stochastic,
        )
        if self.mode == COND_GEN_ONLY:
            latent = finetune = 0
        elif self.mode == COND_GEN_FINETUNE:
            latent = 0
        elif self.mode == LEO_NO_FINETUNE:
            finetune = 0
        if self.mode == LEO_DETERMINISTIC:
            stochastic = False
        return dataclasses.replace(
            self,
            latent_steps=latent,
            finetune_steps=finetune,
            stochastic=stochastic,
        )

    def for_evaluation(self, task_kind):
        """Evaluation disables dropout; classification also uses the means
        end to end, while regression keeps sampling on."""
        stochastic = self.stochastic and task_kind == tasks.REGRESSION
        return dataclasses.replace(self, stochastic=stochastic, p_keep=1.0)


@dataclasses.dataclass
class AdaptationTrace:
    """Per-step diagnostics, recorded as plain detached arrays."""

    z_path: list = dataclasses.field(default_factory=list)
    theta_path: list = dataclasses.field(default_factory=list)
    train_losses: list = dataclasses.field(default_factory=list)
    z_step_norms: list = dataclasses.field(default_factory=list)
    theta_step_norms: list = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class AdaptResult:
    theta: ad.Var
    trace: AdaptationTrace
    z_init: ad.Var = None
    z_final: ad.Var = None
    mu_e: ad.Var = None
    sigma_e: ad.Var = None


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise AdaptationDivergedError("non-finite %s during adaptation" % what)


def apply_dropout(rng, features, p_keep):
    """Inverted dropout on a feature matrix; identity when p_keep is 1."""
    if p_keep >= 1.0:
        return features
    mask = (rng.random(features.data.shape) < p_keep) / p_keep
    return ad.mul(features, ad.constant(mask))


def _leaf(var, track_meta):
    """During evaluation, cut the value loose so graphs stay per-step."""
    return var if track_meta else ad.variable(var.data)


def encoder_features(episode):
    """What the encoder conditions on: embeddings for classification,
    inputs concatenated with noisy targets for regression."""
    if episode.task_kind == tasks.REGRESSION:
        return np.concatenate([episode.train_x, episode.train_y], axis=1)
    return episode.train_x


def _loss_inputs(arch, episode):
    x = ad.constant(episode.train_x)
    if arch.is_classification:
        return x, episode.train_y
    return x, ad.constant(episode.train_y)


def adapt_latent(arch, pv, episode, config, noise_rng, track_meta=True):
    """Encode, sample, then take latent gradient steps, decoding each time.

    Returns the final decoded parameters (before any fine-tuning), the
    initial and final codes, the code distribution, and the trace. The whole
    chain is differentiable w.r.t. the lifted parameters when track_meta.
    """
    cfg = config.resolved()
    if cfg.mode == META_SGD:
        raise ValueError("meta-sgd adapts parameters directly; see meta_sgd_adapt")
    way, shot = episode.way, episode.shot
    trace = AdaptationTrace()

    if cfg.mode == LEO_RANDOM_PRIOR:
        mu_e = ad.constant(np.zeros((way, arch.n_z)))
        sigma_e = ad.constant(np.ones((way, arch.n_z)))
    else:
        feats = apply_dropout(noise_rng, ad.constant(encoder_features(episode)),
                              cfg.p_keep)
        mu_e, sigma_e = model.encode(arch, pv, feats, way, shot)
    z = model.gaussian_sample(noise_rng, mu_e, sigma_e, cfg.stochastic)
    z = _leaf(z, track_meta)
    z_init = z
    mu_d, _, theta = model.decode(arch, pv, z, noise_rng, cfg.stochastic)
    trace.z_path.append(np.array(z.data))
    trace.theta_path.append(np.array(mu_d.data))

    x_tr, y_tr = _loss_inputs(arch, episode)
    for _ in range(cfg.latent_steps):
        x_step = apply_dropout(noise_rng, x_tr, cfg.p_keep)
        loss = model.inner_loss(arch, theta, x_step, y_tr)
        _check_finite(loss.data, "train loss")
        trace.train_losses.append(loss.item())
        (gz,) = ad.gradients(loss, [z], create_graph=track_meta)
        z_new = ad.sub(z, ad.mul(pv.alpha_z, gz))
        _check_finite(z_new.data, "latent code")
        z_new = _leaf(z_new, track_meta)
        mu_d_new, _, theta = model.decode(arch, pv, z_new, noise_rng, cfg.stochastic)
        trace.z_step_norms.append(float(np.linalg.norm(z_new.data - z.data)))
        trace.theta_step_norms.append(
            float(np.linalg.norm(mu_d_new.data - mu_d.data))
        )
        trace.z_path.append(np.array(z_new.data))
        trace.theta_path.append(np.array(mu_d_new.data))
        z, mu_d = z_new, mu_d_new
    _check_finite(theta.data, "decoded parameters")
    return AdaptResult(
        theta=theta,
        trace=trace,
        z_init=z_init,
        z_final=z,
        mu_e=mu_e,
        sigma_e=sigma_e,
    )


def fine_tune(arch, theta, episode, steps, alpha_theta, config, noise_rng,
              trace, track_meta=True):
    """Plain gradient steps directly on the decoded parameters."""
    cfg = config.resolved()
    x_tr, y_tr = _loss_inputs(arch, episode)
    theta = _leaf(theta, track_meta)
    for _ in range(steps):
        x_step = apply_dropout(noise_rng, x_tr, cfg.p_keep)
        loss = model.inner_loss(arch, theta, x_step, y_tr)
        _check_finite(loss.data, "fine-tune loss")
        trace.train_losses.append(loss.item())
        (gt,) = ad.gradients(loss, [theta], create_graph=track_meta)
        theta_new = ad.sub(theta, ad.mul(alpha_theta, gt))
        _check_finite(theta_new.data, "fine-tuned parameters")
        theta_new = _leaf(theta_new, track_meta)
        trace.theta_step_norms.append(
            float(np.linalg.norm(theta_new.data - theta.data))
        )
        trace.theta_path.append(np.array(theta_new.data))
        theta = theta_new
    return theta


def adapt_episode(arch, pv, episode, config, noise_rng, track_meta=True):
    """Full per-episode procedure: latent steps then optional fine-tuning."""
    cfg = config.resolved()
    result = adapt_latent(arch, pv, episode, cfg, noise_rng, track_meta)
    if cfg.finetune_steps > 0:
        result.theta = fine_tune(
            arch,
            result.theta,
            episode,
            cfg.finetune_steps,
            pv.alpha_theta,
            cfg,
            noise_rng,
            result.trace,
            track_meta,
        )
    return result


def meta_sgd_adapt(theta_shared, alpha, episode, steps, config, noise_rng,
                   track_meta=True):
    """Adapt the shared softmax head in parameter space (the baseline).

    theta_shared: Var [n_x, N]; alpha: Var of the same shape. Gradients flow
    back to both through the whole chain when track_meta.
    """
    if episode.task_kind != tasks.CLASSIFICATION:
        raise ValueError("the direct-adaptation baseline is classification-only")
    cfg = config.resolved()
    trace = AdaptationTrace()
    theta = _leaf(theta_shared, track_meta)
    trace.theta_path.append(np.array(theta.data))
    x_tr = ad.constant(episode.train_x)
    for _ in range(steps):
        x_step = apply_dropout(noise_rng, x_tr, cfg.p_keep)
        logits = ad.matmul(x_step, theta)
        loss = ad.softmax_cross_entropy(logits, episode.train_y)
        _check_finite(loss.data, "train loss")
        trace.train_losses.append(loss.item())
        (gt,) = ad.gradients(loss, [theta], create_graph=track_meta)
        theta_new = ad.sub(theta, ad.mul(alpha, gt))
        _check_finite(theta_new.data, "adapted head")
        theta_new = _leaf(theta_new, track_meta)
        trace.theta_step_norms.append(
            float(np.linalg.norm(theta_new.data - theta.data))
        )
        trace.theta_path.append(np.array(theta_new.data))
        theta = theta_new
    return AdaptResult(theta=theta, trace=trace)


def meta_sgd_steps(config):
    """Inner-step budget for the baseline: the same total number of gradient
    steps the latent+fine-tuning pipeline takes."""
    return config.latent_steps + config.finetune_steps


def predictions(arch, theta, x):
    """Class scores [B, N] or regression outputs [B, 1] for adapted theta."""
    if arch.is_classification:
        return model.classification_logits(theta, x)
    return model.regression_predict(arch, theta, x)
