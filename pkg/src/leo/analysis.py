"""Curvature and coverage diagnostics: dense Hessian spectra of the episode
train loss with respect to the code and the decoded parameters, decoder
singular values, inner-step norm comparisons, and latent-code export.

Eigenvalues come from a cyclic Jacobi sweep over the symmetrized matrix —
dimensions here stay small (tens to a few hundred), where Jacobi is simple
and accurate.
"""

import dataclasses
import math

import numpy as np

from . import adaptation
from . import autodiff as ad
from . import model
from . import rng as rng_mod
from . import tasks
from . import trainer

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
DEFAULT_DIM_CAP = 512


class DimensionTooLargeError(ValueError):
    """Dense Hessian requested for a variable above the size cap."""


class NonlinearDecoderError(ValueError):
    """Singular values are only defined for the linear decoder."""


# ---------------------------------------------------------------------------
# eigensolver


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, q) with a ~ q @ diag(eigenvalues) @ q.T; the
    eigenvalues are in no particular order. Sweeps stop once the
    off-diagonal Frobenius norm drops below tol.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("need a square matrix")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 0.0)
    if float(np.max(np.abs(a - a.T))) > 1e-8 * scale:
        raise ValueError("matrix is not symmetric")
    n = a.shape[0]
    q = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), q
    for _ in range(max_sweeps):
        # Sum the off-diagonal entries directly: subtracting the diagonal
        # norm from the full norm cancels catastrophically near convergence.
        strict = a.copy()
        np.fill_diagonal(strict, 0.0)
        if math.sqrt(float(np.sum(strict * strict))) <= tol:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                tau = (a[r, r] - a[p, p]) / (2.0 * apr)
                if math.isinf(tau):
                    continue
                # hypot keeps 1 + tau^2 from overflowing for large tau.
                t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_r = a[:, r].copy()
                a[:, p] = c * col_p - s * col_r
                a[:, r] = s * col_p + c * col_r
                row_p = a[p, :].copy()
                row_r = a[r, :].copy()
                a[p, :] = c * row_p - s * row_r
                a[r, :] = s * row_p + c * row_r
                qc_p = q[:, p].copy()
                qc_r = q[:, r].copy()
                q[:, p] = c * qc_p - s * qc_r
                q[:, r] = s * qc_p + c * qc_r
    return np.diag(a).copy(), q


# ---------------------------------------------------------------------------
# Hessians through the graph


def hessian_matrix(build_loss, x0, dim_cap=DEFAULT_DIM_CAP):
    """Dense d2(loss)/dx2 built one gradient component at a time.

    build_loss: callable taking a Var of x0's shape and returning the scalar
    loss Var. The returned matrix is raw (not symmetrized), row index = the
    gradient component differentiated.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    if n > dim_cap:
        raise DimensionTooLargeError(
            "dense Hessian of size %d exceeds the cap %d" % (n, dim_cap))
    x = ad.variable(x0)
    loss = build_loss(x)
    (grad,) = ad.gradients(loss, [x], create_graph=True)
    flat = ad.reshape(grad, (n,))
    rows = []
    for j in range(n):
        component = ad.narrow(flat, 0, j, 1)
        (column,) = ad.gradients(component, [x], allow_unused=True)
        rows.append(column.data.reshape(-1).copy())
    return np.stack(rows)


def hessian_spectrum(build_loss, x0, dim_cap=DEFAULT_DIM_CAP):
    """Sorted absolute eigenvalues of the symmetrized Hessian."""
    h = hessian_matrix(build_loss, x0, dim_cap)
    sym = 0.5 * (h + h.T)
    values, _ = jacobi_eigh(sym)
    return np.sort(np.abs(values))[::-1]


# ---------------------------------------------------------------------------
# decoder geometry


def decoder_singular_values(arch, params):
    """Singular values of the mean-half of the linear decoder, largest first.

    Computed as square roots of the Jacobi eigenvalues of A^T A.
    """
    if not arch.is_classification or len(params.decoder) != 1:
        raise NonlinearDecoderError(
            "singular values need the linear classification decoder")
    mu_half = np.asarray(params.decoder[0])[:, : arch.theta_dim]
    gram = mu_half.T @ mu_half
    values, _ = jacobi_eigh(gram)
    values = np.sqrt(np.clip(values, 0.0, None))
    return np.sort(values)[::-1][: min(mu_half.shape)]


def step_coverage(trace):
    """(‖Δz‖, ‖Δθ‖) per latent step; θ is the decoded-mean difference.

    For direct parameter adaptation there are no latent steps, so the z
    entries are zero and each fine-tune step contributes its ‖Δθ‖.
    """
    if not trace.theta_step_norms and not trace.z_step_norms:
        raise ValueError("trace records no adaptation steps")
    z_norms = list(trace.z_step_norms)
    theta_norms = list(trace.theta_step_norms)
    pairs = []
    for i, theta_norm in enumerate(theta_norms):
        z_norm = z_norms[i] if i < len(z_norms) else 0.0
        pairs.append((z_norm, theta_norm))
    return pairs


# ---------------------------------------------------------------------------
# report assembly


@dataclasses.dataclass
class CurvatureReport:
    point: str
    episodes: int
    z_eigenvalues: list
    theta_eigenvalues: list
    decoder_singular_values: list
    z_step_norms: list
    theta_step_norms: list
    percentiles: dict

    def to_dict(self):
        return dataclasses.asdict(self)


def _percentile_summary(values):
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    return [float(np.percentile(arr, p)) for p in (5, 50, 95)]


def _constant_params(params):
    return params.replace_named(
        {name: ad.constant(t) for name, t in params.named_tensors()})


def _train_loss_builders(arch, pv, episode):
    x_tr = ad.constant(episode.train_x)
    if arch.is_classification:
        y_tr = episode.train_y
    else:
        y_tr = ad.constant(episode.train_y)

    def z_loss(z_var):
        _, _, theta = model.decode(arch, pv, z_var)
        return model.inner_loss(arch, theta, x_tr, y_tr)

    def theta_loss(theta_var):
        return model.inner_loss(arch, theta_var, x_tr, y_tr)

    return z_loss, theta_loss


def curvature_report(state, arch, cfg, episode_fn, count, seed,
                     point="adapted", dim_cap=DEFAULT_DIM_CAP,
                     include_theta=True):
    """Per-episode train-loss Hessian spectra and step norms on held-out
    episodes, evaluated at the adapted codes/parameters (or the initial
    ones with point="initial")."""
    if point not in ("adapted", "initial"):
        raise ValueError("point must be 'adapted' or 'initial'")
    eval_cfg = cfg.for_evaluation(tasks.CLASSIFICATION)
    pv = _constant_params(state.params)
    z_eigs = []
    theta_eigs = []
    z_steps = []
    theta_steps = []
    for i in range(count):
        episode = episode_fn(rng_mod.stream(seed, rng_mod.ANALYSIS, i))
        if state.kind == trainer.BASELINE_KIND:
            result = adaptation.meta_sgd_adapt(
                pv.theta, pv.alpha, episode, adaptation.meta_sgd_steps(cfg),
                eval_cfg, None, track_meta=False)
            head = result.trace.theta_path[-1 if point == "adapted" else 0]
            x_tr = ad.constant(episode.train_x)

            def head_loss(theta_var, x_tr=x_tr, episode=episode):
                logits = ad.matmul(x_tr, theta_var)
                return ad.softmax_cross_entropy(logits, episode.train_y)

            if include_theta:
                theta_eigs.append(
                    hessian_spectrum(head_loss, head, dim_cap).tolist())
        else:
            result = adaptation.adapt_episode(arch, pv, episode, eval_cfg,
                                              None, track_meta=False)
            z_loss, theta_loss = _train_loss_builders(arch, pv, episode)
            z_point = (result.trace.z_path[-1] if point == "adapted"
                       else result.trace.z_path[0])
            theta_point = (result.trace.theta_path[-1] if point == "adapted"
                           else result.trace.theta_path[0])
            z_eigs.append(hessian_spectrum(z_loss, z_point, dim_cap).tolist())
            if include_theta:
                theta_eigs.append(
                    hessian_spectrum(theta_loss, theta_point,
                                     dim_cap).tolist())
        z_steps.append(list(result.trace.z_step_norms))
        theta_steps.append(list(result.trace.theta_step_norms))
    singular = []
    if state.kind == trainer.LEO_KIND and arch.is_classification:
        singular = decoder_singular_values(arch, state.params).tolist()
    flat = lambda lists: [v for sub in lists for v in sub]
    return CurvatureReport(
        point=point,
        episodes=count,
        z_eigenvalues=z_eigs,
        theta_eigenvalues=theta_eigs,
        decoder_singular_values=singular,
        z_step_norms=z_steps,
        theta_step_norms=theta_steps,
        percentiles={
            "z_eigenvalues": _percentile_summary(flat(z_eigs)),
            "theta_eigenvalues": _percentile_summary(flat(theta_eigs)),
            "z_step_norms": _percentile_summary(flat(z_steps)),
            "theta_step_norms": _percentile_summary(flat(theta_steps)),
        },
    )


# ---------------------------------------------------------------------------
# latent export


def export_latents(state, arch, cfg, episode_fn, count, seed, path):
    """CSV of per-class codes before and after adaptation.

    Columns: episode,class,phase,z0..z{n_z-1}; phase is "initial" or
    "adapted"; class is the episode-local label.
    """
    if state.kind != trainer.LEO_KIND or not arch.is_classification:
        raise ValueError("latent export needs a classification model "
                         "with an encoder")
    eval_cfg = cfg.for_evaluation(tasks.CLASSIFICATION)
    pv = _constant_params(state.params)
    header = ["episode", "class", "phase"]
    header += ["z%d" % d for d in range(arch.n_z)]
    lines = [",".join(header)]
    for i in range(count):
        episode = episode_fn(rng_mod.stream(seed, rng_mod.ANALYSIS, i))
        result = adaptation.adapt_episode(arch, pv, episode, eval_cfg, None,
                                          track_meta=False)
        for phase, codes in (("initial", result.trace.z_path[0]),
                             ("adapted", result.trace.z_path[-1])):
            for label in range(episode.way):
                row = [str(i), str(label), phase]
                row += [repr(float(v)) for v in codes[label]]
                lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path
