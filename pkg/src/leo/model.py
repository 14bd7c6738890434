"""The latent parameter-generator network and its objective terms.

An encoder turns the few-shot train set into per-class code statistics via a
pairwise relation network; codes are sampled, decoded into the parameters of
a small target model (linear softmax head, or a whole 3-layer MLP for
regression), and scored with the inner loss. The meta-objective adds a KL
pull toward the standard-normal prior, a penalty tying initial codes to
their adapted versions, and weight/orthogonality regularizers.
"""

import dataclasses
import functools

import numpy as np

from . import autodiff as ad
from . import tasks

ALPHA_Z_INIT = 1.0
ALPHA_THETA_INIT = 0.001
# With the deep relu decoder a unit latent step feeds back on itself: the
# outer loop grows the decoder to span more functions, which inflates the
# latent gradient, which throws the code far enough to blow up the decoded
# network. The linear classification decoder has no such loop, so only
# regression starts with a damped (still learned) latent step size.
REGRESSION_ALPHA_Z_INIT = 0.01
# Decoded parameters feed straight into a loss whose gradients drive
# latent-space steps; shrinking the decoder's output layer at init keeps
# those first steps (taken with alpha_z = 1) inside the range where exp()
# stays finite. Only the final layer is scaled: damping every layer of a
# deep decoder compounds the factor and leaves the generated network too
# close to zero to produce a useful training signal.
DECODER_INIT_SCALE = 0.1
# The sigma head starts near exp(0) = 1, and unit noise on every generated
# weight makes a deep target net wildly non-smooth before any learning has
# happened. Offsetting the log-sigma output keeps early samples close to the
# decoded mean without limiting what spread the decoder can learn.
DECODER_LOG_SIGMA_OFFSET = -3.0
# A free log-sigma head overflows exp() the moment an adaptation step throws
# the code far from the origin; saturating it bounds every sampled scale
# while leaving gradients intact inside the working range.
LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 3.0


def target_param_count(hidden):
    """Parameter count of the 1 -> hidden -> hidden -> 1 MLP with biases."""
    return (hidden + hidden) + (hidden * hidden + hidden) + (hidden + 1)


@dataclasses.dataclass(frozen=True)
class ArchitectureSpec:
    """Layer plan for encoder, relation net, decoder, and the target model.

    Sizes are full per-layer dimension chains; a chain of length 2 is a
    single linear map. theta_dim is the per-class parameter count for
    classification or the whole flattened MLP for regression.
    """

    task_kind: str
    n_x: int
    n_z: int
    encoder_sizes: tuple
    relation_sizes: tuple
    decoder_sizes: tuple
    theta_dim: int
    target_hidden: int = 0
    alpha_z_init: float = ALPHA_Z_INIT
    alpha_theta_init: float = ALPHA_THETA_INIT

    @property
    def is_classification(self):
        return self.task_kind == tasks.CLASSIFICATION


def classification_architecture(n_x, n_z, relation_width=128):
    """Linear encoder, 3-layer relation MLP, linear decoder to 2*n_x."""
    return ArchitectureSpec(
        task_kind=tasks.CLASSIFICATION,
        n_x=n_x,
        n_z=n_z,
        encoder_sizes=(n_x, n_z),
        relation_sizes=(2 * n_z, relation_width, relation_width, 2 * n_z),
        decoder_sizes=(n_z, 2 * n_x),
        theta_dim=n_x,
    )


def regression_architecture(n_z=16, encoder_width=16, relation_width=32,
                            decoder_width=32, target_hidden=40):
    """3-layer relu MLPs throughout; one code generates the whole target MLP.

    The encoder consumes inputs concatenated with noisy targets (dimension
    2) and a single latent code is produced per episode.
    """
    theta_dim = target_param_count(target_hidden)
    return ArchitectureSpec(
        task_kind=tasks.REGRESSION,
        n_x=1,
        n_z=n_z,
        encoder_sizes=(2, encoder_width, encoder_width, n_z),
        relation_sizes=(2 * n_z, relation_width, relation_width, 2 * n_z),
        decoder_sizes=(n_z, decoder_width, decoder_width, 2 * theta_dim),
        theta_dim=theta_dim,
        target_hidden=target_hidden,
        alpha_z_init=REGRESSION_ALPHA_Z_INIT,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclasses.dataclass
class MetaParams:
    """All trained tensors: the three weight chains (no biases anywhere) and
    the learned per-dimension latent / per-parameter fine-tune step sizes."""

    encoder: list
    relation: list
    decoder: list
    alpha_z: np.ndarray
    alpha_theta: np.ndarray

    def named_tensors(self):
        for i, w in enumerate(self.encoder):
            yield "encoder.%d" % i, w
        for i, w in enumerate(self.relation):
            yield "relation.%d" % i, w
        for i, w in enumerate(self.decoder):
            yield "decoder.%d" % i, w
        yield "alpha_z", self.alpha_z
        yield "alpha_theta", self.alpha_theta

    def replace_named(self, values):
        """New MetaParams with tensors taken from a name->array mapping."""
        return MetaParams(
            encoder=[values["encoder.%d" % i] for i in range(len(self.encoder))],
            relation=[values["relation.%d" % i] for i in range(len(self.relation))],
            decoder=[values["decoder.%d" % i] for i in range(len(self.decoder))],
            alpha_z=values["alpha_z"],
            alpha_theta=values["alpha_theta"],
        )


@dataclasses.dataclass
class MetaSgdParams:
    """The direct-adaptation baseline: a shared softmax head plus learned
    per-parameter inner-loop step sizes."""

    theta: np.ndarray
    alpha: np.ndarray

    def named_tensors(self):
        yield "theta", self.theta
        yield "alpha", self.alpha

    def replace_named(self, values):
        return MetaSgdParams(theta=values["theta"], alpha=values["alpha"])


def _init_chain(sizes, rng, scale=1.0):
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = scale / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
    return weights


def init_meta_params(arch, rng):
    encoder = _init_chain(arch.encoder_sizes, rng)
    relation = _init_chain(arch.relation_sizes, rng)
    decoder = _init_chain(arch.decoder_sizes, rng)
    decoder[-1] = decoder[-1] * DECODER_INIT_SCALE
    return MetaParams(
        encoder=encoder,
        relation=relation,
        decoder=decoder,
        alpha_z=np.full(arch.n_z, arch.alpha_z_init),
        alpha_theta=np.full(arch.theta_dim, arch.alpha_theta_init),
    )


def init_meta_sgd_params(n_x, n_way, rng):
    bound = 1.0 / np.sqrt(n_x)
    return MetaSgdParams(
        theta=rng.uniform(-bound, bound, (n_x, n_way)),
        alpha=np.full((n_x, n_way), ALPHA_THETA_INIT),
    )


def lift(params):
    """Wrap every tensor in a gradient-tracked Var.

    Returns (vars-struct, ordered list of Vars) where the list follows
    named_tensors() order so gradients can be zipped back by name.
    """
    lifted = {name: ad.variable(arr) for name, arr in params.named_tensors()}
    struct = params.replace_named(lifted)
    return struct, [lifted[name] for name, _ in params.named_tensors()]


# ---------------------------------------------------------------------------
# forward pieces


def mlp(h, weights):
    """Chain of bias-free linear maps with relu between (not after) them."""
    last = len(weights) - 1
    for i, w in enumerate(weights):
        h = ad.matmul(h, w if isinstance(w, ad.Var) else ad.constant(w))
        if i < last:
            h = ad.relu(h)
    return h


@functools.lru_cache(maxsize=None)
def pair_matrices(n_way, k_shot):
    """Constant selectors realizing the all-ordered-pairs average.

    left/right pick the first/second element of each of the (NK)^2 ordered
    pairs; avg[n] spreads weight 1/(N K^2) over every pair whose first
    element belongs to class n.
    """
    nk = n_way * k_shot
    left = np.zeros((nk * nk, nk))
    right = np.zeros((nk * nk, nk))
    avg = np.zeros((n_way, nk * nk))
    weight = 1.0 / (n_way * k_shot * k_shot)
    for i in range(nk):
        for j in range(nk):
            p = i * nk + j
            left[p, i] = 1.0
            right[p, j] = 1.0
            avg[i // k_shot, p] = weight
    return left, right, avg


def encode(arch, pv, features, way, shot):
    """Per-class code statistics (mu_e, sigma_e), each [way, n_z].

    features: [way*shot, d] grouped by class, K consecutive rows per class;
    for regression that is the x,y concatenation and way=1, shot=K.
    """
    codes = mlp(features, pv.encoder)
    left_m, right_m, avg_m = pair_matrices(way, shot)
    left = ad.matmul(ad.constant(left_m), codes)
    right = ad.matmul(ad.constant(right_m), codes)
    rel = mlp(ad.concat([left, right], axis=1), pv.relation)
    stats = ad.matmul(ad.constant(avg_m), rel)
    mu = ad.narrow(stats, 1, 0, arch.n_z)
    sigma = saturated_exp(ad.narrow(stats, 1, arch.n_z, arch.n_z))
    return mu, sigma


def saturated_exp(v, lo=LOG_SIGMA_MIN, hi=LOG_SIGMA_MAX):
    """exp of v clamped to [lo, hi]; the clamp is built from relu so its
    gradient is 1 inside the range and 0 beyond it."""
    clamped = ad.sub(
        ad.add(ad.constant(lo), ad.relu(ad.sub(v, ad.constant(lo)))),
        ad.relu(ad.sub(v, ad.constant(hi))))
    return ad.exp(clamped)


def gaussian_sample(rng, mu, sigma, stochastic):
    """mu + sigma*eps with the noise held constant (reparameterization)."""
    if not stochastic:
        return mu
    eps = ad.constant(rng.standard_normal(mu.shape))
    return ad.add(mu, ad.mul(sigma, eps))


def decode(arch, pv, z, rng=None, stochastic=False):
    """Parameter distribution (mu_d, sigma_d) and a sampled theta.

    z: [way, n_z] class codes (regression: [1, n_z]). theta rows are the
    per-class softmax weights, or the flattened target MLP.
    """
    out = mlp(z, pv.decoder)
    mu = ad.narrow(out, 1, 0, arch.theta_dim)
    sigma = saturated_exp(
        ad.add(ad.narrow(out, 1, arch.theta_dim, arch.theta_dim),
               ad.constant(DECODER_LOG_SIGMA_OFFSET)))
    theta = gaussian_sample(rng, mu, sigma, stochastic)
    return mu, sigma, theta


def classification_logits(theta, features):
    return ad.matmul(features, ad.transpose(theta))


def regression_predict(arch, theta, x):
    """Run the generated 1 -> h -> h -> 1 MLP on inputs x [B, 1].

    Flat layout: w1[1,h], b1[h], w2[h,h], b2[h], w3[h,1], b3[1].
    """
    h = arch.target_hidden
    flat = ad.reshape(theta, (arch.theta_dim,))
    offs = 0

    def take(count, shape):
        nonlocal offs
        piece = ad.reshape(ad.narrow(flat, 0, offs, count), shape)
        offs += count
        return piece

    w1 = take(h, (1, h))
    b1 = take(h, (1, h))
    w2 = take(h * h, (h, h))
    b2 = take(h, (1, h))
    w3 = take(h, (h, 1))
    b3 = take(1, (1, 1))
    hid = ad.relu(ad.add(ad.matmul(x, w1), b1))
    hid = ad.relu(ad.add(ad.matmul(hid, w2), b2))
    return ad.add(ad.matmul(hid, w3), b3)


def inner_loss(arch, theta, x, y):
    """Eq.-5-style training loss: summed softmax cross-entropy on the class
    head, or mean squared error for the generated regression MLP."""
    if arch.is_classification:
        return ad.softmax_cross_entropy(classification_logits(theta, x), y)
    return ad.mean_squared_error(regression_predict(arch, theta, x), y)


# ---------------------------------------------------------------------------
# objective terms


def kl_to_standard_normal(mu, sigma):
    """Closed form 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma), all entries."""
    one_plus_two_log = ad.add(ad.constant(1.0), ad.mul(ad.constant(2.0), ad.log(sigma)))
    terms = ad.sub(ad.add(ad.square(mu), ad.square(sigma)), one_plus_two_log)
    return ad.mul(ad.constant(0.5), ad.reduce_sum(terms))


def encoder_penalty(z_init, z_adapted):
    """||stopgrad(z') - z||^2; gradient reaches only the encoding path."""
    return ad.sum_of_squares(ad.sub(z_adapted.detach(), z_init))


def regularizer(pv, lam1, lam2):
    """lam1 * L2 over all chain weights, plus lam2 times the per-layer
    Frobenius distance between the decoder's row Gram matrix and identity.

    Rows of a [n_in, n_out] weight are the per-input-dimension vectors, so
    for the decoder they are the images of the latent dimensions. Rows are
    unit-normalized (1e-12 added to the norms) before the Gram product.
    """
    chains = list(pv.encoder) + list(pv.relation) + list(pv.decoder)
    l2 = None
    for w in chains:
        term = ad.sum_of_squares(w)
        l2 = term if l2 is None else ad.add(l2, term)
    total = ad.mul(ad.constant(float(lam1)), l2)
    for w in pv.decoder:
        rows = w.shape[0]
        norms = ad.add(
            ad.sqrt(ad.reduce_sum(ad.square(w), (1,))), ad.constant(1e-12)
        )
        unit = ad.div(w, ad.reshape(norms, (rows, 1)))
        gram = ad.matmul(unit, ad.transpose(unit))
        dist = ad.sqrt(ad.sum_of_squares(ad.sub(gram, ad.constant(np.eye(rows)))))
        total = ad.add(total, ad.mul(ad.constant(float(lam2)), dist))
    return total
