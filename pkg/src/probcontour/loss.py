"""Training objectives.

The probabilistic objective is

    total = lambda * KLD(q || N(0, I)) - sum_n mean_l log N(y_n | A(z_nl), sigma2 I)

with ``z_nl = mu_n + exp(logvar_n / 2) * eps`` and ``q`` the equally weighted
mixture of the batch's latent Gaussians. Both terms are Monte-Carlo estimates
and differentiable through the reparameterized draws.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import DET_PCA, DIRECT_VERTEX, EncoderOutput, Network, forward, forward_baseline
from .shape_model import PcaShapeModel

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "NoiseDraws",
    "draw_noise",
    "sample_latent",
    "log_lik",
    "mc_lower_bound",
    "kld_mc",
    "total_loss",
    "baseline_loss",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the probabilistic objective.

    ``kld_samples`` is the number of mixture draws used for the KLD term;
    ``None`` means ``num_mc_samples * batch_size``.
    """

    sigma2: float = 5e-2
    lam: float = 1e5
    num_mc_samples: int = 5
    batch_size: int = 5
    kld_samples: int | None = None

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.num_mc_samples < 1 or self.batch_size < 1:
            raise ValueError("num_mc_samples and batch_size must be >= 1")
        if self.kld_samples is not None and self.kld_samples < 1:
            raise ValueError("kld_samples must be >= 1")

    def n_kld_samples(self, batch: int) -> int:
        return self.kld_samples if self.kld_samples is not None else self.num_mc_samples * batch


@dataclass
class LossBreakdown:
    total: Tensor
    neg_loglik: Tensor
    kld: Tensor

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "negloglik": self.neg_loglik.item(), "kld": self.kld.item()}


@dataclass(frozen=True)
class NoiseDraws:
    """All randomness of one loss evaluation, so it can be frozen and replayed.

    lik_eps : (N, L, K) standard normals for the likelihood term
    kld_components : (M,) mixture component indices
    kld_eps : (M, K) standard normals for the KLD term
    """

    lik_eps: np.ndarray
    kld_components: np.ndarray
    kld_eps: np.ndarray


def draw_noise(rng: np.random.Generator, n: int, k: int, cfg: LossConfig) -> NoiseDraws:
    lik = rng.standard_normal((n, cfg.num_mc_samples, k))
    m = cfg.n_kld_samples(n)
    comps = rng.integers(0, n, size=m)
    return NoiseDraws(lik, comps, rng.standard_normal((m, k)))


def sample_latent(out: EncoderOutput, eps) -> Tensor:
    """Reparameterized draw(s) ``mu + exp(logvar/2) * eps``.

    ``eps`` of shape (N, K) gives one draw per example; (N, L, K) gives L.
    """
    mean, logvar = out.latent_mean, out.latent_logvar
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[0] != mean.shape[0] or eps.shape[-1] != mean.shape[-1] or eps.ndim not in (2, 3):
        raise ad.ShapeError("sample_latent", mean.shape, eps.shape)
    std = ad.exp(ad.mul(logvar, 0.5))
    if eps.ndim == 3:
        n, k = mean.shape
        mean = ad.reshape(mean, (n, 1, k))
        std = ad.reshape(std, (n, 1, k))
    return ad.add(mean, ad.mul(std, eps))


def _shift_tiler(vertex_count: int) -> np.ndarray:
    return np.tile(np.eye(2), vertex_count)


def log_lik(y, z, shift, model: PcaShapeModel, sigma2: float) -> Tensor:
    """Isotropic Gaussian log-density ``log N(y | U S^1/2 z + mean + shift, sigma2 I)``.

    Shapes: ``y`` (N, 2V); ``z`` (N, K) or (N, L, K); ``shift`` (N, 2).
    Single unbatched vectors are accepted as well. Returns (N,) or (N, L).
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    y = np.asarray(y, dtype=np.float64)
    z, shift = ad.as_tensor(z), ad.as_tensor(shift)
    single = y.ndim == 1
    if single:
        y = y[None]
        z = ad.reshape(z, (1,) + z.shape)
        shift = ad.reshape(shift, (1, 2))
    n, r = y.shape
    k = model.n_components_
    if z.shape[0] != n or z.shape[-1] != k or shift.shape != (n, 2):
        raise ad.ShapeError("log_lik", y.shape, z.shape, shift.shape)
    lead = z.shape[:-1]
    flat = ad.reshape(z, (-1, k))
    recon = ad.reshape(ad.matmul(flat, Tensor(model.factor_.T)), lead + (r,))
    offset = ad.add(ad.matmul(shift, Tensor(_shift_tiler(r // 2))), model.mean_)
    if z.ndim == 3:
        offset = ad.reshape(offset, (n, 1, r))
        y = y[:, None, :]
    resid = ad.sub(y, ad.add(recon, offset))
    quad = ad.reduce_sum(ad.square(resid), axis=-1)
    const = -0.5 * r * (LOG_2PI + np.log(sigma2))
    out = ad.add(ad.mul(quad, -0.5 / sigma2), const)
    return ad.reshape(out, out.shape[1:]) if single else out


def mc_lower_bound(y, out: EncoderOutput, model: PcaShapeModel, cfg: LossConfig, rng=None, eps=None) -> Tensor:
    """Per-example Monte-Carlo estimate of ``E_{z|x} log p(y | z, x)``, shape (N,).

    Supply either ``rng`` (draws ``num_mc_samples`` per example) or explicit
    ``eps`` of shape (N, L, K).
    """
    if eps is None:
        if rng is None:
            raise ValueError("mc_lower_bound needs rng or eps")
        n, k = out.latent_mean.shape
        eps = rng.standard_normal((n, cfg.num_mc_samples, k))
    z = sample_latent(out, eps)
    ll = log_lik(y, z, out.shift, model, cfg.sigma2)
    return ad.reduce_mean(ll, axis=-1)


def mixture_log_density(z: Tensor, mean: Tensor, logvar: Tensor) -> Tensor:
    """``log (1/N) sum_n N(z | mean_n, diag(exp(logvar_n)))`` for each row of z (M, K)."""
    m, k = z.shape
    n = mean.shape[0]
    diff = ad.sub(ad.reshape(z, (m, 1, k)), ad.reshape(mean, (1, n, k)))
    inv_var = ad.exp(ad.mul(logvar, -1.0))
    maha = ad.reduce_sum(ad.mul(ad.square(diff), ad.reshape(inv_var, (1, n, k))), axis=-1)
    logdet = ad.reshape(ad.reduce_sum(logvar, axis=-1), (1, n))
    comp = ad.mul(ad.add(ad.add(maha, logdet), k * LOG_2PI), -0.5)
    return ad.sub(ad.logsumexp(comp, axis=1), np.log(n))


def kld_mc(out: EncoderOutput, cfg: LossConfig, rng=None, components=None, eps=None) -> Tensor:
    """Monte-Carlo KLD between the batch mixture of latent Gaussians and N(0, I).

    Draws pick a mixture component uniformly, then sample it with the
    reparameterization; the estimate is ``mean_l [log q(z_l) - log N(z_l | 0, I)]``.
    """
    mean, logvar = out.latent_mean, out.latent_logvar
    n, k = mean.shape
    if components is None or eps is None:
        if rng is None:
            raise ValueError("kld_mc needs rng or explicit draws")
        m = cfg.n_kld_samples(n)
        components = rng.integers(0, n, size=m)
        eps = rng.standard_normal((m, k))
    components = np.asarray(components, dtype=np.intp)
    eps = np.asarray(eps, dtype=np.float64)
    sel_mean = ad.take_rows(mean, components)
    sel_std = ad.exp(ad.mul(ad.take_rows(logvar, components), 0.5))
    z = ad.add(sel_mean, ad.mul(sel_std, eps))
    log_q = mixture_log_density(z, mean, logvar)
    log_p = ad.mul(ad.add(ad.reduce_sum(ad.square(z), axis=-1), k * LOG_2PI), -0.5)
    return ad.reduce_mean(ad.sub(log_q, log_p))


def loss_from_outputs(
    contours, out: EncoderOutput, model: PcaShapeModel, cfg: LossConfig, draws: NoiseDraws
) -> LossBreakdown:
    bound = mc_lower_bound(contours, out, model, cfg, eps=draws.lik_eps)
    neg = ad.mul(ad.reduce_sum(bound), -1.0)
    kld = kld_mc(out, cfg, components=draws.kld_components, eps=draws.kld_eps)
    return LossBreakdown(ad.add(ad.mul(kld, cfg.lam), neg), neg, kld)


def total_loss(
    images, contours, net: Network, model: PcaShapeModel, cfg: LossConfig, rng=None, draws: NoiseDraws | None = None
) -> LossBreakdown:
    """Full objective for one batch. Pass ``draws`` to freeze the noise."""
    contours = np.asarray(contours, dtype=np.float64)
    if contours.ndim != 2 or len(contours) == 0:
        raise ValueError("total_loss needs a nonempty batch of contours")
    out = forward(net, images)
    if draws is None:
        if rng is None:
            raise ValueError("total_loss needs rng or draws")
        draws = draw_noise(rng, len(contours), model.n_components_, cfg)
    return loss_from_outputs(contours, out, model, cfg, draws)


def predicted_contours(net: Network, images, model: PcaShapeModel | None, mode: str) -> Tensor:
    """Deterministic baseline prediction as a differentiable (N, 2V) tensor."""
    if mode == DIRECT_VERTEX:
        return forward_baseline(net, images, mode)
    if mode == DET_PCA:
        if model is None:
            raise ValueError("det-pca needs a shape model")
        weights, shift = forward_baseline(net, images, mode)
        r = 2 * model.vertex_count_
        recon = ad.matmul(weights, Tensor(model.factor_.T))
        return ad.add(ad.add(recon, ad.matmul(shift, Tensor(_shift_tiler(r // 2)))), model.mean_)
    raise ValueError(f"not a baseline mode: {mode!r}")


def mse(pred, reference) -> Tensor:
    pred = ad.as_tensor(pred)
    reference = np.asarray(reference, dtype=np.float64)
    if pred.shape != reference.shape:
        raise ad.ShapeError("mse", pred.shape, reference.shape)
    return ad.reduce_mean(ad.square(ad.sub(pred, reference)))


def baseline_loss(images, contours, net: Network, model: PcaShapeModel | None, mode: str) -> Tensor:
    """Mean squared coordinate error of a baseline network on a batch."""
    if net.spec.mode != mode:
        raise ValueError(f"baseline mode {mode!r} does not match network head {net.spec.mode!r}")
    return mse(predicted_contours(net, images, model, mode), contours)
