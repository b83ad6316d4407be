"""Predictive distribution over contour vertices and its summaries.

For an image the model implies ``y ~ N(m, sigma2 I + A diag(v) A^T)`` with
``m = A mu(x) + mean + tile(s(x))`` and ``A = U S^{1/2}``. The covariance is
kept factored; :meth:`PredictiveDistribution.dense_covariance` densifies it on
request.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Network, forward
from .shape_model import PcaShapeModel, tile_shift

__all__ = [
    "PredictiveDistribution",
    "VertexEllipse",
    "predict",
    "predictive_distribution",
    "sample_contour",
    "vertex_marginal",
    "chi2_2dof_quantile",
    "confidence_ellipse",
    "coverage_check",
    "export_prediction",
]


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray  # (2V,)
    factor: np.ndarray  # (2V, K)
    latent_mean: np.ndarray  # (K,)
    latent_cov: np.ndarray  # (K,) diagonal
    sigma2: float

    @property
    def vertex_count(self) -> int:
        return self.mean.size // 2

    def dense_covariance(self) -> np.ndarray:
        """Full (2V, 2V) covariance; meant for small problems and debugging."""
        a = self.factor
        return self.sigma2 * np.eye(a.shape[0]) + (a * self.latent_cov) @ a.T

    def vertex_means(self) -> np.ndarray:
        return self.mean.reshape(-1, 2)


@dataclass(frozen=True)
class VertexEllipse:
    center: np.ndarray
    semi_axes: tuple[float, float]
    angle: float
    level: float


def predictive_distribution(
    model: PcaShapeModel, latent_mean, latent_var, shift, sigma2: float
) -> PredictiveDistribution:
    """Closed-form mean and factored covariance for one set of encoder outputs."""
    latent_mean = np.asarray(latent_mean, dtype=np.float64)
    latent_var = np.asarray(latent_var, dtype=np.float64)
    if np.any(latent_var < 0):
        raise ValueError("latent variances must be non-negative")
    a = model.factor_
    mean = a @ latent_mean + model.mean_ + tile_shift(shift, model.vertex_count_)
    return PredictiveDistribution(mean, a, latent_mean, latent_var, float(sigma2))


def predict(net: Network, images, model: PcaShapeModel, sigma2: float) -> list[PredictiveDistribution]:
    """Predictive distributions for a batch of standardized images."""
    out = forward(net, images)
    var = out.latent_var
    return [
        predictive_distribution(model, out.latent_mean.data[i], var[i], out.shift.data[i], sigma2)
        for i in range(out.latent_mean.shape[0])
    ]


def sample_contour(dist: PredictiveDistribution, rng: np.random.Generator, n: int | None = None, include_noise: bool = False) -> np.ndarray:
    """Draw contour(s): ``mean + A (z - mu(x))`` with ``z ~ N(mu(x), diag(v))``.

    Returns (2V,) when ``n`` is None, else (n, 2V). ``include_noise`` adds the
    per-coordinate ``N(0, sigma2)`` observation noise.
    """
    count = 1 if n is None else int(n)
    k = dist.latent_cov.size
    dz = rng.standard_normal((count, k)) * np.sqrt(dist.latent_cov)
    out = dist.mean + dz @ dist.factor.T
    if include_noise:
        out = out + rng.standard_normal(out.shape) * np.sqrt(dist.sigma2)
    return out[0] if n is None else out


def vertex_marginal(dist: PredictiveDistribution, i: int) -> tuple[np.ndarray, np.ndarray]:
    """(2-vector mean, 2x2 covariance) of vertex ``i``."""
    if not 0 <= i < dist.vertex_count:
        raise IndexError(f"vertex index {i} out of range [0, {dist.vertex_count})")
    block = dist.factor[2 * i : 2 * i + 2]
    cov = dist.sigma2 * np.eye(2) + (block * dist.latent_cov) @ block.T
    return dist.mean[2 * i : 2 * i + 2].copy(), cov


def chi2_2dof_quantile(level) -> np.ndarray | float:
    """Quantile of the chi-square distribution with 2 degrees of freedom."""
    level = np.asarray(level, dtype=np.float64)
    if np.any((level <= 0) | (level >= 1)):
        raise ValueError("confidence level must lie in (0, 1)")
    q = -2.0 * np.log1p(-level)
    return float(q) if q.ndim == 0 else q


def _eig2(cov2: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    cov2 = np.asarray(cov2, dtype=np.float64)
    if cov2.shape != (2, 2) or not np.allclose(cov2, cov2.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov2).max())):
        raise ValueError("covariance must be a symmetric 2x2 matrix")
    evals, evecs = np.linalg.eigh(cov2)
    if evals[0] < -tol:
        raise ValueError(f"covariance has a negative eigenvalue {evals[0]:.3g}")
    return np.clip(evals[::-1], 0.0, None), evecs[:, ::-1]


def confidence_ellipse(mean2, cov2, level: float) -> VertexEllipse:
    """Centred ellipse holding probability ``level`` of a 2-D Gaussian."""
    scale = chi2_2dof_quantile(level)
    evals, evecs = _eig2(cov2)
    major = evecs[:, 0]
    angle = float(np.arctan2(major[1], major[0]) % np.pi)
    if np.isclose(angle, np.pi):
        angle = 0.0
    semi = np.sqrt(scale * evals)
    return VertexEllipse(np.asarray(mean2, dtype=np.float64), (float(semi[0]), float(semi[1])), angle, float(level))


def mahalanobis2(dist: PredictiveDistribution, reference) -> np.ndarray:
    """Per-vertex squared Mahalanobis distance of ``reference`` under the marginals."""
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    if len(ref) != dist.vertex_count:
        raise ValueError(f"reference has {len(ref)} vertices, expected {dist.vertex_count}")
    blocks = dist.factor.reshape(dist.vertex_count, 2, -1)
    covs = dist.sigma2 * np.eye(2) + np.einsum("vik,k,vjk->vij", blocks, dist.latent_cov, blocks)
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] * covs[:, 1, 0]
    if np.any(det <= 0):
        raise ValueError("singular vertex marginal (sigma2 = 0 with a degenerate latent covariance)")
    d = ref - dist.vertex_means()
    # closed-form 2x2 inverse
    q = covs[:, 1, 1] * d[:, 0] ** 2 - 2 * covs[:, 0, 1] * d[:, 0] * d[:, 1] + covs[:, 0, 0] * d[:, 1] ** 2
    return q / det


def coverage_check(dist: PredictiveDistribution, reference, level: float) -> float:
    """Fraction of vertices whose reference position lies in the level-ellipse."""
    return float(np.mean(mahalanobis2(dist, reference) <= chi2_2dof_quantile(level)))


def export_prediction(dist: PredictiveDistribution, levels=(0.30, 0.95, 0.999), every: int = 1) -> dict:
    """JSON-ready record of a prediction and its per-vertex ellipses."""
    ellipses = []
    for i in range(0, dist.vertex_count, every):
        m, c = vertex_marginal(dist, i)
        for lv in levels:
            e = confidence_ellipse(m, c, lv)
            ellipses.append(
                {"i": i, "level": lv, "center": list(e.center), "semi_axes": list(e.semi_axes), "angle": e.angle}
            )
    return {
        "mean": list(dist.mean),
        "sigma2": dist.sigma2,
        "latent_mean": list(dist.latent_mean),
        "latent_cov": list(dist.latent_cov),
        "factor": [list(row) for row in dist.factor],
        "ellipses": ellipses,
    }


def distribution_from_export(doc: dict) -> PredictiveDistribution:
    factor = np.array(doc["factor"], dtype=np.float64)
    k = factor.shape[1] if factor.ndim == 2 else 0
    return PredictiveDistribution(
        np.array(doc["mean"], dtype=np.float64),
        factor,
        np.array(doc.get("latent_mean", np.zeros(k)), dtype=np.float64),
        np.array(doc["latent_cov"], dtype=np.float64),
        float(doc["sigma2"]),
    )
