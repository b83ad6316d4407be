"""PCA point-distribution model over interleaved contour vertices.

Contours are flat vectors ``(x1, y1, x2, y2, ..., xV, yV)`` in pixels. The
model stores the mean shape, an orthonormal component matrix ``U`` of shape
``(2V, K)`` and the matching eigenvalues ``S``. Latent codes are whitened, so
``decode(z) = U @ (sqrt(S) * z) + mean + tile(shift)``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._io import dumps as _dumps
from ._validation import check_contours, check_latent, check_shift

__all__ = ["PcaShapeModel", "RankError", "fit_pca", "decode", "project", "tile_shift"]

RANK_TOL = 1e-12


class RankError(ValueError):
    """Requested more components than the training covariance supports."""

    def __init__(self, requested: int, achievable: int):
        self.requested = requested
        self.achievable = achievable
        super().__init__(
            f"n_components={requested} exceeds the covariance rank; achievable rank is {achievable}"
        )


def tile_shift(shift, vertex_count: int) -> np.ndarray:
    """Repeat a 2-vector (or an (N, 2) array) across all vertices."""
    shift = np.asarray(shift, dtype=np.float64)
    return np.tile(shift, vertex_count) if shift.ndim == 1 else np.tile(shift, (1, vertex_count))


def _flip_signs(components: np.ndarray) -> np.ndarray:
    # deterministic orientation: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[idx, np.arange(components.shape[1])])
    signs[signs == 0] = 1.0
    return components * signs


class PcaShapeModel(TransformerMixin, BaseEstimator):
    """Linear shape prior fitted to corresponding contours.

    Parameters
    ----------
    n_components : int
        Number of retained modes ``K``.
    strict : bool, default True
        When True, asking for more modes than the (numerical) rank of the
        training covariance raises :class:`RankError`. When False the extra
        modes are kept with zero eigenvalue (an orthonormal completion), which
        is only useful for inspecting degenerate training sets.

    Attributes
    ----------
    mean_ : ndarray of shape (2V,)
    components_ : ndarray of shape (2V, K)
        Orthonormal columns, ordered by decreasing eigenvalue.
    eigenvalues_ : ndarray of shape (K,)
    spectrum_ : ndarray
        Every eigenvalue of the sample covariance (divisor N-1), descending.
    vertex_count_ : int
    n_components_ : int
    """

    ddof = 1

    def __init__(self, n_components: int = 8, strict: bool = True):
        self.n_components = n_components
        self.strict = strict

    def fit(self, Y, y=None):
        Y = check_contours(Y, min_samples=2)
        n, d = Y.shape
        k = int(self.n_components)
        if k < 1:
            raise ValueError(f"n_components must be >= 1, got {k}")
        if k > d:
            raise RankError(k, min(d, n - 1))
        mean = Y.mean(axis=0)
        X = Y - mean
        denom = n - self.ddof

        if d > n:
            # Gram trick: same non-zero spectrum, n x n instead of d x d
            gram = X @ X.T / denom
            evals, evecs = np.linalg.eigh(gram)
            evals, evecs = evals[::-1], evecs[:, ::-1]
            evals = np.clip(evals, 0.0, None)
            top = evals[0] if evals.size else 0.0
            keep = evals > RANK_TOL * top if top > 0 else np.zeros_like(evals, dtype=bool)
            rank = int(keep.sum())
            comps = X.T @ evecs[:, keep] / np.sqrt(denom * evals[keep])
            spectrum = np.concatenate([np.where(keep, evals, 0.0), np.zeros(d - n)])
            if k > rank:
                if self.strict:
                    raise RankError(k, rank)
                comps = self._complete(comps, d)
        else:
            cov = X.T @ X / denom
            evals, evecs = np.linalg.eigh(cov)
            evals, comps = evals[::-1], evecs[:, ::-1]
            evals = np.clip(evals, 0.0, None)
            top = evals[0]
            spectrum = np.where(evals > RANK_TOL * top, evals, 0.0) if top > 0 else np.zeros_like(evals)
            rank = int(np.count_nonzero(spectrum))
            if k > rank and self.strict:
                raise RankError(k, rank)

        comps = _flip_signs(comps[:, :k])
        self.mean_ = mean
        self.components_ = np.ascontiguousarray(comps)
        self.eigenvalues_ = spectrum[:k].copy()
        self.spectrum_ = spectrum
        self.vertex_count_ = d // 2
        self.n_components_ = k
        return self

    @staticmethod
    def _complete(comps: np.ndarray, d: int) -> np.ndarray:
        # extend the basis with Gram-Schmidt over the canonical axes
        basis = [c for c in comps.T]
        for e in np.eye(d):
            v = e - sum((b @ e) * b for b in basis) if basis else e
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                basis.append(v / norm)
            if len(basis) == d:
                break
        return np.column_stack(basis)

    @property
    def factor_(self) -> np.ndarray:
        """``U S^{1/2}``, the map from whitened codes to vertex offsets."""
        check_is_fitted(self, "components_")
        return self.components_ * np.sqrt(self.eigenvalues_)

    @property
    def explained_variance_ratio_(self) -> np.ndarray:
        total = self.spectrum_.sum()
        return self.eigenvalues_ / total if total > 0 else np.zeros_like(self.eigenvalues_)

    def decode(self, z, shift=None) -> np.ndarray:
        """Contour(s) for whitened code(s) ``z`` translated by ``shift``."""
        check_is_fitted(self, "components_")
        z = check_latent(z, self.n_components_)
        out = z @ self.factor_.T + self.mean_
        if shift is not None:
            out = out + tile_shift(check_shift(shift, z.ndim), self.vertex_count_)
        return out

    def project(self, y, shift=None) -> np.ndarray:
        """Whitened code(s) of contour(s) ``y`` after removing ``shift``."""
        check_is_fitted(self, "components_")
        if np.any(self.eigenvalues_ <= 0):
            raise ValueError("cannot project: zero eigenvalue among retained components")
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        Y = check_contours(y.reshape(1, -1) if single else y, vertex_count=self.vertex_count_)
        if shift is not None:
            Y = Y - tile_shift(check_shift(shift, 1 if single else 2), self.vertex_count_)
        z = (Y - self.mean_) @ self.components_ / np.sqrt(self.eigenvalues_)
        return z[0] if single else z

    def transform(self, Y):
        return self.project(Y)

    def inverse_transform(self, Z, shift=None):
        return self.decode(Z, shift)

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "components_")
        return {
            "vertex_count": int(self.vertex_count_),
            "num_components": int(self.n_components_),
            "ddof": self.ddof,
            "mean": [float(v) for v in self.mean_],
            "eigenvalues": [float(v) for v in self.eigenvalues_],
            # column-major: one list per component
            "components": [[float(v) for v in col] for col in self.components_.T],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PcaShapeModel":
        try:
            k = int(doc["num_components"])
            v = int(doc["vertex_count"])
            mean = np.array(doc["mean"], dtype=np.float64)
            evals = np.array(doc["eigenvalues"], dtype=np.float64)
            comps = np.ascontiguousarray(np.array(doc["components"], dtype=np.float64).T)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed shape model document: {exc}") from exc
        if mean.shape != (2 * v,) or evals.shape != (k,) or comps.shape != (2 * v, k):
            raise ValueError(
                f"shape model arrays inconsistent with vertex_count={v}, num_components={k}"
            )
        model = cls(n_components=k)
        model.mean_, model.components_, model.eigenvalues_ = mean, comps, evals
        model.spectrum_ = evals.copy()
        model.vertex_count_, model.n_components_ = v, k
        return model

    def save(self, path) -> None:
        Path(path).write_text(_dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "PcaShapeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_pca(contours, n_components: int, strict: bool = True) -> PcaShapeModel:
    return PcaShapeModel(n_components=n_components, strict=strict).fit(contours)


def decode(model: PcaShapeModel, z, shift=(0.0, 0.0)) -> np.ndarray:
    return model.decode(z, shift)


def project(model: PcaShapeModel, y, shift=None) -> np.ndarray:
    return model.project(y, shift)
