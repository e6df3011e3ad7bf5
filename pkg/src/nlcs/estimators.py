"""scikit-learn style wrappers.

Rows of ``X`` are image blocks, either flattened row-major (``[n, B*B]``)
or as ``[n, B, B]`` / ``[n, 1, B, B]``.  ``transform`` measures blocks,
``predict`` (alias ``inverse_transform``) reconstructs blocks from
measurements and ``score`` is the mean PSNR of measure-then-reconstruct.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import classical, sampling, training
from .network import NetParams, reconstruct


def _check_blocks(X, block: int) -> np.ndarray:
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False)
    if X.ndim == 1:
        raise ValueError("expected a batch of blocks, got a 1-D array")
    X = X.reshape(X.shape[0], -1)
    if X.shape[1] != block * block:
        raise ValueError(f"blocks have {X.shape[1]} pixels, expected {block}x{block}")
    return X


def _check_measurements(b, m: int) -> np.ndarray:
    b = check_array(b, dtype=np.float64)
    if b.shape[1] != m:
        raise ValueError(f"measurements have {b.shape[1]} entries, expected M={m}")
    return b


class _BlockCS(TransformerMixin, BaseEstimator):
    def transform(self, X):
        check_is_fitted(self, "phi_")
        X = _check_blocks(X, self.block)
        return X @ self.phi_.T

    def inverse_transform(self, b):
        return self.predict(b)

    def score(self, X, y=None):
        """Mean PSNR (dB) of reconstructing ``X`` from its own measurements."""
        X = _check_blocks(X, self.block)
        rec = self.predict(self.transform(X))
        return float(np.mean([training.psnr(a, r) for a, r in zip(X, rec)]))


class ClassicalCS(_BlockCS):
    """Gaussian sampling plus the iterative augmented Lagrangian solver.

    ``fit`` only draws the sampling matrix; the solver has nothing to learn.
    """

    def __init__(self, rate=0.25, block=8, seed=0, alpha=0.05, beta=1.0, theta=1.0,
                 mu=1.0, step=0.25, h=0.05, search_radius=5, patch_radius=1,
                 inner_iters=10, outer_iters=100, tol=1e-5):
        self.rate = rate
        self.block = block
        self.seed = seed
        self.alpha = alpha
        self.beta = beta
        self.theta = theta
        self.mu = mu
        self.step = step
        self.h = h
        self.search_radius = search_radius
        self.patch_radius = patch_radius
        self.inner_iters = inner_iters
        self.outer_iters = outer_iters
        self.tol = tol

    def solver_config(self) -> classical.SolverConfig:
        names = {f.name for f in fields(classical.SolverConfig)}
        return classical.SolverConfig(**{k: v for k, v in self.get_params().items()
                                         if k in names})

    def fit(self, X=None, y=None):
        if X is not None:
            _check_blocks(X, self.block)
        self.config_ = self.solver_config()
        n = self.block * self.block
        self.phi_ = sampling.init_gaussian(sampling.measurements_for_rate(self.rate, n),
                                           n, self.seed).phi
        self.n_features_in_ = n
        return self

    def predict(self, b):
        check_is_fitted(self, "phi_")
        b = _check_measurements(b, self.phi_.shape[0])
        out = [classical.solve(row, self.phi_, self.config_).u.ravel() for row in b]
        return np.asarray(out)


class NLCSNet(_BlockCS):
    """The unrolled network; ``fit`` trains it on the given blocks."""

    def __init__(self, rate=0.25, block=33, n_phases=3, lr=1e-4, batch_size=64,
                 epochs=1, pi=1e-3, binary=False, loss_norm="l2sq",
                 measurement_target="phi_u0", patch_size=7, patch_stride=4, seed=0,
                 warm_start=False):
        self.rate = rate
        self.block = block
        self.n_phases = n_phases
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.pi = pi
        self.binary = binary
        self.loss_norm = loss_norm
        self.measurement_target = measurement_target
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.seed = seed
        self.warm_start = warm_start

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            lr=self.lr, batch=self.batch_size, epochs=self.epochs, pi=self.pi,
            block=self.block, seed=self.seed, np=self.n_phases, rate=self.rate,
            binary=self.binary, loss_norm=self.loss_norm,
            measurement_target=self.measurement_target, patch_size=self.patch_size,
            patch_stride=self.patch_stride)

    def fit(self, X, y=None):
        X = _check_blocks(X, self.block)
        start = self.params_ if self.warm_start and hasattr(self, "params_") else None
        blocks = X.reshape(-1, 1, self.block, self.block)
        self.params_, self.history_ = training.train(blocks, self.train_config(), start)
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def phi_(self) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.params_.sampling_matrix.materialize()

    @classmethod
    def from_params(cls, params: NetParams, **kw) -> "NLCSNet":
        """Wrap already trained parameters."""
        est = cls(block=params.block, n_phases=params.n_phases, binary=params.binary,
                  measurement_target=params.measurement_target,
                  patch_size=params.patch_size, patch_stride=params.patch_stride, **kw)
        est.params_, est.history_ = params, []
        est.n_features_in_ = params.n
        return est

    def predict(self, b):
        check_is_fitted(self, "params_")
        b = _check_measurements(b, self.params_.m)
        return reconstruct(b, self.params_).u.reshape(b.shape[0], -1)
