"""Block sampling matrix: construction, binarization, measurement and adjoint."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SamplingMatrix:
    """Continuous master copy of an ``M x N`` sampling matrix.

    When ``binary`` is set, every materialized view is thresholded to
    {0, 1} while the continuous values are kept for learning.
    """

    phi: np.ndarray
    binary: bool = False

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ValueError(f"sampling matrix must be 2-D, got {self.phi.shape}")
        m, n = self.phi.shape
        if not 1 <= m <= n:
            raise ValueError(f"need 1 <= M <= N, got M={m}, N={n}")

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def rate(self) -> float:
        return self.m / self.n

    @property
    def block(self) -> int:
        return block_size(self.n)

    def materialize(self) -> np.ndarray:
        return binarize(self.phi).data if self.binary else self.phi.copy()

    def digest(self) -> str:
        """SHA-256 of the materialized matrix, used to pair files with matrices."""
        h = hashlib.sha256()
        h.update(np.asarray(self.phi.shape, dtype="<u4").tobytes())
        h.update(b"\x01" if self.binary else b"\x00")
        h.update(self.materialize().astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Measurement:
    b: np.ndarray
    rate: float


def block_size(n: int) -> int:
    b = math.isqrt(n)
    if b * b != n:
        raise ValueError(f"block length {n} is not a perfect square")
    return b


def measurements_for_rate(rate: float, n: int) -> int:
    """``M = floor(rate * N)``, at least 1."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"sampling rate must lie in (0, 1), got {rate}")
    # guard against 0.25 * 1089 landing a hair below an integer
    return max(1, int(math.floor(rate * n + 1e-9)))


def init_gaussian(m: int, n: int, seed: int = 0) -> SamplingMatrix:
    """i.i.d. N(0, 1/n) entries, reproducible under ``seed``."""
    if not 1 <= m < n:
        raise ValueError(f"need 1 <= m < n, got m={m}, n={n}")
    rng = np.random.default_rng(seed)
    return SamplingMatrix(rng.normal(0.0, 1.0 / math.sqrt(n), size=(m, n)))


def _as_phi_tensor(phi) -> Tensor:
    if isinstance(phi, SamplingMatrix):
        return Tensor(phi.materialize())
    return ad.as_tensor(phi)


def binarize(phi) -> Tensor:
    """Entrywise 1 where ``phi >= 0`` else 0; straight-through gradient."""
    if isinstance(phi, SamplingMatrix):
        phi = phi.phi
    return ad.straight_through_binary(phi)


def materialize(phi: Tensor, binary: bool) -> Tensor:
    return binarize(phi) if binary else phi


def sample(phi, u) -> Tensor:
    """``b = phi @ u`` for one block (``[N]`` or ``[1, B, B]``) or a batch.

    Batched input is ``[batch, N]`` or ``[batch, 1, B, B]`` and yields
    ``[batch, M]``.  Blocks are vectorized in row-major order.
    """
    phi = _as_phi_tensor(phi)
    u = ad.as_tensor(u)
    m, n = phi.shape
    if u.data.ndim in (1, 3):
        if u.size != n:
            raise ad.ShapeError(f"sample: block of shape {u.shape} does not match N={n}")
        flat = ad.reshape(u, (n, 1))
        return ad.reshape(phi @ flat, (m,))
    if u.data.ndim not in (2, 4) or u.shape[0] * n != u.size:
        raise ad.ShapeError(f"sample: block of shape {u.shape} does not match N={n}")
    flat = ad.reshape(u, (u.shape[0], n))
    return flat @ ad.transpose(phi, (1, 0))


def orth_loss(phi) -> Tensor:
    """``||phi phi^T - I||_F^2 / M^2``."""
    phi = ad.as_tensor(phi.phi if isinstance(phi, SamplingMatrix) else phi)
    m = phi.shape[0]
    gram = phi @ ad.transpose(phi, (1, 0))
    resid = ad.sub(gram, np.eye(m))
    return ad.mul(ad.sum_all(ad.square(resid)), 1.0 / (m * m))


def init_reconstruction(phi, b) -> Tensor:
    """``PixelShuffle(phi^T b)`` computed as a 1x1 convolution.

    The ``N`` rows of ``phi^T`` act as ``N`` filters of size ``1x1xM`` over
    the ``M``-channel ``1x1`` map holding ``b``; the resulting ``N x 1 x 1``
    tensor is rearranged to ``1 x B x B``.  ``b`` may be ``[M]`` or
    ``[batch, M]``.
    """
    phi = _as_phi_tensor(phi)
    b = ad.as_tensor(b)
    m, n = phi.shape
    r = block_size(n)
    filters = ad.reshape(ad.transpose(phi, (1, 0)), (n, m, 1, 1))
    if b.shape == (m,):
        fmap = ad.reshape(b, (m, 1, 1))
    elif b.data.ndim == 2 and b.shape[1] == m:
        fmap = ad.reshape(b, (b.shape[0], m, 1, 1))
    else:
        raise ad.ShapeError(f"init_reconstruction: measurements {b.shape} vs M={m}")
    return ad.pixel_shuffle(ad.conv2d(fmap, filters), r)
