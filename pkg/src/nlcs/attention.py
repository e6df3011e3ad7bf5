"""Patch-wise non-local attention and the NLM-weighted x update built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

EMBED_CHANNELS = 32


@dataclass
class AttentionParams:
    f_q: object
    f_k: object
    f_v: object
    out_conv: object
    patch_size: int = 7
    stride: int = 4

    def __post_init__(self):
        if not self.patch_size >= self.stride >= 1:
            raise ValueError(
                f"need patch_size >= stride >= 1, got {self.patch_size}, {self.stride}")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int = 1, std: float = 0.05,
             patch_size: int = 7, stride: int = 4) -> "AttentionParams":
        e = EMBED_CHANNELS
        return cls(
            f_q=rng.normal(0, std, (e, channels, 1, 1)),
            f_k=rng.normal(0, std, (e, channels, 1, 1)),
            f_v=rng.normal(0, std, (e, channels, 1, 1)),
            out_conv=rng.normal(0, std, (channels, e, 1, 1)),
            patch_size=patch_size, stride=stride)


@dataclass
class PatchSet:
    """Patches cut from a zero-padded map.

    ``patches`` is ``[P, C, p, p]`` (or ``[N, P, C, p, p]``), ``origins``
    holds the top-left corner of each patch in padded coordinates and
    ``padding`` is ``(top, bottom, left, right)``.
    """

    patches: Tensor
    grid: tuple[int, int]
    origins: list[tuple[int, int]]
    padding: tuple[int, int, int, int]

    def __len__(self) -> int:
        return len(self.origins)


def grid_padding(size: int, p: int, s: int) -> tuple[int, int, int]:
    """Symmetric zero padding so that a ``p``/``s`` sliding grid tiles ``size``.

    Returns ``(before, after, positions)``.
    """
    if p < s:
        raise ValueError(f"patch size {p} smaller than stride {s} leaves gaps")
    positions = 1 + math.ceil(max(size - p, 0) / s)
    total = p + s * (positions - 1) - size
    return total // 2, total - total // 2, positions


def _extract(x, origins, p, pad):
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return np.stack([xp[:, :, y:y + p, c:c + p] for y, c in origins], axis=1)


def _extract_adjoint(g, origins, p, pad, shape):
    n, ch, h, w = shape
    top, bottom, left, right = pad
    acc = np.zeros((n, ch, h + top + bottom, w + left + right))
    for k, (y, c) in enumerate(origins):
        acc[:, :, y:y + p, c:c + p] += g[:, k]
    return acc[:, :, top:top + h, left:left + w]


def _coverage(origins, p, padded_hw):
    cnt = np.zeros(padded_hw)
    for y, c in origins:
        cnt[y:y + p, c:c + p] += 1
    return cnt


def _recompose(patches, origins, p, pad, shape):
    n, ch, h, w = shape
    top, bottom, left, right = pad
    hp, wp = h + top + bottom, w + left + right
    mean = np.zeros((n, ch, hp, wp))
    cnt = np.zeros((hp, wp))
    for k, (y, c) in enumerate(origins):
        # running mean: exact when all covering values agree
        cnt[y:y + p, c:c + p] += 1
        region = mean[:, :, y:y + p, c:c + p]
        region += (patches[:, k] - region) / cnt[y:y + p, c:c + p]
    if not cnt[top:top + h, left:left + w].all():
        raise AssertionError("patch grid leaves uncovered pixels")
    return mean[:, :, top:top + h, left:left + w]


def _recompose_adjoint(g, origins, p, pad, shape):
    n, ch, h, w = shape
    top, bottom, left, right = pad
    cnt = _coverage(origins, p, (h + top + bottom, w + left + right))
    gp = np.zeros((n, ch) + cnt.shape)
    gp[:, :, top:top + h, left:left + w] = g
    gp = gp / np.maximum(cnt, 1)
    return np.stack([gp[:, :, y:y + p, c:c + p] for y, c in origins], axis=1)


def extract_patches(f, p: int = 7, s: int = 4) -> PatchSet:
    """Overlapping ``p x p`` patches at stride ``s``, row-major over the grid.

    ``f`` is ``[C, H, W]`` or ``[N, C, H, W]``.
    """
    f = ad.as_tensor(f)
    batched = f.data.ndim == 4
    x = f if batched else ad.reshape(f, (1,) + f.shape)
    _, _, h, w = x.shape
    t, b, rows = grid_padding(h, p, s)
    l, r, cols = grid_padding(w, p, s)
    pad = (t, b, l, r)
    origins = [(i * s, j * s) for i in range(rows) for j in range(cols)]
    shape = x.shape
    out = ad._apply(
        "extract_patches", (x,),
        lambda a: _extract(a, origins, p, pad),
        lambda g, a, o: (_extract_adjoint(g, origins, p, pad, shape),))
    if not batched:
        out = ad.reshape(out, out.shape[1:])
    return PatchSet(out, (rows, cols), origins, pad)


def recompose_patches(ps: PatchSet, shape: tuple[int, ...]) -> Tensor:
    """Average overlapping patches back onto a map of ``shape`` and crop padding."""
    patches = ps.patches
    batched = len(shape) == 4
    if not batched:
        patches = ad.reshape(patches, (1,) + patches.shape)
        shape = (1,) + tuple(shape)
    if patches.shape[1] != len(ps.origins):
        raise ShapeError(f"{patches.shape[1]} patches but {len(ps.origins)} origins")
    p = patches.shape[-1]
    origins, pad, shape = list(ps.origins), ps.padding, tuple(shape)
    out = ad._apply(
        "recompose_patches", (patches,),
        lambda a: _recompose(a, origins, p, pad, shape),
        lambda g, a, o: (_recompose_adjoint(g, origins, p, pad, shape),))
    return out if batched else ad.reshape(out, shape[1:])


def patch_attention(q: PatchSet, k: PatchSet, v: PatchSet) -> PatchSet:
    """Softmax over keys of query/key patch dot products, applied to values."""
    qp, kp, vp = q.patches, k.patches, v.patches
    batched = qp.data.ndim == 5
    lead = qp.shape[:-3]
    dims = int(np.prod(qp.shape[-3:]))
    qf = ad.reshape(qp, lead + (dims,))
    kf = ad.reshape(kp, lead + (dims,))
    vf = ad.reshape(vp, lead + (int(np.prod(vp.shape[-3:])),))
    kt = ad.transpose(kf, (0, 2, 1) if batched else (1, 0))
    weights = ad.softmax(qf @ kt, axis=-1)
    out = ad.reshape(weights @ vf, vp.shape)
    return PatchSet(out, v.grid, v.origins, v.padding)


def nlm_patch(f, params: AttentionParams) -> Tensor:
    """Learned non-local filter on a feature map, with a skip connection.

    Embeds ``f`` with three 1x1 convolutions, attends between overlapping
    patches, averages the attended patches back into a map, projects with
    a 1x1 convolution and adds ``f``.
    """
    f = ad.as_tensor(f)
    c = f.shape[-3]
    if ad.as_tensor(params.f_q).shape[1] != c:
        raise ShapeError(f"attention embeds {ad.as_tensor(params.f_q).shape[1]} "
                         f"channels, input has {c}")
    p, s = params.patch_size, params.stride
    q = extract_patches(ad.conv2d(f, params.f_q), p, s)
    k = extract_patches(ad.conv2d(f, params.f_k), p, s)
    v = extract_patches(ad.conv2d(f, params.f_v), p, s)
    attended = patch_attention(q, k, v)
    emb_shape = f.shape[:-3] + (ad.as_tensor(params.f_v).shape[0],) + f.shape[-2:]
    fused = recompose_patches(attended, emb_shape)
    return ad.conv2d(fused, params.out_conv) + f


def x_module(u, gamma, beta, theta, alpha, params: AttentionParams) -> Tensor:
    """``(theta*r + 2*alpha*nlm_patch(r)) / (theta + 2*alpha)`` with ``r = u - gamma/beta``."""
    denom = ad.add(theta, ad.mul(alpha, 2.0))
    if not np.all(denom.data != 0):
        raise ZeroDivisionError("theta + 2*alpha is zero")
    r = ad.sub(u, ad.div(gamma, beta))
    num = ad.add(ad.mul(theta, r), ad.mul(ad.mul(alpha, 2.0), nlm_patch(r, params)))
    return ad.div(num, denom)
