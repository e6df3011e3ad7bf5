"""Block datasets, the training objective and an Adam training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import sampling
from .network import NetParams, net_forward

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
LOG_HEADER = ["epoch", "step", "l_total", "l_disc", "l_orth", "seconds"]


class NonFiniteLoss(FloatingPointError):
    def __init__(self, names: Sequence[str]):
        super().__init__("non-finite loss; offending parameters: " + ", ".join(names))
        self.names = list(names)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    epochs: int = 1
    pi: float = 1e-3
    block: int = 33
    seed: int = 0
    np: int = 3
    rate: float = 0.25
    binary: bool = False
    loss_norm: str = "l2sq"
    measurement_target: str = "phi_u0"
    patch_size: int = 7
    patch_stride: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr >= 0 and self.pi >= 0):
            raise ValueError("lr and pi must be non-negative")
        if min(self.batch, self.block, self.np) < 1 or self.epochs < 0:
            raise ValueError("batch, block and np must be >= 1; epochs >= 0")
        if self.loss_norm not in ("l2sq", "l2"):
            raise ValueError(f"unknown loss norm {self.loss_norm!r}")

    @property
    def n(self) -> int:
        return self.block * self.block

    @property
    def m(self) -> int:
        return sampling.measurements_for_rate(self.rate, self.n)


@dataclass
class BlockDataset:
    blocks: np.ndarray
    manifest: list[tuple[str, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.blocks.shape[0]


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma for RGB(A) input; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] in (3, 4):
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"unsupported image shape {img.shape}")


def extract_blocks(images: Sequence[np.ndarray], block: int, count: int, seed: int = 0,
                   names: Sequence[str] | None = None) -> BlockDataset:
    """Crop ``count`` blocks at uniformly random positions.

    Each draw picks a usable image uniformly, then a top-left corner
    uniformly among all positions that keep the block inside the image.
    Images are expected in [0, 1].
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    names = list(names) if names is not None else [f"image{i}" for i in range(len(images))]
    usable = []
    for name, img in zip(names, images):
        g = to_gray(img)
        if g.shape[0] < block or g.shape[1] < block:
            warnings.warn(f"{name}: {g.shape} smaller than block {block}; skipped")
            continue
        usable.append((name, g))
    if not usable:
        raise ValueError("no image is large enough for the requested block size")
    rng = np.random.default_rng(seed)
    blocks = np.empty((count, 1, block, block))
    manifest = []
    for k in range(count):
        name, g = usable[int(rng.integers(len(usable)))]
        y = int(rng.integers(g.shape[0] - block + 1))
        x = int(rng.integers(g.shape[1] - block + 1))
        blocks[k, 0] = g[y:y + block, x:x + block]
        manifest.append((name, y, x))
    return BlockDataset(blocks, manifest)


def discrepancy(outputs, targets, norm: str = "l2sq") -> ad.Tensor:
    """Mean over blocks and pixels of the per-block reconstruction error.

    ``l2sq`` sums squared errors; ``l2`` sums per-block Euclidean norms.
    """
    outputs, targets = ad.as_tensor(outputs), ad.as_tensor(targets)
    nb = outputs.shape[0]
    n = outputs.size // nb
    diff = ad.sub(outputs, targets)
    if norm == "l2sq":
        total = ad.sum_all(ad.square(diff))
    elif norm == "l2":
        per_block = ad.reshape(ad.square(diff), (nb, n)) @ np.ones((n, 1))
        total = ad.sum_all(ad.sqrt(per_block))
    else:
        raise ValueError(f"unknown loss norm {norm!r}")
    return ad.mul(total, 1.0 / (n * nb))


def total_loss(outputs, targets, phi, pi: float = 1e-3, norm: str = "l2sq"):
    """Return ``(total, discrepancy, orthogonality)`` loss tensors."""
    disc = discrepancy(outputs, targets, norm)
    orth = sampling.orth_loss(phi)
    return ad.add(disc, ad.mul(orth, pi)), disc, orth


def psnr(reference, test, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``, capped at 99 dB for identical inputs."""
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {test.shape}")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


class Adam:
    """Adaptive moment estimation with bias correction over a dict of arrays."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class LossReport:
    total: float
    disc: float
    orth: float
    psnr: float
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def forward_loss(blocks: np.ndarray, params: NetParams, cfg: TrainConfig):
    """Sample, reconstruct and score one batch on a fresh tape."""
    tape = ad.Tape()
    net = params.bind(tape)
    b = sampling.sample(net.phi, blocks)
    u, _ = net_forward(b, net)
    total, disc, orth = total_loss(u, blocks, net.phi_master, cfg.pi, cfg.loss_norm)
    return tape, total, disc, orth, u


def train_step(blocks: np.ndarray, params: NetParams, opt: Adam,
               cfg: TrainConfig) -> tuple[NetParams, LossReport]:
    if blocks.shape[0] == 0:
        raise ValueError("empty batch")
    tape, total, disc, orth, u = forward_loss(blocks, params, cfg)
    grads = ad.backward(tape, total)
    tape.clear()
    if not np.isfinite(total.item()):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        bad += [k for k, v in params.named().items() if not np.all(np.isfinite(v))]
        raise NonFiniteLoss(sorted(set(bad)) or ["<loss>"])
    new = params.with_arrays(opt.step(params.named(), grads))
    report = LossReport(total.item(), disc.item(), orth.item(),
                        psnr(blocks, u.data), grads)
    return new, report


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Moving average over full windows only (``len(values) - window + 1`` points)."""
    v = np.asarray(values, dtype=np.float64)
    if window < 1 or window > v.size:
        raise ValueError(f"window {window} must lie in 1..{v.size}")
    return np.convolve(v, np.ones(window) / window, mode="valid")


def train(dataset: BlockDataset | np.ndarray, cfg: TrainConfig,
          params: NetParams | None = None, log_path: str | Path | None = None,
          callback: Callable[[int, int, LossReport], None] | None = None):
    """Train from scratch (or from ``params``); returns ``(params, history)``.

    ``history`` holds one dict per step with the CSV log columns plus the
    batch PSNR.
    """
    blocks = dataset.blocks if isinstance(dataset, BlockDataset) else np.asarray(dataset)
    if blocks.ndim == 3:
        blocks = blocks[:, None]
    if params is None:
        params = NetParams.init(cfg.m, cfg.n, cfg.np, cfg.seed, binary=cfg.binary,
                                measurement_target=cfg.measurement_target,
                                patch_size=cfg.patch_size, patch_stride=cfg.patch_stride)
    log.info("adam lr=%g beta1=%g beta2=%g eps=%g; config %s",
             cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, asdict(cfg))
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(blocks.shape[0])
            for i in range(0, order.size, cfg.batch):
                batch = blocks[order[i:i + cfg.batch]]
                params, rep = train_step(batch, params, opt, cfg)
                step += 1
                row = {"epoch": epoch, "step": step, "l_total": rep.total,
                       "l_disc": rep.disc, "l_orth": rep.orth,
                       "seconds": time.perf_counter() - start, "psnr": rep.psnr}
                history.append(row)
                if writer is not None:
                    writer.writerow([epoch, step, repr(rep.total), repr(rep.disc),
                                     repr(rep.orth), f"{row['seconds']:.3f}"])
                    fh.flush()
                if callback is not None:
                    callback(epoch, step, rep)
    finally:
        if fh is not None:
            fh.close()
    return params, history


def epoch_means(history: Iterable[dict], key: str) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for row in history:
        by_epoch.setdefault(row["epoch"], []).append(row[key])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def evaluate(params: NetParams, blocks: np.ndarray) -> dict[str, float]:
    """Mean PSNR of the network output and of its initialization on ``blocks``."""
    from .network import reconstruct

    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim == 3:
        blocks = blocks[:, None]
    b = blocks.reshape(blocks.shape[0], -1) @ params.sampling_matrix.materialize().T
    rec = reconstruct(b, params)
    net = [psnr(t, r) for t, r in zip(blocks, rec.u)]
    init = [psnr(t, r) for t, r in zip(blocks, rec.u0)]
    return {"psnr": float(np.mean(net)), "psnr_init": float(np.mean(init))}
