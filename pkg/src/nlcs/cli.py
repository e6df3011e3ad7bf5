"""``nlcs`` command line: sample, reconstruct, train, eval."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import classical, io, sampling, training
from .network import NetParams, reconstruct as net_reconstruct

log = logging.getLogger("nlcs")

IMAGE_SUFFIXES = {".pgm", ".pnm", ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# tiling


def tile_image(img: np.ndarray, block: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad to a multiple of ``block`` and cut into row-major tiles."""
    h, w = img.shape
    gr, gc = math.ceil(h / block), math.ceil(w / block)
    ph, pw = gr * block - h, gc * block - w
    # numpy's reflect needs the pad to be smaller than the axis
    mode = "reflect" if ph < h and pw < w else "symmetric"
    padded = np.pad(img, ((0, ph), (0, pw)), mode=mode) if ph or pw else img
    tiles = padded.reshape(gr, block, gc, block).transpose(0, 2, 1, 3)
    return tiles.reshape(gr * gc, block, block).copy(), (gr, gc)


def untile(tiles: np.ndarray, grid: tuple[int, int], shape: tuple[int, int]) -> np.ndarray:
    gr, gc = grid
    block = tiles.shape[-1]
    img = tiles.reshape(gr, gc, block, block).transpose(0, 2, 1, 3)
    return img.reshape(gr * block, gc * block)[:shape[0], :shape[1]]


# ---------------------------------------------------------------------------
# helpers


def _echo_config(title: str, payload: dict) -> None:
    print(f"# resolved config ({title})", file=sys.stderr)
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)


def _read_image(path) -> np.ndarray:
    try:
        return io.read_image(path)
    except (OSError, ValueError) as exc:
        raise CLIError(f"cannot read image {path}: {exc}") from exc


def _identity_matrix(block: int) -> sampling.SamplingMatrix:
    return sampling.SamplingMatrix(np.eye(block * block))


def _matrix_for_measurements(meas: io.MeasurementFile, weights: NetParams | None):
    """Rebuild the sampling matrix a measurement file was taken with."""
    if meas.matrix_kind == "gaussian":
        mat = sampling.init_gaussian(meas.m, meas.n, meas.matrix_seed)
        mat.binary = meas.binary
    elif meas.matrix_kind == "identity":
        mat = _identity_matrix(meas.block)
    else:
        if weights is None:
            raise CLIError("measurements were taken with a learned matrix; pass --weights")
        mat = weights.sampling_matrix
    if mat.digest() != meas.matrix_hash:
        raise CLIError("sampling matrix hash mismatch between measurements and "
                       f"{meas.matrix_kind} matrix ({mat.digest()[:12]} vs "
                       f"{meas.matrix_hash[:12]})")
    return mat


def _solve_block(args):
    b, phi, cfg = args
    rep = classical.solve(b, phi, cfg)
    return rep.u, rep.outer_iterations, rep.inner_iterations


# ---------------------------------------------------------------------------
# commands


def cmd_sample(a) -> int:
    img = _read_image(a.image)
    weights = None
    if a.matrix == "gaussian":
        m = sampling.measurements_for_rate(a.rate, a.block * a.block)
        mat = sampling.init_gaussian(m, a.block * a.block, a.seed)
        mat.binary = a.binary
        kind, rate = "gaussian", a.rate
    elif a.matrix == "identity":
        mat, kind, rate = _identity_matrix(a.block), "identity", 1.0
    elif a.matrix.startswith("learned:"):
        weights, meta = io.load_weights(a.matrix.split(":", 1)[1])
        mat, kind, rate = weights.sampling_matrix, "learned", meta.rate
        if a.block != weights.block:
            log.info("block size taken from weights: %d", weights.block)
    else:
        raise CLIError(f"unknown matrix {a.matrix!r}")
    block = mat.block
    _echo_config("sample", {"image": str(a.image), "rate": rate, "block": block,
                            "matrix": a.matrix, "binary": mat.binary, "seed": a.seed,
                            "padding": "reflect"})
    tiles, grid = tile_image(img, block)
    b = tiles.reshape(tiles.shape[0], -1) @ mat.materialize().T
    meas = io.MeasurementFile(rate=rate, block=block, m=mat.m, n=mat.n, grid=grid,
                              image_shape=img.shape, matrix_kind=kind, binary=mat.binary,
                              matrix_seed=a.seed if kind == "gaussian" else 0,
                              matrix_hash=mat.digest(), b=b)
    meas.save(a.out)
    print(f"{tiles.shape[0]} blocks of {block}x{block}, M={mat.m} -> {a.out}")
    return 0


def cmd_reconstruct(a) -> int:
    meas = io.MeasurementFile.load(a.measurements)
    weights = io.load_weights(a.weights)[0] if a.weights else None
    if a.method == "net" and weights is None:
        raise CLIError("--method net requires --weights")
    mat = _matrix_for_measurements(meas, weights)
    phi = mat.materialize()
    reference = _read_image(a.reference) if a.reference else None
    if reference is not None and reference.shape != tuple(meas.image_shape):
        raise CLIError(f"reference {reference.shape} does not match {meas.image_shape}")

    start = time.perf_counter()
    per_block = []
    if a.method == "classical":
        cfg = io.load_config(a.config, {"solver": classical.SolverConfig()})["solver"]
        if a.alpha is not None:
            cfg = replace(cfg, alpha=a.alpha)
        cfg.validate()
        _echo_config("reconstruct", {"method": "classical", "solver": asdict(cfg),
                                     "workers": a.workers, "padding": "reflect"})
        jobs = [(row, phi, cfg) for row in meas.b]
        if a.workers > 1:
            with ProcessPoolExecutor(a.workers) as pool:
                results = list(pool.map(_solve_block, jobs, chunksize=4))
        else:
            results = [_solve_block(j) for j in jobs]
        tiles = np.stack([r[0] for r in results])
        per_block = [{"outer_iterations": r[1], "inner_iterations": r[2]} for r in results]
    else:
        if a.config:
            log.info("--config ignored for the network")
        _echo_config("reconstruct", {"method": "net", "weights": str(a.weights),
                                     "phases": weights.n_phases, "padding": "reflect"})
        rec = net_reconstruct(meas.b, weights)
        tiles = rec.u[:, 0]
        per_block = [{"phases": rec.phases} for _ in range(tiles.shape[0])]
    seconds = time.perf_counter() - start

    img = untile(tiles, meas.grid, meas.image_shape)
    io.write_pgm(a.out, np.clip(img, 0.0, 1.0))
    report = {"method": a.method, "measurements": str(a.measurements),
              "rate": meas.rate, "block": meas.block, "m": meas.m, "grid": list(meas.grid),
              "image_shape": list(meas.image_shape), "padding": "reflect",
              "matrix_kind": meas.matrix_kind, "wall_time": seconds, "blocks": per_block}
    if reference is not None:
        ref_tiles, _ = tile_image(reference, meas.block)
        for entry, r, t in zip(per_block, ref_tiles, tiles):
            entry["psnr"] = training.psnr(r, t)
        report["psnr"] = training.psnr(reference, img)
    if a.report:
        Path(a.report).write_text(json.dumps(report, indent=2))
    msg = f"reconstructed {tiles.shape[0]} blocks in {seconds:.2f}s -> {a.out}"
    if "psnr" in report:
        msg += f" (PSNR {report['psnr']:.2f} dB)"
    print(msg)
    return 0


def _load_images(data: Path) -> tuple[list[np.ndarray], list[str]]:
    if not data.is_dir():
        raise CLIError(f"{data} is not a directory")
    paths = sorted(p for p in data.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images, names = [], []
    for p in paths:
        try:
            images.append(io.read_image(p))
            names.append(p.name)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", p, exc)
    if not images:
        raise CLIError(f"no readable images in {data}")
    return images, names


def cmd_train(a) -> int:
    cfg = io.load_config(a.config, {"train": training.TrainConfig()})["train"]
    overrides = {k: v for k, v in {"rate": a.rate, "np": a.phases, "epochs": a.epochs,
                                   "seed": a.seed, "block": a.block, "lr": a.lr,
                                   "batch": a.batch}.items() if v is not None}
    if a.binary:
        overrides["binary"] = True
    cfg = replace(cfg, **overrides)
    images, names = _load_images(Path(a.data))
    _echo_config("train", {"train": asdict(cfg), "data": str(a.data), "blocks": a.blocks})
    ds = training.extract_blocks(images, cfg.block, a.blocks, cfg.seed, names)
    params, history = training.train(ds, cfg, log_path=a.log)
    io.save_weights(a.out, params, cfg.rate)
    if history:
        last = history[-1]["epoch"]
        tail = [r for r in history if r["epoch"] == last]
        print(f"final L_orth {tail[-1]['l_orth']:.6g}; "
              f"mean train PSNR {np.mean([r['psnr'] for r in tail]):.2f} dB")
    else:
        print("no training steps run; wrote initialized weights")
    return 0


def cmd_eval(a) -> int:
    recon, ref = _read_image(a.recon), _read_image(a.reference)
    if recon.shape != ref.shape:
        raise CLIError(f"dimension mismatch: {recon.shape} vs {ref.shape}")
    print(f"{training.psnr(ref, recon):.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlcs", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="measure an image block by block")
    s.add_argument("--image", required=True, help="PGM, or any format Pillow reads")
    s.add_argument("--rate", type=float, default=0.25, help="M/N, strictly inside (0, 1)")
    s.add_argument("--block", type=int, default=33, help="block side B")
    s.add_argument("--matrix", default="gaussian",
                   help="gaussian, identity, or learned:WEIGHTS")
    s.add_argument("--binary", action="store_true", help="threshold the Gaussian matrix to {0,1}")
    s.add_argument("--seed", type=int, default=0, help="Gaussian matrix seed")
    s.add_argument("--out", required=True, help="measurement file to write")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("reconstruct", help="recover an image from a measurement file")
    r.add_argument("--measurements", required=True, help="file written by `nlcs sample`")
    r.add_argument("--method", choices=["classical", "net"], default="classical")
    r.add_argument("--weights", help="weight file; required for --method net")
    r.add_argument("--config", help="INI file with a [solver] section")
    r.add_argument("--alpha", type=float, help="override the solver's alpha")
    r.add_argument("--reference", help="ground-truth image for PSNR in the report")
    r.add_argument("--workers", type=int, default=1, help="processes for block-parallel solving")
    r.add_argument("--out", required=True, help="reconstructed image (PGM)")
    r.add_argument("--report", help="JSON report path")
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train the unrolled network")
    t.add_argument("--data", required=True, help="directory of training images")
    t.add_argument("--rate", type=float)
    t.add_argument("--phases", type=int, help="number of unrolled phases N_p")
    t.add_argument("--epochs", type=int)
    t.add_argument("--blocks", type=int, default=500, help="random blocks to cut")
    t.add_argument("--block", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--binary", action="store_true", help="learn a {0,1} sampling matrix")
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="INI file with a [train] section")
    t.add_argument("--out", required=True, help="weight file to write")
    t.add_argument("--log", help="per-step CSV loss log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR between two images")
    e.add_argument("--recon", required=True, help="reconstructed image")
    e.add_argument("--reference", required=True, help="ground-truth image")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, io.FormatError, ValueError, classical.SolverDivergence,
            training.NonFiniteLoss, OSError) as exc:
        print(f"nlcs {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
