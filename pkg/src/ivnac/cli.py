"""``ivnac`` command line: phantom generation, training, inference, correction and checks.

Exit codes: 0 success, 1 contract/usage error, 2 I/O error, 3 numerical
failure.  Errors are reported on stderr as ``ERR:<category>: message``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load, save
from .data import (
    DatasetConfig,
    Normalizer,
    PhantomSpec,
    SPLITS,
    build_dataset,
    head_mask,
    read_container,
    read_dataset,
    read_image,
    read_meta,
    simulate_pair,
    write_container,
    write_image,
)
from .errors import ContractError, IvnacError, NumericalError
from .flow import FlowConfig, FlowModel
from .metrics import MetricsReport, mae_pct, psnr, rmse_pct, ssim
from .physics import Geometry, Sinogram

log = logging.getLogger("ivnac")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
FOV_CM = 25.6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # help texts that already describe their default keep it as written
    def _get_help_string(self, action):
        if "default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _fmt():
    return _DefaultsFormatter


# --------------------------------------------------------------------------- helpers


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ContractError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("IVNAC_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ContractError(f"IVNAC_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ContractError("IVNAC_THREADS must be >= 1")
    return n


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - declared dependency
        return nullcontext()
    return threadpool_limits(limits=n)


def _manifest(args, outputs: List[str], inputs: List[str], timings: dict, extra: Optional[dict] = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    return {
        "subcommand": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings_s": timings,
        **(extra or {}),
    }


def _write_manifest(path, manifest: dict) -> None:
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _dataset_normalizer(path) -> Normalizer:
    try:
        return Normalizer.from_dict(read_meta(path)["normalizer"])
    except ContractError:
        log.warning("%s has no sidecar metadata; using the default normalizer", path)
        return Normalizer()


def _load_planes(path) -> np.ndarray:
    """PET planes (N, 1, H, W) from a dataset (channel 0) or single-channel container."""
    data = read_container(path)
    return data[:, :1].copy()


# --------------------------------------------------------------------------- subcommands


def cmd_phantom_gen(args) -> int:
    t0 = time.perf_counter()
    spec = PhantomSpec.scaled(args.size, jitter=args.jitter)
    pixel = args.pixel_size if args.pixel_size is not None else FOV_CM / args.size
    cfg = DatasetConfig(spec=spec, counts_scale=None if args.counts_scale <= 0 else args.counts_scale,
                        crop=args.crop, pixel_size=pixel, n_angles=args.angles)
    out = {"train": args.out}
    stem = str(args.out)[:-5] if str(args.out).endswith(".ivnc") else str(args.out)
    if args.val_count:
        out["val"] = args.val_out or f"{stem}.val.ivnc"
    if args.test_count:
        out["test"] = args.test_out or f"{stem}.test.ivnc"
    _, normalizer = build_dataset(args.count, args.val_count, args.test_count, cfg, args.seed, out)
    outputs = [str(p) for p in out.values()]
    _write_manifest(args.out, _manifest(args, outputs, [], {"total": time.perf_counter() - t0},
                                        {"normalizer": normalizer.to_dict()}))
    for split, p in out.items():
        print(f"{split}\t{p}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    t0 = time.perf_counter()
    x, y = read_dataset(args.data)
    val = read_dataset(args.val) if args.val else None
    normalizer = _dataset_normalizer(args.data)
    flow = FlowConfig(n_blocks=args.blocks, channels=args.channels, hidden=args.hidden,
                      scale_clamp=args.scale_clamp, dense=args.subnet == "dense")
    cfg = TrainConfig(epochs=args.epochs, base_lr=args.lr, lam=args.lam, batch_size=args.batch_size,
                      seed=args.seed, halve_every=args.halve_every, grad_clip=args.grad_clip,
                      init=args.init, flow=flow)
    log_path = args.log or f"{args.ckpt}.log"
    best_path = args.best or f"{args.ckpt}.best"
    res = train((x, y), val, cfg, normalizer, log_path=log_path,
                progress=lambda r: log.info("epoch %d loss %.6g val_psnr %.3f", r.epoch, r.train_loss, r.val_psnr))
    save(res.final, args.ckpt)
    save(res.best, best_path)
    inputs = [args.data] + ([args.val] if args.val else [])
    _write_manifest(args.ckpt, _manifest(args, [args.ckpt, best_path, log_path], inputs,
                                         {"total": time.perf_counter() - t0}, {"train_config": cfg.to_dict()}))
    last = res.history[-1]
    print(f"epochs\t{last.epoch}\nfinal_loss\t{last.train_loss:.6g}\nfinal_val_psnr\t{last.val_psnr:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .training import infer

    t0 = time.perf_counter()
    ckpt = load(args.ckpt)
    x = _load_planes(args.input)
    hu = infer(ckpt, x, normalized=not args.raw)
    write_container(args.out, hu.astype(np.float32))
    _write_manifest(args.out, _manifest(args, [args.out], [args.ckpt, args.input], {"total": time.perf_counter() - t0}))
    print(f"images\t{hu.shape[0]}\nout\t{args.out}")
    return EXIT_OK


def _indices(spec: Optional[str], n: int) -> List[int]:
    if spec is None or spec == "all":
        return list(range(n))
    out = []
    for part in spec.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    for i in out:
        if not 0 <= i < n:
            raise ContractError(f"index {i} outside [0, {n})")
    return out


def cmd_correct(args) -> int:
    from .pipeline import correct_image, correct_pipeline

    t0 = time.perf_counter()
    ckpt = load(args.ckpt) if args.ckpt else None
    inputs = [p for p in (args.ckpt, args.data, args.sino, args.nac, args.ref_ct) if p]
    if args.data:
        meta = read_meta(args.data)
        cfg = DatasetConfig.from_dict(meta["dataset"])
        geom = cfg.geometry()
        seeds = meta["seeds"]
        idx = _indices(args.index, len(seeds))
        pairs = (simulate_pair(cfg.spec, geom, seeds[i], cfg.counts_scale, f"{meta['split']}-{i:05d}") for i in idx)
        results, report = correct_pipeline(ckpt, pairs, geom, cfg.crop, use_reference=args.reference)
    else:
        if not (args.sino and args.ref_ct and (args.nac or args.reference)):
            raise ContractError("image mode needs --sino, --ref-ct and --nac (or --reference)")
        ref = read_image(args.ref_ct).astype(np.float64)
        sino_data = read_image(args.sino).astype(np.float64)
        geom = Geometry(ref.shape[0], ref.shape[1], args.pixel_size, sino_data.shape[0], sino_data.shape[1])
        sino = Sinogram(sino_data, geom.angles, geom.spacing, geom.pixel_size)
        if args.reference:
            pred = ref
        else:
            if ckpt is None:
                raise ContractError("--ckpt is required unless --reference is given")
            from .pipeline import synthetic_ct

            pred = synthetic_ct(ckpt, read_image(args.nac).astype(np.float64))
        c = correct_image(sino, pred, ref, geom, Path(args.sino).stem)
        report = MetricsReport()
        report.add(c.id, c.psnr_db, ssim(c.ac_ref, c.ac_pred), rmse_pct(c.ac_ref, c.ac_pred), c.mae_pct)
        results = [c]
    prefix = args.out
    outs = {
        "ac_pred": np.stack([r.ac_pred for r in results])[:, None],
        "ac_ref": np.stack([r.ac_ref for r in results])[:, None],
        "diff": np.stack([r.difference for r in results])[:, None],
        "ct_pred": np.stack([r.ct_pred for r in results])[:, None],
    }
    written = []
    for k, arr in outs.items():
        p = f"{prefix}.{k}.ivnc"
        write_container(p, arr.astype(np.float32))
        written.append(p)
    tsv = f"{prefix}.metrics.tsv"
    _write_report(tsv, report)
    written.append(tsv)
    _write_manifest(prefix, _manifest(args, written, inputs, {"total": time.perf_counter() - t0}, report.key_values()))
    m, s = report.summary()["mae_pct"]
    pm, ps = report.summary()["psnr_db"]
    print(f"images\t{report.n_images}\nmae_pct\t{m:.4f}±{s:.4f}\npsnr_db\t{pm:.3f}±{ps:.3f}")
    return EXIT_OK


def _write_report(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim", "rmse_pct", "mae_pct"])
        for i, image_id in enumerate(report.ids):
            w.writerow([image_id] + [f"{report.values[k][i]:.8g}" for k in ("psnr_db", "ssim", "rmse_pct", "mae_pct")])
        for label, col in (("mean", 0), ("std", 1)):
            w.writerow([label] + [f"{v[col]:.8g}" for v in report.summary().values()])


def evaluate_ct(ckpt: Checkpoint, x: np.ndarray, y: np.ndarray, threads: int = 1) -> MetricsReport:
    """Synthetic-CT metrics in the normalized CT domain; MAE over the head mask."""
    from .training import infer

    norm = ckpt.normalizer
    pred = norm.ct(infer(ckpt, x))
    report = MetricsReport()
    for i in range(x.shape[0]):
        ref = y[i, 0].astype(np.float64)
        p = pred[i, 0]
        mask = head_mask(norm.ct_inverse(ref))
        report.add(f"{i:05d}", psnr(ref, p), ssim(ref, p), rmse_pct(ref, p), mae_pct(ref, p, mask))
    return report


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    ckpt = load(args.ckpt)
    x, y = read_dataset(args.data)
    report = evaluate_ct(ckpt, x, y)
    _write_report(args.out, report)
    _write_manifest(args.out, _manifest(args, [args.out], [args.ckpt, args.data], {"total": time.perf_counter() - t0},
                                        report.key_values()))
    for k, (m, s) in report.summary().items():
        print(f"{k}\t{m:.4f}±{s:.4f}")
    return EXIT_OK


def cmd_invert_check(args) -> int:
    from .checks import invertibility_trials

    model = load(args.ckpt).model if args.ckpt else None
    size = args.size
    if model is not None and size is None:
        size = int(load(args.ckpt).image_size[0])
    res = invertibility_trials(args.trials, size or 64, args.seed, model)
    print(f"trials\t{res.trials}\nmax_forward_inverse\t{res.max_forward_inverse:.3e}\n"
          f"max_inverse_forward\t{res.max_inverse_forward:.3e}\nmax_error\t{res.max_error:.3e}")
    if not res.max_error < args.tol:
        raise NumericalError(f"round-trip error {res.max_error:.3e} exceeds tolerance {args.tol:g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import gradient_check

    errors = gradient_check(args.blocks, args.size, args.seed, args.hidden, args.lam, args.eps, args.samples)
    for name, e in errors.items():
        print(f"{name}\t{e:.3e}")
    worst = max(errors.values())
    print(f"max_rel_error\t{worst:.3e}")
    if not worst < args.tol:
        raise NumericalError(f"gradient relative error {worst:.3e} exceeds tolerance {args.tol:g}")
    return EXIT_OK


def cmd_profile_dump(args) -> int:
    if (args.row is None) == (args.col is None):
        raise ContractError("give exactly one of --row or --col")
    columns = []
    for path in args.input:
        data = read_container(path)
        if not 0 <= args.image < data.shape[0]:
            raise ContractError(f"{path}: image index {args.image} outside [0, {data.shape[0]})")
        img = data[args.image, args.channel]
        if args.row is not None:
            if not 0 <= args.row < img.shape[0]:
                raise ContractError(f"{path}: row {args.row} outside the image")
            columns.append(img[args.row, :])
        else:
            if not 0 <= args.col < img.shape[1]:
                raise ContractError(f"{path}: column {args.col} outside the image")
            columns.append(img[:, args.col])
    n = {len(c) for c in columns}
    if len(n) != 1:
        raise ContractError("inputs have different profile lengths")
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index"] + [Path(p).name for p in args.input])
        for i in range(n.pop()):
            w.writerow([i] + [f"{c[i]:.8g}" for c in columns])
    _write_manifest(args.out, _manifest(args, [args.out], list(args.input), {}))
    print(f"out\t{args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivnac", description="Invertible-network PET attenuation correction on synthetic phantoms.",
                formatter_class=_fmt())
    p.add_argument("--version", action="version", version=f"ivnac {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help, formatter_class=_fmt())
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default $IVNAC_THREADS, else 1)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return sp

    sp = add("phantom-gen", cmd_phantom_gen, "simulate phantom pairs and write IVNC dataset files")
    sp.add_argument("--count", type=int, required=True, help="number of training pairs (written to --out)")
    sp.add_argument("--val-count", type=int, default=0, help="validation pairs")
    sp.add_argument("--test-count", type=int, default=0, help="test pairs")
    sp.add_argument("--size", type=int, default=64, help="image size in pixels")
    sp.add_argument("--out", required=True, help="training dataset path")
    sp.add_argument("--val-out", default=None, help="validation dataset path (default <out stem>.val.ivnc)")
    sp.add_argument("--test-out", default=None, help="test dataset path (default <out stem>.test.ivnc)")
    sp.add_argument("--counts-scale", type=float, default=400.0, help="expected counts per unit sinogram value; <=0 for noiseless")
    sp.add_argument("--jitter", type=float, default=1.0, help="phantom jitter scale (0 = identical phantoms)")
    sp.add_argument("--crop", type=int, default=None, help="training crop size (default full image)")
    sp.add_argument("--angles", type=int, default=90, help="projection angles")
    sp.add_argument("--pixel-size", type=float, default=None,
                    help=f"pixel size in cm (default {FOV_CM:g} cm field of view / size)")

    sp = add("train", cmd_train, "train the invertible network on a dataset file")
    sp.add_argument("--data", required=True, help="training dataset (.ivnc)")
    sp.add_argument("--val", default=None, help="validation dataset (.ivnc)")
    sp.add_argument("--ckpt", required=True, help="final checkpoint path")
    sp.add_argument("--best", default=None, help="best-validation checkpoint path (default <ckpt>.best)")
    sp.add_argument("--log", default=None, help="loss log path (default <ckpt>.log)")
    sp.add_argument("--epochs", type=int, default=100, help="training epochs")
    sp.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    sp.add_argument("--lam", type=float, default=1.0, help="weight of the forward (PET->CT) loss term")
    sp.add_argument("--batch-size", type=int, default=4, help="batch size")
    sp.add_argument("--halve-every", type=int, default=10, help="epochs between learning-rate halvings")
    sp.add_argument("--grad-clip", type=float, default=None, help="global gradient-norm clip (off by default)")
    sp.add_argument("--blocks", type=int, default=8, help="invertible blocks")
    sp.add_argument("--channels", type=int, default=2, help="augmented channel count (even)")
    sp.add_argument("--hidden", type=int, default=8, help="subnet hidden width")
    sp.add_argument("--subnet", choices=("dense", "chain"), default="dense",
                    help="densely connected or plain sequential subnet convolutions")
    sp.add_argument("--scale-clamp", type=float, default=2.0, help="soft clamp on coupling log-scales")
    sp.add_argument("--init", choices=("glow", "identity"), default="glow", help="parameter initialization")

    sp = add("infer", cmd_infer, "predict synthetic CT (HU) from NAC-PET images")
    sp.add_argument("--ckpt", required=True, help="checkpoint")
    sp.add_argument("--input", required=True, help="IVNC file; channel 0 holds NAC-PET")
    sp.add_argument("--out", required=True, help="output IVNC file of CT images in HU")
    sp.add_argument("--raw", action="store_true", help="input is not normalized yet")

    sp = add("correct", cmd_correct, "attenuation-correct PET with predicted and reference CT and compare")
    sp.add_argument("--ckpt", default=None, help="checkpoint (optional with --reference)")
    sp.add_argument("--data", default=None, help="dataset file whose sidecar lists the phantom seeds")
    sp.add_argument("--index", default="all", help="phantom indices, e.g. 0,2,5-7 or all")
    sp.add_argument("--sino", default=None, help="image mode: attenuated sinogram container")
    sp.add_argument("--nac", default=None, help="image mode: NAC-PET image container")
    sp.add_argument("--ref-ct", default=None, help="image mode: reference CT container (HU)")
    sp.add_argument("--pixel-size", type=float, default=0.4, help="image mode: pixel size in cm")
    sp.add_argument("--reference", action="store_true", help="use the reference CT as the prediction")
    sp.add_argument("--out", required=True, help="output prefix")

    sp = add("eval", cmd_eval, "synthetic-CT metrics on a dataset file")
    sp.add_argument("--ckpt", required=True, help="checkpoint")
    sp.add_argument("--data", required=True, help="dataset (.ivnc)")
    sp.add_argument("--out", required=True, help="metrics TSV path")

    sp = add("invert-check", cmd_invert_check, "max round-trip error over random inputs")
    sp.add_argument("--ckpt", default=None, help="checkpoint (default: a fresh random model per trial)")
    sp.add_argument("--trials", type=int, default=100, help="number of trials")
    sp.add_argument("--tol", type=float, default=1e-4, help="pass threshold on max-abs error")
    sp.add_argument("--size", type=int, default=None, help="image size (default: checkpoint size or 64)")

    sp = add("gradcheck", cmd_gradcheck, "backprop vs central differences on a float64 toy model")
    sp.add_argument("--blocks", type=int, default=2, help="toy model blocks")
    sp.add_argument("--size", type=int, default=8, help="toy image size")
    sp.add_argument("--hidden", type=int, default=4, help="toy subnet width")
    sp.add_argument("--lam", type=float, default=1.0, help="loss weight")
    sp.add_argument("--eps", type=float, default=1e-6, help="finite-difference step")
    sp.add_argument("--samples", type=int, default=6, help="entries checked per parameter array")
    sp.add_argument("--tol", type=float, default=1e-4, help="pass threshold on relative error")

    sp = add("profile-dump", cmd_profile_dump, "write a row or column line profile of images as CSV")
    sp.add_argument("--input", action="append", required=True, help="IVNC file (repeatable)")
    sp.add_argument("--row", type=int, default=None, help="row index")
    sp.add_argument("--col", type=int, default=None, help="column index")
    sp.add_argument("--image", type=int, default=0, help="image index within each file")
    sp.add_argument("--channel", type=int, default=0, help="channel index")
    sp.add_argument("--out", required=True, help="CSV path")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"ERR:usage: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except SystemExit as err:  # --help / --version
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(_threads(args)):
            return args.func(args)
    except NumericalError as err:
        print(f"ERR:numerical: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IvnacError, ValueError) as err:
        print(f"ERR:contract: {err}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as err:
        print(f"ERR:io: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
