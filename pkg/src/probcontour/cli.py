"""Command line entry point: ``probcontour synth|fit-pca|train|eval|sample|plot``.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numeric error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as datamod
from ._io import dumps, read_json, sha256_file, sha256_tree, write_json
from .config import ConfigError, RunConfig, load_run_config
from ._validation import standardize_images
from .encoder import DIRECT_VERTEX, PROBABILISTIC, load_checkpoint, load_extra_blob, save_checkpoint
from .inference import (
    distribution_from_export,
    export_prediction,
    mahalanobis2,
    predict,
    sample_contour,
)
from .shape_model import PcaShapeModel, RankError
from .svg import render_svg
from .trainer import TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("probcontour")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SHAPE_MODEL = "shape_model.json"
TRAIN_CONFIG = "train_config.json"


class UsageError(Exception):
    pass


def _provenance(out_dir: Path, command: str, cfg: RunConfig | None, inputs: dict[str, Path], extra=None) -> None:
    hashes = {}
    for name, p in inputs.items():
        p = Path(p)
        hashes[name] = sha256_tree(p) if p.is_dir() else sha256_file(p)
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg.raw if cfg else None,
        "config_sha256": hashlib.sha256(dumps(cfg.raw).encode()).hexdigest() if cfg else None,
        "inputs": hashes,
    }
    if extra:
        doc.update(extra)
    write_json(out_dir / "run.json", doc)


def _method_label(manifest: dict) -> str:
    mode = manifest["mode"]
    if mode == DIRECT_VERTEX:
        return "Direct Vertex"
    return f"{'probPCA' if mode == PROBABILISTIC else 'detPCA'} {manifest['n_components']}"


def _load_model_for(ckpt: Path, manifest: dict) -> PcaShapeModel | None:
    path = ckpt / SHAPE_MODEL
    if manifest["mode"] == DIRECT_VERTEX and not path.exists():
        return None
    return PcaShapeModel.load(path)


# -- verbs -----------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    ds = datamod.generate(cfg.synth)
    out = Path(args.out)
    datamod.save(ds, out)
    _provenance(out, "synth", cfg, {})
    print(f"wrote {len(ds.ids)} items to {out}")
    return EXIT_OK


def cmd_fit_pca(args, cfg: RunConfig) -> int:
    ds = datamod.load(args.data)
    _, _, contours = ds.split(args.split)
    k = args.k if args.k is not None else cfg.train.n_components
    model = PcaShapeModel(k).fit(contours)
    model.save(args.out)
    ratio = model.explained_variance_ratio_.sum()
    print(f"fitted {k} components on {len(contours)} contours; explained variance {ratio:.6f}")
    return EXIT_OK


def _save_run_checkpoint(directory: Path, net, model, tcfg: TrainConfig, extra: dict, optimizer=None) -> None:
    blobs = {}
    if optimizer is not None:
        blobs["optimizer"] = np.concatenate([optimizer.accumulators[n].ravel() for n in net.params]) if optimizer.accumulators else np.zeros(0)
    save_checkpoint(net, directory, extra=extra, blobs=blobs)
    if model is not None:
        model.save(directory / SHAPE_MODEL)
    write_json(directory / TRAIN_CONFIG, tcfg.to_dict())


def cmd_train(args, cfg: RunConfig) -> int:
    ds = datamod.load(args.data)
    tcfg = cfg.train
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {name: ds.split_hash(name) for name in ds.splits}
    if len(set(hashes.values())) != len(hashes):
        raise UsageError("two dataset splits have identical content hashes; refusing to train (leakage)")

    network = optimizer = None
    start_epoch = start_step = 0
    if args.resume:
        rdir = Path(args.resume)
        network, manifest = load_checkpoint(rdir)
        if network.spec.mode != tcfg.mode:
            raise UsageError(f"resume checkpoint mode {network.spec.mode!r} differs from config mode {tcfg.mode!r}")
        start_epoch, start_step = int(manifest["epoch"]), int(manifest["step"])
        optimizer = ad.RmsPropState(tcfg.learning_rate, tcfg.rms_decay, tcfg.rms_epsilon)
        if "extra_blobs" in manifest and manifest["extra_blobs"]["optimizer"]["count"]:
            flat = load_extra_blob(rdir, manifest, "optimizer")
            i = 0
            for name, p in network.params.items():
                optimizer.accumulators[name] = flat[i : i + p.size].reshape(p.shape).copy()
                i += p.size
        model = _load_model_for(rdir, manifest)
    else:
        _, _, contours = ds.split("train")
        model = None if tcfg.mode == DIRECT_VERTEX else PcaShapeModel(tcfg.n_components).fit(contours)

    last_dir = out / "last"
    extra_base = {"train_split_sha256": hashes.get("train"), "split_sha256": hashes}

    def on_epoch(rec, net, opt):
        if tcfg.checkpoint_every and rec.epoch % tcfg.checkpoint_every == 0:
            _save_run_checkpoint(last_dir, net, model, tcfg, {**extra_base, "epoch": rec.epoch, "step": rec.step}, opt)

    try:
        result = train(
            ds, model, tcfg, network=network, optimizer=optimizer, start_epoch=start_epoch, start_step=start_step,
            log_path=out / "train_log.csv", on_epoch=on_epoch,
        )
    except TrainingDiverged as exc:
        r = exc.result
        _save_run_checkpoint(out / "checkpoint", r.network, model, tcfg, {**extra_base, "epoch": r.best_epoch, "step": r.step})
        print(f"error: {exc}; kept last good checkpoint in {out / 'checkpoint'}", file=sys.stderr)
        return EXIT_RUNTIME

    extra = {**extra_base, "epoch": result.epoch, "step": result.step, "best_epoch": result.best_epoch}
    _save_run_checkpoint(last_dir, result.final_network, model, tcfg, extra, result.optimizer)
    _save_run_checkpoint(out / "checkpoint", result.network, model, tcfg, extra)
    _provenance(out, "train", cfg, {"data": Path(args.data)}, {"split_sha256": hashes})
    print(
        f"trained {result.epoch - start_epoch} epochs ({result.step} steps); best validation DICE "
        f"{result.best_val_dice:.4f} at epoch {result.best_epoch}; checkpoint in {out / 'checkpoint'}"
    )
    return EXIT_OK


def format_table(rows: list[dict], split: str) -> str:
    lines = [f"{'method':<16}  {'DICE':>15}  {'RMSE (px)':>15}    [{split}; mean ± population std]"]
    for r in rows:
        lines.append(
            f"{r['method']:<16}  {r['dice_mean']:>6.2f} ± {r['dice_std']:<6.2f}  "
            f"{r['rmse_mean']:>6.2f} ± {r['rmse_std']:<6.2f}"
        )
    return "\n".join(lines)


def cmd_eval(args, cfg: RunConfig) -> int:
    ds = datamod.load(args.data)
    rows = []
    for ck in args.checkpoint:
        ck = Path(ck)
        net, manifest = load_checkpoint(ck)
        model = _load_model_for(ck, manifest)
        s = evaluate(net, ds, model, manifest["mode"], split=args.split)
        rows.append({"method": _method_label(manifest), "checkpoint": str(ck), **{k: s[k] for k in ("n", "dice_mean", "dice_std", "rmse_mean", "rmse_std")}})
    print(format_table(rows, args.split))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "checkpoint", "n", "dice_mean", "dice_std", "rmse_mean", "rmse_std"])
            for r in rows:
                w.writerow([r["method"], r["checkpoint"], r["n"]] + [f"{r[k]:.17g}" for k in ("dice_mean", "dice_std", "rmse_mean", "rmse_std")])
    return EXIT_OK


def sample_stats(dist, samples: np.ndarray) -> dict:
    """Compare empirical per-vertex 2x2 covariances with the closed form.

    Standard errors use the Gaussian formula ``var(s_ij) = (S_ii S_jj + S_ij^2)/(n-1)``.
    """
    n = len(samples)
    dense = dist.dense_covariance()
    centred = samples - samples.mean(axis=0)
    worst = 0.0
    for i in range(dist.vertex_count):
        sl = slice(2 * i, 2 * i + 2)
        emp = centred[:, sl].T @ centred[:, sl] / (n - 1)
        ref = dense[sl, sl]
        se = np.sqrt((np.outer(np.diag(ref), np.diag(ref)) + ref**2) / (n - 1))
        worst = max(worst, float(np.max(np.abs(emp - ref) / se)))
    return {"n": n, "max_abs_z": worst, "within_3se": worst <= 3.0}


def cmd_sample(args, cfg: RunConfig) -> int:
    ds = datamod.load(args.data)
    if args.id not in ds.images:
        raise UsageError(f"unknown item id {args.id!r}")
    ck = Path(args.checkpoint)
    net, manifest = load_checkpoint(ck)
    if manifest["mode"] != PROBABILISTIC:
        raise UsageError("sampling needs a probabilistic checkpoint")
    model = _load_model_for(ck, manifest)
    sigma2 = read_json(ck / TRAIN_CONFIG)["loss"]["sigma2"]
    image = ds.images[args.id].astype(np.float64)
    dist = predict(net, standardize_images(image), model, sigma2)[0]
    seed = cfg.seed
    rng = np.random.default_rng(seed)
    samples = sample_contour(dist, rng, args.n, include_noise=args.include_noise) if args.n > 0 else np.zeros((0, dist.mean.size))
    doc = export_prediction(dist, levels=args.levels)
    doc.update(
        {
            "id": args.id,
            "reference": list(ds.contours[args.id]),
            "samples": [list(s) for s in samples[: args.keep]],
            "n_samples": int(args.n),
            "seed": int(seed),
        }
    )
    ref_m2 = mahalanobis2(dist, ds.contours[args.id])
    doc["reference_mahalanobis2"] = list(ref_m2)
    if args.stats:
        if args.n < 2:
            raise UsageError("--stats needs --n >= 2")
        if not args.include_noise:
            # closed-form comparison needs the fully generative draw
            samples = sample_contour(dist, np.random.default_rng(seed), args.n, include_noise=True)
        doc["stats"] = sample_stats(dist, samples)
        print(f"max |z| over vertex covariance entries: {doc['stats']['max_abs_z']:.3f}")
    out = Path(args.out) if args.out else None
    text = dumps(doc)
    if out:
        out.write_text(text)
        print(f"wrote prediction for {args.id} to {out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    try:
        doc = read_json(args.prediction)
    except FileNotFoundError:
        raise UsageError(f"prediction file not found: {args.prediction}") from None
    missing = [k for k in ("mean", "sigma2", "latent_cov", "factor") if k not in doc]
    if missing:
        raise UsageError(f"prediction lacks field(s): {', '.join(missing)}")
    try:
        dist = distribution_from_export(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"malformed prediction: {exc}") from None
    image = datamod.read_pgm(args.image) if args.image else None
    svg = render_svg(
        dist,
        image=image,
        reference=doc.get("reference") if not args.no_reference else None,
        samples=doc.get("samples") if args.samples else None,
        levels=args.levels,
        every=args.every,
        scale=args.scale,
    )
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def _levels(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid level list {text!r}") from None
    if not all(0 < v < 1 for v in vals):
        raise argparse.ArgumentTypeError("levels must lie in (0, 1)")
    return vals


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from clobbering flags given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="probcontour", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-pca", parents=[common], help="fit the PCA shape prior")
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--split", default="train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_pca)

    s = sub.add_parser("train", parents=[common], help="train an encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint directory (e.g. <run>/last) to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="Table-1 style evaluation")
    s.add_argument("--checkpoint", required=True, nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", parents=[common], help="predictive distribution and sampled contours")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--n", type=int, default=0)
    s.add_argument("--keep", type=int, default=20, help="samples written to the JSON output")
    s.add_argument("--levels", type=_levels, default=(0.30, 0.95, 0.999))
    s.add_argument("--include-noise", action="store_true")
    s.add_argument("--stats", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("plot", parents=[common], help="render a prediction as SVG")
    s.add_argument("--prediction", required=True)
    s.add_argument("--image")
    s.add_argument("--levels", type=_levels, default=(0.30, 0.95, 0.999))
    s.add_argument("--every", type=int, default=2)
    s.add_argument("--scale", type=float, default=8.0)
    s.add_argument("--samples", action="store_true")
    s.add_argument("--no-reference", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(getattr(args, "config", None), getattr(args, "seed", None))
        return args.func(args, cfg)
    except (ConfigError, UsageError, RankError, datamod.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
