"""``otdeconv`` command line: psf, simulate, train, infer, eval, baseline, inspect-kernel."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import ConfigError, FormatError, NumericalError, OtdeconvError
from .volume import Volume, file_digest, read_volume, write_volume


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    timings: dict = field(default_factory=dict)

    def add_output(self, path) -> None:
        path = Path(path)
        self.outputs[str(path)] = file_digest(path)

    def write(self, path) -> None:
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)


def _triplet(values, name: str, cast=float) -> tuple:
    if values is None:
        return None
    if len(values) == 1:
        values = values * 3
    if len(values) != 3:
        raise ConfigError(f"{name} takes one or three values")
    return tuple(cast(v) for v in values)


def _write_slices(prefix: Path, data: np.ndarray) -> list[Path]:
    c = [n // 2 for n in data.shape]
    out = []
    for name, sl in (("z", data[c[0], :, :]), ("y", data[:, c[1], :]), ("x", data[:, :, c[2]])):
        p = prefix.with_name(f"{prefix.name}_slice_{name}.csv")
        np.savetxt(p, sl, delimiter=",", fmt="%.17g")
        out.append(p)
    return out


def _stem(path: Path) -> Path:
    return path.with_suffix("") if path.suffix else path


# ------------------------------------------------------------------ commands

def cmd_psf(args, manifest: RunManifest) -> None:
    from .optics import PsfSpec, born_wolf_psf, gaussian_psf, smooth_kernel

    size = _triplet(args.size, "--size", int)
    if args.model == "born-wolf":
        missing = [flag for flag, v in (("--lambda", args.wavelength), ("--na", args.na), ("--ni", args.ni),
                                        ("--voxel", args.voxel)) if v is None]
        if missing:
            raise ConfigError(f"born-wolf needs explicit {', '.join(missing)}")
        spec = PsfSpec(args.wavelength, args.na, args.ni, _triplet(args.voxel, "--voxel"), size,
                       args.quadrature)
        kernel = born_wolf_psf(spec)
    else:
        if args.sigma is None:
            raise ConfigError("gaussian model needs --sigma")
        kernel = gaussian_psf(_triplet(args.sigma, "--sigma"), size, _triplet(args.voxel, "--voxel"))
    out = Path(args.out)
    write_volume(out, kernel)
    manifest.add_output(out)
    if args.inspect:
        smoothed = smooth_kernel(kernel, 1.0)
        sm_path = _stem(out).with_name(_stem(out).name + "_smoothed.otdv")
        write_volume(sm_path, smoothed)
        manifest.add_output(sm_path)
        for p in _write_slices(_stem(out), kernel.data) + _write_slices(_stem(sm_path), smoothed.data):
            manifest.add_output(p)


def cmd_simulate(args, manifest: RunManifest) -> None:
    from .simulate import NoiseSpec, generate_dataset

    kernel = read_volume(args.psf)
    manifest.inputs["psf"] = file_digest(args.psf)
    snr = math.inf if str(args.snr).lower() == "inf" else float(args.snr)
    noise = NoiseSpec(snr, args.photons, args.gaussian_fraction, args.seed)
    out = Path(args.out)
    generate_dataset(out, args.n, kernel, noise, seed=args.seed, extents=_triplet(args.size, "--size", int),
                     n_filaments=args.filaments, margin=args.margin, threads=kernels.thread_count())
    for p in sorted(out.glob("*.otdv")) + [out / "dataset.json"]:
        manifest.add_output(p)


def _train_config(args):
    from .models import DiscriminatorConfig, GeneratorConfig
    from .training import TrainConfig

    if args.config:
        base = json.loads(Path(args.config).read_text())
    else:
        base = {}
    over = {
        "mode": args.mode, "iterations": args.iterations, "lr": args.lr, "kernel_lr": args.kernel_lr,
        "gamma": args.gamma, "patch": args.patch, "batch_size": args.batch, "replay_capacity": args.buffer,
        "kernel_penalty": args.kernel_penalty, "kernel_penalty_weight": args.kernel_lambda,
        "cycle_norm": args.norm, "seed": args.seed, "checkpoint_every": args.checkpoint_every,
        "eval_every": args.eval_every,
    }
    base.update({k: v for k, v in over.items() if v is not None})
    if args.kernel_size is not None:
        base["kernel_extent"] = list(_triplet(args.kernel_size, "--kernel-size", int))
    gen = dict(base.get("generator", {}))
    if args.depth is not None:
        gen["depth"] = args.depth
    if args.base_channels is not None:
        gen["base_channels"] = args.base_channels
    disc = dict(base.get("discriminator", {}))
    if args.disc_channels is not None:
        disc["base_channels"] = args.disc_channels
    if args.disc_strides is not None:
        disc["strides"] = list(_triplet(args.disc_strides, "--disc-strides", int))
    base["generator"] = asdict(GeneratorConfig(**gen))
    base["discriminator"] = asdict(DiscriminatorConfig(**{k: tuple(v) if k == "strides" else v
                                                          for k, v in disc.items()}))
    return TrainConfig.from_dict(base)


def cmd_train(args, manifest: RunManifest) -> None:
    from .simulate import Dataset
    from .training import train

    cfg = _train_config(args)
    manifest.config = cfg.to_dict()
    manifest.seed = cfg.seed
    kernel = None
    if args.psf:
        kernel = read_volume(args.psf).data
        manifest.inputs["psf"] = file_digest(args.psf)
    if cfg.mode == "nonblind" and kernel is None:
        raise ConfigError("--mode nonblind requires --psf")
    dataset = Dataset.load(args.data, paired=cfg.paired)
    manifest.inputs["data"] = file_digest(Path(args.data) / "dataset.json")
    eval_pairs = ()
    if cfg.eval_every:
        paired = Dataset.load(args.data, paired=True)
        eval_pairs = list(zip(paired.sharp, paired.blurred))[:2]
    out = Path(args.out)
    train(cfg, dataset, kernel=kernel, run_dir=out, eval_pairs=eval_pairs)
    for p in sorted(out.iterdir()):
        if p.name != "manifest.json" and p.is_file():
            manifest.add_output(p)


def cmd_infer(args, manifest: RunManifest) -> None:
    from .training import infer, load_generator

    G = load_generator(args.checkpoint)
    y = read_volume(args.input)
    manifest.inputs = {"checkpoint": file_digest(args.checkpoint), "input": file_digest(args.input)}
    out = infer(G, y, patch=args.patch, overlap=args.overlap)
    write_volume(args.out, out)
    manifest.add_output(args.out)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def cmd_eval(args, manifest: RunManifest) -> None:
    from .metrics import MetricReport

    ref = read_volume(args.reference)
    rows = []
    for est_path in args.estimate:
        rep = MetricReport.compute(ref, read_volume(est_path), max_value=args.max_value, window=args.window)
        rows.append([Path(est_path).name, _fmt(rep.psnr_db), _fmt(rep.ssim), _fmt(rep.avg_snr_db)])
        manifest.inputs[str(est_path)] = file_digest(est_path)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["volume", "psnr_db", "ssim", "avg_snr_db"])
        w.writerows(rows)
    manifest.add_output(args.out)
    for r in rows:
        print(",".join(r))


def cmd_baseline(args, manifest: RunManifest) -> None:
    from .baselines import PlsConfig, richardson_lucy, tv_pls

    y = read_volume(args.input)
    h = read_volume(args.psf)
    manifest.inputs = {"input": file_digest(args.input), "psf": file_digest(args.psf)}
    if args.method == "rl":
        if args.clip_negative:
            y = Volume(np.maximum(y.data, 0.0), voxel_size=y.voxel_size)
        out = richardson_lucy(y, h, args.iterations)
    else:
        cfg = PlsConfig(regularizer="tv" if args.lam > 0 else "none", lam=args.lam, step_size=args.step,
                        iterations=args.iterations, nonneg_projection=not args.allow_negative)
        manifest.config["pls"] = asdict(cfg)
        out = tv_pls(y, h, cfg)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError("baseline produced non-finite values")
    write_volume(args.out, out)
    manifest.add_output(args.out)


def cmd_inspect_kernel(args, manifest: RunManifest) -> None:
    from .optics import fwhm_along, kernel_center_of_mass, kernel_correlation, smooth_kernel

    k = read_volume(args.kernel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    smoothed = smooth_kernel(k, args.sigma)
    write_volume(out / "smoothed.otdv", smoothed)
    paths = [out / "smoothed.otdv"] + _write_slices(out / "raw", k.data) + _write_slices(out / "smoothed", smoothed.data)
    report = {
        "sum": float(k.data.sum()),
        "center_of_mass": kernel_center_of_mass(smoothed).tolist(),
        "fwhm_voxels": [fwhm_along(smoothed, a) for a in range(3)],
    }
    if args.reference:
        ref = read_volume(args.reference)
        report["correlation_raw"] = kernel_correlation(k, ref)
        report["correlation_smoothed"] = kernel_correlation(smoothed, ref)
        report["center_offset"] = (kernel_center_of_mass(smoothed) - kernel_center_of_mass(ref)).tolist()
        print(f"correlation {report['correlation_smoothed']:.6f}")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    for p in paths + [out / "report.json"]:
        manifest.add_output(p)


COMMANDS = {
    "psf": cmd_psf, "simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "baseline": cmd_baseline, "inspect-kernel": cmd_inspect_kernel,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otdeconv", description="Optimal-transport cycle deconvolution toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("psf", help="write a PSF kernel")
    s.add_argument("--model", choices=("born-wolf", "gaussian"), required=True)
    s.add_argument("--lambda", dest="wavelength", type=float, help="wavelength in meters")
    s.add_argument("--na", type=float)
    s.add_argument("--ni", type=float)
    s.add_argument("--voxel", type=float, nargs="+", help="voxel size (z y x or one value), meters")
    s.add_argument("--size", type=int, nargs="+", default=[31])
    s.add_argument("--sigma", type=float, nargs="+", help="gaussian sigma in voxels")
    s.add_argument("--quadrature", type=int, default=512)
    s.add_argument("--inspect", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("simulate", help="generate a phantom dataset")
    s.add_argument("--psf", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--size", type=int, nargs="+", default=[32])
    s.add_argument("--filaments", type=int, default=8)
    s.add_argument("--margin", type=float, default=0.0)
    s.add_argument("--snr", default="20", help="target average SNR in dB, or 'inf'")
    s.add_argument("--photons", type=float, default=1000.0, help="expected photons at the peak voxel")
    s.add_argument("--gaussian-fraction", type=float)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train a deconvolution model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("blind", "nonblind", "conventional", "supervised_mse", "supervised_gan"))
    s.add_argument("--psf")
    s.add_argument("--config", help="JSON training config; flags override it")
    s.add_argument("--iterations", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--kernel-lr", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--patch", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--buffer", type=int)
    s.add_argument("--kernel-size", type=int, nargs="+")
    s.add_argument("--kernel-penalty", choices=("none", "l1"))
    s.add_argument("--kernel-lambda", type=float)
    s.add_argument("--norm", choices=("l1", "l2"))
    s.add_argument("--depth", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--disc-channels", type=int)
    s.add_argument("--disc-strides", type=int, nargs="+")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--seed", type=int)

    s = sub.add_parser("infer", help="apply a trained generator patch-wise")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--overlap", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("eval", help="PSNR / SSIM / SNR against a reference")
    s.add_argument("--reference", required=True)
    s.add_argument("--estimate", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=8)
    s.add_argument("--max-value", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("baseline", help="Richardson-Lucy or TV-regularized least squares")
    s.add_argument("--method", choices=("rl", "tv"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--psf", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=50)
    s.add_argument("--lam", type=float, default=1e-3)
    s.add_argument("--step", type=float)
    s.add_argument("--allow-negative", action="store_true", help="tv: skip the projection onto x >= 0")
    s.add_argument("--clip-negative", action="store_true", help="rl: clip negative measurements to zero first")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("inspect-kernel", help="smooth and compare a learned kernel")
    s.add_argument("--kernel", required=True)
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    return p


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("simulate", "train", "inspect-kernel"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = {k: v for k, v in vars(args).items() if k != "command"}
    manifest = RunManifest(command=args.command, config=config, seed=getattr(args, "seed", None))
    start = time.perf_counter()
    try:
        with kernels.limit_threads():
            COMMANDS[args.command](args, manifest)
        manifest.timings = {"wall_seconds": time.perf_counter() - start, "backend": kernels.BACKEND}
        manifest.write(_manifest_path(args))
    except (FormatError, OSError) as exc:
        print(f"otdeconv: I/O error: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"otdeconv: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, OtdeconvError) as exc:
        print(f"otdeconv: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
