"""Experiment harness: every pipeline stage as a subcommand.

Runs are driven by a single JSON config with a versioned schema; every
command writes a resolved-config snapshot next to its outputs and refuses
to clobber existing files without --force. Exit codes: 0 success,
2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys

import numpy as np

from dynmri import baseline, data, kspace, network, training
from dynmri.baseline import CsConfig, DivergenceError
from dynmri.data import PatchSpec, PhantomConfig
from dynmri.kspace import NoiseModel, SamplingMask
from dynmri.losses import LossConfig
from dynmri.network import NetworkConfig
from dynmri.training import NumericalDivergenceError, TrainConfig

SCHEMA_VERSION = 1
MASK_MAGIC = b"DMRIMK01"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "phantom": {
        "nx": 32, "ny": 32, "nt": 8, "num_ellipses": 5,
        "motion_amp": [0.03, 0.10], "motion_freq": [1.0, 3.0],
        "contrast": [0.3, 1.0], "smooth_phase": True, "count": 8,
    },
    "patches": {"enabled": False, "extents": [117, 120, 6], "strides": [7, 7, 5]},
    "mask": {"acceleration": 4.0, "acs_lines": 6, "gaussian_std": None},
    "noise": {"sigma": 0.0},
    "network": {
        "num_rdn_blocks": 4, "convs_per_block": 5, "num_rdbs": 2,
        "growth_channels": 12, "base_channels": 24, "kernel": [3, 3, 3],
        "convs_per_rdb": 2, "kpn_channels": None, "dc_mode": "hard",
        "dc_lambda": 1e6,
    },
    "train": {
        "batch_size": 20, "initial_lr": 0.0001, "lr_decay": 0.95,
        "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
        "epochs": 50, "val_fraction": 0.1,
        "loss": {"tv_kind": "none", "tv_weight": 0.0, "smoothing_eps": 1e-8},
    },
    "cs": {
        "lam": 0.005, "iterations": 100, "step_size": 1.0,
        "tv_kind": "aniso", "smoothing_eps": 1e-6,
    },
}


def _merge_checked(defaults: dict, overrides: dict, path: str = "") -> dict:
    out = {}
    for key, value in overrides.items():
        if key not in defaults:
            raise ValidationFailure(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge_checked(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    for key, value in defaults.items():
        if key not in out:
            out[key] = json.loads(json.dumps(value))
    return out


def load_config(path) -> dict:
    if path is None:
        cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    else:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationFailure(f"cannot read config {path}: {exc}") from exc
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ValidationFailure(
                f"config schema_version must be {SCHEMA_VERSION}, "
                f"got {raw.get('schema_version')!r}"
            )
        cfg = _merge_checked(DEFAULT_CONFIG, raw)
    validate_config(cfg)
    return cfg


def phantom_config(cfg: dict, seed: int, index: int = 0) -> PhantomConfig:
    p = cfg["phantom"]
    return PhantomConfig(
        nx=p["nx"], ny=p["ny"], nt=p["nt"], num_ellipses=p["num_ellipses"],
        motion_amp=tuple(p["motion_amp"]), motion_freq=tuple(p["motion_freq"]),
        contrast=tuple(p["contrast"]), smooth_phase=p["smooth_phase"],
        seed=seed + 1009 * index,
    )


def network_config(cfg: dict) -> NetworkConfig:
    n = dict(cfg["network"])
    n["kernel"] = tuple(n["kernel"])
    return NetworkConfig(**n)


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["train"])
    t["loss"] = LossConfig(**t["loss"])
    return TrainConfig(seed=seed, **t)


def cs_config(cfg: dict) -> CsConfig:
    return CsConfig(**cfg["cs"])


def validate_config(cfg: dict) -> None:
    try:
        phantom_config(cfg, cfg["seed"]).validate()
        network_config(cfg).validate()
        train_config(cfg, cfg["seed"]).validate()
        cs_config(cfg).validate()
        PatchSpec(
            tuple(cfg["patches"]["extents"]), tuple(cfg["patches"]["strides"])
        ).validate()
        if cfg["mask"]["acceleration"] < 1:
            raise ValueError("mask.acceleration must be >= 1")
        if cfg["noise"]["sigma"] < 0:
            raise ValueError("noise.sigma must be >= 0")
    except (ValueError, TypeError) as exc:
        raise ValidationFailure(f"invalid config: {exc}") from exc


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _prepare_output(args, *names) -> list:
    os.makedirs(args.output, exist_ok=True)
    paths = [os.path.join(args.output, n) for n in names]
    for p in paths:
        if os.path.exists(p) and not args.force:
            raise ValidationFailure(f"output file exists (use --force): {p}")
    return paths


def _write_snapshot(args, cfg: dict, name: str = "resolved_config.json") -> None:
    path = os.path.join(args.output, name)
    snapshot = json.loads(json.dumps(cfg))
    snapshot["seed"] = _seed(args, cfg)
    with open(path, "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed(args, cfg: dict) -> int:
    return args.seed if args.seed is not None else cfg["seed"]


def write_pgm(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """8-bit binary PGM with the given display range."""
    scaled = np.clip((image - lo) / (hi - lo), 0, 1)
    byte = (scaled * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (byte.shape[1], byte.shape[0]))
        fh.write(byte.tobytes())


def write_mask_bits(path, mask: SamplingMask) -> None:
    packed = np.packbits(mask.bits.reshape(-1))
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(
            struct.pack(
                "<IIIId", mask.nx, mask.ny, mask.nt, mask.acs_lines, mask.acceleration
            )
        )
        fh.write(packed.tobytes())


def read_mask_bits(path) -> SamplingMask:
    with open(path, "rb") as fh:
        if fh.read(8) != MASK_MAGIC:
            raise ValidationFailure(f"bad mask magic in {path}")
        nx, ny, nt, acs, accel = struct.unpack("<IIIId", fh.read(24))
        packed = np.frombuffer(fh.read(), dtype=np.uint8)
    bits = np.unpackbits(packed)[: nt * ny].reshape(nt, ny).astype(np.uint8)
    return SamplingMask(bits=bits, nx=nx, acs_lines=acs, acceleration=accel)


def _write_metrics_csv(path, rows: list[dict]) -> None:
    cols = ["index", "mse", "psnr", "ssim"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        for stat in ("mean", "std"):
            agg = {"index": stat}
            for col in cols[1:]:
                vals = [r[col] for r in rows if np.isfinite(r[col])]
                agg[col] = (np.mean(vals) if stat == "mean" else np.std(vals)) if vals else float("nan")
            writer.writerow(agg)


def _metrics_rows(recs, refs) -> list[dict]:
    rows = []
    for i, (rec, ref) in enumerate(zip(recs, refs)):
        rows.append(
            {
                "index": i,
                "mse": data.metric_mse(rec, ref),
                "psnr": data.metric_psnr(rec, ref),
                "ssim": data.metric_ssim(rec, ref),
            }
        )
    return rows


def _dataset_pairs(cfg: dict, sequences, seed: int):
    return data.make_pairs(
        sequences,
        acceleration=cfg["mask"]["acceleration"],
        acs_lines=cfg["mask"]["acs_lines"],
        sigma=cfg["noise"]["sigma"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    (out_path,) = _prepare_output(args, "dataset.dmri")
    sequences = [
        data.generate_phantom(phantom_config(cfg, seed, i))
        for i in range(cfg["phantom"]["count"])
    ]
    if cfg["patches"]["enabled"]:
        spec = PatchSpec(
            tuple(cfg["patches"]["extents"]), tuple(cfg["patches"]["strides"])
        )
        sequences = [p for s in sequences for p in data.shear_patches(s, spec)]
    data.write_dataset(out_path, sequences)
    _write_snapshot(args, cfg)
    print(f"wrote {len(sequences)} sequences to {out_path}")
    return EXIT_OK


def cmd_make_mask(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    bits_path, pgm_path, report_path = _prepare_output(
        args, "mask.bits", "mask.pgm", "density_report.csv"
    )
    p = cfg["phantom"]
    mask = kspace.generate_mask(
        p["nx"], p["ny"], p["nt"],
        cfg["mask"]["acceleration"], cfg["mask"]["acs_lines"], seed=seed,
        gaussian_std=cfg["mask"]["gaussian_std"],
    )
    write_mask_bits(bits_path, mask)
    write_pgm(pgm_path, mask.as_volume().reshape(mask.nt * mask.ny, mask.nx))
    freq = mask.bits.mean(axis=0)
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ky_index", "centered_ky", "sampling_fraction"])
        for j in range(mask.ny):
            writer.writerow([j, j - mask.ny // 2, repr(float(freq[j]))])
        writer.writerow(["overall", "", repr(float(mask.bits.mean()))])
    _write_snapshot(args, cfg)
    print(
        f"mask {mask.nt}x{mask.ny} lines, {100 * mask.bits.mean():.1f}% sampled, "
        f"written to {bits_path}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    ck_path, log_path = _prepare_output(args, "checkpoint.npz", "training_log.csv")
    sequences = data.read_dataset(args.data)
    pairs = _dataset_pairs(cfg, sequences, seed)
    dtype = np.float64 if args.float64 else np.float32
    params, log = training.train(
        pairs,
        network_config(cfg),
        train_config(cfg, seed),
        dtype=dtype,
        checkpoint_path=ck_path,
        log_path=log_path,
        verbose=True,
    )
    training.save_checkpoint(ck_path, params, network_config(cfg))
    _write_snapshot(args, cfg)
    print(f"trained {len(log)} epochs; checkpoint at {ck_path}")
    return EXIT_OK


def _load_masked_inputs(args, cfg, sequences, seed):
    if args.mask is not None:
        mask = read_mask_bits(args.mask)
        pairs = []
        for seq in sequences:
            ku = kspace.forward_model(
                seq, mask, NoiseModel(cfg["noise"]["sigma"]), seed=seed
            )
            pairs.append((ku, mask, seq))
        return pairs
    return _dataset_pairs(cfg, sequences, seed)


def cmd_reconstruct(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    rec_path, metrics_path = _prepare_output(args, "recon.dmri", "metrics.csv")
    params, net_cfg = training.load_checkpoint(args.checkpoint)
    sequences = data.read_dataset(args.data)
    pairs = _load_masked_inputs(args, cfg, sequences, seed)
    recs = [network.crdn_forward(ku, params, net_cfg) for ku, _, _ in pairs]
    data.write_dataset(rec_path, recs)
    _write_metrics_csv(metrics_path, _metrics_rows(recs, sequences))
    _maybe_dump_images(args, recs, sequences)
    _write_snapshot(args, cfg)
    print(f"reconstructed {len(recs)} sequences to {rec_path}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    rec_path, metrics_path = _prepare_output(args, "recon.dmri", "metrics.csv")
    sequences = data.read_dataset(args.data)
    pairs = _load_masked_inputs(args, cfg, sequences, seed)
    recs = []
    for ku, _, _ in pairs:
        rec, _trace = baseline.cs_reconstruct(ku, cs_config(cfg))
        recs.append(rec)
    data.write_dataset(rec_path, recs)
    _write_metrics_csv(metrics_path, _metrics_rows(recs, sequences))
    _maybe_dump_images(args, recs, sequences)
    _write_snapshot(args, cfg)
    print(f"reconstructed {len(recs)} sequences (CS baseline) to {rec_path}")
    return EXIT_OK


def _maybe_dump_images(args, recs, refs) -> None:
    if not getattr(args, "dump_images", False):
        return
    img_dir = os.path.join(args.output, "frames")
    os.makedirs(img_dir, exist_ok=True)
    for i, (rec, ref) in enumerate(zip(recs, refs)):
        write_pgm(os.path.join(img_dir, f"seq{i:03d}_frame0.pgm"), rec.magnitude()[0])
        err = np.abs(rec.magnitude()[0] - ref.magnitude()[0])
        # display range [0, 0.07] for error maps
        write_pgm(os.path.join(img_dir, f"seq{i:03d}_error0.pgm"), err, 0.0, 0.07)


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    (metrics_path,) = _prepare_output(args, "metrics.csv")
    recs = data.read_dataset(args.rec)
    refs = data.read_dataset(args.ref)
    if len(recs) != len(refs):
        raise ValidationFailure(
            f"sequence count mismatch: {len(recs)} reconstructions vs {len(refs)} references"
        )
    _write_metrics_csv(metrics_path, _metrics_rows(recs, refs))
    _maybe_dump_images(args, recs, refs)
    _write_snapshot(args, cfg)
    print(f"metrics for {len(recs)} sequences at {metrics_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from dynmri import gradcheck

    cfg = load_config(args.config)
    results = gradcheck.run_all(seed=_seed(args, cfg))
    failed = 0
    for name, err, tol in results:
        ok = err <= tol
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name:30s} err={err:.3e} tol={tol:.0e}")
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmri", description="dynamic MR reconstruction experiment harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic)")
        p.add_argument("--float64", action="store_true", help="run in 64-bit mode")
        if output:
            p.add_argument("--output", required=True, help="output directory")
            p.add_argument("--force", action="store_true", help="overwrite outputs")

    p = sub.add_parser("generate-data", help="synthesize a phantom dataset")
    common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("make-mask", help="generate an undersampling mask")
    common(p)
    p.set_defaults(func=cmd_make_mask)

    p = sub.add_parser("train", help="train the cascade on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", help="mask bits file (default: config-driven per-sample masks)")
    p.add_argument("--dump-images", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("baseline", help="classical CS reconstruction")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mask")
    p.add_argument("--dump-images", action="store_true")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="metrics between two dataset files")
    common(p)
    p.add_argument("--rec", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--dump-images", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p, output=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"dynmri-error: validation {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError, OSError) as exc:
        print(f"dynmri-error: validation {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalDivergenceError, DivergenceError) as exc:
        print(f"dynmri-error: numerical {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
