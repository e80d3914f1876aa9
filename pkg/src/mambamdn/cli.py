"""Command-line entry point: ``mdn <subcommand> ...``.

Exit codes:
    0  success
    2  bad arguments or configuration
    3  I/O failure or unreadable input file
    4  checkpoint missing
    5  training loss became NaN or infinite

Tables go to stdout; diagnostics go to stderr.  Every run writes
``run_manifest.txt`` into its output directory, and ``mdn replay`` re-executes
a run from that file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import ModelConfig, default_seed, parse_overrides, read_key_values
from .evaluation import ABLATION_VARIANTS, evaluate, format_table, reconstruct, run_ablation_suite, write_per_sample_csv
from .kspace import (
    ComplexImage,
    add_noise,
    apply_mask,
    fft2,
    ifft2c,
    make_mask,
    read_complex,
    write_complex,
    write_mask,
    zero_fill,
)
from .network import MambaMdnModel
from .phantom import build_dataset, file_checksum, load_split, read_manifest
from .plotting import plot_loss_curve, plot_metric_bars, plot_reconstruction, to_gray, write_pgm
from .training import TrainingDiverged, prepare_samples, train

log = logging.getLogger("mambamdn")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_CHECKPOINT, EXIT_DIVERGED = 0, 2, 3, 4, 5
RUN_MANIFEST = "run_manifest.txt"
CHECKPOINT = "model.mdn"


class MissingCheckpoint(FileNotFoundError):
    pass


# ----------------------------------------------------------------------------
# helpers


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _effective_config(args) -> ModelConfig:
    """Defaults (seeds from ``MDN_SEED``), then the config file, then ``-o`` overrides."""
    values: dict[str, str] = {"seed": str(default_seed(0)), "mask_seed": str(default_seed(1000))}
    if getattr(args, "config", None):
        values.update(read_key_values(args.config))
    values.update(parse_overrides(getattr(args, "override", None)))
    return ModelConfig.from_dict(values)


def _freeze(args, cfg: ModelConfig) -> None:
    """Record the fully resolved config in ``args`` so a replay ignores the environment."""
    args.config = None
    args.override = [f"{k}={getattr(cfg, k)}" for k in cfg.keys()]


def _write_run_manifest(out: Path, args, cfg: ModelConfig | None = None, extra: dict | None = None) -> None:
    record = {k: v for k, v in vars(args).items() if k != "func"}
    lines = [f"# mdn {__version__} run manifest", f"command={args.command}", f"args={json.dumps(record, sort_keys=True)}"]
    if cfg is not None:
        lines += [f"config.{k}={getattr(cfg, k)}" for k in cfg.keys()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    (out / RUN_MANIFEST).write_text("\n".join(lines) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _abs(path: str | None) -> str | None:
    return None if path is None else str(Path(path).resolve())


def _split_offsets(manifest) -> dict[str, int]:
    # distinct mask seeds for every sample in the dataset
    c = manifest.counts()
    return {"train": 0, "valid": c["train"], "test": c["train"] + c["valid"]}


def _load_samples(data: str, split: str, cfg: ModelConfig):
    manifest = read_manifest(data)
    pairs = load_split(manifest, split)
    if not pairs:
        raise ad.ConfigError(f"split {split!r} of {data} is empty")
    return prepare_samples(pairs, cfg, mask_offset=_split_offsets(manifest)[split])


def _tsv_sha_table(rows: list[tuple[str, ...]], header: str) -> str:
    return header + "\n" + "".join("\t".join(r) + "\n" for r in rows)


# ----------------------------------------------------------------------------
# subcommands


def cmd_gendata(args) -> int:
    if args.n < 1:
        raise ad.ConfigError(f"--n must be >= 1, got {args.n}")
    if args.size < 16:
        raise ad.ConfigError(f"--size must be >= 16, got {args.size}")
    args.seed = default_seed(0) if args.seed is None else args.seed
    args.out = _abs(args.out)
    out = _out_dir(args)
    m = build_dataset(args.n, args.size, args.size, args.seed, out, leak_structure=args.leak)
    files = [out / "manifest.tsv"] + [out / name for _, t, r in m.entries for name in (t, r)]
    checksum = file_checksum(files)
    _write_run_manifest(out, args, extra={"checksum": checksum})
    counts = m.counts()
    _emit(
        "split\tcount\n"
        + "".join(f"{s}\t{counts[s]}\n" for s in ("train", "valid", "test"))
        + f"checksum\t{checksum}\n"
    )
    return EXIT_OK


def cmd_mask(args) -> int:
    args.seed = default_seed(0) if args.seed is None else args.seed
    height = args.size
    m = make_mask(height, args.size, args.accel, args.center_fraction, args.seed, density=args.density)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_mask(m, path)
    args.out = _abs(args.out)
    _write_run_manifest(path.parent, args)
    _emit(
        "height\twidth\taccel\tseed\tlines\tkept_fraction\n"
        f"{m.height}\t{m.width}\t{m.acceleration:g}\t{m.seed}\t{int(m.lines.sum())}\t{m.kept_fraction:.6f}\n"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    args.seed = default_seed(1000) if args.seed is None else args.seed
    args.data, args.out = _abs(args.data), _abs(args.out)
    out = _out_dir(args)
    manifest = read_manifest(args.data)
    entries = manifest.split(args.split)
    if not entries:
        raise ad.ConfigError(f"split {args.split!r} is empty")
    offset = _split_offsets(manifest)[args.split]
    rows = []
    for i, (tname, rname) in enumerate(entries):
        tar = ComplexImage(read_complex(manifest.root / tname))
        ref = ComplexImage(read_complex(manifest.root / rname))
        m = make_mask(tar.height, tar.width, args.accel, args.center_fraction, args.seed + offset + i)
        k = fft2(tar)
        if args.noise > 0:
            k = add_noise(k, args.noise, args.seed + offset + i)
        k_us = apply_mask(k, m)
        stem = Path(tname).name.replace("_target.cplx", "")
        write_complex(k_us.data, out / f"{stem}_kspace_us.cplx")
        write_mask(m, out / f"{stem}_mask.txt")
        gt = tar.magnitude()
        zf = zero_fill(k_us).magnitude()
        mix = np.abs(ifft2c(np.where(m.lines[:, None], k_us.data, fft2(ref).data)))
        vmax = float(gt.max())
        paths = {}
        for tag, img in (("gt", gt), ("zf", zf), ("kcm", mix)):
            paths[tag] = out / f"{stem}_{tag}.pgm"
            write_pgm(to_gray(img, vmax), paths[tag])
        rows.append(
            (
                stem,
                f"{m.kept_fraction:.6f}",
                file_checksum([paths["gt"]]),
                file_checksum([paths["zf"]]),
                file_checksum([paths["kcm"]]),
            )
        )
    _write_run_manifest(out, args)
    _emit(_tsv_sha_table(rows, "sample\tkept_fraction\tgt_sha256\tzf_sha256\tkcm_sha256"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    _freeze(args, cfg)
    args.data, args.out = _abs(args.data), _abs(args.out)
    out = _out_dir(args)
    samples = _load_samples(args.data, "train", cfg)
    model = MambaMdnModel(cfg)
    log.info("training %s on %d samples, %d parameters", cfg.variant, len(samples), sum(p.data.size for p in model.parameters()))
    losses_path = out / "loss.csv"
    with losses_path.open("w") as fh:
        fh.write("step,loss\n")

        def record(step: int, value: float) -> None:
            fh.write(f"{step},{value:.10g}\n")
            if step % 10 == 0:
                log.info("step %d loss %.6f", step, value)

        try:
            result = train(model, samples, cfg, callback=record)
        except TrainingDiverged as exc:
            print(f"mdn: training diverged: {exc}; try a smaller lr (-o lr=...)", file=sys.stderr)
            return EXIT_DIVERGED
    ad.save_parameters(model.parameters(), out / CHECKPOINT)
    cfg.save(out / "config.txt")
    plot_loss_curve(result.losses, out / "loss.png")
    _write_run_manifest(out, args, cfg)
    _emit(
        "steps\tinitial_loss\tfinal_loss\n"
        f"{result.steps}\t{result.initial_loss:.6f}\t{result.final_loss:.6f}\n"
    )
    return EXIT_OK


def _load_model(args) -> MambaMdnModel:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {ckpt}")
    if args.config is None and (ckpt.parent / "config.txt").is_file():
        args.config = str((ckpt.parent / "config.txt").resolve())
    cfg = _effective_config(args)
    model = MambaMdnModel(cfg)
    model.load_state_dict(ad.load_parameters(ckpt))
    return model


def cmd_eval(args) -> int:
    args.data, args.out, args.checkpoint = _abs(args.data), _abs(args.out), _abs(args.checkpoint)
    model = _load_model(args)
    _freeze(args, model.config)
    out = _out_dir(args)
    samples = _load_samples(args.data, args.split, model.config)
    rows = evaluate(model, samples)
    table = format_table(rows, args.split)
    (out / "metrics.tsv").write_text(table)
    write_per_sample_csv(rows, out / "per_sample.csv")
    plot_metric_bars(rows, out / "metrics.png", title=f"{args.split} split")
    first = samples[0]
    rec_c = reconstruct(model, [first])[0]
    # complex pair for ``mdn render``
    write_complex(rec_c, out / "sample0_pred.cplx")
    write_complex(first.target.data, out / "sample0_gt.cplx")
    rec = np.abs(rec_c)
    zf = zero_fill(first.k_us).magnitude()
    mix = np.abs(ifft2c(np.where(first.mask.lines[:, None], first.k_us.data, first.k_ref.data)))
    plot_reconstruction({"ZF": zf, "KCM": mix, model.variant: rec}, first.target.magnitude(), out / "recon.png")
    _write_run_manifest(out, args, model.config)
    _emit(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _effective_config(args)
    _freeze(args, cfg)
    args.data, args.out = _abs(args.data), _abs(args.out)
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [default_seed(0) + i for i in range(5)]
    args.seeds = ",".join(str(s) for s in seeds)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    blocks = [int(t) for t in args.blocks.split(",")] if args.blocks else []
    for v in variants:
        cfg.replace(variant=v)  # validates the tag
    manifest = read_manifest(args.data)
    train_pairs = load_split(manifest, "train")
    test_pairs = load_split(manifest, args.split)
    result = run_ablation_suite(
        cfg, train_pairs, test_pairs, seeds=seeds, variants=variants, block_counts=blocks, fusion=args.fusion, jobs=args.jobs
    )
    rows = dict(result.baselines)
    rows.update(result.pooled)
    table = format_table(rows, args.split)
    (out / "ablation.tsv").write_text(table)
    per_seed = ["variant\tseed\tPSNR\tSSIM\tRMSE\tfinal_loss"]
    for key, reports in result.per_seed.items():
        for seed, r, tr in zip(seeds, reports, result.losses[key]):
            per_seed.append(f"{key}\t{seed}\t{r.psnr_db:.6f}\t{r.mean_ssim:.6f}\t{r.mean_rmse:.6f}\t{tr.final_loss:.6f}")
    (out / "ablation_per_seed.tsv").write_text("\n".join(per_seed) + "\n")
    plot_metric_bars(rows, out / "ablation.png", title=f"ablation, {len(seeds)} seeds")
    _write_run_manifest(out, args, cfg)
    _emit(table)
    return EXIT_OK


def cmd_render(args) -> int:
    args.pred, args.gt, args.out = _abs(args.pred), _abs(args.gt), _abs(args.out)
    out = _out_dir(args)
    pred = np.abs(read_complex(args.pred))
    gt = np.abs(read_complex(args.gt))
    if pred.shape != gt.shape:
        raise ad.ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    vmax = float(gt.max())
    paths = [out / "pred.pgm", out / "gt.pgm", out / "error.pgm"]
    for img, path in zip((pred, gt, np.abs(pred - gt)), paths):
        write_pgm(to_gray(img, vmax), path)
    _write_run_manifest(out, args)
    _emit(_tsv_sha_table([(p.name, file_checksum([p])) for p in paths], "file\tsha256"))
    return EXIT_OK


def cmd_replay(args) -> int:
    """Re-run the command recorded in a run manifest, optionally into a new directory."""
    path = Path(args.manifest)
    if path.is_dir():
        path = path / RUN_MANIFEST
    values = read_key_values(path)
    if "args" not in values:
        raise ad.ConfigError(f"{path}: no recorded arguments")
    recorded = json.loads(values["args"])
    ns = argparse.Namespace(**recorded)
    if args.out is not None:
        ns.out = args.out
    ns.func = COMMANDS[ns.command]
    return ns.func(ns)


COMMANDS = {
    "gendata": cmd_gendata,
    "mask": cmd_mask,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render": cmd_render,
    "replay": cmd_replay,
}


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdn", description="Reference-guided multi-contrast MRI reconstruction toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def model_opts(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("-o", "--override", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    sp = sub.add_parser("gendata", help="write a synthetic paired-contrast dataset")
    sp.add_argument("--n", type=int, required=True, help="number of pairs")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=None, help="default: MDN_SEED or 0")
    sp.add_argument("--leak", action="store_true", help="add a reference-only structure")
    sp.add_argument("--out", default="data")

    sp = sub.add_parser("mask", help="write a phase-encode sampling mask")
    sp.add_argument("--accel", type=float, default=4.0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=None, help="default: MDN_SEED or 0")
    sp.add_argument("--center-fraction", type=float, default=0.08)
    sp.add_argument("--density", choices=("uniform", "polynomial"), default="uniform")
    sp.add_argument("--out", default="mask.txt")

    sp = sub.add_parser("simulate", help="undersample a dataset split and write previews")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--accel", type=float, default=4.0)
    sp.add_argument("--center-fraction", type=float, default=0.08)
    sp.add_argument("--seed", type=int, default=None, help="base mask seed; default: MDN_SEED or 1000")
    sp.add_argument("--noise", type=float, default=0.0, help="k-space noise std per component")
    sp.add_argument("--out", default="sim")

    sp = sub.add_parser("train", help="train a model on the train split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default="run")
    model_opts(sp)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--out", default="eval")
    model_opts(sp)

    sp = sub.add_parser("ablate", help="train and evaluate every ablation variant over several seeds")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("valid", "test"), default="test")
    sp.add_argument("--seeds", help="comma list; default: five seeds from MDN_SEED or 0")
    sp.add_argument("--variants", help=f"comma list; default: {','.join(ABLATION_VARIANTS)}")
    sp.add_argument("--blocks", help="extra block-count sweep, e.g. 1,2,4")
    sp.add_argument("--fusion", action="store_true", help="also run the additive-fusion variant")
    sp.add_argument("--jobs", type=int, default=1, help="concurrent training jobs")
    sp.add_argument("--out", default="ablate")
    model_opts(sp)

    sp = sub.add_parser("render", help="write magnitude and error-map PGM images")
    sp.add_argument("--pred", required=True, help="CPLX prediction")
    sp.add_argument("--gt", required=True, help="CPLX ground truth")
    sp.add_argument("--out", default="render")

    sp = sub.add_parser("replay", help="re-run a command from its run manifest")
    sp.add_argument("manifest", help="run_manifest.txt or the directory holding it")
    sp.add_argument("--out", default=None, help="output directory (default: the recorded one)")

    for name, fn in COMMANDS.items():
        sub.choices[name].set_defaults(func=fn)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        warnings.filterwarnings("ignore", module="numba")
    try:
        return args.func(args)
    except MissingCheckpoint as exc:
        print(f"mdn: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ad.ConfigError, ad.ShapeError, ValueError) as exc:
        print(f"mdn: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (OSError, ad.ContractError) as exc:
        print(f"mdn: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
