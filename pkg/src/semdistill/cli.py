"""Command-line entry point: ``semdistill <command> [flags]``.

Exit status is 0 on success, 1 for usage errors and 2 for data or
validation errors.  Heavy modules are imported inside the commands that need
them so ``infer`` runs with nothing but the student checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

log = logging.getLogger("semdistill")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _pgm_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.pgm"))
        if not files:
            raise FileNotFoundError(f"no .pgm files in {path}")
        return files
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    return [path]


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command}: --out is required")
    return Path(args.out)


def _print_config(command: str, values: dict) -> None:
    print(f"# command={command}")
    for k in sorted(values):
        print(f"# {k}={values[k]}")
    sys.stdout.flush()


# --- commands ---------------------------------------------------------------

def cmd_synth(args):
    from .data import synth_scene, write_label_pgm, write_pgm

    out = _out_dir(args)
    _print_config("synth", dict(n=args.n, size=args.size, k=args.k, seed=args.seed, out=out))
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        img, seg = synth_scene(args.seed * 100_003 + i, args.size, args.size, args.k)
        write_pgm(out / "clean" / f"{i:05d}.pgm", img, bits=16)
        write_label_pgm(out / "labels" / f"{i:05d}.pgm", seg)
    return EXIT_OK


def cmd_degrade(args):
    from .data import DegradationConfig, degrade, read_pgm, write_pgm

    cfg = DegradationConfig(args.gauss_var, args.speckle_var, args.blur_len, args.blur_angle, args.seed)
    files = _pgm_inputs(Path(args.input))
    out = _out_dir(args)
    _print_config("degrade", {**asdict(cfg), "in": args.input, "out": out})
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(files):
        img = degrade(read_pgm(f), DegradationConfig(cfg.gaussian_var, cfg.speckle_var, cfg.blur_length,
                                                     cfg.blur_angle, args.seed * 100_003 + i))
        write_pgm(out / f.name, img, bits=16)
    return EXIT_OK


def cmd_crop(args):
    from .data import crop_patches, read_pgm_raw, write_pgm_raw

    if args.size < 1 or args.step < 1:
        raise UsageError("crop: --size and --step must be positive")
    files = _pgm_inputs(Path(args.input))
    out = _out_dir(args)
    _print_config("crop", {"size": args.size, "step": args.step, "in": args.input, "out": out})
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        samples, maxval = read_pgm_raw(f)
        grid = crop_patches(samples.astype("float32"), args.size, args.step)
        for r, c, _ in grid.patches:
            write_pgm_raw(out / f"{f.stem}_r{r}_c{c}.pgm", samples[r:r + args.size, c:c + args.size], maxval)
    return EXIT_OK


def cmd_register(args):
    from .data import read_pgm, register_patch, write_pgm

    if args.radius < 0:
        raise UsageError("register: --radius must be >= 0")
    moving, fixed = Path(args.moving), Path(args.fixed)
    if moving.is_dir() != fixed.is_dir():
        raise UsageError("register: --moving and --fixed must both be files or both be directories")
    pairs = [(m, fixed / m.name) for m in _pgm_inputs(moving)] if moving.is_dir() else [(moving, fixed)]
    for _, f in pairs:
        if not f.is_file():
            raise FileNotFoundError(f"{f.name}: no fixed counterpart in {fixed}")
    out = _out_dir(args)
    _print_config("register", {"moving": moving, "fixed": fixed, "radius": args.radius, "out": out})
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m, f in pairs:
        res = register_patch(read_pgm(m), read_pgm(f), args.radius)
        write_pgm(out / m.name, res.aligned, bits=16)
        rows.append(f"{m.name},{res.u},{res.v},{res.score:.8f}\n")
        print(f"{m.name}: u={res.u} v={res.v} score={res.score:.6f}")
    with open(out / "shifts.csv", "w") as fh:
        fh.write("filename,u,v,score\n")
        fh.writelines(rows)
    return EXIT_OK


def cmd_masks(args):
    from .data import read_pgm, write_label_pgm
    from .prior import MaskProvider, provide_masks

    provider = MaskProvider.from_spec(args.mode, args.k)
    files = _pgm_inputs(Path(args.input))
    out = _out_dir(args)
    _print_config("masks", {"in": args.input, "k": args.k, "mode": args.mode, "out": out})
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        seg = provide_masks(provider, f.stem, read_pgm(f))
        write_label_pgm(out / f.name, seg)
    return EXIT_OK


_TRAIN_COMMANDS = ("pretrain", "distill", "sweep")

_TRAIN_FLAGS = {
    "lr": "learning_rate", "batch": "batch_size", "lambda1": "lambda1", "lambda2": "lambda2",
    "ablation": "ablation", "dropout": "dropout_p", "weight_decay": "weight_decay", "seed": "seed",
}


def _train_config(args, epochs_field: str | None):
    from .training import TrainConfig, parse_config_text

    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if epochs_field and getattr(args, "epochs", None) is not None:
        values[epochs_field] = args.epochs
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.command}: {exc}") from None


def _load_split(args, cfg):
    from .data import SplitSpec, split_dataset
    from .prior import MaskProvider
    from .training import load_pairs

    samples, mask_paths = load_pairs(args.data)
    train, val, test = split_dataset(samples, SplitSpec(seed=cfg.seed))
    provider = MaskProvider.from_spec(args.masks, args.k)
    if mask_paths and args.masks == "synthetic":
        provider = MaskProvider("file", args.k, paths=mask_paths)
    return train, val, test, provider


def cmd_pretrain(args):
    from .restorers import save_checkpoint
    from .training import pretrain_teacher

    cfg = _train_config(args, "epochs_stage1")
    out = _out_dir(args)
    _print_config("pretrain", {**asdict(cfg), "data": args.data, "masks": args.masks, "k": args.k, "out": out})
    train, val, _, provider = _load_split(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    teacher, report = pretrain_teacher(train, provider, cfg, val)
    save_checkpoint(teacher, out / "teacher.spdc")
    report.write_csv(out / "stage1_report.csv")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return EXIT_OK


def cmd_distill(args):
    from .restorers import load_checkpoint, save_checkpoint
    from .training import train_student

    cfg = _train_config(args, "epochs_stage2")
    if args.teacher is None and not args.baseline:
        raise UsageError("distill: --teacher is required unless --baseline is given")
    out = _out_dir(args)
    _print_config("distill", {**asdict(cfg), "data": args.data, "teacher": args.teacher, "masks": args.masks,
                              "k": args.k, "baseline": args.baseline, "out": out})
    train, val, _, provider = _load_split(args, cfg)
    teacher = None if args.baseline else load_checkpoint(args.teacher, expect="teacher").freeze()
    out.mkdir(parents=True, exist_ok=True)
    student, report = train_student(train, provider, teacher, cfg, val)
    save_checkpoint(student, out / "student.spdc")
    report.write_csv(out / "stage2_report.csv")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return EXIT_OK


def cmd_infer(args):
    import numpy as np

    from .data.pgm import read_pgm, write_pgm
    from .numerics import Tensor, no_grad
    from .restorers import load_checkpoint, student_forward

    src = Path(args.input)
    files = _pgm_inputs(src)
    if args.out is None:
        raise UsageError("infer: --out is required")
    _print_config("infer", {"model": args.model, "in": src, "out": args.out})
    model = load_checkpoint(args.model, expect="student")
    if src.is_dir():
        Path(args.out).mkdir(parents=True, exist_ok=True)
        targets = [Path(args.out) / f.name for f in files]
    else:
        targets = [Path(args.out)]
    with no_grad():
        for f, t in zip(files, targets):
            x = read_pgm(f)
            y = student_forward(model, Tensor(x[None, None])).data[0, 0]
            write_pgm(t, np.clip(y, 0.0, 1.0), bits=16)
    return EXIT_OK


def cmd_eval(args):
    from .metrics import evaluate_dirs

    _print_config("eval", {"pred": args.pred, "ref": args.ref, "out": args.out})
    report = evaluate_dirs(args.pred, args.ref)
    if args.out:
        report.write_csv(args.out)
    for name, p, s in report.rows:
        print(f"{name}: psnr={p:.4f} ssim={s:.6f}")
    print(f"MEAN: psnr={report.mean_psnr:.4f} ssim={report.mean_ssim:.6f}")
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None


def cmd_sweep(args):
    from .restorers import load_checkpoint
    from .training import best_of_sweep, lambda_sweep, write_sweep_csv

    cfg = _train_config(args, "epochs_stage2")
    g1, g2 = _float_list(args.lambda1_grid), _float_list(args.lambda2_grid)
    out = _out_dir(args)
    _print_config("sweep", {**asdict(cfg), "data": args.data, "teacher": args.teacher, "lambda1_grid": g1,
                            "lambda2_grid": g2, "out": out})
    train, val, _, provider = _load_split(args, cfg)
    teacher = load_checkpoint(args.teacher, expect="teacher").freeze()
    rows = lambda_sweep(train, provider, teacher, cfg, val, g1, g2)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out)
    best = best_of_sweep(rows)
    print(f"best lambda1={best[0]:g} lambda2={best[1]:g} psnr={best[2]:.4f} ssim={best[3]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_gradient_suite

    _print_config("gradcheck", {"instances": args.instances, "seed": args.seed, "tolerance": args.tolerance})
    ok = True
    for r in run_gradient_suite(args.instances, args.seed):
        passed = r.max_rel_error < args.tolerance
        ok &= passed
        print(f"{r.op:18s} max_rel_error={r.max_rel_error:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DATA


def cmd_demo(args):
    from .pipeline import pipeline_demo

    workdir = Path(args.workdir or args.out or "")
    if not str(workdir):
        raise UsageError("demo: --workdir is required")
    if workdir.exists() and any(workdir.iterdir()) and not args.force:
        raise UsageError(f"demo: {workdir} is not empty (use --force)")
    _print_config("demo", {"workdir": workdir, "seed": args.seed, "n": args.n, "size": args.size,
                           "epochs": args.epochs, "force": args.force})
    result = pipeline_demo(workdir, seed=args.seed, n=args.n, size=args.size, epochs=args.epochs,
                           force=args.force)
    for row in result.comparison:
        print(f"{row[0]:18s} psnr={row[1]:.4f} ssim={row[2]:.6f}")
    print(f"inference purity: {'ok' if result.purity_ok else 'FAILED'}")
    return EXIT_OK if result.purity_ok else EXIT_DATA


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    # None means "not given" so a --config file can supply the training seed.
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--config", default=None, help="key=value file with training settings")
    shared.add_argument("--out", default=None)
    shared.add_argument("--force", action="store_true")

    p = _Parser(prog="semdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[shared], help="generate clean scenes and label maps")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--k", type=int, default=7)

    s = sub.add_parser("degrade", parents=[shared], help="blur + speckle + Gaussian noise")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--gauss-var", type=float, default=0.01)
    s.add_argument("--speckle-var", type=float, default=0.01)
    s.add_argument("--blur-len", type=int, default=10)
    s.add_argument("--blur-angle", type=float, default=5.0)

    s = sub.add_parser("crop", parents=[shared], help="cut images into fully-inside patches")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--size", type=int, default=192)
    s.add_argument("--step", type=int, default=192)

    s = sub.add_parser("register", parents=[shared], help="integer-shift NCC registration")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--radius", type=int, default=5)

    s = sub.add_parser("masks", parents=[shared], help="label maps for reference images")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--mode", default="synthetic", help="synthetic or dir:<path>")

    def train_flags(s, lambdas: bool):
        s.add_argument("--data", required=True, help="pair manifest")
        s.add_argument("--masks", default="synthetic", help="synthetic or dir:<path>")
        s.add_argument("--k", type=int, default=7)
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--lr", type=float, default=None)
        s.add_argument("--batch", type=int, default=None)
        s.add_argument("--ablation", default=None,
                       choices=["full", "no_scm", "no_skd", "cat_fusion", "spi_no_dropout"])
        s.add_argument("--dropout", type=float, default=None)
        s.add_argument("--weight-decay", type=float, default=None)
        if lambdas:
            s.add_argument("--lambda1", type=float, default=None)
            s.add_argument("--lambda2", type=float, default=None)

    s = sub.add_parser("pretrain", parents=[shared], help="stage 1: train the mask-guided teacher")
    train_flags(s, lambdas=False)
    s = sub.add_parser("distill", parents=[shared], help="stage 2: train the student")
    train_flags(s, lambdas=True)
    s.add_argument("--teacher", default=None)
    s.add_argument("--baseline", action="store_true", help="reconstruction loss only, no teacher")
    s = sub.add_parser("sweep", parents=[shared], help="grid over lambda1 x lambda2")
    train_flags(s, lambdas=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--lambda1-grid", default="1e-4,1e-3,1e-2")
    s.add_argument("--lambda2-grid", default="10,100,1000")

    s = sub.add_parser("infer", parents=[shared], help="restore images with a student checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)

    s = sub.add_parser("eval", parents=[shared], help="PSNR/SSIM of matching files")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)

    s = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=10)
    s.add_argument("--tolerance", type=float, default=1e-4)

    s = sub.add_parser("demo", parents=[shared], help="end-to-end desk-scale pipeline")
    s.add_argument("--workdir", default=None)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--epochs", type=int, default=20)
    return p


COMMANDS = {
    "synth": cmd_synth, "degrade": cmd_degrade, "crop": cmd_crop, "register": cmd_register,
    "masks": cmd_masks, "pretrain": cmd_pretrain, "distill": cmd_distill, "infer": cmd_infer,
    "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "demo": cmd_demo,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.seed is not None and args.seed < 0:
            raise UsageError(f"{args.command}: --seed must be >= 0")
        if args.seed is None and args.command not in _TRAIN_COMMANDS:
            args.seed = 0
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv: list[str] | None = None) -> None:
    logging.basicConfig(level=os.environ.get("SEMDISTILL_LOG", "WARNING"), format="%(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
