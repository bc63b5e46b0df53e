"""
Command line: gen, train, fuse, eval, bench, dwt, info

Exit codes: 0 success, 1 usage error, 2 data / format error, 3 numerical failure.
"""

import argparse
import json
import sys
import time
import tracemalloc
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from . import config, logs
from .errors import FormatError, S2WError, ShapeError, UsageError
from .models import AblationConfig, NetworkConfig, RunManifest, SceneSpec, TrainConfig


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports bad flags as UsageError instead of exiting with 2"""

    def error(self, message):
        raise UsageError(message)


def _seed(args) -> int:
    return args.seed if args.seed is not None else config.SEED


def _sizes(text: str) -> List[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes expects comma separated integers, got {text!r}")
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError(f"--sizes expects positive integers, got {text!r}")
    return sizes


def _ablation(values: Optional[List[str]]) -> AblationConfig:
    names = []
    for value in values or []:
        names += [v for v in value.split(",") if v.strip()]
    return AblationConfig.from_names(names)


def _manifest(path: Path, command: str, args, seed: int, start: float, outputs, **extra) -> None:
    snapshot = {k: v for k, v in vars(args).items() if k != "func"}
    snapshot.update(extra)
    manifest = RunManifest(
        command=command,
        config=json.loads(json.dumps(snapshot, default=str)),
        seed=seed,
        timings={"total_s": round(time.perf_counter() - start, 6)},
        outputs=[str(p) for p in outputs],
    )
    config.save_manifest(path, manifest)


# ==================== Commands ====================


def cmd_gen(args) -> int:
    from .dataset import generate_scenes, wald_degrade, write_split

    start = time.perf_counter()
    seed = _seed(args)
    weights = [float(w) for w in args.pan_weights.split(",")] if args.pan_weights else None
    spec = SceneSpec(bands=args.bands, size=args.size, count=args.count + args.val, seed=seed)
    scenes = generate_scenes(spec)
    triplets = [wald_degrade(gt, args.ratio, weights) for gt in scenes]

    out = Path(args.out)
    try:
        outputs = write_split(out / "train", triplets[: args.count])
        if args.val:
            outputs += write_split(out / "val", triplets[args.count:])
    except OSError as ex:
        raise FormatError(f"cannot write dataset to {out}: {ex}")
    _manifest(out / config.MANIFEST_FILE, "gen", args, seed, start, outputs, scene=spec.model_dump())
    print(f"INFO: wrote {args.count} train / {args.val} val triplets to {out}")
    return 0


def cmd_train(args) -> int:
    from .dataset import load_split
    from .network import build_model, history_table, train_toy

    start = time.perf_counter()
    seed = _seed(args)
    data = Path(args.data)
    train_set = load_split(data / "train")
    if not train_set:
        raise FormatError(f"{data / 'train'}: no triplets found")
    val_set = load_split(data / "val") if (data / "val").is_dir() else []

    sample = train_set[0]
    net_cfg = NetworkConfig(
        ratio=sample.ratio,
        bands=sample.gt.shape[0],
        width=args.width,
        d_state=args.d_state,
        depth=args.depth,
        skip_source=args.skip_source,
        ablation=_ablation(args.ablation),
        seed=seed,
        dtype=args.dtype or config.DTYPE,
    )
    train_cfg = TrainConfig(
        learning_rate=args.lr,
        steps=args.steps,
        batch=args.batch,
        patch=args.patch,
        eval_every=args.eval_every,
        seed=seed,
    )
    model = build_model(net_cfg)
    history = train_toy(model, train_set, train_cfg, val_set=val_set, ckpt=args.ckpt)
    print(history_table(history))

    ckpt = Path(args.ckpt)
    _manifest(
        Path(f"{ckpt}.manifest.json"),
        "train",
        args,
        seed,
        start,
        [ckpt, Path(f"{ckpt}.json")],
        network=net_cfg.model_dump(mode="json"),
        train=train_cfg.model_dump(mode="json"),
    )
    return 0


def cmd_fuse(args) -> int:
    from .branches import bicubic_upsample
    from .dataset import read_image, write_image
    from .network import fuse, load_checkpoint
    from .tensor import Tensor, no_grad

    start = time.perf_counter()
    pan = read_image(args.pan).astype(np.float64)
    lrms = read_image(args.lrms).astype(np.float64)
    if pan.shape[0] != 1 or pan.shape[1] % lrms.shape[1] or pan.shape[2] % lrms.shape[2]:
        raise ShapeError(f"PAN {pan.shape} and LRMS {lrms.shape} are not a PAN / LRMS pair")

    if args.baseline:
        with no_grad():
            fused = bicubic_upsample(Tensor(lrms), pan.shape[1] // lrms.shape[1]).data
    else:
        if not args.ckpt:
            raise UsageError("fuse needs --ckpt unless --baseline is given")
        model = load_checkpoint(args.ckpt)
        cfg = model.config
        if lrms.shape[0] != cfg.bands or pan.shape[1] != lrms.shape[1] * cfg.ratio:
            raise ShapeError(
                f"inputs PAN {pan.shape}, LRMS {lrms.shape} do not fit a checkpoint for "
                f"{cfg.bands} bands at ratio {cfg.ratio}"
            )
        fused = fuse(model, pan, lrms)
    out = write_image(args.out, fused)
    _manifest(Path(f"{out}.manifest.json"), "fuse", args, _seed(args), start, [out])
    print(f"INFO: fused {tuple(fused.shape)} -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .dataset import blur_decimate, read_image, write_pgm
    from .metrics import full_report, reduced_report

    start = time.perf_counter()
    reduced = args.pred or args.gt
    full = args.fused or args.lrms or args.pan
    if reduced and full:
        raise UsageError("choose either --pred/--gt or --fused/--lrms/--pan")
    if not reduced and not full:
        raise UsageError("eval needs --pred and --gt, or --fused, --lrms and --pan")

    outputs = []
    if reduced:
        if not (args.pred and args.gt):
            raise FormatError("reduced resolution mode needs both --pred and --gt files")
        pred = read_image(args.pred).astype(np.float64)
        gt = read_image(args.gt).astype(np.float64)
        report = reduced_report(pred, gt, ratio=args.ratio, peak=args.peak, block=args.block)
        if args.residual:
            outputs.append(write_pgm(args.residual, np.abs(pred - gt).mean(axis=0), lo=0.0))
    else:
        if not (args.fused and args.lrms and args.pan):
            raise FormatError("full resolution mode needs --fused, --lrms and --pan files")
        fused = read_image(args.fused).astype(np.float64)
        lrms = read_image(args.lrms).astype(np.float64)
        pan = read_image(args.pan).astype(np.float64)
        if pan.shape[0] != 1 or pan.shape[1:] != fused.shape[1:]:
            raise ShapeError(f"PAN {pan.shape} does not cover the fused image {fused.shape}")
        ratio = pan.shape[1] // lrms.shape[1]
        if ratio < 1 or (lrms.shape[1] * ratio, lrms.shape[2] * ratio) != pan.shape[1:]:
            raise ShapeError(f"PAN {pan.shape} and LRMS {lrms.shape} have no integer ratio")
        pan_lp = blur_decimate(pan, ratio)
        report = full_report(fused, lrms, pan, pan_lp, block=args.block)

    print(report.to_text())
    if args.table:
        print(report.to_table())
    if args.report:
        Path(args.report).write_text(report.model_dump_json(indent=2))
        outputs.append(args.report)
    if args.manifest:
        _manifest(Path(args.manifest), "eval", args, _seed(args), start, outputs)
    return 0


def cmd_bench(args) -> int:
    from .fmamba import time_scan
    from .tensor import Tensor, no_grad
    from .wavelet import dwt2d_stacked, idwt2d_stacked

    start = time.perf_counter()
    sizes = _sizes(args.sizes)
    rng = np.random.default_rng(_seed(args))
    rows = []
    for n in sizes:
        tracemalloc.start()
        if args.op == "scan":
            seconds = time_scan(n, dim=args.dim, d_state=args.d_state, repeats=args.repeats, seed=_seed(args))
        else:
            image = Tensor(rng.standard_normal((args.dim, n, n)), dtype=np.float32)
            timings = []
            with no_grad():
                for _ in range(args.repeats):
                    t0 = time.perf_counter()
                    idwt2d_stacked(dwt2d_stacked(image))
                    timings.append(time.perf_counter() - t0)
            seconds = float(np.median(timings))
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append((n, seconds, peak))

    print(f"{'n':>8} {'seconds':>12} {'growth':>8} {'peak_mb':>9} {'mem_growth':>10}")
    for k, (n, seconds, peak) in enumerate(rows):
        growth = f"{seconds / rows[k - 1][1]:8.2f}" if k else f"{'-':>8}"
        mem = f"{peak / rows[k - 1][2]:10.2f}" if k and rows[k - 1][2] else f"{'-':>10}"
        print(f"{n:>8d} {seconds:>12.6f} {growth} {peak / 2**20:>9.3f} {mem}")
    if args.manifest:
        _manifest(Path(args.manifest), "bench", args, _seed(args), start, [])
    return 0


def cmd_dwt(args) -> int:
    from .dataset import read_image, write_image
    from .tensor import Tensor, no_grad
    from .wavelet import dwt1d_stacked, dwt2d_stacked, idwt1d_stacked, idwt2d_stacked

    start = time.perf_counter()
    if args.input:
        image = read_image(args.input)
    else:
        rng = np.random.default_rng(_seed(args))
        image = rng.random((args.bands, args.size, args.size)).astype(np.float32)

    forward, inverse = (dwt2d_stacked, idwt2d_stacked) if args.mode == "2d" else (dwt1d_stacked, idwt1d_stacked)
    names = ("ll", "lh", "hl", "hh") if args.mode == "2d" else ("l", "h")
    with no_grad():
        x = Tensor(image)
        bands = forward(x)
        parts = np.split(bands.data, len(names), axis=0)
        print(f"mode={args.mode}")
        print(f"input_shape={'x'.join(str(d) for d in image.shape)}")
        for name, part in zip(names, parts):
            print(f"{name}_max_abs={float(np.abs(part).max()):.9g}")
        if args.roundtrip:
            error = float(np.abs(inverse(bands).data - image).max())
            print(f"roundtrip_max_error={error:.3e}")
    outputs = [write_image(args.out, bands.data)] if args.out else []
    if args.manifest:
        _manifest(Path(args.manifest), "dwt", args, _seed(args), start, outputs)
    return 0


def cmd_info(args) -> int:
    from .network import build_model, count_parameters, load_checkpoint, parameter_breakdown
    from .tensor import Tensor, no_grad

    if args.ckpt:
        model = load_checkpoint(args.ckpt)
    else:
        model = build_model(
            NetworkConfig(
                ratio=args.ratio,
                bands=args.bands,
                width=args.width,
                ablation=_ablation(args.ablation),
                seed=_seed(args),
            )
        )
    cfg = model.config
    print(json.dumps(cfg.model_dump(mode="json"), indent=2))
    print(f"n_r={cfg.n_r}")
    print(f"n_c={cfg.n_c}")
    print(f"parameters={count_parameters(model)}")
    for group, count in parameter_breakdown(model).items():
        print(f"  {group}: {count}")

    if args.trace:
        size = args.size
        if size % cfg.ratio:
            raise UsageError(f"--size {size} is not divisible by ratio {cfg.ratio}")
        rng = np.random.default_rng(_seed(args))
        pan = Tensor(rng.random((1, size, size)), dtype=model.dtype)
        lrms = Tensor(rng.random((cfg.bands, size // cfg.ratio, size // cfg.ratio)), dtype=model.dtype)
        trace = []
        with no_grad():
            out = model.forward(pan, lrms, trace=trace)
        for label, shape in trace:
            print(f"{label:<24} {'x'.join(str(d) for d in shape)}")
        print(f"{'Output HRMS':<24} {'x'.join(str(d) for d in out.shape)}")
    return 0


# ==================== Parser ====================


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="s2w", description="Wavelet / state-space pansharpening toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="defaults to S2W_SEED")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--val", type=int, default=8, help="extra held-out triplets")
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--pan-weights", default=None, help="comma separated, positive, summing to 1")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--eval-every", type=int, default=20)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--skip-source", choices=["post", "raw"], default="post")
    p.add_argument("--dtype", choices=["float64", "float32"], default=None)
    p.add_argument("--ablation", action="append", default=None, help="e.g. CRM or no_Gm,no_Ga")
    p.add_argument("--ckpt", required=True)

    p = add("fuse", cmd_fuse, "fuse a PAN / LRMS pair")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--pan", required=True)
    p.add_argument("--lrms", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true", help="bicubic upsampling only")

    p = add("eval", cmd_eval, "quality indexes")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--fused")
    p.add_argument("--lrms")
    p.add_argument("--pan")
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--peak", type=float, default=1.0)
    p.add_argument("--block", type=int, default=32)
    p.add_argument("--table", action="store_true")
    p.add_argument("--residual", default=None, help="write |pred - gt| as a PGM preview")
    p.add_argument("--report", default=None, help="write the report as JSON")
    p.add_argument("--manifest", default=None)

    p = add("bench", cmd_bench, "timing of the scan or the 2D transform")
    p.add_argument("--op", choices=["scan", "dwt"], default="scan")
    p.add_argument("--sizes", default="1024,4096,16384")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--manifest", default=None)

    p = add("dwt", cmd_dwt, "wavelet transform report")
    p.add_argument("--mode", choices=["1d", "2d"], default="2d")
    p.add_argument("--input", default=None, help="S2WT file, random image when omitted")
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--roundtrip", action="store_true")
    p.add_argument("--out", default=None, help="write stacked subbands")
    p.add_argument("--manifest", default=None)

    p = add("info", cmd_info, "configuration, pyramid depths and parameter count")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--ablation", action="append", default=None)
    p.add_argument("--trace", action="store_true", help="print the stage-wise tensor shapes")
    p.add_argument("--size", type=int, default=64)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logs.set_command(args.command)
        return args.func(args)
    except S2WError as ex:
        logs.error(ex.detail)
        return ex.exit_code
    except ValidationError as ex:
        logs.error(f"invalid configuration: {ex.errors()[0]['msg']}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
