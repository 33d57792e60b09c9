"""Command-line interface.

Subcommands: ``train``, ``eval``, ``gradcheck``, ``analyze``, ``presets``.
Config files are flat JSON; command-line flags override file values and the
merged config is echoed into the run manifest. Exit codes: 0 success,
1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, attention, imaging, kernels
from . import gradcheck as GC
from . import model as M
from . import rvt
from .data import generate_shapes
from .errors import ConfigError, RefinerError
from .tensor import Tensor
from .training import TrainConfig, evaluate, train

_MODEL_KEYS = {
    "depth": 2, "dim": 32, "heads": 4, "img_size": 32, "patch_size": 8,
    "num_classes": 10, "mlp_ratio": 4, "r": 2, "k": 3, "conv_mode": "direct",
    "use_reduction": 1, "share_next": 1, "qkv_bias": 1, "out_bias": 1,
    "mlp_bias": 1, "use_class_token": 1,
}
_TRAIN_KEYS = {
    "steps": 2000, "batch_size": 32, "base_lr": None, "weight_decay": 0.05,
    "warmup_epochs": 5, "label_smoothing": 0.0, "dtype": "float32",
    "eval_every_epochs": 5, "stop_at_acc": None, "num_samples": 256,
}


def _content_hash(config: dict, files: list[Path]) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(config, sort_keys=True, default=str).encode())
    for path in files:
        digest.update(str(path).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_manifest(run_dir: Path, command: str, config: dict, seed: int,
                    input_files: list[Path], outputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs_hash": _content_hash(config, input_files),
        "outputs": outputs,
        "backend": kernels.current_backend(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _merged_config(args, defaults: dict, file_cfg: dict) -> dict:
    merged = dict(defaults)
    for key, value in file_cfg.items():
        if key in merged:
            merged[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _model_config_from(merged: dict, explicit_classes: int | None = None) -> M.ModelConfig:
    if merged.get("preset"):
        return M.preset(merged["preset"], num_classes=explicit_classes or 1000)
    return M.make_config(
        depth=int(merged["depth"]), dim=int(merged["dim"]), heads=int(merged["heads"]),
        img_size=int(merged["img_size"]), patch_size=int(merged["patch_size"]),
        num_classes=int(merged["num_classes"]), mlp_ratio=int(merged["mlp_ratio"]),
        r=int(merged["r"]), k=int(merged["k"]), conv_mode=str(merged["conv_mode"]),
        use_reduction=bool(int(merged["use_reduction"])),
        share_next=int(merged["share_next"]),
        qkv_bias=bool(int(merged["qkv_bias"])), out_bias=bool(int(merged["out_bias"])),
        mlp_bias=bool(int(merged["mlp_bias"])),
        use_class_token=bool(int(merged["use_class_token"])),
    )


def _train_config_from(merged: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        steps=int(merged["steps"]), batch_size=int(merged["batch_size"]),
        base_lr=None if merged["base_lr"] is None else float(merged["base_lr"]),
        weight_decay=float(merged["weight_decay"]),
        warmup_epochs=int(merged["warmup_epochs"]), seed=seed,
        label_smoothing=float(merged["label_smoothing"]), dtype=str(merged["dtype"]),
        eval_every_epochs=int(merged["eval_every_epochs"]),
        stop_at_acc=None if merged["stop_at_acc"] is None else float(merged["stop_at_acc"]),
    )


def _load_file_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return data


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    file_cfg = _load_file_config(args.config)
    merged = _merged_config(args, {**_MODEL_KEYS, **_TRAIN_KEYS}, file_cfg)
    merged["preset"] = args.preset or file_cfg.get("preset")
    explicit_classes = (
        args.num_classes if args.num_classes is not None else file_cfg.get("num_classes")
    )
    model_cfg = _model_config_from(merged, explicit_classes)
    if args.dry_run:
        params = M.count_params(model_cfg)
        macs = M.count_flops(model_cfg)
        print(f"params {params}")
        print(f"macs {macs}")
        return 0
    train_cfg = _train_config_from(merged, args.seed)
    dataset = generate_shapes(
        num_classes=model_cfg.num_classes, num_samples=int(merged["num_samples"]),
        size=model_cfg.img_size, seed=args.seed,
    )
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, dataset, out_dir=run_dir)
    summary = {
        "final_train_acc": result.final_train_acc,
        "steps_run": result.steps_run,
        "reached_target_at": result.reached_target_at,
        "wall_time_s": result.wall_time,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    input_files = [Path(args.config)] if args.config else []
    _write_manifest(
        run_dir, "train", merged, args.seed, input_files,
        outputs={"history": "history.csv", "checkpoint": "checkpoint",
                 "summary": "summary.json"},
    )
    print(f"final_train_acc {result.final_train_acc:.6f} "
          f"steps {result.steps_run} out {run_dir}")
    return 0


def _label_from_name(path: Path) -> int:
    stem = path.stem
    head = stem.split("_", 1)[0]
    try:
        return int(head)
    except ValueError as exc:
        raise ConfigError(
            f"image file {path.name} must be named <label>_<anything>.(ppm|rvt)"
        ) from exc


def cmd_eval(args) -> int:
    cfg, weights = M.load_checkpoint(Path(args.checkpoint))
    image_dir = Path(args.images)
    files = sorted(
        p for p in image_dir.iterdir() if p.suffix in (".ppm", ".rvt")
    ) if image_dir.is_dir() else []
    if not files:
        raise ConfigError(f"no .ppm/.rvt images found in {image_dir}")
    pipe = imaging.EvalPipelineConfig(
        test_size=cfg.img_size, ratio=args.rfc_ratio,
        mean=tuple(args.mean), std=tuple(args.std),
    )
    images = np.stack([imaging.eval_preprocess(imaging.load_image(p), pipe) for p in files])
    labels = np.array([_label_from_name(p) for p in files], dtype=np.int64)
    acc, correct, total = evaluate(weights, cfg, images, labels)
    metrics = {
        "accuracy": acc, "correct": correct, "total": total,
        "rfc_ratio": args.rfc_ratio,
    }
    out = json.dumps(metrics, indent=1, sort_keys=True)
    print(out)
    if args.out:
        run_dir = Path(args.out)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.json").write_text(out)
        _write_manifest(run_dir, "eval",
                        {"checkpoint": str(args.checkpoint), "rfc_ratio": args.rfc_ratio},
                        args.seed, [], {"metrics": "metrics.json"})
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    if args.scope == "op":
        reports = GC.check_registered_ops(seed=args.seed, shapes=args.shapes)
        for rep in reports:
            status = "ok" if rep.passed else "FAIL"
            print(f"{rep.op:24s} rel_err {rep.worst:.3e} tol {rep.tolerance:.0e} {status}")
            failures += 0 if rep.passed else 1
    elif args.scope == "block":
        rep = check_refiner_block(seed=args.seed)
        print(f"refiner_block            rel_err {rep.worst:.3e} tol {rep.tolerance:.0e} "
              f"{'ok' if rep.passed else 'FAIL'}")
        failures += 0 if rep.passed else 1
    elif args.scope == "model":
        rep = check_tiny_model(seed=args.seed)
        print(f"tiny_model               rel_err {rep.worst:.3e} tol {rep.tolerance:.0e} "
              f"{'ok' if rep.passed else 'FAIL'}")
        failures += 0 if rep.passed else 1
    if failures:
        print(f"{failures} scope(s) failed", file=sys.stderr)
        return 1
    return 0


def check_refiner_block(seed: int = 0, tol: float = 1e-4) -> GC.GradCheckReport:
    """Finite-difference check through one full refined-attention layer."""
    rng = np.random.default_rng(seed)
    cfg = attention.RefinerConfig(d_in=8, heads=2, r=2, k=3)
    layer = attention.init_refiner_weights(cfg, rng, dtype=np.float64)
    x = rng.standard_normal((8, 5))
    names, tensors = ["x"], [x]
    for field in ("w_q", "w_k", "w_v", "b_q", "b_k", "b_v", "w_expand",
                  "kernels", "w_reduce", "w_out", "b_out"):
        t = getattr(layer, field)
        if t is not None:
            names.append(field)
            tensors.append(t.data)

    def fn(*inputs):
        arrs = dict(zip(names, inputs))
        w = attention.RefinerWeights(
            w_q=arrs["w_q"], w_k=arrs["w_k"], w_v=arrs["w_v"],
            b_q=arrs.get("b_q"), b_k=arrs.get("b_k"), b_v=arrs.get("b_v"),
            w_expand=arrs["w_expand"], kernels=arrs["kernels"],
            w_reduce=arrs.get("w_reduce"), w_out=arrs["w_out"],
            b_out=arrs.get("b_out"),
        )
        y, _ = attention.refiner_forward(arrs["x"], w, cfg)
        return y

    rep = GC.grad_check(fn, tensors, tol=tol, name="refiner_block")
    return rep


def check_tiny_model(seed: int = 0, tol: float = 1e-4) -> GC.GradCheckReport:
    """Finite-difference check of the loss gradient of a minimal model."""
    from .training import cross_entropy

    rng = np.random.default_rng(seed)
    cfg = M.make_config(depth=1, dim=8, heads=2, img_size=8, patch_size=4,
                        num_classes=3, mlp_ratio=2, r=2, k=3, share_next=0)
    weights = M.init_weights(cfg, rng, dtype=np.float64)
    images = rng.standard_normal((2, 3, 8, 8))
    labels = np.array([0, 2])
    names = list(weights)
    arrays = [weights[n].data for n in names]

    def fn(*inputs):
        w = {n: t for n, t in zip(names, inputs)}
        logits = M.model_forward(Tensor(images), w, cfg)
        return cross_entropy(logits, labels)

    return GC.grad_check(fn, arrays, tol=tol, name="tiny_model")


def cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    if args.checkpoint:
        cfg, weights = M.load_checkpoint(Path(args.checkpoint))
    else:
        cfg = M.make_config(depth=args.depth, dim=32, heads=4, img_size=32,
                            patch_size=8, num_classes=10, r=2, k=3, share_next=0)
        weights = M.init_weights(cfg, np.random.default_rng(seed))
    dataset = generate_shapes(num_classes=cfg.num_classes, num_samples=args.num_samples,
                              size=cfg.img_size, seed=seed)
    outputs: dict[str, str] = {}
    if args.mode == "cka":
        report = analysis.feature_evolution(
            cfg, weights, dataset.images, batch_size=args.batch_size,
            runs=args.runs, seed=seed,
        )
        analysis.write_evolution_csv(out_dir / "evolution.csv", report)
        outputs["evolution"] = "evolution.csv"
        print(f"wrote {out_dir / 'evolution.csv'} ({len(report.scores)} blocks)")
    elif args.mode == "diversity":
        batch = Tensor(dataset.images[: args.batch_size])
        res = M.forward(batch, weights, cfg, capture_attention=True)
        rows = []
        for (block, stage), maps in sorted(res.bundles.items()):
            fname = f"attn_b{block}_{stage}.rvt"
            rvt.write_rvt(out_dir / fname, maps)
            stats = attention.head_diversity(
                attention.AttentionBundle(stage, Tensor(maps))
            )
            rows.append({"block": block, "stage": stage, **stats})
            outputs[fname] = fname
        (out_dir / "diversity.json").write_text(json.dumps(rows, indent=1))
        outputs["diversity"] = "diversity.json"
        print(f"wrote {out_dir / 'diversity.json'} ({len(rows)} bundles)")
    elif args.mode == "ablation":
        if not args.axis or not args.values:
            raise ConfigError("ablation mode needs --axis and --values")
        values: list = []
        for raw in args.values.split(","):
            raw = raw.strip()
            values.append(raw if args.axis == "conv_mode" else int(raw))
        train_cfg = TrainConfig(
            steps=args.steps, batch_size=args.batch_size, seed=seed,
            warmup_epochs=1, eval_every_epochs=args.eval_every,
        )
        rows = analysis.ablation_grid(args.axis, values, cfg, train_cfg, dataset)
        csv_name = f"ablation_{args.axis}.csv"
        analysis.write_ablation_csv(out_dir / csv_name, args.axis, rows)
        outputs["ablation"] = csv_name
        print(f"wrote {out_dir / csv_name} ({len(rows)} rows)")
    plain_args = {k: v for k, v in vars(args).items() if k != "func"}
    _write_manifest(out_dir, f"analyze:{args.mode}", plain_args, seed, [], outputs)
    return 0


def cmd_presets(args) -> int:
    rows = []
    for name in M.PRESET_NAMES:
        cfg = M.preset(name)
        rows.append({
            "name": name, "depth": cfg.depth, "dim": cfg.dim, "heads": cfg.heads,
            "mlp_ratio": cfg.mlp_ratio, "expansion_ratio": cfg.refiner.r,
            "params": M.count_params(cfg),
            "macs_at_224": M.count_flops(cfg, 224),
        })
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'name':6s} {'depth':>5s} {'dim':>5s} {'heads':>5s} "
              f"{'mlp':>4s} {'r':>3s} {'params':>12s} {'macs@224':>15s}")
        for row in rows:
            print(f"{row['name']:6s} {row['depth']:5d} {row['dim']:5d} "
                  f"{row['heads']:5d} {row['mlp_ratio']:4d} {row['expansion_ratio']:3d} "
                  f"{row['params']:12d} {row['macs_at_224']:15d}")
    return 0


# ---------------------------------------------------------------------------


def _csv_floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refiner",
        description="Train, evaluate and analyse small vision transformers "
                    "with refined attention. REFINER_THREADS caps worker "
                    "count; REFINER_BACKEND selects numba or numpy kernels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on the synthetic task")
    p_train.add_argument("--config", help="flat JSON config file")
    p_train.add_argument("--preset", choices=M.PRESET_NAMES)
    p_train.add_argument("--out", default="runs/train", help="run directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--dry-run", action="store_true",
                         help="print param/MAC counts and exit")
    for key, default in {**_MODEL_KEYS, **_TRAIN_KEYS}.items():
        if key in ("conv_mode", "dtype"):
            p_train.add_argument(f"--{key.replace('_', '-')}", type=str, default=None)
        elif key in ("base_lr", "weight_decay", "label_smoothing", "stop_at_acc"):
            p_train.add_argument(f"--{key.replace('_', '-')}", type=float, default=None)
        else:
            p_train.add_argument(f"--{key.replace('_', '-')}", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on an image directory")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--images", required=True,
                        help="directory of <label>_*.ppm / <label>_*.rvt files")
    p_eval.add_argument("--rfc-ratio", type=float, default=1.0,
                        help="crop ratio; > 1 pads a downscaled image to the "
                             "test size (round-half-up content size)")
    p_eval.add_argument("--mean", type=_csv_floats, default=[0.0, 0.0, 0.0])
    p_eval.add_argument("--std", type=_csv_floats, default=[1.0, 1.0, 1.0])
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p_grad.add_argument("--scope", choices=("op", "block", "model"), default="op")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--shapes", type=int, default=5)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_an = sub.add_parser("analyze", help="CKA evolution, map diversity, ablations")
    p_an.add_argument("--mode", choices=("cka", "diversity", "ablation"), required=True)
    p_an.add_argument("--checkpoint", default=None)
    p_an.add_argument("--axis", choices=analysis.ABLATION_AXES, default=None)
    p_an.add_argument("--values", default=None, help="comma-separated axis values")
    p_an.add_argument("--out", default="runs/analyze")
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--depth", type=int, default=2)
    p_an.add_argument("--runs", type=int, default=10)
    p_an.add_argument("--steps", type=int, default=60)
    p_an.add_argument("--batch-size", type=int, default=32)
    p_an.add_argument("--num-samples", type=int, default=64)
    p_an.add_argument("--eval-every", type=int, default=1)
    p_an.set_defaults(func=cmd_analyze)

    p_pre = sub.add_parser("presets", help="list model presets with exact counts")
    p_pre.add_argument("--json", action="store_true")
    p_pre.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RefinerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:  # console-script shim
    sys.exit(main())
