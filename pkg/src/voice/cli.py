"""Command-line interface.

Subcommands: train, explain, voice, evaluate, sweep, report. Every
subcommand accepts --config plus flag overrides; failures exit nonzero
with a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

import voice
from voice.config import ConfigError, ExperimentConfig, load_config
from voice.data import load_dataset
from voice.engine import GradientEngine
from voice.explainers import ExplainerSpec
from voice.mapio import save_map
from voice.models import WeightFileError, load_weights, save_weights
from voice.protocols import (
    run_challenge_protocol,
    run_clean_protocol,
    run_threshold_sweep,
)
from voice.render import plot_curves, render_overlay
from voice.training import evaluate_accuracy, train_reference_model
from voice.uncertainty import compute_voice


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--weights", help="weight file path")
    p.add_argument("--data", help="dataset path or synthetic[:n[:seed]]")
    p.add_argument("--explainers", help="comma-separated explainer names")
    p.add_argument("--layer", help="convolution layer name or 'auto'")
    p.add_argument("--pt", type=float, dest="p_t", help="contrast-class probability threshold")
    p.add_argument("--iou-t", type=float, dest="iou_t", help="IoU binarization threshold")
    p.add_argument("--samples", type=int, dest="sample_count", help="images to evaluate")
    p.add_argument("--seeds", help="comma-separated run seeds")
    p.add_argument("--challenge", help="challenge kind (awgn|gaussian_blur|contrast|jpeg|ifgsm)")
    p.add_argument("--levels", help="comma-separated challenge levels")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker pool size (0 = logical cores)")


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    for key in ("weights", "data", "layer", "p_t", "iou_t", "sample_count",
                "out", "workers"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "explainers", None):
        over["explainers"] = [e.strip() for e in args.explainers.split(",") if e.strip()]
    if getattr(args, "seeds", None):
        over["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    if getattr(args, "challenge", None):
        if not getattr(args, "levels", None):
            raise ConfigError("--challenge requires --levels")
        levels = [int(v) for v in args.levels.split(",") if v.strip()]
        over["challenges"] = {args.challenge: levels}
    if getattr(args, "t", None):
        over["t_values"] = [float(v) for v in args.t.split(",") if v.strip()]
    return over


def _config_from(args: argparse.Namespace, require_paths: bool = True) -> ExperimentConfig:
    return load_config(args.config, _overrides(args), require_paths=require_paths)


def _load_one_image(cfg: ExperimentConfig, args: argparse.Namespace):
    if getattr(args, "image", None):
        from voice.data import ImageTensor
        from PIL import Image as PILImage

        with PILImage.open(args.image) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return ImageTensor(pixels=arr, source_id=Path(args.image).name), None
    dataset = load_dataset(cfg.data, split="test")
    idx = getattr(args, "index", 0) or 0
    return dataset.image(idx), int(dataset.labels[idx])


# -- subcommand bodies -------------------------------------------------------

def _cmd_train(args) -> int:
    cfg = _config_from(args, require_paths=False)
    if not cfg.weights:
        raise ConfigError("--weights output path is required for train")
    train = load_dataset(cfg.data, split="train")
    test = load_dataset(cfg.data, split="test")
    handle = train_reference_model(
        train,
        epochs=args.epochs,
        seed=cfg.seeds[0],
        batch_size=args.batch_size,
        lr=args.lr,
        val_dataset=test,
        log=lambda msg: print(msg),
    )
    acc = evaluate_accuracy(handle, test)
    checksum = save_weights(handle, cfg.weights)
    print(json.dumps({"weights": cfg.weights, "test_accuracy": acc,
                      "checksum": checksum}))
    return 0


def _cmd_explain(args) -> int:
    cfg = _config_from(args)
    handle = load_weights(cfg.weights)
    x, label = _load_one_image(cfg, args)
    engine = GradientEngine()
    out_dir = Path(cfg.out) / "maps"
    record = engine.forward(handle, x, label=label)
    written = []
    for method in cfg.explainers:
        spec = ExplainerSpec(
            method=method,
            layer=handle.last_conv_layer if cfg.layer == "auto" else cfg.layer,
            smoothgrad_samples=cfg.smoothgrad_samples,
            smoothgrad_sigma=cfg.smoothgrad_sigma,
            seed=cfg.seeds[0],
        )
        from voice.engine import BackpropTarget
        from voice.explainers import explain_batch

        m = explain_batch(handle, [x], [BackpropTarget.logit(record.predicted)],
                          spec, engine)[0]
        p = save_map(out_dir / f"{_safe(x.source_id)}.{method}.png", m)
        written.append(str(p))
    print(json.dumps({"predicted": record.predicted, "maps": written}))
    return 0


def _cmd_voice(args) -> int:
    cfg = _config_from(args)
    handle = load_weights(cfg.weights)
    x, label = _load_one_image(cfg, args)
    engine = GradientEngine()
    out_dir = Path(cfg.out) / "maps"
    payload: dict = {"maps": []}
    for method in cfg.explainers:
        spec = ExplainerSpec(
            method=method,
            layer=handle.last_conv_layer if cfg.layer == "auto" else cfg.layer,
            smoothgrad_samples=cfg.smoothgrad_samples,
            smoothgrad_sigma=cfg.smoothgrad_sigma,
            seed=cfg.seeds[0],
        )
        record, base, vm = compute_voice(
            handle, x, spec, p_t=cfg.p_t, label=label, engine=engine
        )
        stem = _safe(x.source_id)
        base_p = save_map(out_dir / f"{stem}.{method}.base.png", base)
        voice_p = save_map(out_dir / f"{stem}.{method}.voice.png", vm)
        overlay_p = render_overlay(
            x, base, vm, Path(cfg.out) / "overlays" / f"{stem}.{method}.png"
        )
        payload["predicted"] = record.predicted
        payload["maps"].append(
            {"method": method, "R_used": vm.R_used, "base": str(base_p),
             "voice": str(voice_p), "overlay": str(overlay_p)}
        )
    print(json.dumps(payload))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config_from(args)
    manifest = (
        run_challenge_protocol(cfg) if cfg.challenges else run_clean_protocol(cfg)
    )
    print(json.dumps(
        {
            "records": len(manifest.records),
            "skipped": len(manifest.skipped),
            "backward_passes": manifest.backward_passes,
            "outputs": manifest.outputs,
        }
    ))
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from(args)
    payload = run_threshold_sweep(cfg)
    print(json.dumps(payload))
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json under {run_dir}")
    manifest = json.loads(manifest_path.read_text())
    outputs = {"summary": manifest.get("summary"), "written": []}
    curves_path = run_dir / "curves.json"
    if curves_path.is_file():
        p = plot_curves(json.loads(curves_path.read_text()), run_dir / "curves.png")
        outputs["written"].append(str(p))
    cfg = ExperimentConfig(**manifest["config"])
    if Path(cfg.weights).is_file():
        handle = load_weights(cfg.weights)
        dataset = load_dataset(cfg.data, split="test")
        engine = GradientEngine()
        k = min(int(args.n or 4), len(dataset))
        for i in range(k):
            x = dataset.image(i)
            spec = ExplainerSpec(
                method=cfg.explainers[0],
                layer=handle.last_conv_layer if cfg.layer == "auto" else cfg.layer,
                smoothgrad_samples=cfg.smoothgrad_samples,
                smoothgrad_sigma=cfg.smoothgrad_sigma,
                seed=cfg.seeds[0],
            )
            _, base, vm = compute_voice(
                handle, x, spec, p_t=cfg.p_t,
                label=int(dataset.labels[i]), engine=engine,
            )
            p = render_overlay(
                x, base, vm,
                run_dir / "overlays" / f"{_safe(x.source_id)}.{spec.method}.png",
            )
            outputs["written"].append(str(p))
    print(json.dumps(outputs))
    return 0


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-._" else "_" for c in name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voice",
        description=(
            "Uncertainty heatmaps for gradient-based visual explanations: "
            "training, explanation, uncertainty maps, evaluation protocols, "
            "threshold sweeps and reports."
        ),
    )
    parser.add_argument("--version", action="version", version=voice.__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the bundled classifier")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("explain", help="base explanation maps for one image")
    _add_common(p)
    p.add_argument("--image", help="image file (default: dataset image --index)")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=_cmd_explain)

    p = sub.add_parser("voice", help="uncertainty map for one image")
    _add_common(p)
    p.add_argument("--image", help="image file (default: dataset image --index)")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(fn=_cmd_voice)

    p = sub.add_parser("evaluate", help="clean or challenge evaluation protocol")
    _add_common(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("sweep", help="IoU threshold sweep")
    _add_common(p)
    p.add_argument("--t", help="comma-separated thresholds")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", help="overlays and curve plots from a run")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--n", type=int, default=4, help="overlay count")
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, WeightFileError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
