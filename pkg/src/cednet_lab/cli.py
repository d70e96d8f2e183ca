"""``cednet-lab`` command line: analyze, gradcheck, train, eval, saliency, sweep, export, replay."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

import numpy as np

from . import __version__
from .analyzer import AnalysisError, emit_report
from .executor import CheckpointError, load_checkpoint, save_checkpoint
from .graph import ArchConfig, ConfigParseError, GraphError, build_graph, config_from_dict, config_to_dict, parse_config
from .gradcheck import gradcheck_graph
from .sweeps import AXES, sweep_configs, toy_scale
from .tasklab import (
    DataSpec,
    DivergenceError,
    TrainConfig,
    build_seg_model,
    constant_baseline,
    evaluate,
    generate_scene,
    make_split,
    saliency,
    train,
)
from .tensor import dumps_tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("cednet_lab")


class NumericalFailure(RuntimeError):
    pass


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return config_to_dict(parse_config(text))


def parse_size(text: str) -> tuple:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _write_manifest(out: Path, command: str, resolved: dict, seed) -> None:
    manifest = {
        "tool": "cednet-lab",
        "version": __version__,
        "command": command,
        "seed": seed,
        "resolved": resolved,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ commands


def run_analyze(r: dict, out: Path) -> int:
    graph = build_graph(config_from_dict(r["config"]))
    report = emit_report(graph, tuple(r["input_size"]))
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    fmt = r.get("format", "table")
    if fmt == "json":
        summary = {k: v for k, v in report.to_dict().items() if k != "params_by_node"}
        print(json.dumps(summary, indent=2))
    elif fmt == "csv":
        print(report.to_csv(), end="")
    else:
        print(report.to_table(), end="")
    return EXIT_OK


def run_gradcheck(r: dict, out: Path) -> int:
    config = config_from_dict(r["config"])
    graph = build_graph(config)
    rep = gradcheck_graph(graph, tuple(r["input_size"]), eps=r["eps"], samples=r["samples"], seed=r["seed"])
    ok = rep.worst < r["tolerance"]
    result = {
        "max_rel_error": rep.max_rel_error,
        "directional_max_rel_error": rep.directional_max_rel_error,
        "checked_elements": rep.checked,
        "tolerance": r["tolerance"],
        "passed": ok,
        "per_tensor": rep.per_tensor,
    }
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"max relative error {rep.worst:.3e} over {len(rep.per_tensor)} tensors "
          f"({'PASS' if ok else 'FAIL'} at {r['tolerance']:g})")
    if not ok:
        raise NumericalFailure(f"gradient check failed: {rep.worst:.3e} >= {r['tolerance']:g}")
    return EXIT_OK


def run_train(r: dict, out: Path) -> int:
    config = config_from_dict(r["config"])
    if not isinstance(config, ArchConfig):
        raise ConfigParseError("train needs a CEDNet config", field="arch")
    data = DataSpec.from_dict(r["data"])
    tcfg = TrainConfig.from_dict(r["train"])
    graph = build_seg_model(config)
    run = train(graph, data, tcfg)
    metrics = {m["step"]: m for m in run.metric_history}
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "pixel_acc", "mIoU"])
        for i, loss in enumerate(run.loss_history, start=1):
            m = metrics.get(i)
            w.writerow([i, repr(loss), repr(m["pixel_acc"]) if m else "", repr(m["miou"]) if m else ""])
    save_checkpoint(run.store, out / "checkpoint.ckpt")
    summary = {
        "initial_loss": run.initial_loss,
        "final_loss": run.final_loss,
        "metrics": run.metric_history,
        "checkpoint": "checkpoint.ckpt",
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"loss {run.initial_loss:.4f} -> {run.final_loss:.4f}; "
          f"final mIoU {run.metric_history[-1]['miou'] if run.metric_history else float('nan'):.3f}")
    return EXIT_OK


def _model_from_checkpoint(r: dict):
    _verify_checkpoint(r)
    path = r["checkpoint"]
    store = load_checkpoint(path)
    gmeta = store.meta.get("graph_meta")
    if not gmeta:
        raise CheckpointError(f"{path}: checkpoint has no graph metadata")
    config = config_from_dict(gmeta["config"])
    graph = build_seg_model(config, gmeta["num_classes"], gmeta["head_width"])
    return graph, store


def run_eval(r: dict, out: Path) -> int:
    graph, store = _model_from_checkpoint(r)
    data = DataSpec.from_dict(r["data"])
    images, masks = make_split(data, "val")
    result = evaluate(graph, store, images, masks)
    result["constant_background"] = constant_baseline(masks)
    (out / "eval.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"pixel acc {result['pixel_acc']:.4f}  mIoU {result['miou']:.4f}  "
          f"(constant background mIoU {result['constant_background']['miou']:.4f})")
    return EXIT_OK


def run_saliency(r: dict, out: Path) -> int:
    graph, store = _model_from_checkpoint(r)
    data = DataSpec.from_dict(store.meta.get("data", {}))
    scene = generate_scene(r["scene_seed"], data.height, data.width, data.scene)
    thresholds = r.get("thresholds")
    if not thresholds:
        probe = saliency(graph, store, scene, [0.0])
        top = float(probe.grad_map.max())
        thresholds = list(np.linspace(0.0, top, r.get("num_thresholds", 10)))
    res = saliency(graph, store, scene, thresholds)
    (out / "grad_map.cedt").write_bytes(dumps_tensor(res.grad_map))
    (out / "area_curve.csv").write_text(res.to_csv(), encoding="utf-8")
    print(res.to_csv(), end="")
    return EXIT_OK


def _sweep_row(index: int, label: str, cfg_dict: dict, input_size, train_steps: int, seed: int) -> dict:
    config = config_from_dict(cfg_dict)
    rep = emit_report(build_graph(config), tuple(input_size))
    row = {
        "index": index,
        "label": label,
        "m": config.stages,
        "blocks": "|".join(",".join(map(str, config.stage_blocks(i))) for i in range(config.stages)),
        "lr_block": config.lr_block,
        "params": rep.total_params,
        "flops": rep.flops,
        "fusion_time_ratio": rep.fusion_time_ratio,
        "toy_miou": "",
        "status": "ok",
    }
    if train_steps > 0:
        toy = toy_scale(config)
        run = train(build_seg_model(toy), DataSpec(seed=seed),
                    TrainConfig(steps=train_steps, seed=seed, eval_every=train_steps))
        row["toy_miou"] = run.metric_history[-1]["miou"]
    return row


SWEEP_FIELDS = ["index", "label", "m", "blocks", "lr_block", "params", "flops",
                "fusion_time_ratio", "toy_miou", "status"]


def _write_sweep(path: Path, rows: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for i in sorted(rows):
            w.writerow(rows[i])


def run_sweep(r: dict, out: Path) -> int:
    base = config_from_dict(r["config"]) if r.get("config") else None
    configs = sweep_configs(r["axis"], base) if base is not None else sweep_configs(r["axis"])
    workers = int(os.environ.get("CEDNET_LAB_THREADS", "0") or 0) or (os.cpu_count() or 1)
    workers = max(1, min(workers, len(configs)))
    rows = {}
    path = out / "sweep.csv"
    jobs = [(i, label, config_to_dict(cfg), r["input_size"], r["train_steps"], r["seed"])
            for i, (label, cfg) in enumerate(configs)]
    failed = False
    if workers == 1:
        for job in jobs:
            try:
                rows[job[0]] = _sweep_row(*job)
            except Exception as e:  # keep partial results
                rows[job[0]] = {"index": job[0], "label": job[1], "status": f"error: {e}"}
                failed = True
            _write_sweep(path, rows)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_row, *job): job for job in jobs}
            for fut in as_completed(futures):
                job = futures[fut]
                try:
                    rows[job[0]] = fut.result()
                except Exception as e:
                    rows[job[0]] = {"index": job[0], "label": job[1], "status": f"error: {e}"}
                    failed = True
                _write_sweep(path, rows)
    print(path.read_text(encoding="utf-8"), end="")
    if failed:
        raise NumericalFailure("some sweep configurations failed; see status column")
    return EXIT_OK


def run_export(r: dict, out: Path) -> int:
    graph = build_graph(config_from_dict(r["config"]))
    (out / "graph.json").write_text(graph.to_json() + "\n", encoding="utf-8")
    print(f"{len(graph)} nodes -> {out / 'graph.json'}")
    return EXIT_OK


RUNNERS = {
    "analyze": run_analyze,
    "gradcheck": run_gradcheck,
    "train": run_train,
    "eval": run_eval,
    "saliency": run_saliency,
    "sweep": run_sweep,
    "export": run_export,
}


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cednet-lab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", type=Path, default=Path("runs") / sp.prog.split()[-1])
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("analyze", help="parameter / MAC / fusion-time report")
    a.add_argument("config")
    a.add_argument("--input-size", type=parse_size, default=(224, 224))
    a.add_argument("--format", choices=("json", "csv", "table"), default="table")
    common(a, seed=False)

    g = sub.add_parser("gradcheck", help="finite-difference check of a whole graph (64-bit)")
    g.add_argument("config")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--input-size", type=parse_size, default=(32, 32))
    g.add_argument("--samples", type=int, default=3)
    common(g)

    t = sub.add_parser("train", help="train a segmentation model on synthetic scenes")
    t.add_argument("config")
    t.add_argument("--data", help="dataset spec JSON")
    t.add_argument("--train-config", dest="train_config", help="training config JSON")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    common(t)

    e = sub.add_parser("eval", help="pixel accuracy and IoU of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset spec JSON (defaults to the one used in training)")
    common(e, seed=False)

    s = sub.add_parser("saliency", help="input-gradient map and important-region areas")
    s.add_argument("checkpoint")
    s.add_argument("--scene-seed", type=int, default=0)
    s.add_argument("--thresholds", help="comma-separated ascending thresholds")
    s.add_argument("--num-thresholds", type=int, default=10)
    common(s, seed=False)

    w = sub.add_parser("sweep", help="ablation grids (stages, allocation, lr-block)")
    w.add_argument("--axis", choices=AXES, required=True)
    w.add_argument("--config", help="base CEDNet config (default CEDNet-NeXt-T)")
    w.add_argument("--input-size", type=parse_size, default=(224, 224))
    w.add_argument("--train-steps", type=int, default=0, help="toy training steps per config (0 = analysis only)")
    common(w)

    x = sub.add_parser("export", help="write the graph as a JSON node list")
    x.add_argument("config")
    common(x, seed=False)

    rp = sub.add_parser("replay", help="re-run a command from its manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", type=Path, required=True)
    return p


def _checkpoint_ref(path) -> dict:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return {"checkpoint": str(Path(path).resolve()), "checkpoint_sha256": digest}


def _verify_checkpoint(r: dict) -> None:
    want = r.get("checkpoint_sha256")
    if want and hashlib.sha256(Path(r["checkpoint"]).read_bytes()).hexdigest() != want:
        raise CheckpointError(f"checksum error: {r['checkpoint']} changed since the manifest was written")


def resolve(args) -> tuple:
    """Turn parsed arguments into (command, self-contained resolved inputs, seed)."""
    cmd = args.command
    if cmd == "replay":
        m = _read_json(args.manifest)
        return m["command"], m["resolved"], m.get("seed")
    if cmd == "analyze":
        return cmd, {"config": _read_config(args.config), "input_size": list(args.input_size),
                     "format": args.format}, None
    if cmd == "gradcheck":
        return cmd, {"config": _read_config(args.config), "eps": args.eps, "tolerance": args.tolerance,
                     "input_size": list(args.input_size), "samples": args.samples, "seed": args.seed}, args.seed
    if cmd == "train":
        data = DataSpec.from_dict(_read_json(args.data)) if args.data else DataSpec(seed=args.seed)
        tdict = _read_json(args.train_config) if args.train_config else {}
        tdict.setdefault("seed", args.seed)
        if args.steps is not None:
            tdict["steps"] = args.steps
        if args.lr is not None:
            tdict["lr"] = args.lr
        tcfg = TrainConfig.from_dict(tdict)
        return cmd, {"config": _read_config(args.config), "data": data.to_dict(),
                     "train": tcfg.to_dict()}, tcfg.seed
    if cmd == "eval":
        if args.data:
            data = DataSpec.from_dict(_read_json(args.data))
        else:
            data = DataSpec.from_dict(load_checkpoint(args.checkpoint).meta.get("data", {}))
        return cmd, {**_checkpoint_ref(args.checkpoint), "data": data.to_dict()}, None
    if cmd == "saliency":
        thresholds = [float(v) for v in args.thresholds.split(",")] if args.thresholds else None
        return cmd, {**_checkpoint_ref(args.checkpoint), "scene_seed": args.scene_seed,
                     "thresholds": thresholds, "num_thresholds": args.num_thresholds}, args.scene_seed
    if cmd == "sweep":
        return cmd, {"axis": args.axis, "config": _read_config(args.config) if args.config else None,
                     "input_size": list(args.input_size), "train_steps": args.train_steps,
                     "seed": args.seed}, args.seed
    if cmd == "export":
        return cmd, {"config": _read_config(args.config)}, None
    raise ValueError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cmd, resolved, seed = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(out, cmd, resolved, seed)
        return RUNNERS[cmd](resolved, out)
    except (ConfigParseError, GraphError, AnalysisError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, json.JSONDecodeError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
