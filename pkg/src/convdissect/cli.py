"""Command-line entry point.

Subcommands: gen-data, train-base, increment, pda, dissect, freeze-train,
report, scenario.  Flags are long-form only.  A plain-text key=value config
file (--config) overrides built-in defaults, and explicit flags override
the config file.  The effective configuration is echoed into the output
directory so every run can be reproduced from its artifacts.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cfd, continual, micronet, pda, report, shapeworld


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _coerce(raw: str, like):
    if isinstance(like, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        if like and isinstance(like[0], int):
            return tuple(int(p) for p in parts)
        return tuple(p.strip() for p in parts)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(p) for p in v)
    return str(v)


def load_config_file(path) -> dict[str, str]:
    kv = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def effective_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    eff = dict(defaults)
    if getattr(args, "config", None):
        for k, v in load_config_file(args.config).items():
            if k not in defaults:
                raise ValueError(f"unknown config key {k!r}")
            eff[k] = _coerce(v, defaults[k])
    for k in defaults:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            eff[k] = _coerce(v, defaults[k]) if isinstance(v, str) else v
    return eff


def echo_config(eff: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={_format_value(v)}" for k, v in sorted(eff.items())]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


SCENARIO_DEFAULTS = {
    "seed": 1,
    "per_class": 100,
    "train_frac": 0.75,
    "base_classes": 4,
    "increments": (1, 1),
    "base_epochs": 20,
    "inc_epochs": 8,
    "probe_epochs": 8,
    "probe_batch_size": 16,
    "lr_base": 0.01,
    "lr_inc": 0.001,
    "momentum": 0.9,
    "batch_size": 8,
    "inc_batch_size": 0,  # 0: full-batch increment steps
    "sample_set_size": 20,
    "strategies": ("critical", "finetune"),
    "joint_control": True,
    "window": 8,
    "stride": 4,
    "replacement": "dataset-mean",
    "aggregation": "spatial-max",
    "binarize_policy": "top-quantile",
    "binarize_q": 0.25,  # 0 disables the quantile and falls back to the policy
    "cache_rm_old": False,
    "parallel": 1,
}

OCCLUSION_KEYS = ("window", "stride", "replacement", "aggregation")


def _scenario_config(eff: dict) -> continual.ScenarioConfig:
    q = eff["binarize_q"] or None
    return continual.ScenarioConfig(
        seed=eff["seed"],
        per_class=eff["per_class"],
        train_frac=eff["train_frac"],
        base_classes=eff["base_classes"],
        increments=tuple(eff["increments"]),
        base_epochs=eff["base_epochs"],
        inc_epochs=eff["inc_epochs"],
        probe_epochs=eff["probe_epochs"],
        probe_batch_size=eff["probe_batch_size"],
        lr_base=eff["lr_base"],
        lr_inc=eff["lr_inc"],
        momentum=eff["momentum"],
        batch_size=eff["batch_size"],
        inc_batch_size=eff["inc_batch_size"],
        sample_set_size=eff["sample_set_size"],
        strategies=tuple(eff["strategies"]),
        joint_control=eff["joint_control"],
        window=eff["window"],
        stride=eff["stride"],
        replacement=eff["replacement"],
        aggregation=eff["aggregation"],
        binarize_policy="top-quantile" if q else eff["binarize_policy"],
        binarize_q=q,
        cache_rm_old=eff["cache_rm_old"],
    )


def _occlusion_from(eff: dict, samples) -> pda.OcclusionConfig:
    cfg = pda.OcclusionConfig(
        window=eff["window"],
        stride=eff["stride"],
        replacement=eff["replacement"],
        aggregation=eff["aggregation"],
    )
    return pda.with_means(cfg, samples)


def _add_occlusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--replacement", choices=pda.REPLACEMENTS)
    p.add_argument("--aggregation", choices=pda.AGGREGATIONS)


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-classes", type=int)
    p.add_argument("--increments", type=str, help="comma-separated class counts")
    p.add_argument("--train-frac", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="convdissect", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("train-base", help="train the base model on the first task")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    _add_stream_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("increment", help="train one incremental task under a strategy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, required=True)
    p.add_argument("--strategy", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--sample-set-size", type=int)
    _add_stream_flags(p)
    _add_occlusion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("pda", help="export activation difference maps for probe images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--image-id", action="append", help="repeatable; defaults to the probe set")
    p.add_argument("--sample-set-size", type=int)
    p.add_argument("--model-name")
    _add_stream_flags(p)
    _add_occlusion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("dissect", help="locate the forgetting block of a model pair")
    p.add_argument("--model-old")
    p.add_argument("--model-new")
    p.add_argument("--data")
    p.add_argument("--maps-old", help="interchange directory instead of a live old model")
    p.add_argument("--maps-new", help="interchange directory instead of a live new model")
    p.add_argument("--old-name", default="old")
    p.add_argument("--new-name", default="new")
    p.add_argument("--sample-set-size", type=int)
    p.add_argument("--binarize-policy", choices=pda.BINARIZE_POLICIES)
    p.add_argument("--binarize-q", type=float)
    p.add_argument("--parallel", type=int)
    _add_stream_flags(p)
    _add_occlusion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("freeze-train", help="critical freezing on one incremental task")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, required=True)
    p.add_argument("--block", type=int, help="pin the forgetting block instead of dissecting")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--sample-set-size", type=int)
    _add_stream_flags(p)
    _add_occlusion_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("report", help="render plots and heatmaps from stored results")
    p.add_argument("--dissection", help="DissectionResult JSON")
    p.add_argument("--max-series", type=int, default=8)
    p.add_argument("--maps", help="interchange maps directory")
    p.add_argument("--image-id")
    p.add_argument("--name", help="tensor name inside the maps directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("scenario", help="full class-incremental experiment")
    for key, val in SCENARIO_DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        doc = f"default {_format_value(val)}"
        if isinstance(val, bool):
            p.add_argument(flag, type=str, help=doc)
        elif isinstance(val, tuple):
            p.add_argument(flag, type=str, help=doc)
        elif isinstance(val, float):
            p.add_argument(flag, type=float, help=doc)
        else:
            p.add_argument(flag, type=int if isinstance(val, int) else str, help=doc)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value file; flags override it")

    return parser


# ---------------------------------------------------------------------------
# subcommand bodies


def _load_stream(eff: dict, data_dir: str) -> shapeworld.TaskStream:
    samples = shapeworld.load_dataset(data_dir)
    return shapeworld.make_stream(
        samples, eff["base_classes"], eff["increments"], eff["train_frac"]
    )


def _cmd_gen_data(args) -> int:
    defaults = {"seed": 1, "per_class": 120}
    eff = effective_config(defaults, args)
    out = Path(args.out)
    samples = shapeworld.gen_dataset(eff["seed"], eff["per_class"])
    shapeworld.save_dataset(samples, out)
    echo_config(eff, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


_STREAM_DEFAULTS = {"base_classes": 4, "increments": (1, 1), "train_frac": 0.75}


def _cmd_train_base(args) -> int:
    defaults = {
        "seed": 1,
        "epochs": 15,
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 16,
        **_STREAM_DEFAULTS,
    }
    eff = effective_config(defaults, args)
    stream = _load_stream(eff, args.data)
    base_task = stream.tasks[0]
    settings = continual.TrainSettings(
        epochs=eff["epochs"], lr=eff["lr"], momentum=eff["momentum"], batch_size=eff["batch_size"] or None
    )
    model = micronet.init_model(
        micronet.Architecture(), len(base_task.classes), continual.derive_seed(eff["seed"], "init")
    )
    model = continual.train_epochs(
        model, base_task.train, settings, continual.derive_seed(eff["seed"], "base", "train")
    )
    out = Path(args.out)
    micronet.save_model(model, out)
    acc = continual.evaluate(model, base_task.test)
    (out / "metrics.json").write_text(
        json.dumps({"base_accuracy": acc}, indent=2, sort_keys=True) + "\n"
    )
    echo_config(eff, out)
    print(f"base accuracy {acc:.3f}; model saved to {out}")
    return 0


_INC_DEFAULTS = {
    "seed": 1,
    "epochs": 8,
    "lr": 0.001,
    "momentum": 0.9,
    "batch_size": 0,  # 0: full-batch increment steps
    "probe_epochs": 8,
    "probe_batch_size": 16,
    "sample_set_size": 20,
    "window": 8,
    "stride": 4,
    "replacement": "dataset-mean",
    "aggregation": "spatial-mean",
    **_STREAM_DEFAULTS,
}


def _cmd_increment(args) -> int:
    eff = effective_config(_INC_DEFAULTS, args)
    stream = _load_stream(eff, args.data)
    if not 1 <= args.task_index < len(stream.tasks):
        raise ValueError(f"task index {args.task_index} out of range 1..{len(stream.tasks) - 1}")
    task = stream.tasks[args.task_index]
    model = micronet.load_model(args.model)
    settings = continual.TrainSettings(
        epochs=eff["epochs"], lr=eff["lr"], momentum=eff["momentum"], batch_size=eff["batch_size"] or None
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.strategy == "critical":
        occ = _occlusion_from(eff, stream.tasks[0].train)
        probes = shapeworld.sample_set(stream.tasks[0], eff["sample_set_size"])
        items = cfd.items_from_samples(probes)
        model, plan, dissection = continual.critical_freeze_train(
            model, task, items, occ, settings,
            probe_epochs=eff["probe_epochs"],
            probe_batch_size=eff["probe_batch_size"] or None,
            seed=eff["seed"],
        )
        if dissection is not None:
            dissection.write(out / "dissection.json")
    else:
        model, plan = continual.baseline_train(model, task, args.strategy, settings, eff["seed"])
    micronet.save_model(model, out)
    (out / "plan.json").write_text(
        json.dumps(
            {
                "strategy": plan.strategy,
                "frozen_blocks": list(plan.frozen_blocks),
                "head_frozen": plan.head_frozen,
                "forgetting_block": plan.forgetting_block,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    echo_config(eff, out)
    accs = {t: continual.evaluate(model, stream.tasks[t].test) for t in range(args.task_index + 1)}
    print("; ".join(f"task {t}: {a:.3f}" for t, a in accs.items()))
    return 0


def _cmd_pda(args) -> int:
    defaults = {
        "sample_set_size": 20,
        "window": 8,
        "stride": 4,
        "replacement": "dataset-mean",
        "aggregation": "spatial-mean",
        **_STREAM_DEFAULTS,
    }
    eff = effective_config(defaults, args)
    model = micronet.load_model(args.model)
    samples = shapeworld.load_dataset(args.data)
    by_id = {s.sid: s for s in samples}
    if args.image_id:
        missing = [i for i in args.image_id if i not in by_id]
        if missing:
            raise ValueError(f"image ids not in dataset: {missing}")
        picked = [by_id[i] for i in args.image_id]
    else:
        stream = shapeworld.make_stream(
            samples, eff["base_classes"], eff["increments"], eff["train_frac"]
        )
        picked = shapeworld.sample_set(stream.tasks[0], eff["sample_set_size"])
    occ = _occlusion_from(eff, samples)
    name = args.model_name or "micronet"
    out = Path(args.out)
    for s in picked:
        sweep = pda.occlusion_sweep(model, s.image, occ)
        pda.export_image_maps(out, name, s.sid, sweep, gt=s.seg)
    echo_config(eff, out)
    print(f"exported maps for {len(picked)} images to {out}")
    return 0


def _cmd_dissect(args) -> int:
    defaults = {
        "sample_set_size": 20,
        "binarize_policy": "positive",
        "binarize_q": 0.0,
        "parallel": 1,
        "window": 8,
        "stride": 4,
        "replacement": "dataset-mean",
        "aggregation": "spatial-mean",
        **_STREAM_DEFAULTS,
    }
    eff = effective_config(defaults, args)
    q = eff["binarize_q"] or None
    policy = "top-quantile" if q else eff["binarize_policy"]

    if args.maps_old and args.maps_new:
        src_old = cfd.DirectoryMaps(args.maps_old, args.old_name)
        src_new = cfd.DirectoryMaps(args.maps_new, args.new_name)
        ids = sorted(p.name for p in Path(args.maps_old).iterdir() if p.is_dir())
        if not ids:
            raise ValueError(f"no exported images under {args.maps_old}")
        items = []
        for sid in ids:
            from . import tensorio

            td = tensorio.TensorDir(Path(args.maps_old) / sid)
            items.append(cfd.DissectItem(image_id=sid, gt=td.read(f"gt/{sid}")))
        probe = src_old.maps(ids[0], None, 1)
        k = src_old.num_blocks
    elif args.model_old and args.model_new and args.data:
        model_old = micronet.load_model(args.model_old)
        model_new = micronet.load_model(args.model_new)
        samples = shapeworld.load_dataset(args.data)
        if not samples:
            raise ValueError(f"no samples under {args.data}")
        stream = shapeworld.make_stream(
            samples, eff["base_classes"], eff["increments"], eff["train_frac"]
        )
        probes = shapeworld.sample_set(stream.tasks[0], eff["sample_set_size"])
        items = cfd.items_from_samples(probes)
        occ = _occlusion_from(eff, samples)
        src_old = cfd.ModelMaps(model_old, occ)
        src_new = cfd.ModelMaps(model_new, occ)
        k = model_old.num_blocks
    else:
        raise ValueError("need --model-old/--model-new/--data or --maps-old/--maps-new")

    result = cfd.dissect(items, src_old, src_new, k, policy=policy, q=q, parallel=eff["parallel"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / "dissection.json")
    echo_config(eff, out)
    print(f"forgetting block F={result.forgetting_block} over {len(items)} images")
    return 0


def _cmd_freeze_train(args) -> int:
    eff = effective_config(_INC_DEFAULTS, args)
    stream = _load_stream(eff, args.data)
    if not 1 <= args.task_index < len(stream.tasks):
        raise ValueError(f"task index {args.task_index} out of range 1..{len(stream.tasks) - 1}")
    task = stream.tasks[args.task_index]
    model = micronet.load_model(args.model)
    settings = continual.TrainSettings(
        epochs=eff["epochs"], lr=eff["lr"], momentum=eff["momentum"], batch_size=eff["batch_size"] or None
    )
    if args.block is None:
        occ = _occlusion_from(eff, stream.tasks[0].train)
        probes = shapeworld.sample_set(stream.tasks[0], eff["sample_set_size"])
        items = cfd.items_from_samples(probes)
    else:
        occ, items = None, []
    model, plan, dissection = continual.critical_freeze_train(
        model, task, items, occ, settings,
        probe_epochs=eff["probe_epochs"],
        probe_batch_size=eff["probe_batch_size"] or None,
        seed=eff["seed"], override_block=args.block,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    micronet.save_model(model, out)
    if dissection is not None:
        dissection.write(out / "dissection.json")
    (out / "plan.json").write_text(
        json.dumps(
            {
                "strategy": plan.strategy,
                "frozen_blocks": list(plan.frozen_blocks),
                "forgetting_block": plan.forgetting_block,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    echo_config(eff, out)
    print(f"froze blocks {list(plan.frozen_blocks)} (F={plan.forgetting_block})")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.dissection:
        doc = json.loads(Path(args.dissection).read_text())
        series: dict[str, list[float]] = {}
        curves = [d["ious"] for d in doc["per_image"]]
        if curves:
            mean = [float(np.mean([c[i] for c in curves])) for i in range(len(curves[0]))]
            series["mean"] = mean
        for d in doc["per_image"][: args.max_series]:
            series[d["id"]] = d["ious"]
        report.plot_iou_curves(
            report.PlotSpec(series=series, title=f"forgetting block F={doc['F']}"),
            out / "iou_curves.svg",
        )
        wrote.append("iou_curves.svg")
    if args.maps and args.image_id and args.name:
        from . import tensorio

        td = tensorio.TensorDir(Path(args.maps) / args.image_id)
        report.write_heatmap(td.read(args.name), out / "heatmap.ppm")
        wrote.append("heatmap.ppm")
    if not wrote:
        raise ValueError("nothing to render: pass --dissection and/or --maps/--image-id/--name")
    print(f"wrote {', '.join(wrote)} to {out}")
    return 0


def _cmd_scenario(args) -> int:
    eff = effective_config(SCENARIO_DEFAULTS, args)
    config = _scenario_config(eff)
    result = continual.run_scenario(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report.emit_metrics(result.metrics, out / "metrics.csv", out / "metrics.json")
    diss_doc = {phase: d.to_json() for phase, d in result.dissections}
    (out / "dissection.json").write_text(json.dumps(diss_doc, indent=2, sort_keys=True) + "\n")
    (out / "plans.json").write_text(
        json.dumps(
            {
                phase: {
                    "strategy": p.strategy,
                    "frozen_blocks": list(p.frozen_blocks),
                    "forgetting_block": p.forgetting_block,
                }
                for phase, p in result.plans
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )

    series: dict[str, list[float]] = {}
    for phase, d in result.dissections:
        k = len(d.per_image[0].curve.ious)
        series[phase] = [
            float(np.mean([img.curve.ious[i] for img in d.per_image])) for i in range(k)
        ]
    if series:
        report.plot_iou_curves(
            report.PlotSpec(series=series, title="mean IoU per block (fine-tune route)"),
            out / "iou_curves.svg",
        )

    probe = result.probes[0]
    if result.dissections:
        last = result.dissections[-1][1]
        block = last.forgetting_block
        channel = last.per_image[0].curve.rm_old[block - 1]
    else:
        block, channel = result.base_model.num_blocks, 0
    sweep = pda.occlusion_sweep(result.base_model, probe.image, result.occlusion)
    report.write_heatmap(
        pda.maps_from_sweep(sweep, block)[channel], out / "heatmap.ppm"
    )

    echo_config(eff, out)
    for strategy in sorted(result.metrics.old_task):
        print(
            f"{strategy}: old-task {result.metrics.old_task[strategy]:.3f} "
            f"new-task {result.metrics.new_task[strategy]:.3f}"
        )
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-base": _cmd_train_base,
    "increment": _cmd_increment,
    "pda": _cmd_pda,
    "dissect": _cmd_dissect,
    "freeze-train": _cmd_freeze_train,
    "report": _cmd_report,
    "scenario": _cmd_scenario,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 2
        sys.stderr.write(f"runtime failure: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
