"""Command-line pipeline: baseline -> sparse -> prune -> finetune/distill -> profile."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from slim_distill import __version__
from slim_distill.data import ToySplits, make_toy_dataset
from slim_distill.graph import GRAPH_FORMAT, ModelGraph
from slim_distill.model import Alignment, DistillationConfig, RunConfig, TaskKind, TrainConfig
from slim_distill.plots import plot_channel_widths, plot_gamma_hist, plot_history, plot_ratio_sweep, plot_sweep
from slim_distill.profiler import ComplexityReport, profile, reduction_report, render_table
from slim_distill.pruning import PruningPlan, make_plan, prune
from slim_distill.sparsity import collect_bn_gammas
from slim_distill.trainer import (
    PRIMARY_METRIC,
    Stage,
    evaluate,
    load_checkpoint,
    primary_metric,
    save_checkpoint,
    seed_everything,
    train,
)
from slim_distill.utils import (
    ConfigError,
    MissingArtifactError,
    handle_input_file,
    make_error,
    make_output_path,
    output_lock,
)
from slim_distill.zoo import ZOO, resolve_distill_config, resolve_graph

logger = logging.getLogger("slim_distill.cli")

SWEEP_PARAMETERS = ("temperature", "alpha", "alpha_schedule", "tap_preset", "ratio")


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            make_error(f"Cannot set '{dotted}': '{key}' is not an object", ConfigError)
    node[keys[-1]] = value


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_run_config(config_path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Config file (or defaults) with ``a.b.c=value`` overrides applied before validation."""
    doc: dict[str, Any] = {}
    if config_path:
        path = handle_input_file(config_path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            make_error(f"Config {path} is not valid JSON: {e}", ConfigError)
    for item in overrides:
        if "=" not in item:
            make_error(f"Override '{item}' must look like key=value", ConfigError)
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), _parse_value(raw))
    return RunConfig.model_validate(doc)


class Run:
    """Resolved config, output directory and dataset shared by the subcommands."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._data: Optional[ToySplits] = None

    @property
    def data(self) -> ToySplits:
        if self._data is None:
            self._data = make_toy_dataset(self.cfg.task)
        return self._data

    @property
    def kind(self) -> TaskKind:
        return self.cfg.task.kind

    @property
    def val_metric(self) -> str:
        return f"val_{PRIMARY_METRIC[self.kind]}"

    def artifact(self, name: str) -> Path:
        return handle_input_file(self.out / name)

    def fresh_graph(self, name: Optional[str] = None) -> ModelGraph:
        return resolve_graph(name or self.cfg.graph, self.cfg.task.num_classes, self.cfg.seed)

    def stage_config(self, stage: Stage) -> TrainConfig:
        cfg = self.cfg
        if stage == Stage.BASELINE:
            return cfg.train.model_copy(update={"seed": cfg.seed})
        if stage == Stage.SPARSE:
            return cfg.train.model_copy(update={"seed": cfg.seed, "sparsity": cfg.sparsity})
        if stage == Stage.FINETUNE:
            return cfg.finetune.model_copy(update={"seed": cfg.seed})
        return cfg.finetune.model_copy(update={"seed": cfg.seed, "distill": cfg.distill})

    def run_stage(self, graph: ModelGraph, stage: Stage, name: str, **kwargs) -> tuple[ModelGraph, list[dict]]:
        trained, history = train(
            graph,
            self.data.train,
            self.stage_config(stage),
            stage,
            val_dataset=self.data.val,
            checkpoint_path=self.out / f"{name}.json",
            **kwargs,
        )
        metrics = evaluate(trained, self.data.val)
        save_checkpoint(trained, history, self.out / f"{name}.json")
        if history:
            plot_history({stage.value: history}, self.val_metric, self.out / f"{name}_history.png")
        logger.info(f"{name}: {json.dumps(metrics, sort_keys=True)}")
        return trained, history

    def write_json(self, name: str, payload: Any) -> Path:
        path = self.out / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        logger.info(f"Wrote {path}")
        return path


def cmd_train_baseline(run: Run, args: argparse.Namespace) -> int:
    run.run_stage(run.fresh_graph(), Stage.BASELINE, "baseline")
    return 0


def cmd_sparse_train(run: Run, args: argparse.Namespace) -> int:
    if run.cfg.sparse_from_baseline:
        start, _ = load_checkpoint(run.artifact("baseline.json"))
    else:
        start = run.fresh_graph()
    before = [float(v) for g in collect_bn_gammas(start).values() for v in g.detach().flatten()]
    sparse, _ = run.run_stage(start, Stage.SPARSE, "sparse")
    after = [float(v) for g in collect_bn_gammas(sparse).values() for v in g.detach().flatten()]
    plot_gamma_hist(before, after, run.out / "gamma_hist.png")
    return 0


def _make_plan(run: Run, sparse: ModelGraph, ratio: Optional[float] = None) -> PruningPlan:
    settings = run.cfg.pruning
    return make_plan(
        sparse,
        collect_bn_gammas(sparse),
        ratio=settings.ratio if ratio is None else ratio,
        floor=settings.floor,
        rounding=settings.rounding,
    )


def cmd_prune(run: Run, args: argparse.Namespace) -> int:
    sparse, _ = load_checkpoint(run.artifact("sparse.json"))
    plan = _make_plan(run, sparse)
    pruned, _ = prune(sparse, plan)
    plan.save(run.out / "plan.json")
    summary = plan.summary()
    for row in summary:
        logger.info(f"  {row['layer']:<16} {row['original']:>4} -> {row['kept']:>4}")
    run.write_json("prune_summary.json", summary)
    save_checkpoint(pruned, [], run.out / "pruned.json")
    plot_channel_widths(
        plan.original_channels,
        {k: len(v) for k, v in plan.per_layer.items()},
        run.out / "channel_widths.png",
    )
    return 0


def cmd_finetune(run: Run, args: argparse.Namespace) -> int:
    pruned, _ = load_checkpoint(run.artifact("pruned.json"))
    run.run_stage(pruned, Stage.FINETUNE, "finetuned")
    return 0


def _teacher(run: Run, distill_alignment: Alignment) -> ModelGraph:
    """Self-teacher (the sparse model) or, for cross-model taps, a trained wider graph."""
    name = run.cfg.teacher_graph
    if name is None and distill_alignment == Alignment.LEARNED_PROJECTION:
        name = "toy_detector_wide"
    if name is None:
        teacher, _ = load_checkpoint(run.artifact("sparse.json"))
        return teacher
    if name not in ZOO:
        path = handle_input_file(name)
        if json.loads(path.read_text()).get("format") == GRAPH_FORMAT:
            return load_checkpoint(path)[0]
    stem = f"teacher_{Path(name).stem}"
    cached = run.out / f"{stem}.json"
    if cached.exists():
        return load_checkpoint(cached)[0]
    logger.info(f"Training teacher '{name}' as a baseline")
    teacher, _ = run.run_stage(run.fresh_graph(name), Stage.BASELINE, stem)
    return teacher


def _distill(run: Run, name: str) -> tuple[ModelGraph, list[dict]]:
    distill_cfg = resolve_distill_config(run.cfg.distill)
    teacher = _teacher(run, distill_cfg.alignment)
    plan = PruningPlan.load(run.artifact("plan.json"))
    if run.cfg.distill_ordering == "finetune_then_distill":
        student, _ = load_checkpoint(run.artifact("finetuned.json"))
    else:
        student, _ = load_checkpoint(run.artifact("pruned.json"))
    return run.run_stage(student, Stage.DISTILL, name, teacher=teacher, plan=plan)


def cmd_distill(run: Run, args: argparse.Namespace) -> int:
    _distill(run, "distilled")
    return 0


def _latest_student(run: Run) -> Path:
    for name in ("distilled.json", "finetuned.json", "pruned.json"):
        if (run.out / name).exists():
            return run.out / name
    return run.artifact("pruned.json")


def cmd_profile(run: Run, args: argparse.Namespace) -> int:
    shape = (run.cfg.task.image_size, run.cfg.task.image_size)
    base_path = Path(args.base) if args.base else run.artifact("baseline.json")
    ours_path = Path(args.ours) if args.ours else _latest_student(run)
    base_graph, _ = load_checkpoint(base_path)
    ours_graph, _ = load_checkpoint(ours_path)
    base = profile(base_graph, shape, args.precision, fps_iters=args.fps_iters)
    ours = reduction_report(base, profile(ours_graph, shape, args.precision, fps_iters=args.fps_iters))
    base.save(run.out / "report_base.json")
    ours.save(run.out / "report_ours.json")
    print(render_table(base, ours, (base_path.stem, ours_path.stem)))
    return 0


def cmd_report(run: Run, args: argparse.Namespace) -> int:
    base = ComplexityReport.load(handle_input_file(args.base))
    ours = ComplexityReport.load(handle_input_file(args.ours))
    compared = reduction_report(base, ours)
    compared.save(run.out / "reduction.json")
    print(render_table(base, ours))
    return 0


def _sweep_value(parameter: str, raw: str) -> Any:
    if parameter in ("temperature", "alpha", "ratio"):
        try:
            return float(raw)
        except ValueError:
            make_error(f"Sweep value '{raw}' for {parameter} is not a number", ConfigError)
    return raw


def _with_distill(run: Run, **update) -> Run:
    distill = DistillationConfig.model_validate({**run.cfg.distill.model_dump(), **update})
    swept = Run(run.cfg.model_copy(update={"distill": distill}), run.out)
    swept._data = run._data
    return swept


def cmd_sweep(run: Run, args: argparse.Namespace) -> int:
    parameter = args.param
    if not args.values:
        make_error(f"Sweep over {parameter} needs at least one value", ConfigError)
    values = [_sweep_value(parameter, v) for v in args.values]
    rows = []
    if parameter == "ratio":
        sparse, _ = load_checkpoint(run.artifact("sparse.json"))
        shape = (run.cfg.task.image_size, run.cfg.task.image_size)
        base = profile(sparse, shape)
        for value in values:
            pruned, _ = prune(sparse, _make_plan(run, sparse, ratio=value))
            tuned, _ = run.run_stage(pruned, Stage.FINETUNE, f"sweep_ratio_{value}")
            report = reduction_report(base, profile(tuned, shape))
            rows.append(
                {"value": value, "params": report.params, "macs": report.macs, "base_macs": base.macs,
                 "reductions": report.reductions, **evaluate(tuned, run.data.val)}
            )
        plot_ratio_sweep(rows, PRIMARY_METRIC[run.kind], run.out / "sweep_ratio.png")
    else:
        field = {"alpha": "alpha0"}.get(parameter, parameter)
        for value in values:
            update = {field: value}
            if parameter == "tap_preset":
                update["tap_points"] = []
            swept = _with_distill(run, **update)
            graph, _ = _distill(swept, f"sweep_{parameter}_{value}")
            rows.append({"value": value, **evaluate(graph, run.data.val)})
        metrics = [PRIMARY_METRIC[run.kind]] + (["ap_strict"] if run.kind == TaskKind.HEATMAP else [])
        plot_sweep(parameter, rows, metrics, run.out / f"sweep_{parameter}.png")
    run.write_json(f"sweep_{parameter}.json", rows)
    for row in rows:
        print(f"{parameter}={row['value']}: {primary_metric(row, run.kind):.4f}")
    return 0


def cmd_pipeline(run: Run, args: argparse.Namespace) -> int:
    cmd_train_baseline(run, args)
    cmd_sparse_train(run, args)
    cmd_prune(run, args)
    cmd_finetune(run, args)
    cmd_distill(run, args)
    summary = {}
    for name in ("baseline", "sparse", "pruned", "finetuned", "distilled"):
        graph, _ = load_checkpoint(run.artifact(f"{name}.json"))
        summary[name] = evaluate(graph, run.data.val)
    run.write_json("summary.json", summary)
    histories = {}
    for name in ("baseline", "sparse", "finetuned", "distilled"):
        histories[name] = load_checkpoint(run.artifact(f"{name}.json"))[1]
    plot_history(histories, run.val_metric, run.out / "pipeline_history.png")
    args.base, args.ours = None, None
    return cmd_profile(run, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slim-distill", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="RunConfig JSON file (defaults are used when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config field, e.g. --set distill.temperature=4")
    parser.add_argument("--output-dir", help="Artifact directory (SLIM_DISTILL_OUTPUT_DIR wins)")
    parser.add_argument("--log-level", default=os.getenv("SLIM_DISTILL_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    add("train-baseline", cmd_train_baseline, "Train the unpruned baseline")
    add("sparse-train", cmd_sparse_train, "Train with the L1 penalty on BN gammas")
    prune_p = add("prune", cmd_prune, "Plan and apply channel pruning to the sparse model")
    prune_p.add_argument("--ratio", type=float, help="Fraction of channels to remove per layer")
    prune_p.add_argument("--floor", type=int, help="Minimum channels kept per layer")
    prune_p.add_argument("--rounding", choices=["none", "multiple_of_8"])
    add("finetune", cmd_finetune, "Fine-tune the pruned model on the task loss only")
    add("distill", cmd_distill, "Fine-tune the pruned model with channel-wise distillation")
    for name, func, help_text in (
        ("profile", cmd_profile, "Profile base and pruned graphs"),
        ("pipeline", cmd_pipeline, "Run every stage with one config"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--base", help="Base checkpoint (default baseline.json)")
        p.add_argument("--ours", help="Compressed checkpoint (default: latest student)")
        p.add_argument("--precision", choices=["float32", "float16"], default="float16")
        p.add_argument("--fps-iters", type=int, default=0, help="Timed forwards for FPS; 0 skips it")
    report_p = add("report", cmd_report, "Compare two ComplexityReport JSON files")
    report_p.add_argument("--base", required=True)
    report_p.add_argument("--ours", required=True)
    sweep_p = add("sweep", cmd_sweep, "Run the distill (or prune+finetune) stage per parameter value")
    sweep_p.add_argument("--param", choices=SWEEP_PARAMETERS, required=True)
    sweep_p.add_argument("--values", nargs="*", default=[])
    return parser


def _stage_overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.overrides)
    for flag in ("ratio", "floor", "rounding"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"pruning.{flag}={json.dumps(value)}")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        cfg = load_run_config(args.config, _stage_overrides(args))
        out = make_output_path(args.output_dir or cfg.output_dir)
        seed_everything(cfg.seed, cfg.threads)
        with output_lock(out):
            run = Run(cfg, out)
            run.write_json("config.json", cfg.model_dump(mode="json"))
            return args.func(run, args)
    except ValidationError as e:
        fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in e.errors())
        logger.error(f"Invalid config ({fields}): {e}")
        print(f"error: invalid config field(s): {fields}\n{e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        logger.error(f"Missing artifact: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"error: {args.command} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
