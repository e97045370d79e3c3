import sys
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, Iterator, List, Optional, Tuple

import typer
from rich import print
from rich.console import Console
from rich.markup import escape
from tabulate import tabulate

if __package__ in (None, ""):
    # executed as `python src/run.py`
    PROJECT_ROOT = Path(__file__).resolve().parents[1]
    if str(PROJECT_ROOT) not in sys.path:
        sys.path.insert(0, str(PROJECT_ROOT))

from src.data import (
    PART_SHAPES,
    Dataset,
    annotations_for,
    disfa_count_fixture,
    extract_part,
    load_dataset,
    resize_dataset,
    save_dataset,
    split,
    subset,
    synth_generate,
    to_arrays,
    write_pgm,
)
from src.errors import (
    ConfigError,
    ConsistencyError,
    DivergenceError,
    EmptyDatasetError,
    IncompleteReportError,
    InvalidArgumentError,
    MalformedFileError,
    ParseError,
    ShapeError,
)
from src.io_schemas import CommandConfig, NetworkConfig, OptimizerConfig
from src.modelsel import repeatability, run_selection, timing_table, write_selection_csv
from src.nn.network import build_network, describe, load_checkpoint, save_checkpoint
from src.optim import evaluate, train as train_network
from src.schema_validator import (
    validate_network_config,
    validate_optimizer_config,
    validate_search_space,
    validate_split_spec,
)
from src.stats import build_report, read_annotations, render_report, write_annotations
from src.tensor import derive_seed, make_rng
from src.utils import TraceLogger, load_config, parse_shape, resolve_data_path

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

DEFAULT_SEED = 20150901

# sub-seed streams under the master --seed
STREAM_SUBSET = 1
STREAM_SPLIT = 2
STREAM_INIT = 3
STREAM_SELECT = 4
STREAM_REPEAT = 5
STREAM_SYNTH = 6

app = typer.Typer(add_completion=False, help="Smile detection with convolutional networks trained from scratch.")

_state: Dict[str, Any] = {"config_path": None}


class SubsetChoice(str, Enum):
    full = "full"
    reduced = "reduced"
    low = "low"
    high = "high"
    low_vs_high = "low-vs-high"


class PartChoice(str, Enum):
    mouth = "mouth"
    face = "face"


class SelectOnChoice(str, Enum):
    test = "test"
    validation = "validation"
    accuracy = "accuracy"


class FormatChoice(str, Enum):
    text = "text"
    csv = "csv"


class FixtureChoice(str, Enum):
    disfa_counts = "disfa-counts"


DataOpt = Annotated[Optional[Path], typer.Option("--data", help="Dataset file; defaults to $SMILE_CNN_DATA or the config")]
SubsetOpt = Annotated[SubsetChoice, typer.Option("--subset", help="Experiment subset, applied before splitting")]
PartOpt = Annotated[Optional[PartChoice], typer.Option("--part", help="Extract mouth or face from aligned 285x378 images")]
ResizeOpt = Annotated[Optional[str], typer.Option("--resize", help="Downscale images to HxW, e.g. 28x23")]
SeedOpt = Annotated[int, typer.Option("--seed", min=0, help="Master seed for every random stream")]
ConvsOpt = Annotated[Optional[int], typer.Option("--convs", help="Convolution-pooling pairs (0-3)")]
HiddenOpt = Annotated[Optional[int], typer.Option("--hidden-layers", help="Fully connected hidden layers")]
UnitsOpt = Annotated[Optional[int], typer.Option("--units", help="Units per hidden layer")]
DropoutOpt = Annotated[Optional[float], typer.Option("--dropout", help="Dropout probability in [0, 1)")]
EpochsOpt = Annotated[Optional[int], typer.Option("--epochs")]
AlphaOpt = Annotated[Optional[float], typer.Option("--alpha", help="Learning rate")]
MuOpt = Annotated[Optional[float], typer.Option("--mu", help="Momentum coefficient")]
BatchOpt = Annotated[Optional[int], typer.Option("--batch-size")]
TimingOpt = Annotated[bool, typer.Option("--timing/--no-timing", help="Write wall-clock seconds into the CSV")]


@app.callback()
def main(
    config: Annotated[Optional[Path], typer.Option("--config", help="Alternative config YAML")] = None,
) -> None:
    _state["config_path"] = config


def _err(message: str) -> None:
    Console(stderr=True).print(f"[bold red]error:[/bold red] {escape(message)}")


def _load_cfg() -> dict:
    try:
        return load_config(_state["config_path"])
    except ConfigError as e:
        _err(str(e))
        raise typer.Exit(EXIT_DATA)


@contextmanager
def _session(cfg: dict, command: CommandConfig) -> Iterator[TraceLogger]:
    """Opens the JSONL trace and maps package errors to exit codes."""
    logger = TraceLogger.open(cfg.get("paths", {}).get("logs_dir", "logs"))
    logger.log("session_start", command.model_dump(mode="json"))
    code = EXIT_OK
    try:
        yield logger
    except DivergenceError as e:
        code = EXIT_DIVERGED
        logger.log("divergence", {"message": str(e), "epoch": e.epoch, "batch": e.batch, "layer": e.layer,
                                  "config_index": e.config_index})
        _err(str(e))
    except (ParseError, MalformedFileError, EmptyDatasetError, ShapeError, IncompleteReportError,
            ConsistencyError, OSError) as e:
        code = EXIT_DATA
        _err(str(e))
    except (ConfigError, InvalidArgumentError) as e:
        code = EXIT_USAGE
        _err(str(e))
    finally:
        logger.log("session_complete", {"exit_code": code})
        logger.close()
    print(f"\n[dim]Logged to {logger.path}[/dim]")
    if code != EXIT_OK:
        raise typer.Exit(code)


def _optimizer(cfg: dict, epochs: Optional[int], alpha: Optional[float], mu: Optional[float],
               batch_size: Optional[int]) -> OptimizerConfig:
    flags = {"epochs": epochs, "alpha": alpha, "mu": mu, "batch_size": batch_size}
    merged = {**cfg.get("optimizer", {}), **{k: v for k, v in flags.items() if v is not None}}
    return validate_optimizer_config(merged, strict=True)


def _network(cfg: dict, shape: Tuple[int, int], **overrides: Any) -> NetworkConfig:
    raw = {**cfg.get("network", {})}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["input_height"], raw["input_width"] = shape
    return validate_network_config(raw, strict=True)


def _load_prepared(
    cfg: dict,
    logger: TraceLogger,
    data: Optional[Path],
    subset_name: SubsetChoice,
    part: Optional[PartChoice],
    shape: Optional[Tuple[int, int]],
    seed: int,
) -> Dataset:
    """Load, extract the part, downscale, then apply the experiment subset."""
    paths = cfg.get("paths", {})
    path = resolve_data_path(str(data) if data else None, paths.get("dataset"), paths.get("data_env", "SMILE_CNN_DATA"))
    if path is None:
        raise InvalidArgumentError("no dataset given; pass --data or set SMILE_CNN_DATA")
    dataset = load_dataset(path)
    logger.log("dataset_loaded", {"path": path, "samples": len(dataset), "image_shape": dataset.image_shape})
    if part is not None:
        dataset = extract_part(dataset, part.value)
    if shape is not None:
        dataset = resize_dataset(dataset, shape)
    keep = float(cfg.get("subsets", {}).get("keep_neutral_fraction", 0.30))
    dataset = subset(dataset, subset_name.value, keep, make_rng(derive_seed(seed, STREAM_SUBSET)))
    logger.log("subset_applied", {"subset": subset_name.value, "samples": len(dataset)})
    if not len(dataset):
        raise EmptyDatasetError(f"subset {subset_name.value!r} left no samples")
    return dataset


def _split_arrays(cfg: dict, logger: TraceLogger, dataset: Dataset, seed: int):
    spec = validate_split_spec({**cfg.get("split", {}), "seed": derive_seed(seed, STREAM_SPLIT)}, strict=True)
    parts = split(dataset, spec)
    logger.log("split_done", {"train": len(parts[0]), "validation": len(parts[1]), "test": len(parts[2])})
    return tuple(to_arrays(p) for p in parts)


def _reports_dir(cfg: dict) -> Path:
    out = Path(cfg.get("paths", {}).get("reports_dir", "reports"))
    out.mkdir(parents=True, exist_ok=True)
    return out


@app.command("gen-data")
def gen_data(
    n: Annotated[Optional[int], typer.Option("--n", min=1, help="Number of synthetic samples")] = None,
    part: Annotated[PartChoice, typer.Option("--part", help="Image size preset")] = PartChoice.mouth,
    height: Annotated[Optional[int], typer.Option("--height", min=1)] = None,
    width: Annotated[Optional[int], typer.Option("--width", min=1)] = None,
    histogram: Annotated[Optional[str], typer.Option("--histogram", help="Six comma-separated weights for AU12 levels 0-5")] = None,
    fixture: Annotated[Optional[FixtureChoice], typer.Option("--fixture", help="Write the DISFA-count annotation fixture instead")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Dataset file to write")] = None,
    annotations: Annotated[Optional[Path], typer.Option("--annotations", help="Annotation CSV to write")] = None,
    pgm: Annotated[Optional[Path], typer.Option("--pgm", help="Export the first image as PGM")] = None,
    seed: SeedOpt = DEFAULT_SEED,
):
    """Generate a synthetic smile dataset and its annotation CSV."""
    cfg = _load_cfg()
    synth = cfg.get("synthetic", {})
    command = CommandConfig(subcommand="gen-data", out_path=str(out) if out else None, seed=seed, part=part.value)
    with _session(cfg, command) as logger:
        if fixture is not None:
            records = disfa_count_fixture(seed)
            ann_path = annotations or Path("data/disfa_counts.csv")
            ann_path.parent.mkdir(parents=True, exist_ok=True)
            write_annotations(records, ann_path)
            report = build_report(records, aus=["AU12"])
            print(f"[bold green]Wrote[/bold green] {ann_path} ({len(records):,} rows)")
            print(render_report(report))
            print(f"frames: {report.total_frames:,}  neutral: {report.neutral_frames:,}  AU set: {report.au_set_frames:,}")
            logger.log("fixture_written", {"path": ann_path, "rows": len(records)})
            return

        if histogram is not None:
            try:
                weights = [float(x) for x in histogram.split(",")]
            except ValueError as e:
                raise InvalidArgumentError(f"--histogram expects six numbers, got {histogram!r}") from e
        else:
            weights = synth.get("histogram", [99996, 13942, 6868, 7233, 2577, 172])
        preset = PART_SHAPES[part.value]
        shape = (height or preset[0], width or preset[1])
        count = n or int(synth.get("n", 2000))
        dataset = synth_generate(
            count,
            shape,
            weights,
            make_rng(derive_seed(seed, STREAM_SYNTH)),
            noise_sigma=float(synth.get("noise_sigma", 0.05)),
            max_shift=int(synth.get("max_shift", 3)),
        )
        out_path = out or Path(cfg.get("paths", {}).get("dataset", "data/synthetic.dset"))
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(dataset, out_path)
        ann_path = annotations or out_path.with_suffix(".csv")
        write_annotations(annotations_for(dataset), ann_path)
        if pgm is not None:
            write_pgm(dataset.samples[0].image, pgm)

        levels = dataset.intensities()
        rows = [[level, int((levels == level).sum())] for level in range(6)]
        print(f"[bold green]Wrote[/bold green] {out_path} ({count:,} samples, {shape[0]}x{shape[1]})")
        print(tabulate(rows, headers=["AU12 intensity", "samples"], tablefmt="github"))
        print(f"positive: {int((levels > 0).sum()):,}  annotations: {ann_path}")
        logger.log("dataset_written", {"path": out_path, "samples": count, "image_shape": shape,
                                       "intensity_counts": {r[0]: r[1] for r in rows}})


@app.command()
def stats(
    annotations: Annotated[Path, typer.Option("--annotations", help="Annotation CSV (video_id,frame,au,intensity)")],
    au: Annotated[Optional[List[str]], typer.Option("--au", help="Restrict to these action units")] = None,
    video: Annotated[Optional[str], typer.Option("--video", help="Scope to one video")] = None,
    fmt: Annotated[FormatChoice, typer.Option("--format")] = FormatChoice.text,
    out: Annotated[Optional[Path], typer.Option("--out")] = None,
):
    """Binary counts and intensity histograms of action units."""
    cfg = _load_cfg()
    command = CommandConfig(subcommand="stats", data_path=str(annotations), out_path=str(out) if out else None)
    with _session(cfg, command) as logger:
        records = read_annotations(annotations)
        report = build_report(records, aus=au or None, video=video)
        text = render_report(report, fmt.value, aus=au or None)
        logger.log("stats_complete", {"rows": len(records), "scope": report.scope, "binary": report.binary})
        if out is not None:
            out.write_text(text, encoding="utf-8")
            print(f"[bold green]Wrote[/bold green] {out}")
        else:
            typer.echo(text, nl=False)
        if fmt is FormatChoice.text:
            typer.echo(f"\nscope: {report.scope}  frames: {report.total_frames:,}  "
                       f"neutral: {report.neutral_frames:,}  AU set: {report.au_set_frames:,}")


@app.command("train")
def train_cmd(
    data: DataOpt = None,
    subset_name: SubsetOpt = SubsetChoice.full,
    part: PartOpt = None,
    resize: ResizeOpt = None,
    convs: ConvsOpt = None,
    hidden_layers: HiddenOpt = None,
    units: UnitsOpt = None,
    dropout: DropoutOpt = None,
    epochs: EpochsOpt = None,
    alpha: AlphaOpt = None,
    mu: MuOpt = None,
    batch_size: BatchOpt = None,
    seed: SeedOpt = DEFAULT_SEED,
    out: Annotated[Optional[Path], typer.Option("--out", help="Report CSV")] = None,
    checkpoint: Annotated[Optional[Path], typer.Option("--checkpoint", help="Network checkpoint to write")] = None,
    timing: TimingOpt = False,
):
    """Train one network and write its epoch report and checkpoint."""
    cfg = _load_cfg()
    shape = _checked(lambda: parse_shape(resize)) if resize else None
    optimizer = _checked(lambda: _optimizer(cfg, epochs, alpha, mu, batch_size))
    command = CommandConfig(subcommand="train", data_path=str(data) if data else None, out_path=str(out) if out else None,
                            seed=seed, subset=subset_name.value, part=(part or PartChoice.mouth).value, resize=shape,
                            optimizer=optimizer, timing=timing)
    with _session(cfg, command) as logger:
        dataset = _load_prepared(cfg, logger, data, subset_name, part, shape, seed)
        splits = _split_arrays(cfg, logger, dataset, seed)
        config = _network(cfg, dataset.image_shape, num_convs=convs, num_hidden_layers=hidden_layers,
                          hidden_units=units, dropout_p=dropout)
        init_seed = derive_seed(seed, STREAM_INIT)
        rng = make_rng(init_seed)
        network = build_network(config, rng)
        print(describe(network))

        report_path = out or _reports_dir(cfg) / "train_report.csv"
        try:
            report = train_network(network, *splits, optimizer, rng, seed=init_seed, on_event=logger)
        except DivergenceError as e:
            if e.partial_report is not None:
                report_path.write_text(e.partial_report.to_csv(timing), encoding="utf-8")
                print(f"[yellow]Partial report flushed to {report_path}[/yellow]")
            raise
        report_path.write_text(report.to_csv(timing), encoding="utf-8")
        ckpt_path = checkpoint or _reports_dir(cfg) / "model.net"
        save_checkpoint(network, ckpt_path)

        rows = [[i + 1, f"{t:.6f}", f"{v:.6f}", f"{s:.2f}"]
                for i, (t, v, s) in enumerate(zip(report.train_losses, report.val_losses, report.epoch_seconds))]
        if rows:
            print(tabulate(rows, headers=["epoch", "train loss", "val loss", "seconds"], tablefmt="github"))
        print(f"\n[bold]test loss[/bold] {report.test_loss:.6f}  [bold]test accuracy[/bold] {report.test_accuracy:.4%}")
        print(f"[bold green]Wrote[/bold green] {report_path} and {ckpt_path}")


@app.command("select")
def select_cmd(
    data: DataOpt = None,
    subset_name: SubsetOpt = SubsetChoice.full,
    part: PartOpt = None,
    resize: ResizeOpt = None,
    epochs: EpochsOpt = None,
    alpha: AlphaOpt = None,
    mu: MuOpt = None,
    batch_size: BatchOpt = None,
    seed: SeedOpt = DEFAULT_SEED,
    select_on: Annotated[SelectOnChoice, typer.Option("--select-on", help="Metric used to pick values")] = SelectOnChoice.test,
    jobs: Annotated[int, typer.Option("--jobs", min=1, help="Configurations trained in parallel")] = 1,
    out: Annotated[Optional[Path], typer.Option("--out", help="Selection CSV")] = None,
    timing: TimingOpt = False,
):
    """One-factor-at-a-time model selection over the configured search space."""
    cfg = _load_cfg()
    shape = _checked(lambda: parse_shape(resize)) if resize else None
    optimizer = _checked(lambda: _optimizer(cfg, epochs, alpha, mu, batch_size))
    space = _checked(lambda: validate_search_space(cfg.get("search_space", {}), strict=True))
    command = CommandConfig(subcommand="select", data_path=str(data) if data else None, out_path=str(out) if out else None,
                            seed=seed, subset=subset_name.value, part=(part or PartChoice.mouth).value, resize=shape,
                            optimizer=optimizer, timing=timing)
    with _session(cfg, command) as logger:
        dataset = _load_prepared(cfg, logger, data, subset_name, part, shape, seed)
        splits = _split_arrays(cfg, logger, dataset, seed)
        base = _network(cfg, dataset.image_shape)
        report = run_selection(space, splits, optimizer.epochs, derive_seed(seed, STREAM_SELECT), base=base,
                               optimizer=optimizer, metric=select_on.value, jobs=jobs, on_event=logger)
        out_path = out or _reports_dir(cfg) / "selection.csv"
        write_selection_csv(report, out_path, include_timing=timing)

        rows = [[*r.config.searched_values(), f"{r.test_loss:.6f}", f"{r.test_accuracy:.2%}"] for r in report.results]
        print(tabulate(rows, headers=["convs", "hidden layers", "units", "dropout", "test loss", "test accuracy"],
                       tablefmt="github"))
        print()
        print(timing_table(report.results, jobs))
        print(f"\n[bold]chosen ({select_on.value})[/bold] {report.final_config.label()}")
        print(f"[bold green]Wrote[/bold green] {out_path}")


@app.command("repeat")
def repeat_cmd(
    data: DataOpt = None,
    subset_name: SubsetOpt = SubsetChoice.full,
    part: PartOpt = None,
    resize: ResizeOpt = None,
    convs: ConvsOpt = None,
    hidden_layers: HiddenOpt = None,
    units: UnitsOpt = None,
    dropout: DropoutOpt = None,
    epochs: EpochsOpt = None,
    alpha: AlphaOpt = None,
    mu: MuOpt = None,
    batch_size: BatchOpt = None,
    seed: SeedOpt = DEFAULT_SEED,
    runs: Annotated[Optional[int], typer.Option("--runs", min=2, help="Independent runs (>= 2)")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Accuracy CSV")] = None,
):
    """Retrain one configuration with fresh splits and weights; report the spread."""
    cfg = _load_cfg()
    shape = _checked(lambda: parse_shape(resize)) if resize else None
    optimizer = _checked(lambda: _optimizer(cfg, epochs, alpha, mu, batch_size))
    n_runs = runs or int(cfg.get("repeat", {}).get("runs", 10))
    command = CommandConfig(subcommand="repeat", data_path=str(data) if data else None, out_path=str(out) if out else None,
                            seed=seed, subset=subset_name.value, part=(part or PartChoice.mouth).value, resize=shape,
                            optimizer=optimizer)
    with _session(cfg, command) as logger:
        dataset = _load_prepared(cfg, logger, data, subset_name, part, shape, seed)
        config = _network(cfg, dataset.image_shape, num_convs=convs, num_hidden_layers=hidden_layers,
                          hidden_units=units, dropout_p=dropout)
        split_spec = validate_split_spec(cfg.get("split", {}), strict=True)
        accuracies, stddev = repeatability(config, dataset, n_runs, derive_seed(seed, STREAM_REPEAT),
                                           optimizer=optimizer, split_spec=split_spec, on_event=logger)
        lines = ["run,test_accuracy"] + [f"{i + 1},{a:.10g}" for i, a in enumerate(accuracies)]
        lines.append(f"population_stddev,{stddev:.10g}")
        if out is not None:
            out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(tabulate([[i + 1, f"{a:.4%}"] for i, a in enumerate(accuracies)], headers=["run", "test accuracy"],
                       tablefmt="github"))
        print(f"\n[bold]population stddev[/bold] {stddev:.6%}")


@app.command("eval")
def eval_cmd(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="Network checkpoint")],
    data: DataOpt = None,
    subset_name: SubsetOpt = SubsetChoice.full,
    part: PartOpt = None,
    resize: ResizeOpt = None,
    seed: SeedOpt = DEFAULT_SEED,
):
    """Test loss and accuracy of a checkpoint on the split derived from --seed."""
    cfg = _load_cfg()
    shape = _checked(lambda: parse_shape(resize)) if resize else None
    command = CommandConfig(subcommand="eval", data_path=str(data) if data else None, seed=seed,
                            subset=subset_name.value, part=(part or PartChoice.mouth).value, resize=shape)
    with _session(cfg, command) as logger:
        network = load_checkpoint(checkpoint)
        dataset = _load_prepared(cfg, logger, data, subset_name, part, shape, seed)
        _, _, test_set = _split_arrays(cfg, logger, dataset, seed)
        loss, acc = evaluate(network, test_set)
        logger.log("eval_complete", {"checkpoint": checkpoint, "test_loss": loss, "test_accuracy": acc})
        print(f"[bold]test loss[/bold] {loss:.6f}  [bold]test accuracy[/bold] {acc:.4%}")


def _checked(build):
    """Flag validation outside a session: config errors are usage errors."""
    try:
        return build()
    except (ConfigError, InvalidArgumentError) as e:
        _err(str(e))
        raise typer.Exit(EXIT_USAGE)


if __name__ == "__main__":
    app()
