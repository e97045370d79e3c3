"""One-factor-at-a-time model selection, repeatability and timing summaries."""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError
from tabulate import tabulate

from src.data import Dataset, split, to_arrays
from src.errors import ConfigError, DivergenceError, IncompleteReportError, InvalidArgumentError, ParseError
from src.io_schemas import (
    SEARCHED_PARAMETERS,
    NetworkConfig,
    OptimizerConfig,
    RunResult,
    SearchSpace,
    SelectionReport,
    SelectOn,
    SplitSpec,
)
from src.nn.network import build_network
from src.optim import Arrays, train
from src.tensor import derive_seed, make_rng
from src.utils import EventCallback, emit, lower_median

Value = Union[int, float]

SELECTION_COLUMNS = [
    "num_convs",
    "num_hidden_layers",
    "hidden_units",
    "dropout",
    "test_loss",
    "test_accuracy",
    "median_epoch_seconds",
]


def _with(base: NetworkConfig, **values: Value) -> NetworkConfig:
    try:
        return NetworkConfig(**{**base.model_dump(), **values})
    except ValidationError as e:
        raise ConfigError(f"invalid configuration {values}: {e}") from e


def ofat_plan(space: SearchSpace, base: Optional[NetworkConfig] = None) -> List[Tuple[Optional[str], NetworkConfig]]:
    """(varied parameter, config) pairs: the all-defaults run first, then each
    non-default value in parameter order. Duplicate configs are dropped."""
    base = _with(base or NetworkConfig(), **space.defaults())
    plan: List[Tuple[Optional[str], NetworkConfig]] = [(None, base)]
    seen = {base}
    for param in space.parameters:
        for value in param.values:
            config = _with(base, **{param.name: value})
            if config in seen:
                continue
            seen.add(config)
            plan.append((param.name, config))
    return plan


def enumerate_ofat(space: SearchSpace, base: Optional[NetworkConfig] = None) -> List[NetworkConfig]:
    return [config for _, config in ofat_plan(space, base)]


def _run_one(
    ordinal: int,
    parameter: Optional[str],
    config: NetworkConfig,
    splits: Tuple[Arrays, Arrays, Arrays],
    optimizer: OptimizerConfig,
    master_seed: int,
    on_event: Optional[EventCallback],
) -> RunResult:
    seed = derive_seed(master_seed, ordinal)
    rng = make_rng(seed)
    network = build_network(config, rng)
    try:
        report = train(network, *splits, optimizer, rng, seed=seed)
    except DivergenceError as e:
        tagged = DivergenceError(f"training diverged ({config.label()})", e.epoch, e.batch, e.layer, ordinal)
        tagged.partial_report = e.partial_report
        raise tagged from e
    result = RunResult(
        ordinal=ordinal,
        parameter=parameter,
        config=config,
        epochs=report.epochs_run,
        test_loss=report.test_loss,
        test_accuracy=report.test_accuracy,
        val_loss=report.final_val_loss,
        median_epoch_seconds=report.median_epoch_seconds,
        epoch_seconds=report.epoch_seconds,
        seed=seed,
    )
    emit(on_event, "config_run_complete", ordinal=ordinal, parameter=parameter, config=config.label(),
         test_loss=result.test_loss, test_accuracy=result.test_accuracy,
         median_epoch_seconds=result.median_epoch_seconds)
    return result


def run_selection(
    space: SearchSpace,
    splits: Tuple[Arrays, Arrays, Arrays],
    epochs: int,
    master_seed: int,
    base: Optional[NetworkConfig] = None,
    optimizer: Optional[OptimizerConfig] = None,
    metric: SelectOn = "test",
    jobs: int = 1,
    on_event: Optional[EventCallback] = None,
) -> SelectionReport:
    """Trains every OFAT configuration once and picks the best value per parameter.

    Config ``k`` is seeded with ``derive_seed(master_seed, k)``; results keep
    enumeration order whatever the completion order.
    """
    if jobs < 1:
        raise InvalidArgumentError(f"jobs must be >= 1, got {jobs}")
    optimizer = (optimizer or OptimizerConfig()).model_copy(update={"epochs": epochs})
    plan = ofat_plan(space, base)
    args = [(k, p, c, splits, optimizer, master_seed, on_event) for k, (p, c) in enumerate(plan)]
    if jobs == 1:
        results = [_run_one(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda a: _run_one(*a), args))
    chosen = pick_best(results, space, metric)
    final = _with(plan[0][1], **chosen)
    emit(on_event, "selection_complete", runs=len(results), chosen=chosen, final_config=final.label(), jobs=jobs)
    return SelectionReport(results=results, chosen=chosen, final_config=final, metric=metric, jobs=jobs)


def _score(result: RunResult, metric: SelectOn) -> float:
    if metric == "test":
        return result.test_loss
    if metric == "accuracy":
        return -result.test_accuracy
    if result.val_loss is None:
        raise IncompleteReportError(f"run {result.ordinal} has no validation loss")
    return result.val_loss


def pick_best(
    results: Sequence[RunResult],
    space: Optional[SearchSpace] = None,
    metric: SelectOn = "test",
) -> Dict[str, Value]:
    """Best value per parameter against the all-defaults run.

    Lowest loss wins (highest accuracy for ``metric="accuracy"``); ties go to
    the default, then to the smaller value. Runs are matched by their config,
    so row order does not matter.
    """
    space = space or SearchSpace.standard()
    defaults = space.defaults()
    by_values: Dict[Tuple[Value, ...], RunResult] = {}
    for r in results:
        key = tuple(getattr(r.config, name) for name in defaults)
        if key not in by_values or _score(r, metric) < _score(by_values[key], metric):
            by_values[key] = r
    default_key = tuple(defaults.values())
    if default_key not in by_values:
        raise IncompleteReportError("no run with all parameters at their defaults")
    chosen: Dict[str, Value] = {}
    names = list(defaults)
    for i, param in enumerate(space.parameters):
        candidates = []
        for value in param.values:
            key = default_key[:i] + (value,) + default_key[i + 1 :]
            if key not in by_values:
                raise IncompleteReportError(f"missing run for {param.name}={value}")
            candidates.append((_score(by_values[key], metric), value != param.default, value))
        chosen[names[i]] = min(candidates)[2]
    return chosen


def population_stddev(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise InvalidArgumentError("standard deviation of an empty sequence")
    return float(np.std(np.asarray(values, dtype=np.float64), ddof=0))


def repeatability(
    config: NetworkConfig,
    dataset: Dataset,
    n_runs: int,
    master_seed: int,
    optimizer: Optional[OptimizerConfig] = None,
    split_spec: Optional[SplitSpec] = None,
    on_event: Optional[EventCallback] = None,
) -> Tuple[List[float], float]:
    """Trains ``config`` ``n_runs`` times with a fresh split and fresh weights per run.

    Returns the test accuracies and their population standard deviation.
    """
    if n_runs < 2:
        raise InvalidArgumentError(f"repeatability needs at least 2 runs, got {n_runs}")
    optimizer = optimizer or OptimizerConfig()
    split_spec = split_spec or SplitSpec()
    accuracies: List[float] = []
    for run in range(n_runs):
        spec = split_spec.model_copy(update={"seed": derive_seed(master_seed, run, 1)})
        train_set, val_set, test_set = (to_arrays(d) for d in split(dataset, spec))
        seed = derive_seed(master_seed, run, 0)
        rng = make_rng(seed)
        try:
            report = train(build_network(config, rng), train_set, val_set, test_set, optimizer, rng, seed=seed)
        except DivergenceError as e:
            tagged = DivergenceError(f"repeat run {run} diverged", e.epoch, e.batch, e.layer, run)
            tagged.partial_report = e.partial_report
            raise tagged from e
        accuracies.append(report.test_accuracy)
        emit(on_event, "repeat_run_complete", run=run, seed=seed, test_loss=report.test_loss,
             test_accuracy=report.test_accuracy)
    return accuracies, population_stddev(accuracies)


def timing_summary(results: Sequence[RunResult]) -> Dict[int, float]:
    """Median epoch seconds per run ordinal (lower middle for even counts)."""
    summary: Dict[int, float] = {}
    for r in results:
        if r.epoch_seconds:
            summary[r.ordinal] = lower_median(r.epoch_seconds)
        elif r.median_epoch_seconds is not None:
            summary[r.ordinal] = r.median_epoch_seconds
    return summary


def timing_table(results: Sequence[RunResult], jobs: int = 1) -> str:
    medians = timing_summary(results)
    rows = [
        [*r.config.searched_values(), f"{medians[r.ordinal]:.3f}" if r.ordinal in medians else "-"]
        for r in results
    ]
    table = tabulate(rows, headers=["convs", "hidden layers", "units", "dropout", "median epoch s"], tablefmt="github")
    return f"{table}\n\nparallel jobs: {jobs}"


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.10g}"


def selection_csv(report: SelectionReport, include_timing: bool = True) -> str:
    """Table rows in enumeration order plus a ``chosen,...`` footer."""
    rows = [
        [
            r.config.num_convs,
            r.config.num_hidden_layers,
            r.config.hidden_units,
            f"{r.config.dropout_p:g}",
            _fmt(r.test_loss),
            _fmt(r.test_accuracy),
            _fmt(r.median_epoch_seconds) if include_timing else "-",
        ]
        for r in report.results
    ]
    buf = io.StringIO()
    pd.DataFrame(rows, columns=SELECTION_COLUMNS).to_csv(buf, index=False, lineterminator="\n")
    chosen = [report.chosen.get(name) for name in SEARCHED_PARAMETERS]
    buf.write("chosen," + ",".join("-" if v is None else f"{v:g}" for v in chosen) + "\n")
    return buf.getvalue()


def write_selection_csv(report: SelectionReport, path: Union[str, Path], include_timing: bool = True) -> None:
    Path(path).write_text(selection_csv(report, include_timing), encoding="utf-8")


def read_selection_csv(
    path: Union[str, Path],
    base: Optional[NetworkConfig] = None,
    epochs: int = 0,
) -> List[RunResult]:
    """Runs from a selection table; the ``chosen`` footer is skipped.

    Accuracy may be a fraction or a percentage (values above 1 are divided
    by 100).
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in SELECTION_COLUMNS if c not in df.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", line=1)
    base = base or NetworkConfig()
    results: List[RunResult] = []
    for i, row in enumerate(df.itertuples(index=False)):
        if row.num_convs == "chosen":
            continue
        try:
            accuracy = float(row.test_accuracy)
            median = None if row.median_epoch_seconds in ("", "-") else float(row.median_epoch_seconds)
            config = _with(
                base,
                num_convs=int(row.num_convs),
                num_hidden_layers=int(row.num_hidden_layers),
                hidden_units=int(row.hidden_units),
                dropout_p=float(row.dropout),
            )
            results.append(
                RunResult(
                    ordinal=len(results),
                    config=config,
                    epochs=epochs,
                    test_loss=float(row.test_loss),
                    test_accuracy=accuracy / 100.0 if accuracy > 1.0 else accuracy,
                    median_epoch_seconds=median,
                )
            )
        except (ValueError, ConfigError) as e:
            raise ParseError(str(e), line=i + 2) from e
    return results
