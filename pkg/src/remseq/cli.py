"""Command-line interface for remseq."""

import functools
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, TypeVar

import click
import numpy as np
import pandas as pd

from .config import VALID_LOG_LEVELS, RunConfig
from .errors import (
    ConfigError,
    DataError,
    GeometryError,
    ModelFormatError,
    NumericalError,
    RemError,
)

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

EXIT_CODES = (
    (ConfigError, 2),
    (DataError, 3),
    (GeometryError, 3),
    (NumericalError, 4),
    (ModelFormatError, 5),
)


class RunFailure(click.ClickException):
    """A categorized failure with its own exit code."""

    def __init__(self, message: str, exit_code: int = 1) -> None:
        """Store the message and exit code."""
        super().__init__(message)
        self.exit_code = exit_code


def exit_code_for(error: BaseException) -> int:
    """Exit code of an error category (1 when uncategorized)."""
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return 1


def _guarded(fn: F) -> F:
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as e:
            logger.error(f"Error: {e}")
            code = exit_code_for(e) if isinstance(e, RemError) else 1
            raise RunFailure(str(e), code) from e

    return wrapper  # type: ignore[return-value]


def _parse_altitudes(
    ctx: click.Context, param: click.Parameter, value: Optional[str]
) -> Optional[Dict[str, float]]:
    if not value:
        return None
    altitudes: Dict[str, float] = {}
    for item in value.split(","):
        label, sep, height = item.partition("=")
        try:
            if not sep or not label.strip():
                raise ValueError(item)
            altitudes[label.strip()] = float(height)
        except ValueError:
            raise click.BadParameter(
                f"expected LABEL=METRES pairs, got {item!r}"
            )
    return altitudes


def _override_options(fn: F) -> F:
    options = [
        click.option(  # type: ignore[misc]
            "--rmax",
            type=float,
            help="Override region.r_max (m); model.max_seq follows.",
        ),
        click.option(  # type: ignore[misc]
            "--step",
            type=float,
            help="Override region.step (m); model.max_seq follows.",
        ),
        click.option(  # type: ignore[misc]
            "--floor-dbm",
            type=float,
            help="Override dataset.rsrp_floor_dbm (default: -120).",
        ),
        click.option(  # type: ignore[misc]
            "--altitudes",
            callback=_parse_altitudes,
            help="Altitude slices as LABEL=METRES pairs, e.g. A=50,B=70.",
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _apply_overrides(
    data: Dict[str, Any],
    seed: Optional[int],
    rmax: Optional[float] = None,
    step: Optional[float] = None,
    floor_dbm: Optional[float] = None,
    altitudes: Optional[Dict[str, float]] = None,
) -> Dict[str, Any]:
    if rmax is not None:
        data["region"]["r_max"] = rmax
    if step is not None:
        data["region"]["step"] = step
    if rmax is not None or step is not None:
        r_max, r_step = data["region"]["r_max"], data["region"]["step"]
        data["model"]["max_seq"] = int(round(r_max / r_step))
    if floor_dbm is not None:
        data["dataset"]["rsrp_floor_dbm"] = floor_dbm
    if altitudes is not None:
        data["synth"]["altitudes"] = altitudes
        data["dataset"]["altitudes"] = altitudes
    if seed is not None:
        data["seed"] = seed
        data["pretrain"]["seed"] = seed
        data["finetune"]["seed"] = seed
        data["synth"]["noise"]["seed"] = seed
        if data["channel"].get("shadowing"):
            data["channel"]["shadowing"]["seed"] = seed
    return data


def _prepare(
    ctx: click.Context, **overrides: Any
) -> Tuple[RunConfig, Path]:
    """Resolve config (file, env, flags), set up logging and ``--out``."""
    opts = ctx.obj
    cfg = RunConfig.from_env(opts["config_path"])
    data = _apply_overrides(cfg.model_dump(), opts["seed"], **overrides)
    if opts["log_level"]:
        data["log_level"] = opts["log_level"]
    cfg = RunConfig.from_dict(data)

    logging.basicConfig(
        level=getattr(logging, cfg.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    logging.getLogger("remseq").setLevel(getattr(logging, cfg.log_level))
    cfg.validate_config()

    out_dir = Path(opts["out_dir"] or cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running {ctx.info_name} with output in {out_dir}")
    for key, value in cfg.get_summary().items():
        logger.debug(f"{key}: {value}")
    return cfg, out_dir


def _seeds(cfg: RunConfig) -> Dict[str, int]:
    seeds = {
        "seed": cfg.seed,
        "pretrain": cfg.pretrain.seed,
        "finetune": cfg.finetune.seed,
        "noise": cfg.synth.noise.seed,
    }
    if cfg.channel.shadowing is not None:
        seeds["shadowing"] = cfg.channel.shadowing.seed
    return seeds


def _require(value: Optional[Any], what: str) -> Any:
    if value is None:
        raise ConfigError(f"{what} is required (flag or paths section)")
    return value


def _load_measurements(path: Path, cfg: RunConfig) -> Any:
    from .dataset import canonical_mapping, ingest_csv

    header = pd.read_csv(path, nrows=0).columns
    mapping = cfg.dataset.schema_mapping
    canonical = {"x", "y", "z", "rsrp_dbm"} <= set(header)
    if canonical and mapping.rsrp not in header:
        mapping = canonical_mapping()
        if "altitude_label" not in header:
            mapping = mapping.model_copy(update={"altitude_label": None})
    return ingest_csv(
        path,
        mapping,
        rsrp_floor_dbm=cfg.dataset.rsrp_floor_dbm,
        bs_origin=cfg.dataset.bs_origin,
        max_malformed_frac=cfg.dataset.max_malformed_frac,
        altitudes=cfg.dataset.altitudes,
    )


def _read_points(path: Path) -> np.ndarray:
    frame = pd.read_csv(path)
    missing = {"x", "y", "z"} - set(frame.columns)
    if missing:
        raise DataError(f"{path} is missing column(s): {sorted(missing)}")
    return frame[["x", "y", "z"]].to_numpy(dtype=np.float64)


def _delta(cfg: RunConfig) -> Any:
    from .geometry import RangeArray

    return RangeArray(cfg.region.r_max, cfg.region.step)


def _inside(data: Any, cfg: RunConfig) -> Any:
    rho = np.linalg.norm(data.xyz, axis=1)
    keep = (rho > 0) & (rho <= cfg.region.r_max + cfg.region.step / 2)
    if not keep.all():
        logger.warning(
            f"Ignoring {int((~keep).sum())} point(s) outside the region "
            f"of interest"
        )
    return data.subset(np.flatnonzero(keep))


def _write_predictions(
    path: Path, points: np.ndarray, columns: Dict[str, np.ndarray]
) -> None:
    frame = pd.DataFrame(
        {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2], **columns}
    )
    frame.to_csv(path, index=False, float_format="%.17g")


@click.group()  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    help="YAML run configuration. Environment: REM_CONFIG",
    envvar="REM_CONFIG",
)
@click.option(  # type: ignore[misc]
    "--seed",
    type=click.IntRange(min=0),
    help="Base seed; also seeds both stages, noise and shadowing.",
)
@click.option(  # type: ignore[misc]
    "--out",
    "out_dir",
    type=click.Path(file_okay=False),
    help="Output directory (default: paths.out_dir).",
)
@click.option(  # type: ignore[misc]
    "--log-level",
    type=click.Choice(VALID_LOG_LEVELS, case_sensitive=False),
    help="Logging level (default: INFO). Environment: REM_LOG_LEVEL",
    envvar="REM_LOG_LEVEL",
)
@click.pass_context  # type: ignore[misc]
def main(
    ctx: click.Context,
    config_path: Optional[str],
    seed: Optional[int],
    out_dir: Optional[str],
    log_level: Optional[str],
) -> None:
    """3D radio environment maps from sparse RSRP measurements.

    \b
    Configuration Priority (highest to lowest):
    1. Command-line flags
    2. Environment variables (REM_CONFIG, REM_LOG_LEVEL)
    3. The YAML config file
    4. Default values

    \b
    Example Usage:
    remseq --out runs/demo synth
    remseq --out runs/demo pretrain
    remseq --out runs/demo finetune --checkpoint runs/demo/stage1.ckpt \\
        --data runs/demo/measurements.csv
    """
    ctx.obj = {
        "config_path": config_path,
        "seed": seed,
        "out_dir": out_dir,
        "log_level": log_level.upper() if log_level else None,
    }


@main.command("check")  # type: ignore[misc]
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def check(ctx: click.Context, **overrides: Any) -> None:
    """Validate configuration and display settings."""
    cfg, _ = _prepare(ctx, **overrides)
    click.echo("Configuration validation successful!")
    for key, value in cfg.get_summary().items():
        click.echo(f"{key.replace('_', ' ').title()}: {value}")


@main.command("synth")  # type: ignore[misc]
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def synth(ctx: click.Context, **overrides: Any) -> None:
    """Sample a synthetic measurement world on altitude slices."""
    from .channel_synth import sample_altitude_slices, synthesize_measurements
    from .manifest import RunManifest

    cfg, out_dir = _prepare(ctx, **overrides)
    manifest = RunManifest.start(
        "synth", cfg.model_dump(mode="json"), _seeds(cfg)
    )
    points, labels = sample_altitude_slices(
        cfg.synth.altitudes,
        cfg.synth.n_per_slice,
        cfg.synth.half_extent_m,
        cfg.seed,
    )
    data = synthesize_measurements(
        points, cfg.channel, cfg.synth.noise, altitude_labels=labels
    )
    target = out_dir / "measurements.csv"
    data.to_csv(target)
    manifest.add_output(target)
    manifest.save(out_dir)
    click.echo(f"Wrote {len(data)} measurements to {target}")


@main.command("pretrain")  # type: ignore[misc]
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def pretrain_cmd(ctx: click.Context, **overrides: Any) -> None:
    """Stage 1: pretrain on synthetic FSPL sequences."""
    from .manifest import RunManifest
    from .model import init_model, save_model
    from .training import pretrain

    cfg, out_dir = _prepare(ctx, **overrides)
    manifest = RunManifest.start(
        "pretrain", cfg.model_dump(mode="json"), _seeds(cfg)
    )
    model = init_model(cfg.model, cfg.seed)
    model, report = pretrain(model, cfg.channel, cfg.pretrain, _delta(cfg))
    ckpt = out_dir / "stage1.ckpt"
    save_model(model, ckpt)
    report_path = out_dir / "pretrain_report.csv"
    report.to_csv(report_path)
    for path in (ckpt, report_path):
        manifest.add_output(path)
    manifest.save(out_dir)
    click.echo(
        f"Stage 1 done: best epoch {report.best_epoch}, checkpoint {ckpt}"
    )


@main.command("finetune")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Stage-1 checkpoint (default: paths.checkpoint).",
)
@click.option(  # type: ignore[misc]
    "--data",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Measurement CSV (default: paths.measurements).",
)
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def finetune_cmd(
    ctx: click.Context,
    checkpoint: Optional[Path],
    data: Optional[Path],
    **overrides: Any,
) -> None:
    """Stage 2: fine-tune on measurements and score both stages."""
    from .analysis import compare_stages, reports_to_frame
    from .manifest import RunManifest
    from .model import load_model, predict_points, save_model
    from .training import finetune, split_dataset

    cfg, out_dir = _prepare(ctx, **overrides)
    checkpoint = Path(
        _require(checkpoint or cfg.paths.checkpoint, "--checkpoint")
    )
    data = Path(_require(data or cfg.paths.measurements, "--data"))
    manifest = RunManifest.start(
        "finetune",
        cfg.model_dump(mode="json"),
        _seeds(cfg),
        inputs=[checkpoint, data],
    )
    delta = _delta(cfg)
    stage1 = load_model(checkpoint)
    records = _load_measurements(data, cfg)
    train, val, test = split_dataset(
        records, cfg.dataset.split_ratios, cfg.seed
    )
    model, report = finetune(stage1.copy(), train, cfg.finetune, delta, val)

    ckpt = out_dir / "stage2.ckpt"
    save_model(model, ckpt)
    report_path = out_dir / "finetune_report.csv"
    report.to_csv(report_path)
    test_path = out_dir / "test.csv"
    test = _inside(test, cfg)
    test.to_csv(test_path)
    outputs = [ckpt, report_path, test_path]
    if len(test):
        reports = compare_stages(
            predict_points(stage1, test.xyz, delta),
            predict_points(model, test.xyz, delta),
            test.rsrp_dbm,
        )
        metrics_path = out_dir / "stage_metrics.csv"
        reports_to_frame(reports).to_csv(
            metrics_path, index=False, float_format="%.17g"
        )
        outputs.append(metrics_path)
        for r in reports:
            click.echo(
                f"{r.label}: RMSE {r.rmse_db:.3f} dB, MAE {r.mae_db:.3f} dB, "
                f"R2 {r.r_squared:.3f}"
            )
    for path in outputs:
        manifest.add_output(path)
    manifest.save(out_dir)


@main.command("predict")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Model checkpoint (default: paths.checkpoint).",
)
@click.option(  # type: ignore[misc]
    "--queries",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="CSV with x, y, z columns (default: paths.queries).",
)
@click.option(  # type: ignore[misc]
    "--workers", type=click.IntRange(min=1), default=1, show_default=True
)
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def predict_cmd(
    ctx: click.Context,
    checkpoint: Optional[Path],
    queries: Optional[Path],
    workers: int,
    **overrides: Any,
) -> None:
    """Single-shot transformer estimates at query points."""
    from .manifest import RunManifest
    from .model import load_model, predict_points

    cfg, out_dir = _prepare(ctx, **overrides)
    checkpoint = Path(
        _require(checkpoint or cfg.paths.checkpoint, "--checkpoint")
    )
    queries = Path(_require(queries or cfg.paths.queries, "--queries"))
    manifest = RunManifest.start(
        "predict",
        cfg.model_dump(mode="json"),
        _seeds(cfg),
        inputs=[checkpoint, queries],
    )
    model = load_model(checkpoint)
    points = _read_points(queries)
    pred = predict_points(model, points, _delta(cfg), workers=workers)
    target = out_dir / "predictions.csv"
    _write_predictions(target, points, {"rsrp_dbm": pred})
    manifest.add_output(target)
    manifest.save(out_dir)
    click.echo(f"Wrote {len(pred)} predictions to {target}")


@main.command("krige")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--data",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Measurement CSV (default: paths.measurements).",
)
@click.option(  # type: ignore[misc]
    "--queries",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="CSV with x, y, z columns (default: paths.queries).",
)
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def krige_cmd(
    ctx: click.Context,
    data: Optional[Path],
    queries: Optional[Path],
    **overrides: Any,
) -> None:
    """Ordinary kriging estimates at query points."""
    import json

    from .kriging import fit_semivariogram, krige_points
    from .manifest import RunManifest

    cfg, out_dir = _prepare(ctx, **overrides)
    data = Path(_require(data or cfg.paths.measurements, "--data"))
    queries = Path(_require(queries or cfg.paths.queries, "--queries"))
    manifest = RunManifest.start(
        "krige",
        cfg.model_dump(mode="json"),
        _seeds(cfg),
        inputs=[data, queries],
    )
    records = _load_measurements(data, cfg)
    vg = fit_semivariogram(records, cfg.kriging, seed=cfg.seed)
    points = _read_points(queries)
    value, variance = krige_points(points, records, vg, cfg.kriging)
    target = out_dir / "kriging.csv"
    _write_predictions(
        target, points, {"rsrp_dbm": value, "variance": variance}
    )
    vg_path = out_dir / "variogram.json"
    vg_path.write_text(
        json.dumps(
            {
                "model": vg.model,
                "nugget": vg.nugget,
                "sill": vg.sill,
                "range_m": vg.range_m,
            },
            indent=2,
        )
        + "\n"
    )
    for path in (target, vg_path):
        manifest.add_output(path)
    manifest.save(out_dir)
    click.echo(
        f"Kriged {len(value)} points ({vg.model}: nugget {vg.nugget:.3g}, "
        f"sill {vg.sill:.3g}, range {vg.range_m:.3g} m)"
    )


@main.command("correlate")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--data",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Measurement CSV (default: paths.measurements).",
)
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def correlate_cmd(
    ctx: click.Context, data: Optional[Path], **overrides: Any
) -> None:
    """Radial RSRP correlogram within angular bins."""
    from .analysis import radial_correlogram
    from .manifest import RunManifest

    cfg, out_dir = _prepare(ctx, **overrides)
    data = Path(_require(data or cfg.paths.measurements, "--data"))
    manifest = RunManifest.start(
        "correlate", cfg.model_dump(mode="json"), _seeds(cfg), inputs=[data]
    )
    result = radial_correlogram(
        _load_measurements(data, cfg),
        angular_res=cfg.analysis.angular_res,
        radial_bin=cfg.analysis.radial_bin_m,
        normalization=cfg.analysis.normalization,
    )
    csv_path = out_dir / "correlogram.csv"
    json_path = out_dir / "correlogram.json"
    result.to_csv(csv_path)
    result.to_json(json_path)
    for path in (csv_path, json_path):
        manifest.add_output(path)
    manifest.save(out_dir)
    click.echo(
        f"Correlogram over {result.groups_used} angular groups, "
        f"{len(result.lags_m)} lag bins"
    )


@main.command("evaluate")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--pred",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="CSV of predictions.",
)
@click.option(  # type: ignore[misc]
    "--truth",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    required=True,
    help="CSV of measured values, row-aligned with --pred.",
)
@click.option(  # type: ignore[misc]
    "--column",
    default="rsrp_dbm",
    show_default=True,
    help="Value column in both files.",
)
@click.pass_context  # type: ignore[misc]
@_guarded
def evaluate_cmd(
    ctx: click.Context, pred: Path, truth: Path, column: str
) -> None:
    """RMSE, MAE, median-AE and R² of predictions against truth."""
    from .analysis import MetricsReport
    from .manifest import RunManifest

    cfg, out_dir = _prepare(ctx)
    manifest = RunManifest.start(
        "evaluate",
        cfg.model_dump(mode="json"),
        _seeds(cfg),
        inputs=[pred, truth],
    )
    columns = []
    for path in (pred, truth):
        frame = pd.read_csv(path)
        if column not in frame.columns:
            raise DataError(f"{path} has no column {column!r}")
        columns.append(frame[column].to_numpy(dtype=np.float64))
    report = MetricsReport.from_predictions(
        columns[0], columns[1], label=pred.stem
    )
    json_path, csv_path = out_dir / "metrics.json", out_dir / "metrics.csv"
    report.to_json(json_path)
    report.to_csv(csv_path)
    for path in (json_path, csv_path):
        manifest.add_output(path)
    manifest.save(out_dir)
    click.echo(
        f"RMSE {report.rmse_db:.4f} dB, MAE {report.mae_db:.4f} dB, "
        f"median-AE {report.median_ae_db:.4f} dB, R2 {report.r_squared:.4f}"
    )


@main.command("export")  # type: ignore[misc]
@click.option(  # type: ignore[misc]
    "--checkpoint",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Model checkpoint to evaluate on the grid.",
)
@click.option(  # type: ignore[misc]
    "--kriging-data",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Use ordinary kriging over this measurement CSV instead.",
)
@click.option(  # type: ignore[misc]
    "--format",
    "fmt",
    type=click.Choice(["binary", "csv"]),
    help="Grid data format (default: grid.fmt).",
)
@_override_options
@click.pass_context  # type: ignore[misc]
@_guarded
def export_cmd(
    ctx: click.Context,
    checkpoint: Optional[Path],
    kriging_data: Optional[Path],
    fmt: Optional[str],
    **overrides: Any,
) -> None:
    """Write a Cartesian REM grid from a model or kriging."""
    from .manifest import RunManifest
    from .rem_grid import export_rem_grid, write_rem_grid

    cfg, out_dir = _prepare(ctx, **overrides)
    delta = _delta(cfg)
    if kriging_data is not None:
        from .kriging import OrdinaryKriging, fit_semivariogram

        records = _load_measurements(kriging_data, cfg)
        vg = fit_semivariogram(records, cfg.kriging, seed=cfg.seed)
        kriger = OrdinaryKriging(records, vg, cfg.kriging)
        source: Path = kriging_data

        def predictor(points: np.ndarray) -> np.ndarray:
            return kriger.predict(points)[0]

    else:
        from .model import load_model, predict_points

        source = Path(
            _require(checkpoint or cfg.paths.checkpoint, "--checkpoint")
        )
        model = load_model(source)

        def predictor(points: np.ndarray) -> np.ndarray:
            return predict_points(model, points, delta)

    manifest = RunManifest.start(
        "export", cfg.model_dump(mode="json"), _seeds(cfg), inputs=[source]
    )
    grid = export_rem_grid(predictor, cfg.grid, delta)
    header_path, data_path = write_rem_grid(
        grid, out_dir / "rem_grid", fmt or cfg.grid.fmt
    )
    for path in (header_path, data_path):
        manifest.add_output(path)
    manifest.save(out_dir)
    click.echo(f"Wrote REM grid {grid.shape} to {header_path}")


if __name__ == "__main__":
    main()
