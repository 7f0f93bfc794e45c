import functools
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
import pandas as pd
from dotenv import load_dotenv
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from battery.constraints import BatteryError, BatterySpec
from loads.catalog import read_loads
from loads.model import DiscreteLoadModel, LoadModelError, simulate_switched, step_response_metrics
from scheduler.optimizer import ForecastSeries, resolve_workers
from scheduler.receding import receding_horizon_run
from simulation.forecast import ForecastError, gen_solar_curve, load_forecast_csv, write_forecast_csv
from simulation.trace import read_summary, read_trace, summarize, validate_trace, write_trace
from switching.switchset import (
    HorizonConfig,
    HorizonError,
    LoadSwitchState,
    admissible_trajectories,
    brute_force_trajectories,
    cardinality_bound,
    cardinality_bound_check,
)
from utils.config import ConfigError, RunConfig, load_run_config
from utils.logging import add_file_handler, exception, get_logger, remove_handler, setup_logging

EXIT_INPUT = 2
EXIT_RUNTIME = 3

_INPUT_ERRORS = (ConfigError, ForecastError, LoadModelError, HorizonError, BatteryError)
_DEFAULT_LOADS = Path(__file__).resolve().parent / "config" / "loads_reference.json"


def _cli_errors(func):
    """Map input errors to exit 2 and anything else to exit 3, logging instead of dumping tracebacks."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        log = get_logger("cli", command=func.__name__)
        debug = logging.getLogger().isEnabledFor(logging.DEBUG)
        try:
            return func(*args, **kwargs)
        except _INPUT_ERRORS as exc:
            log.error("Invalid input", error=str(exc), exc_info=debug)
            sys.exit(EXIT_INPUT)
        except (click.exceptions.Exit, click.ClickException, SystemExit):
            raise
        except Exception as exc:
            if debug:
                exception(log, "Command failed", error=f"{type(exc).__name__}: {exc}")
            else:
                log.error("Command failed", error=f"{type(exc).__name__}: {exc}")
            sys.exit(EXIT_RUNTIME)

    return wrapper


def _build_forecast(cfg: RunConfig) -> ForecastSeries:
    if cfg.forecast_csv is not None:
        return load_forecast_csv(cfg.forecast_csv, cfg.horizon.fine_dt_s)
    syn = cfg.synthetic
    return gen_solar_curve(
        syn.duration_s, syn.peak_pu, syn.seed, syn.noise_level, dt_s=cfg.horizon.fine_dt_s
    )


@click.group()
@click.option("--log-level", default=None, help="Log level (default: LOG_LEVEL or INFO)")
def cli(log_level):
    """Dynamic load scheduling against a power forecast with battery constraints."""
    load_dotenv()
    setup_logging(log_level)


@cli.command("demo-loads")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Run config; its loads file replaces --loads")
@click.option("--loads", "loads_path", type=click.Path(dir_okay=False, path_type=Path), default=_DEFAULT_LOADS,
              show_default=True, help="Loads JSON file")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=Path("out/demo"),
              show_default=True, help="Output directory")
@click.option("--on-s", default=0.0, show_default=True, help="Switch-on time in seconds")
@click.option("--off-s", default=1200.0, show_default=True, help="Switch-off time in seconds")
@click.option("--duration-s", default=2400.0, show_default=True, help="Trace length in seconds")
@click.option("--dt-s", default=1.0, show_default=True, help="Fine time step in seconds")
@_cli_errors
def demo_loads(config_path, loads_path, out_dir, on_s, off_s, duration_s, dt_s):
    """Apply one switch signal to every load and record the power responses."""
    log = get_logger("cli.demo")
    if config_path is not None:
        loads_path = load_run_config(config_path).loads_path
    if not 0 <= on_s < off_s <= duration_s:
        raise ConfigError(f"Need 0 <= on_s < off_s <= duration_s, got {on_s}, {off_s}, {duration_s}")
    started = time.perf_counter()
    specs = read_loads(loads_path)
    t = np.arange(int(round(duration_s / dt_s))) * dt_s
    w = ((t >= on_s) & (t < off_s)).astype(np.int8)
    on_mask = w.astype(bool)

    frame = pd.DataFrame({"t_s": t, "w": w})
    metrics = []
    for spec in specs:
        model = DiscreteLoadModel.from_spec(spec, dt_s)
        p = simulate_switched(model, w)
        frame[f"p_{spec.id}_pu"] = p
        m = step_response_metrics(t[on_mask] - on_s, p[on_mask], spec.size_pu)
        metrics.append({
            "id": spec.id,
            "size_pu": spec.size_pu,
            "peak_pu": m.peak_pu,
            "overshoot": m.overshoot,
            "settle_time_s": m.settle_time_s,
            "final_pu": m.final_pu,
            "dominant_time_constant_s": spec.dominant_time_constant_s,
        })
    runtime = time.perf_counter() - started

    out_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_dir / "loads_demo.csv", index=False)
    report = {"on_s": on_s, "off_s": off_s, "duration_s": duration_s, "loads": metrics, "runtime_s": runtime}
    (out_dir / "loads_demo.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    log.info("Load demo written", path=str(out_dir), loads=len(specs), runtime_s=runtime)
    click.echo(json.dumps(report, indent=2))


@cli.command("enumerate")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Run config; its loads and horizon are used")
@click.option("--loads", "loads_path", type=click.Path(dir_okay=False, path_type=Path), default=_DEFAULT_LOADS,
              show_default=True, help="Loads JSON file when no config is given")
@click.option("--verify", is_flag=True, help="Check every per-load set against a brute-force filter")
@_cli_errors
def enumerate_cmd(config_path, loads_path, verify):
    """Print admissible trajectory counts and the (2^n)^(N-1) bound check as JSON."""
    if config_path is not None:
        cfg = load_run_config(config_path)
        specs, horizon = read_loads(cfg.loads_path), cfg.horizon
    else:
        specs, horizon = read_loads(loads_path), HorizonConfig()
    dwell = horizon.validate_loads(specs)
    states = [LoadSwitchState.initial(s.id, on, off) for s, (on, off) in zip(specs, dwell)]
    per_load = [admissible_trajectories(st, horizon) for st in states]
    counts = [len(t) for t in per_load]
    total = int(np.prod(counts))
    report = {
        "n_loads": len(specs),
        "n_steps": horizon.n_steps,
        "dwell_steps": [list(d) for d in dwell],
        "per_load_counts": {str(s.id): c for s, c in zip(specs, counts)},
        "total": total,
        "bound": cardinality_bound(len(specs), horizon.n_steps),
        "below_bound": cardinality_bound_check(total, len(specs), horizon.n_steps),
    }
    if verify:
        report["verified"] = all(
            brute_force_trajectories(st, horizon) == trajs for st, trajs in zip(states, per_load)
        )
    click.echo(json.dumps(report, indent=2))
    if verify and not report["verified"]:
        sys.exit(EXIT_RUNTIME)


@cli.command("run")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), required=True,
              help="Run config JSON")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (overrides config and SCHED_OUTPUT_DIR)")
@click.option("--workers", type=int, default=None, help="Worker threads; 0 means one per CPU")
@click.option("--seed", type=int, default=None, help="Seed for a synthetic forecast")
@click.option("--soc-init", type=float, default=None, help="Initial state of charge")
@_cli_errors
def run_cmd(config_path, out_dir, workers, seed, soc_init):
    """Closed-loop receding-horizon simulation; writes trace.csv, steps.csv and summary.json."""
    log = get_logger("cli.run")
    cfg = load_run_config(
        config_path, {"output_dir": out_dir, "workers": workers, "seed": seed, "soc_init": soc_init}
    )
    cfg.check_files()
    specs = read_loads(cfg.loads_path)
    forecast = _build_forecast(cfg)

    file_handler = add_file_handler(cfg.output_dir / "run.log")
    try:
        log.info(
            "Run configured",
            loads=len(specs),
            samples=len(forecast),
            workers=resolve_workers(cfg.workers),
            output_dir=str(cfg.output_dir),
        )
        with Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            disable=not sys.stderr.isatty(),
            transient=True,
        ) as progress:
            task = progress.add_task("control steps", total=len(forecast) // cfg.horizon.steps_per_ctrl)
            solution = receding_horizon_run(
                forecast,
                specs,
                cfg.battery,
                cfg.horizon,
                soc_init=cfg.soc_init,
                workers=cfg.workers,
                pad_forecast=cfg.pad_forecast,
                step_budget_s=cfg.step_budget_s,
                on_step=lambda done, total: progress.update(task, completed=done, total=total),
            )

        summary = summarize(
            solution.trace,
            cfg.battery,
            soc_init=cfg.soc_init,
            dwell_steps=solution.dwell_steps,
            step_budget_s=cfg.step_budget_s,
        )
        write_trace(solution.trace, cfg.output_dir, summary)
        issues = validate_trace(
            solution.trace, s_norm=cfg.battery.s_norm, soc_init=cfg.soc_init, dwell_steps=solution.dwell_steps
        )
        for issue in issues:
            log.warning("Trace check failed", issue=issue)
        if summary["runtime_budget_exceeded"]:
            log.warning("Median step time above three times the budget", median_s=summary["median_step_time_s"])
        log.info(
            "Run summary",
            min_soc=summary["min_soc"],
            max_soc=summary["max_soc"],
            max_abs_e=summary["max_abs_e"],
            wall_time_s=summary["total_wall_time_s"],
        )
    finally:
        remove_handler(file_handler)
    if issues:
        sys.exit(EXIT_RUNTIME)


@cli.command("gen-forecast")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=Path("forecast.csv"),
              show_default=True, help="Output CSV file")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Take the synthetic block and fine step from a run config")
@click.option("--duration-s", type=float, default=14400.0, show_default=True)
@click.option("--peak-pu", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=None, help="Noise seed (default 42, or the config's)")
@click.option("--noise-level", type=float, default=0.1, show_default=True)
@click.option("--dt-s", type=float, default=1.0, show_default=True)
@_cli_errors
def gen_forecast(out_path, config_path, duration_s, peak_pu, seed, noise_level, dt_s):
    """Write a synthetic solar forecast as time_s,power_pu."""
    if config_path is not None:
        cfg = load_run_config(config_path, {"seed": seed})
        if cfg.synthetic is None:
            raise ConfigError("Config forecast has no 'synthetic' block")
        series = _build_forecast(cfg)
    else:
        series = gen_solar_curve(duration_s, peak_pu, 42 if seed is None else seed, noise_level, dt_s=dt_s)
    write_forecast_csv(series, out_path)
    click.echo(str(out_path))


@cli.command("check")
@click.option("--trace-dir", type=click.Path(file_okay=False, path_type=Path), required=True,
              help="Directory holding trace.csv, steps.csv and summary.json")
@_cli_errors
def check_cmd(trace_dir):
    """Re-validate a written trace: column arithmetic and dwell times."""
    log = get_logger("cli.check")
    trace = read_trace(trace_dir)
    cfg = read_summary(trace_dir).get("config", {})
    battery = BatterySpec.from_mapping(cfg.get("battery", {}))
    dwell = [(d["n_on_min"], d["n_off_min"]) for d in cfg.get("loads", [])] or None
    issues = validate_trace(trace, s_norm=battery.s_norm, soc_init=cfg.get("soc_init"), dwell_steps=dwell)
    for issue in issues:
        click.echo(issue)
    if issues:
        log.warning("Trace has issues", count=len(issues), path=str(trace_dir))
        sys.exit(EXIT_RUNTIME)
    log.info("Trace is consistent", path=str(trace_dir), samples=trace.n_fine, steps=trace.n_steps)


if __name__ == "__main__":
    cli()
