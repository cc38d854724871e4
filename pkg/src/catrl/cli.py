"""Command-line entry points for the whole pipeline.

Every subcommand accepts ``--config`` (a JSON file of overrides), ``--seed``
and ``--out``, and writes a ``manifest.json`` into the output directory
echoing the fully resolved configuration plus content hashes of its inputs,
so any artifact can be traced back to exactly what produced it.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import click
import numpy as np

from . import bench as bench_mod
from . import figures as figures_mod
from . import ppo as ppo_mod
from .calibration import CalibrationConfig, ItemBank, calibrate_bank
from .calibration import true_bank as make_true_bank
from .env import EnvConfig, NearestItem
from .irt import Dataset, PriorConfig, generate_dataset
from .nnet import NetConfig, Policy
from .service import ServiceConfig, SessionService, build_app

__version__ = "0.1.0"


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _hash_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_manifest(out_dir: Path, command: str, resolved: dict,
                    inputs: dict[str, str] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "resolved_config": resolved,
        "input_hashes": {name: _hash_file(p) for name, p in (inputs or {}).items()},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _prior_from(cfg: dict) -> PriorConfig:
    return PriorConfig(**cfg.get("prior", {}))


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Adaptive-testing toolkit: data, training, calibration, benchmarks, serving."""


@main.command("generate-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON overrides (prior, counts).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--students", type=int, default=200, show_default=True)
@click.option("--items", type=int, default=50, show_default=True)
def generate_data(config_path, seed, out_dir, students, items) -> None:
    """Sample a synthetic dataset and write it as a self-describing file."""
    cfg = _load_config(config_path)
    prior = _prior_from(cfg)
    students = cfg.get("num_students", students)
    items = cfg.get("num_items", items)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    dataset = generate_dataset(prior, students, items, rng, seed=seed)
    dataset.save(out / "dataset.json")
    _write_manifest(out, "generate-data", {
        "seed": seed, "num_students": students, "num_items": items,
        "prior": prior.to_dict(), "dataset_hash": dataset.content_hash(),
    })
    click.echo(f"wrote {out / 'dataset.json'} ({students}x{items})")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON overrides for env/ppo/net sections.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--policy", "policy_kind", type=click.Choice(["adaptive", "non-adaptive"]),
              default="adaptive", show_default=True,
              help="non-adaptive conceals outcomes during training.")
@click.option("--updates", type=int, default=None, help="Override total PPO updates.")
def train(config_path, seed, out_dir, policy_kind, updates) -> None:
    """Train a policy with PPO and write checkpoints plus a stats stream."""
    cfg = _load_config(config_path)
    env_section = dict(cfg.get("env", {}))
    env_section.setdefault("conceal_outcomes", policy_kind == "non-adaptive")
    if policy_kind == "non-adaptive":
        env_section["conceal_outcomes"] = True
    env_config = ppo_mod.env_config_from_dict(env_section)
    ppo_kwargs = dict(cfg.get("ppo", {}))
    if updates is not None:
        ppo_kwargs["total_updates"] = updates
    ppo_config = ppo_mod.PpoConfig(**ppo_kwargs)
    net_config = NetConfig(**cfg.get("net", {}))
    out = Path(out_dir)
    _write_manifest(out, "train", {
        "seed": seed, "policy": policy_kind,
        "env": ppo_mod.env_config_to_dict(env_config),
        "ppo": ppo_config.to_dict(), "net": net_config.to_dict(),
    })

    progress = None
    if not cfg.get("quiet"):
        def progress(s):  # noqa: ANN001
            if s.update % 50 == 0 or s.update == ppo_config.total_updates - 1:
                click.echo(f"update {s.update}: return {s.mean_return:.2f} "
                           f"final_mse {s.final_mse:.3f} ({s.wall_clock_s:.0f}s)")
    ppo_mod.train(env_config, ppo_config, seed, net_config=net_config,
                  out_dir=out, progress=progress)
    click.echo(f"checkpoint: {out / 'checkpoint_final.npz'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for mini-batched calibration.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), required=True)
def calibrate(config_path, seed, out_dir, dataset_path) -> None:
    """Fit item difficulties by MLE and write the item bank."""
    cfg = _load_config(config_path)
    cal_config = CalibrationConfig(seed=seed, **cfg.get("calibration", {}))
    dataset = Dataset.load(dataset_path)
    bank = calibrate_bank(dataset, cal_config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bank.save(out / "itembank.json")
    _write_manifest(out, "calibrate", {
        "calibration": cal_config.to_dict(), "dataset": str(dataset_path),
    }, inputs={"dataset": dataset_path})
    rmse = float(np.sqrt(np.mean((bank.difficulties - dataset.difficulties) ** 2)))
    click.echo(f"wrote {out / 'itembank.json'} (RMSE vs true difficulties: {rmse:.3f})")


def _benchmark_config_from(cfg: dict, kind: str) -> bench_mod.BenchmarkConfig:
    section = dict(cfg.get("benchmark", {}))
    preset = section.pop("preset", None)
    if "prior" in cfg:
        section["prior"] = PriorConfig(**cfg["prior"])
    if "calibration" in section:
        section["calibration"] = CalibrationConfig(**section["calibration"])
    checkpoints = {int(k): v for k, v in cfg.get("checkpoints", {}).get(kind, {}).items()}
    estimators = {int(k): v for k, v in cfg.get("checkpoints", {}).get("adaptive", {}).items()}
    section["checkpoints"] = checkpoints
    section["estimator_checkpoints"] = estimators
    if "seeds" in section:
        section["seeds"] = tuple(section["seeds"])
    if preset == "desk":
        return bench_mod.desk_scale_config(policy_kind=kind, **section)
    return bench_mod.BenchmarkConfig(policy_kind=kind, **section)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True,
              help="JSON with checkpoints mapping and benchmark settings.")
@click.option("--seed", type=int, default=None,
              help="Restrict to a single training seed.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--kind", "kinds", multiple=True,
              type=click.Choice(list(bench_mod.POLICY_KINDS)),
              help="Policy kinds to evaluate (default: all three).")
def benchmark(config_path, seed, out_dir, kinds) -> None:
    """Run the evaluation protocol and write records plus a summary table."""
    cfg = _load_config(config_path)
    kinds = kinds or bench_mod.POLICY_KINDS
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    resolved = {}
    for kind in kinds:
        bench_config = _benchmark_config_from(cfg, kind)
        if seed is not None:
            object.__setattr__(bench_config, "seeds", (seed,))
        result = bench_mod.run_benchmark(bench_config)
        result.write_records_csv(out / f"records_{kind}.csv")
        summaries[kind] = result.summary()
        resolved[kind] = {
            "num_datasets": bench_config.num_datasets,
            "episodes_per_dataset": bench_config.episodes_per_dataset,
            "seeds": list(bench_config.seeds),
            "use_true_bank": bench_config.use_true_bank,
        }
        click.echo(f"{kind}: MSE {summaries[kind]['mse_mean']:.3f} "
                   f"+/- {summaries[kind]['mse_stderr']:.3f} (stderr over seeds)")
    (out / "summary.json").write_text(json.dumps(summaries, indent=1) + "\n")
    _write_manifest(out, "benchmark", {"kinds": list(kinds), "benchmark": resolved})


@main.command("export-figures")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True,
              help="Same config as `benchmark` (checkpoints and settings).")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--stats", "stats_paths", multiple=True, type=click.Path(exists=True),
              help="Training stats CSVs, one per seed (panel f).")
@click.option("--render/--no-render", default=True, show_default=True,
              help="Also render PNG figures from the panel data.")
def export_figures(config_path, seed, out_dir, stats_paths, render) -> None:
    """Export per-panel figure data files (and render them to PNGs)."""
    cfg = _load_config(config_path)
    out = Path(out_dir)
    results = {}
    example_batch = None
    for kind in bench_mod.POLICY_KINDS:
        bench_config = _benchmark_config_from(cfg, kind)
        if seed is not None:
            object.__setattr__(bench_config, "seeds", (seed,))
        results[kind] = bench_mod.run_benchmark(bench_config)
        click.echo(f"{kind}: MSE {results[kind].mse_mean:.3f}")
        if kind == "adaptive":
            dataset = bench_mod.evaluation_dataset(bench_config, 0)
            bank = calibrate_bank(dataset, bench_config.calibration)
            env_config = EnvConfig(
                horizon=bench_config.horizon, prior=bench_config.prior,
                corruption=NearestItem(bank=tuple(bank.difficulties)),
                design_clip=bench_config.design_clip,
            )
            policy = Policy.load(bench_config.policy_path(bench_config.seeds[0]))
            example_batch = bench_mod.run_episode_batch(
                policy, env_config, 1,
                np.random.default_rng(np.random.SeedSequence([17, bench_config.seeds[0]])))
    stats_by_seed = [ppo_mod.read_stats_csv(p) for p in stats_paths]
    paths = bench_mod.export_figures(out, results=results, example_batch=example_batch,
                                     stats_by_seed=stats_by_seed or None)
    _write_manifest(out, "export-figures", {
        "stats": list(stats_paths), "panels": {k: str(p) for k, p in paths.items()},
    })
    if render:
        written = figures_mod.render_panels(out)
        click.echo(f"rendered {len(written)} figures into {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None)
@click.option("--persist-dir", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--horizon", type=int, default=10, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True), default=None,
              help="Directory with the built web console; mounted at /ui.")
def serve(config_path, checkpoint, bank_path, persist_dir, host, port, horizon,
          ui_dir) -> None:
    """Run the live adaptive-testing session service."""
    import uvicorn

    cfg = _load_config(config_path).get("service", {})
    service_config = ServiceConfig(
        checkpoint_path=checkpoint or cfg["checkpoint_path"],
        bank_path=bank_path or cfg["bank_path"],
        horizon=cfg.get("horizon", horizon),
        persist_dir=persist_dir or cfg.get("persist_dir"),
        host=cfg.get("host", host),
        port=cfg.get("port", port),
    )
    service = SessionService.from_config(service_config)
    app = build_app(service, ui_dir=ui_dir or cfg.get("ui_dir"))
    click.echo(f"serving on http://{service_config.host}:{service_config.port}")
    uvicorn.run(app, host=service_config.host, port=service_config.port, log_level="info")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None,
              help="Item bank file; omit with --dataset to calibrate on the fly.")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--true-bank", is_flag=True, default=False,
              help="With --dataset, use true difficulties instead of MLE estimates.")
@click.option("--episodes", type=int, default=10, show_default=True)
def simulate(config_path, seed, out_dir, checkpoint, bank_path, dataset_path,
             true_bank, episodes) -> None:
    """Replay scripted episodes against a bank and export step-level traces."""
    cfg = _load_config(config_path)
    if bank_path is not None:
        bank = ItemBank.load(bank_path)
    elif dataset_path is not None:
        dataset = Dataset.load(dataset_path)
        bank = make_true_bank(dataset) if true_bank else calibrate_bank(dataset)
    else:
        raise click.UsageError("provide --bank or --dataset")
    policy = Policy.load(checkpoint)
    prior = _prior_from(cfg)
    env_config = EnvConfig(
        horizon=cfg.get("horizon", 10), prior=prior,
        corruption=NearestItem(bank=tuple(bank.difficulties)),
        design_clip=tuple(cfg.get("design_clip", (-6.0, 6.0))),
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    batch = bench_mod.run_episode_batch(policy, env_config, episodes, rng)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .env import write_trace_csv
    rows = []
    for e in range(episodes):
        rows.extend(bench_mod.episode_trace_rows(batch, e))
    write_trace_csv(rows, out / "traces.csv")
    mse = float(np.mean((batch["true_abilities"] - batch["final_estimates"]) ** 2))
    _write_manifest(out, "simulate", {
        "seed": seed, "episodes": episodes, "checkpoint": str(checkpoint),
        "horizon": env_config.horizon, "final_mse": mse,
    }, inputs={"checkpoint": checkpoint})
    click.echo(f"wrote {out / 'traces.csv'} (final-step MSE {mse:.3f})")
