"""Command-line entry point.

Subcommands: gen-data, train, eval, ic-test, compare, ablate, sweep.
Every command takes `--config <key-value file>`, `--seed <int>`, and
`--out <dir>`, writes CSV tables plus a summary.json carrying the config
hash and output-file hashes. Outputs are byte-deterministic given the
same config and seed.

Config files are plain `key = value` lines (# comments allowed); values
are parsed as JSON when possible, e.g.::

    n_instances = 55000
    n_ads = 8
    position_weights = [1.0, 0.62]
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import (
    GfpMechanism,
    GspMechanism,
    OracleCtrSource,
    PredictorCtrSource,
    VcgMechanism,
    WvcgMechanism,
    tune_wvcg,
)
from .domain import AuctionConfig, read_jsonl
from .evaluation import (
    IcTestConfig,
    MetricsReport,
    ctr_quality_report,
    evaluate,
    ic_regret,
    run_ablations,
    slate_metrics,
    sweep,
    vcg_reference_swpm,
)
from .mechanism import NeuralMechanism
from .synth import ClickModel, GenSpec, load_click_model, write_dataset
from .training import (
    PRESETS,
    TrainConfig,
    load_model,
    save_model,
    train,
    train_ctr_model,
)


def read_config(path) -> dict:
    """Parse a `key = value` file; values are JSON literals when they parse."""
    out: dict = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {raw.rstrip()}")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = json.loads(value)
            except json.JSONDecodeError:
                out[key] = value
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in keys])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_summary(out: Path, command: str, seed: int, config: dict, files: list[Path]) -> None:
    summary = {
        "command": command,
        "seed": seed,
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "outputs": {f.name: _sha256(f) for f in files if f.exists()},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)


def _load_dataset(data_dir: str, split: str = "test"):
    base = Path(data_dir)
    instances = read_jsonl(base / f"{split}.jsonl")
    model = load_click_model(base / "click_model.json")
    return instances, model


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    base = PRESETS[cfg.get("preset", "default")]
    fields = (
        "temperature",
        "sw_loss_weight",
        "ctr_loss_weight",
        "learning_rate",
        "batch_size",
        "epochs",
        "embed_dim",
        "vocab",
        "att_hidden",
        "max_instances",
        "eval_sample",
    )
    overrides = {k: cfg[k] for k in fields if k in cfg}
    if "list_hidden" in cfg:
        overrides["list_hidden"] = tuple(cfg["list_hidden"])
    if "weight_hidden" in cfg:
        overrides["weight_hidden"] = tuple(cfg["weight_hidden"])
    return replace(base, seed=seed, **overrides)


# -- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: dict, seed: int, out: Path) -> list[Path]:
    auction = AuctionConfig(
        n_ads=int(cfg.get("n_ads", 8)),
        n_slots=int(cfg.get("n_slots", 2)),
        n_organic=int(cfg.get("n_organic", 4)),
        embed_dim=int(cfg.get("embed_dim", 8)),
        max_lists=int(cfg.get("max_lists", 200_000)),
    )
    spec = GenSpec(
        n_instances=int(cfg["n_instances"]),
        config=auction,
        bid_low=float(cfg.get("bid_low", 0.5)),
        bid_high=float(cfg.get("bid_high", 1.5)),
        logging_mechanism=cfg.get("logging_mechanism", "gsp"),
        train_fraction=float(cfg.get("train_fraction", 0.8)),
    )
    model = ClickModel(
        position_weights=tuple(cfg.get("position_weights", (1.0, 0.62)[: auction.n_slots])),
        similarity_penalty=float(cfg.get("similarity_penalty", 0.6)),
        pctr_noise_sigma=float(cfg.get("pctr_noise_sigma", 0.2)),
        n_categories=int(cfg.get("n_categories", 12)),
        n_brands=int(cfg.get("n_brands", 40)),
        seed=int(cfg.get("click_seed", 0)),
    )
    write_dataset(out, spec, model, seed)
    return [out / "train.jsonl", out / "test.jsonl", out / "click_model.json", out / "manifest.json"]


def cmd_train(cfg: dict, seed: int, out: Path) -> list[Path]:
    instances, model = _load_dataset(cfg["data_dir"], "train")
    eval_instances, _ = _load_dataset(cfg["data_dir"], "test")
    config = _train_config(cfg, seed)
    mode = cfg.get("mode", "full")
    if mode == "full":
        result = train(instances, config, eval_instances=eval_instances, click_model=model)
    elif mode == "ctr":
        result = train_ctr_model(instances, config)
    elif mode == "pointwise":
        result = train(instances, replace(config, use_listwise_ctr=False))
    else:
        raise ValueError(f"unknown train mode {mode!r}")
    save_model(out, result)
    write_csv(out / "loss_curve.csv", result.curve)
    return [out / "checkpoint.json", out / "model_meta.json", out / "loss_curve.csv"]


def _mechanism_from_config(name: str, cfg: dict, n_slots: int, click_model, seed: int, instances):
    if name == "gfp":
        return GfpMechanism(n_slots)
    if name == "gsp":
        return GspMechanism(n_slots)
    if name == "vcg":
        source = cfg.get("vcg_ctr_source", "oracle")
        if source == "oracle":
            return VcgMechanism(n_slots, OracleCtrSource(click_model))
        result = load_model(cfg["ctr_model_dir"])
        return VcgMechanism(n_slots, PredictorCtrSource(result.make_predictor()))
    if name == "wvcg":
        result = load_model(cfg["ctr_model_dir"])
        source = PredictorCtrSource(result.make_predictor())
        pool = instances[: int(cfg.get("wvcg_pool", 1500))]
        params = tune_wvcg(pool, source, click_model, n_slots, seed=seed)
        return WvcgMechanism(n_slots, source, params.weights)
    if name == "nma":
        result = load_model(cfg["model_dir"])
        mode = cfg.get("nma_ctr_mode", "listwise")
        return NeuralMechanism(
            result.make_predictor(),
            result.make_weight_net(),
            ctr_mode=mode,
            tie_seed=seed if mode == "pointwise" else None,
        )
    raise ValueError(f"unknown mechanism {name!r}")


def cmd_eval(cfg: dict, seed: int, out: Path) -> list[Path]:
    instances, model = _load_dataset(cfg["data_dir"], cfg.get("split", "test"))
    n_slots = len(instances[0].display)
    name = cfg.get("mechanism", "nma")
    mech = _mechanism_from_config(name, cfg, n_slots, model, seed, instances)
    metrics = evaluate(mech, instances, model)
    write_csv(out / "metrics.csv", [metrics])
    files = [out / "metrics.csv"]
    if name == "nma" and cfg.get("nma_ctr_mode", "listwise") == "listwise":
        result = load_model(cfg["model_dir"])
        quality = ctr_quality_report(result.make_predictor(), instances)
        write_csv(out / "ctr_quality.csv", [quality])
        files.append(out / "ctr_quality.csv")
    return files


def cmd_ic_test(cfg: dict, seed: int, out: Path) -> list[Path]:
    instances, model = _load_dataset(cfg["data_dir"], cfg.get("split", "test"))
    n_slots = len(instances[0].display)
    protocol = IcTestConfig(
        betas=tuple(cfg.get("betas", IcTestConfig().betas)),
        n_auctions=int(cfg.get("n_auctions", 2000)),
        repeats=int(cfg.get("repeats", 20)),
    )
    rows = []
    for name in str(cfg.get("mechanisms", "gfp,vcg,nma")).split(","):
        name = name.strip()
        mech = _mechanism_from_config(name, cfg, n_slots, model, seed, instances)
        report = ic_regret(mech, instances, model, protocol, seed=seed)
        rows.append(
            {
                "mechanism": name,
                "icr_mean": report.mean,
                "icr_std": report.std,
                "repeats": len(report.values),
                "undefined_repeats": report.undefined_repeats,
                "fallback_repeats": report.fallback_repeats,
            }
        )
    write_csv(out / "icr.csv", rows)
    return [out / "icr.csv"]


def cmd_compare(cfg: dict, seed: int, out: Path) -> list[Path]:
    instances, model = _load_dataset(cfg["data_dir"], cfg.get("split", "test"))
    n_slots = len(instances[0].display)
    names = [s.strip() for s in str(cfg.get("mechanisms", "gfp,gsp,vcg,wvcg,nma")).split(",")]
    n_replicates = int(cfg.get("replicates", 5))
    model_dirs = cfg.get("model_dirs")
    report = MetricsReport()
    ref = vcg_reference_swpm(instances, model, n_slots)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2024)))
    shards = [rng.choice(len(instances), size=len(instances), replace=True) for _ in range(n_replicates)]
    for name in names:
        per_rep = []
        for r in range(n_replicates):
            local = dict(cfg)
            if name == "nma" and model_dirs:
                local["model_dir"] = model_dirs[r % len(model_dirs)]
            mech = _mechanism_from_config(name, local, n_slots, model, seed + r, instances)
            shard = [instances[i] for i in shards[r]]
            per_rep.append(evaluate(mech, shard, model, reference_swpm=None))
        report.add(name, per_rep)
    write_csv(out / "comparison.csv", report.rows)
    return [out / "comparison.csv"]


def cmd_ablate(cfg: dict, seed: int, out: Path) -> list[Path]:
    train_instances, model = _load_dataset(cfg["train_data_dir"], "train")
    eval_instances, _ = _load_dataset(cfg.get("eval_data_dir", cfg["train_data_dir"]), "test")
    seeds = tuple(cfg.get("seeds", (0, 1, 2, 3, 4)))
    config = _train_config(cfg, seed)
    report = run_ablations(train_instances, eval_instances, model, config, seeds=seeds)
    write_csv(out / "ablation.csv", report.rows)
    return [out / "ablation.csv"]


def cmd_sweep(cfg: dict, seed: int, out: Path) -> list[Path]:
    train_instances, model = _load_dataset(cfg["train_data_dir"], "train")
    eval_instances, _ = _load_dataset(cfg.get("eval_data_dir", cfg["train_data_dir"]), "test")
    param = cfg.get("param", "sw_loss_weight")
    grid = tuple(cfg.get("grid", (0.1, 0.4, 0.8)))
    config = _train_config(cfg, seed)
    rows = sweep(param, grid, train_instances, eval_instances, model, config)
    write_csv(out / "sweep.csv", rows)
    return [out / "sweep.csv"]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ic-test": cmd_ic_test,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="auctionlab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        if name == "gen-data":
            p.add_argument("--spec", help="alias for --config", dest="spec")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    config_path = args.config or getattr(args, "spec", None)
    if config_path is None:
        parser.error("--config is required")
    cfg = read_config(config_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = COMMANDS[args.command](cfg, args.seed, out)
    write_summary(out, args.command, args.seed, cfg, files)
    print(f"{args.command}: wrote {', '.join(f.name for f in files)} to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
