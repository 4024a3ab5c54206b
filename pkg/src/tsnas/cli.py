"""Command-line front end: search, train, eval, export-arch, gen-synthetic, gradcheck.

Every run is driven by a JSON config whose defaults are materialized into
the artifacts it writes.  Relative output directories resolve against
``$TSNAS_OUTPUT_ROOT`` (default: the working directory).

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure,
3 checkpoint/config hash mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .data import (
    ETT_FRACTIONS,
    from_manifest,
    gen_synthetic,
    load_csv,
    make_windows,
    short_term_windows,
)
from .errors import ConfigError, NumericError, TsnasError
from .hypernet import HyperNetwork
from .metrics import MetricsReport, evaluate_forecast, mean_report
from .nnops import ForecastModel, ModelConfig
from .search import (
    SearchConfig,
    ab_darts_search,
    darts_search,
    predict_dataset,
    train_subnet,
)
from .searchspace import (
    SLOTS,
    ArchitectureSpec,
    BlockSpec,
    SearchSpaceConfig,
    parse_spec,
    reduced_space,
    serialize_spec,
)
from .serialization import (
    config_hash,
    dumps,
    load_checkpoint,
    save_checkpoint,
    write_json,
)

log = logging.getLogger("tsnas")

OUTPUT_ROOT_ENV = "TSNAS_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_HASH = 0, 1, 2, 3


class HashMismatch(TsnasError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "csv"
    path: str | None = None
    schema: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=lambda: {"kind": "sines", "length": 2000, "channels": 1,
                                                     "seed": 0, "params": {}})
    protocol: str = "long"  # "long" (chronological splits) or "short" (final-window test)
    split_fractions: list = field(default_factory=lambda: list(ETT_FRACTIONS))
    periodicity: int = 1

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("data.path is required when data.source is 'csv'")
        if self.protocol not in ("long", "short"):
            raise ConfigError(f"data.protocol must be 'long' or 'short', got {self.protocol!r}")


@dataclass
class RunConfig:
    model: ModelConfig
    search: SearchConfig
    data: DataConfig
    space: str | dict = "full"
    algo: str = "abdarts"
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "search": self.search.to_dict(),
            "data": {f.name: getattr(self.data, f.name) for f in fields(DataConfig)},
            "space": self.space,
            "algo": self.algo,
            "seeds": list(self.seeds),
            "output": self.output,
        }

    def hash(self) -> str:
        # neither the output location nor the seed list changes a single run's
        # results; each artifact records its own seed
        d = self.to_dict()
        d.pop("output")
        d.pop("seeds")
        return config_hash(d)

    def space_config(self) -> SearchSpaceConfig:
        if isinstance(self.space, str):
            return reduced_space(self.space)
        return SearchSpaceConfig.from_dict(self.space)


def _section(cls, obj, name):
    if obj is None:
        obj = {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad {name!r} section: {exc}") from None


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return run_config_from_dict(raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"model", "search", "data", "space", "algo", "seeds", "output"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {', '.join(unknown)}")
    cfg = RunConfig(
        model=_section(ModelConfig, raw.get("model"), "model"),
        search=_section(SearchConfig, raw.get("search"), "search"),
        data=_section(DataConfig, raw.get("data"), "data"),
        space=raw.get("space", "full"),
        algo=raw.get("algo", "abdarts"),
        seeds=list(raw.get("seeds", [0])),
        output=raw.get("output", "runs"),
    )
    if cfg.algo not in ("abdarts", "darts"):
        raise ConfigError(f"algo must be 'abdarts' or 'darts', got {cfg.algo!r}")
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    cfg.space_config()
    return cfg


def output_dir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.output)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def provenance(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.hash(), "seed": seed, "code_version": __version__}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_series(cfg: RunConfig):
    d = cfg.data
    if d.source == "csv":
        return load_csv(d.path, d.schema)
    return from_manifest(d.synthetic)


def load_splits(cfg: RunConfig) -> dict:
    series = load_series(cfg)
    m = cfg.model
    if series.num_channels != m.num_channels:
        raise ConfigError(f"data has {series.num_channels} channels, model.num_channels is {m.num_channels}")
    if cfg.data.protocol == "short":
        if m.lookback != 2 * m.horizon:
            raise ConfigError(f"short-term protocol needs lookback = 2 * horizon, got {m.lookback} and {m.horizon}")
        return short_term_windows(series, m.horizon)
    splits = make_windows(series, m.lookback, m.horizon, cfg.data.split_fractions)
    for name in ("train", "val", "test"):
        if name not in splits:
            raise ConfigError(f"split fractions leave no {name} span")
    return splits


def report_on_test(model, splits: dict, cfg: RunConfig) -> MetricsReport:
    test = splits["test"]
    pred = predict_dataset(model, test)
    if cfg.data.protocol == "short":
        # percentage metrics are taken on the original scale
        return evaluate_forecast(test.denormalize(test.targets), test.denormalize(pred),
                                 test.denormalize(test.inputs),
                                 cfg.data.periodicity, short_term=True)
    return evaluate_forecast(test.targets, pred)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    cfg = load_run_config(args.config)
    if args.algo:
        cfg.algo = args.algo
    if args.space:
        cfg.space = args.space
        cfg.space_config()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    seed = cfg.seeds[0]
    out = output_dir(cfg, args.out)
    splits = load_splits(cfg)
    search_cfg = SearchConfig(**{**cfg.search.to_dict(), "seed": seed})
    model = HyperNetwork(cfg.model, cfg.space_config(), seed=seed)
    prov = provenance(cfg, seed)
    trace_path = out / "trace.jsonl"
    t0 = time.perf_counter()
    try:
        if cfg.algo == "abdarts":
            spec, trace = ab_darts_search(model, splits["train"], splits["val"], search_cfg, trace_path=trace_path)
        else:
            spec, trace = darts_search(model, splits["train"], splits["val"], search_cfg)
            trace_path.write_text(trace.to_jsonl())
    except NumericError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            write_json(out / "summary.json", {**prov, "status": "numeric_failure", "error": str(exc),
                                              "records": len(partial.records)})
        raise
    search_seconds = time.perf_counter() - t0
    timings = {k: trace.timings[k] for k in ("supernet_train", "scoring", "recovery")}
    arch = {**json.loads(serialize_spec(spec)), **prov}
    (out / "architecture.json").write_text(dumps(arch) + "\n")
    save_checkpoint(out / "supernet.npz", model.state_dict(),
                    {**prov, "kind": "hypernetwork", "config": cfg.to_dict()})
    summary = {**prov, "algo": cfg.algo, "status": "ok", "architecture": json.loads(serialize_spec(spec)),
               "records": len(trace.records), "scoring_events": trace.scoring_events(),
               "optimizer_steps": trace.timings.get("optimizer_steps", 0), "config": cfg.to_dict()}
    if not args.no_retrain:
        result = train_subnet(spec, splits["train"], splits["val"], search_cfg, cfg.model, seed=seed)
        timings["retrain"] = result.seconds
        report = report_on_test(result.model, splits, cfg)
        summary["retrain"] = {"val_mse": result.report.mse, "steps": result.steps,
                              "best_evaluation": result.best_evaluation, "test": report.to_dict()}
        save_checkpoint(out / "subnet.npz", result.model.state_dict(), _subnet_meta(cfg, seed, spec))
    timings["search_total"] = search_seconds
    timings["total"] = sum(v for k, v in timings.items() if k not in ("search_total", "total"))
    summary["timings"] = timings
    write_json(out / "summary.json", summary)
    print(serialize_spec(spec))
    return EXIT_OK


def _subnet_meta(cfg: RunConfig, seed: int, spec: ArchitectureSpec) -> dict:
    return {**provenance(cfg, seed), "kind": "subnetwork", "architecture": json.loads(serialize_spec(spec)),
            "config": cfg.to_dict()}


def read_architecture(path) -> ArchitectureSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read architecture {path}: {exc}") from None
    obj = json.loads(text) if text.strip().startswith("{") else None
    if isinstance(obj, dict):
        text = json.dumps({"blocks": obj.get("blocks")})
    return parse_spec(text)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    spec = read_architecture(args.arch)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if len(spec.blocks) != cfg.model.num_blocks:
        log.info("architecture has %d blocks; overriding model.num_blocks", len(spec.blocks))
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), "num_blocks": len(spec.blocks)})
    out = output_dir(cfg, args.out)
    splits = load_splits(cfg)
    reports = []
    for seed in cfg.seeds:
        result = train_subnet(spec, splits["train"], splits["val"], cfg.search, cfg.model, seed=seed)
        report = report_on_test(result.model, splits, cfg)
        reports.append(report)
        save_checkpoint(out / f"model_seed{seed}.npz", result.model.state_dict(), _subnet_meta(cfg, seed, spec))
        write_json(out / f"metrics_seed{seed}.json",
                   {**provenance(cfg, seed), "split": "test", "val_mse": result.report.mse,
                    "steps": result.steps, "metrics": report.to_dict()})
        log.info("seed %d test mse %.6f", seed, report.mse)
    mean = mean_report(reports)
    write_json(out / "metrics_mean.json", {"config_hash": cfg.hash(), "seeds": cfg.seeds,
                                           "code_version": __version__, "architecture_source": str(args.arch),
                                           "metrics": mean.to_dict()})
    print(mean.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    state, meta = load_checkpoint(args.checkpoint)
    if meta.get("kind") != "subnetwork":
        raise ConfigError(f"{args.checkpoint} is not a sub-network checkpoint")
    stored = meta.get("config_hash")
    spec = parse_spec(json.dumps(meta["architecture"]))
    cfg.model = ModelConfig(**{**cfg.model.to_dict(), "num_blocks": len(spec.blocks)})
    if stored != cfg.hash():
        raise HashMismatch(f"checkpoint config hash {stored} does not match config hash {cfg.hash()}")
    model = ForecastModel(cfg.model, spec, seed=int(meta.get("seed", 0)))
    model.load_state_dict(state)
    report = report_on_test(model, load_splits(cfg), cfg)
    payload = {"config_hash": stored, "seed": meta.get("seed"), "code_version": __version__,
               "split": "test", "metrics": report.to_dict()}
    if args.out:
        write_json(output_dir(cfg, args.out) / "eval.json", payload)
    print(dumps(payload))
    return EXIT_OK


def spec_from_trace(path) -> ArchitectureSpec:
    """Rebuild the searched architecture from the chosen ops in a trace file."""
    choices: dict = {}
    shared: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read trace {path}: {exc}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            where, slot = rec["node"].split(".")
            chosen = rec["chosen"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: line {n}: malformed trace record ({exc})") from None
        value = float(chosen) if slot == "k" else chosen
        if where == "shared":
            shared[slot] = value
        else:
            choices.setdefault(int(where.removeprefix("block")), {})[slot] = value
    if shared:
        blocks = [shared]
    else:
        blocks = [choices[b] for b in sorted(choices)]
    for i, b in enumerate(blocks):
        missing = [s for s in SLOTS if s not in b]
        if missing:
            raise ConfigError(f"{path}: block {i} missing decisions for {', '.join(missing)}")
    return ArchitectureSpec(tuple(BlockSpec(**b) for b in blocks))


def cmd_export_arch(args) -> int:
    src = Path(args.source)
    if src.suffix == ".jsonl":
        spec = spec_from_trace(src)
        if args.num_blocks and len(spec.blocks) == 1:
            spec = ArchitectureSpec(spec.blocks * args.num_blocks)
    elif src.suffix == ".npz":
        _, meta = load_checkpoint(src)
        if "architecture" not in meta:
            raise ConfigError(f"{src} does not carry an architecture")
        spec = parse_spec(json.dumps(meta["architecture"]))
    else:
        spec = read_architecture(src)
    text = serialize_spec(spec)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from None
    series = gen_synthetic(args.kind, args.length, args.channels, args.seed, params)
    out = Path(args.out)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    out.parent.mkdir(parents=True, exist_ok=True)
    series.to_csv(out)
    manifest = {**series.manifest, "config_hash": config_hash(series.manifest), "code_version": __version__}
    write_json(out.with_suffix(".manifest.json"), manifest)
    print(dumps(manifest))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results, seconds = run_suite(instances=args.instances, seed=args.seed, h=args.h, tol=args.tol,
                                 include_hypernet=not args.skip_hypernet)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.max_error:.3e}")
    print(f"{len(results)} cases, {seconds:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsnas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", help="run an architecture search and retrain the result")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--algo", choices=("abdarts", "darts"), help="override the config's search algorithm")
    p.add_argument("--space", choices=("full", "s1", "s2", "s3", "s4"), help="override the search space")
    p.add_argument("--seed", type=int, help="override the first config seed")
    p.add_argument("--out", help="output directory (relative paths resolve under $TSNAS_OUTPUT_ROOT)")
    p.add_argument("--no-retrain", action="store_true", help="skip retraining the searched architecture")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train an architecture for every configured seed")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--arch", required=True, help="architecture JSON (may come from another task)")
    p.add_argument("--seeds", help="comma-separated seeds overriding the config")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint on the test split")
    p.add_argument("--config", required=True, help="run config JSON the checkpoint was trained with")
    p.add_argument("--checkpoint", required=True, help="sub-network checkpoint (.npz)")
    p.add_argument("--out", help="directory for eval.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-arch", help="write a canonical architecture JSON")
    p.add_argument("source", help="architecture JSON, trace.jsonl or sub-network checkpoint")
    p.add_argument("--num-blocks", type=int, help="replicate a shared (micro) decision over this many blocks")
    p.add_argument("--out", help="file to write")
    p.set_defaults(func=cmd_export_arch)

    p = sub.add_parser("gen-synthetic", help="generate a reproducible synthetic CSV and manifest")
    p.add_argument("--kind", required=True, choices=("sines", "ar", "teacher"))
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="generator parameters as JSON")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--skip-hypernet", action="store_true", help="omit the 1-block hyper-network loss")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except HashMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TsnasError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
