"""``wavecorr`` command line: gen-data, train, backtest, verify, summarize.

Configuration is a JSON file (see README) whose keys mirror :class:`RunConfig`;
command-line flags override file values. Every output directory gets a
``manifest.json`` holding the effective config, its SHA-256, the seed and the
package version.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 runtime or data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import __version__, kernels, metrics, verify
from .blocks import AssetPermutation
from .data import (DataError, SynthConfig, generate_synthetic, load_csv, market_lag_pairs, to_relatives,
                   write_csv, write_manifest)
from .env import CommissionRates
from .policy import PolicySpec, init_params, load_checkpoint, network_witness, save_checkpoint
from .trainer import TrainConfig, train

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("wavecorr")


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


class VerificationFailure(Exception):
    """A property check failed; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config


@dataclass
class SynthSection:
    m: int = 10
    days: int = 2000
    seed: int = 0
    mu: float = 0.05
    sigma: float = 0.2
    rho: float = 0.0
    cash: bool = False
    planted: Optional[float] = None
    lead_lag: list = field(default_factory=list)


@dataclass
class RunConfig:
    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    splits: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    eval_split: str = "test"
    seeds: int = 1
    permutations: int = 0
    permutation_seed: int = 0
    workers: int = 1
    corr: str = "wavecorr"
    dropout: float = 0.5
    rates: list = field(default_factory=lambda: [0.0005])
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSection = field(default_factory=SynthSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        _reject_unknown(doc, cls, "config")
        kw = {k: v for k, v in doc.items() if k not in ("train", "synth")}
        train_doc = doc.get("train", {})
        synth_doc = doc.get("synth", {})
        _reject_unknown(train_doc, TrainConfig, "train")
        _reject_unknown(synth_doc, SynthSection, "synth")
        try:
            return cls(**kw, train=TrainConfig(**train_doc), synth=SynthSection(**synth_doc))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _reject_unknown(doc, cls, where: str):
    if not isinstance(doc, dict):
        raise UsageError(f"{where} section must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(doc) - known)
    if extra:
        raise UsageError(f"unknown {where} key(s): {', '.join(extra)}")


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from None
    return RunConfig.from_dict(doc)


# flag name -> (section, key); section None means top level
_OVERRIDES = {
    "data": (None, "data"), "out": (None, "out"), "checkpoint": (None, "checkpoint"),
    "splits": (None, "splits"), "eval_split": (None, "eval_split"), "seeds": (None, "seeds"),
    "permutations": (None, "permutations"), "permutation_seed": (None, "permutation_seed"),
    "workers": (None, "workers"), "corr": (None, "corr"), "dropout": (None, "dropout"),
    "rates": (None, "rates"),
    "seed": ("train", "seed"), "epochs": ("train", "max_epochs"), "lr": ("train", "learning_rate"),
    "decay": ("train", "decay_rate"), "min_rate": ("train", "min_rate"), "T": ("train", "T"),
    "h": ("train", "h"), "w_max": ("train", "w_max"), "penalty": ("train", "penalty"),
    "patience": ("train", "patience"), "validate_every": ("train", "validate_every"),
    "commission": ("train", None),
    "m": ("synth", "m"), "days": ("synth", "days"), "data_seed": ("synth", "seed"), "mu": ("synth", "mu"),
    "sigma": ("synth", "sigma"), "rho": ("synth", "rho"), "cash": ("synth", "cash"),
    "planted": ("synth", "planted"), "lead_lag": ("synth", "lead_lag"),
}


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    top, tr, sy = {}, {}, {}
    for flag, (section, key) in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is None or val is False and flag == "cash":
            continue
        if flag == "commission":
            tr.update(c_s=val, c_p=val)
        elif section is None:
            top[key] = val
        elif section == "train":
            tr[key] = val
        else:
            sy[key] = val
    try:
        return replace(cfg, **top, train=replace(cfg.train, **tr), synth=replace(cfg.synth, **sy))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def manifest(cfg: RunConfig, command: str, seed, extra: Optional[dict] = None) -> dict:
    doc = {
        "command": command,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "seed": seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
    }
    if extra:
        doc.update(extra)
    return doc


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("an output directory is required (--out or config 'out')")
    out = Path(cfg.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path exists and is not a directory: {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_path(cfg: RunConfig) -> Path:
    if not cfg.data:
        raise UsageError("a dataset is required (--data or config 'data')")
    p = Path(cfg.data)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    return p


def _load_window(cfg: RunConfig):
    table = load_csv(_data_path(cfg))
    try:
        return to_relatives(table).with_splits(tuple(cfg.splits))
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _eval_window(cfg: RunConfig, window):
    if cfg.eval_split == "all":
        return window
    if cfg.eval_split not in window.splits:
        raise UsageError(f"unknown split {cfg.eval_split!r}; choose from all, {', '.join(window.splits)}")
    return window.split(cfg.eval_split)


# ---------------------------------------------------------------------------
# gen-data


def synth_from_config(s: SynthSection) -> SynthConfig:
    if s.planted is not None:
        if s.lead_lag:
            raise UsageError("use either a planted coefficient or explicit lead-lag pairs, not both")
        risky = s.m - 1
        if risky < 2:
            raise UsageError("planted dataset needs m >= 3 (risky assets plus cash)")
        pairs = market_lag_pairs(risky, s.planted)
        cash = True
    else:
        risky = s.m - 1 if s.cash else s.m
        pairs = [tuple(p) for p in s.lead_lag]
        cash = s.cash
    if risky < 1:
        raise UsageError("need at least one risky asset")
    corr = np.full((risky, risky), s.rho)
    np.fill_diagonal(corr, 1.0)
    return SynthConfig(m=risky, days=s.days, mu=s.mu, sigma=s.sigma, corr=corr, seed=s.seed,
                       lead_lag=pairs, cash=cash)


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    scfg = synth_from_config(cfg.synth)
    table = generate_synthetic(scfg)
    write_csv(table, out / "prices.csv")
    extra = {"dataset": scfg.manifest(), "assets": table.assets}
    if cfg.synth.planted is not None:
        extra["planted"] = {"kind": "market-lag", "coefficient": cfg.synth.planted, "cash_asset": "CASH"}
    write_manifest(out / "manifest.json", manifest(cfg, "gen-data", cfg.synth.seed, extra))
    print(f"wrote {out / 'prices.csv'} ({len(table.dates)} days, {len(table.assets)} assets)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _run_plan(cfg: RunConfig, m: int) -> list:
    """(label, seed, permutation) for every training run."""
    if cfg.permutations and cfg.seeds > 1:
        raise UsageError("--seeds and --permutations are mutually exclusive")
    if cfg.permutations:
        rng = np.random.default_rng(cfg.permutation_seed)
        perms = [AssetPermutation.identity(m)] + [AssetPermutation.random(m, rng) for _ in range(cfg.permutations - 1)]
        return [(f"perm-{k:02d}", cfg.train.seed, s) for k, s in enumerate(perms)]
    return [(f"seed-{k:02d}", cfg.train.seed + k, None) for k in range(max(1, cfg.seeds))]


def _train_one(cfg: RunConfig, window, label: str, seed: int, sigma, out: Path) -> dict:
    run_dir = out / label
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = replace(cfg.train, seed=seed)
    spec = PolicySpec(m=window.m, h=tc.h, dropout=cfg.dropout, corr=cfg.corr)
    params = init_params(spec, seed)
    if sigma is not None:
        window = window.permute(sigma)
        if cfg.corr == "wavecorr":
            # same initial policy, expressed in the permuted asset order
            params = network_witness(params, sigma)
    trained, tlog = train(params, window, tc, run_dir / "train_log.jsonl")
    save_checkpoint(trained, run_dir / "checkpoint.json")
    ev = _eval_window(cfg, window)
    ew = metrics.ew_backtest(ev, tc.rates, tc.h)
    rep = metrics.backtest(trained, ev, tc.rates, ew=ew, label=label)
    rep.write(run_dir / "report.json", run_dir / "pv.csv")
    ew.write(run_dir / "ew.json", run_dir / "ew_pv.csv")
    extra = {"run": label, "permutation": None if sigma is None else sigma.pi.tolist(),
             "assets": list(window.assets), "best_epoch": tlog.best_epoch,
             "best_validation_sr": tlog.best_validation_sr, "epochs_run": len(tlog.epochs)}
    write_manifest(run_dir / "manifest.json", manifest(cfg, "train", seed, extra))
    return {"label": label, "report": rep, "ew": ew}


def cmd_train(cfg: RunConfig) -> int:
    window = _load_window(cfg)
    out = _out_dir(cfg)
    if cfg.workers < 1:
        raise UsageError("workers must be at least 1")
    plan = _run_plan(cfg, window.m)
    write_manifest(out / "manifest.json", manifest(cfg, "train", cfg.train.seed, {"runs": [p[0] for p in plan]}))
    if cfg.workers == 1:
        results = [_train_one(cfg, window, *p, out) for p in plan]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_train_one, cfg, window, *p, out) for p in plan]
            results = [f.result() for f in futures]  # run order, not completion order
    reports = [r["report"] for r in results]
    labels = [r["label"] for r in results]
    for r in results:
        rep, ew = r["report"], r["ew"]
        print(f"{r['label']}: SR {rep.sharpe:.4f} (EW {ew.sharpe:.4f}) annual return {rep.annual_return:.4f}")
    if len(results) > 1:
        metrics.ExperimentSummary(reports, labels).write_csv(out / "summary.csv", name=cfg.corr)
        metrics.ExperimentSummary([r["ew"] for r in results], labels).write_csv(out / "ew_summary.csv", name="EW")
    if cfg.permutations > 1:
        ars = [rep.annual_return for rep in reports]
        disp = {"annual_returns": ars, "std": metrics.permutation_dispersion(ars)}
        (out / "dispersion.json").write_text(json.dumps(disp, indent=2))
        print(f"cross-permutation std of annual return: {disp['std']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# backtest


def _rate_tag(rate: float) -> str:
    return f"cr{rate:g}"


def cmd_backtest(cfg: RunConfig, ew_flag: bool, permutation: Optional[int]) -> int:
    if cfg.checkpoint is None and not ew_flag:
        raise UsageError("give --checkpoint, --ew, or both")
    params = None
    if cfg.checkpoint is not None:
        ck = Path(cfg.checkpoint)
        if not ck.is_file():
            raise UsageError(f"checkpoint not found: {ck}")
        params = load_checkpoint(ck)
    window = _load_window(cfg)
    out = _out_dir(cfg)
    h = params.spec.h if params is not None else cfg.train.h
    if params is not None and params.spec.m != window.m:
        raise DataError(f"checkpoint is for {params.spec.m} assets, dataset has {window.m}")
    ev = _eval_window(cfg, window)
    written = []
    checks = []
    for rate in cfg.rates:
        rates = CommissionRates(float(rate), float(rate))
        ew = metrics.ew_backtest(ev, rates, h)
        tag = _rate_tag(rate)
        if ew_flag:
            ew.write(out / f"ew-{tag}.json", out / f"ew-{tag}-pv.csv")
            written.append(("EW", rate, ew))
        if params is not None:
            rep = metrics.backtest(params, ev, rates, ew=ew)
            rep.write(out / f"policy-{tag}.json", out / f"policy-{tag}-pv.csv")
            written.append(("policy", rate, rep))
            if permutation is not None:
                sigma = AssetPermutation.random(window.m, np.random.default_rng(permutation))
                pw = ev.permute(sigma)
                prep = metrics.backtest(network_witness(params, sigma), pw, rates,
                                        initial_w=None, ew=metrics.ew_backtest(pw, rates, h))
                diffs = {k: abs(getattr(prep, k) - getattr(rep, k)) for k in metrics.METRIC_COLUMNS}
                checks.append({"rate": rate, "permutation": sigma.pi.tolist(), "abs_differences": diffs,
                               "equal": all(v <= 1e-9 for v in diffs.values())})
    for label, rate, rep in written:
        print(f"{label} @ {rate:g}: SR {rep.sharpe:.4f} annual return {rep.annual_return:.4f} "
              f"MDD {rep.mdd:.4f} turnover {rep.turnover:.4f}")
    extra = {"reports": [f"{label.lower()}-{_rate_tag(rate)}.json" for label, rate, _ in written]}
    if checks:
        extra["permutation_checks"] = checks
    write_manifest(out / "manifest.json", manifest(cfg, "backtest", params.seed if params else None, extra))
    if checks and not all(c["equal"] for c in checks):
        raise VerificationFailure("witness-permuted backtest metrics differ from the original")
    if checks:
        print("permutation check: metrics identical under the witness parameters")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify / summarize


def cmd_verify(cfg: RunConfig, suite: str, quick: bool) -> int:
    try:
        results = verify.run_suite(suite, seed=cfg.train.seed, quick=quick)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for r in results:
        print(r.summary())
    if cfg.out:
        out = _out_dir(cfg)
        doc = [{"suite": r.name, "passed": r.passed, "stats": _jsonable(r.stats),
                "checks": [asdict(c) for c in r.checks]} for r in results]
        (out / "verify.json").write_text(json.dumps(doc, indent=2))
        write_manifest(out / "manifest.json", manifest(cfg, f"verify {suite}", cfg.train.seed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _jsonable(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in d.items()}


def _find_reports(paths) -> list:
    found = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif (p / "report.json").is_file():
            found.append(p / "report.json")
        elif p.is_dir():
            found.extend(sorted(p.glob("*/report.json")))
        else:
            raise UsageError(f"no such run directory or report: {p}")
    if not found:
        raise UsageError("no report.json files found")
    return found


def cmd_summarize(cfg: RunConfig, inputs, name: str) -> int:
    files = _find_reports(inputs)
    reports, labels = [], []
    for f in files:
        doc = json.loads(f.read_text())
        if doc.get("schema") != metrics.REPORT_SCHEMA:
            raise DataError(f"{f}: not a {metrics.REPORT_SCHEMA} report")
        reports.append(SimpleNamespace(**{k: doc[k] for k in metrics.METRIC_COLUMNS}))
        labels.append(doc.get("label") or f.parent.name)
    out = _out_dir(cfg)
    summary = metrics.ExperimentSummary(reports, labels)
    summary.write_csv(out / "summary.csv", name=name)
    write_manifest(out / "manifest.json", manifest(cfg, "summarize", None, {"inputs": [str(f) for f in files]}))
    mean = summary.mean()
    print(f"{len(reports)} runs; mean SR {mean['sharpe']:.4f}, mean annual return {mean['annual_return']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> list:
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        return [int(parts[0]), int(parts[1]), float(parts[2])]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LEADER:FOLLOWER:COEF, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wavecorr", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config; flags override its keys")
        sp.add_argument("--out", help="output directory")
        if data:
            sp.add_argument("--data", help="price CSV")
            sp.add_argument("--splits", type=_floats, help="train,validation,test fractions")

    g = sub.add_parser("gen-data", help="write a synthetic price CSV")
    common(g, data=False)
    g.add_argument("--m", type=int, help="number of assets in the file (including cash)")
    g.add_argument("--days", type=int)
    g.add_argument("--seed", dest="data_seed", type=int)
    g.add_argument("--mu", type=float, help="annual drift")
    g.add_argument("--sigma", type=float, help="annual volatility")
    g.add_argument("--rho", type=float, help="pairwise shock correlation")
    g.add_argument("--cash", action="store_true", help="append a constant-price asset")
    g.add_argument("--planted", type=float, metavar="COEF",
                   help="plant a one-day market lag of this strength (adds cash)")
    g.add_argument("--lead-lag", dest="lead_lag", type=_pair, action="append", metavar="L:F:COEF",
                   help="explicit lead-lag pair, repeatable")

    t = sub.add_parser("train", help="train policies and backtest them")
    common(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=int, help="number of consecutive seeds to train")
    t.add_argument("--permutations", type=int, help="train on N asset orderings (first is the identity)")
    t.add_argument("--permutation-seed", dest="permutation_seed", type=int)
    t.add_argument("--workers", type=int, help="worker threads for multi-run experiments")
    t.add_argument("--corr", choices=["wavecorr", "zhang"])
    t.add_argument("--dropout", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--decay", type=float)
    t.add_argument("--min-rate", dest="min_rate", type=float)
    t.add_argument("--T", type=int)
    t.add_argument("--h", type=int)
    t.add_argument("--w-max", dest="w_max", type=float, help="per-asset weight cap (penalised)")
    t.add_argument("--penalty", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--validate-every", dest="validate_every", type=int)
    t.add_argument("--commission", type=float, help="buy and sell commission rate")
    t.add_argument("--eval-split", dest="eval_split")

    b = sub.add_parser("backtest", help="cost-exact backtest of a checkpoint and/or EW")
    common(b)
    b.add_argument("--checkpoint")
    b.add_argument("--ew", action="store_true", help="also report the equal-weight baseline")
    b.add_argument("--rates", type=_floats, help="comma-separated commission rates")
    b.add_argument("--eval-split", dest="eval_split")
    b.add_argument("--permutation", type=int, metavar="SEED",
                   help="also backtest under a random asset order with witness parameters")

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("suite", help="all, " + ", ".join(verify.SUITES))
    v.add_argument("--config")
    v.add_argument("--out")
    v.add_argument("--seed", type=int)
    v.add_argument("--quick", action="store_true", help="smaller instance counts")

    s = sub.add_parser("summarize", help="merge run reports into a summary CSV")
    s.add_argument("inputs", nargs="+", help="run directories or report.json files")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--name", default="WaveCorr")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "backtest":
            return cmd_backtest(cfg, args.ew, args.permutation)
        if args.command == "verify":
            return cmd_verify(cfg, args.suite, args.quick)
        return cmd_summarize(cfg, args.inputs, args.name)
    except UsageError as exc:
        print(f"wavecorr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"wavecorr: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, OSError, ValueError, ArithmeticError) as exc:
        print(f"wavecorr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
