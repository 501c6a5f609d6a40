"""``dfpl`` command line: gen-data, train, eval, verify, ablate.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cohort import (CohortFormatError, CohortSpec, full_time_subjects, generate_cohort, load_cohort,
                     mask_labels, save_cohort, split_dataset)
from .metrics import aggregate_seeds, evaluate_model, write_reports
from .model import VARIANTS
from .nets import NetConfig
from .training import (CheckpointFormatError, TrainConfig, TrainingDiverged, load_model, pretrain_encoder, save_baseline,
                       save_model, train, train_baseline)
from .verify import SUITES, run_suites

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
ABLATE_ALIASES = {"no-lstm": "combined-no-lstm", "ma": "combined+MA", "full": "combined+MA"}

log = logging.getLogger("dfpl")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    ratios: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])

    def to_dict(self) -> dict:
        return {"cohort": self.cohort.to_dict(), "train": asdict(self.train), "net": asdict(self.net),
                "seeds": list(self.seeds), "ratios": list(self.ratios)}


def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section {name!r}: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then flags (flags win)."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        unknown = set(raw) - {"cohort", "train", "net", "seeds", "ratios"}
        if unknown:
            raise UsageError(f"config: unknown sections {sorted(unknown)}")
    train_raw = dict(raw.get("train", {}))
    if getattr(args, "order", None) is not None:
        train_raw["order_k"] = args.order
    if getattr(args, "epochs", None) is not None:
        train_raw["epochs"] = args.epochs
    if getattr(args, "ablate", None):
        train_raw["variant"] = ABLATE_ALIASES.get(args.ablate, args.ablate)
    cohort_raw = dict(raw.get("cohort", {}))
    if getattr(args, "n_subjects", None) is not None:
        cohort_raw["n_subjects"] = args.n_subjects
    cfg = RunConfig(_section(CohortSpec, cohort_raw, "cohort"), _section(TrainConfig, train_raw, "train"),
                    _section(NetConfig, raw.get("net", {}), "net"),
                    list(raw.get("seeds", [0])), list(raw.get("ratios", [0.6, 0.2, 0.2])))
    if getattr(args, "seed", None) is not None:
        cfg.seeds = args.seed
    if getattr(args, "ratios", None) is not None:
        cfg.ratios = args.ratios
    if len(cfg.ratios) != 3 or any(r < 0 for r in cfg.ratios) or abs(sum(cfg.ratios) - 1.0) > 1e-9:
        raise UsageError(f"ratios must be three nonnegative numbers summing to 1, got {cfg.ratios}")
    if not cfg.seeds:
        raise UsageError("at least one seed is required")
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    (out / "config.resolved.json").write_text(json.dumps({**cfg.to_dict(), **(extra or {})}, indent=2))


def _load_split(data_dir: str, name: str):
    path = Path(data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"cohort file not found: {path}")
    return load_cohort(path)


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    spec = cfg.cohort.replace(seed=cfg.seeds[0])
    cohort = generate_cohort(spec)
    parts = split_dataset(mask_labels(cohort, spec.t_max), tuple(cfg.ratios), seed=cfg.seeds[0])
    for name, part in zip(("train", "val", "test"), parts):
        save_cohort(part, out / f"{name}.jsonl")
    manifest = {"spec": spec.to_dict(), "seed": cfg.seeds[0], "ratios": cfg.ratios,
                "counts": {n: len(p) for n, p in zip(("train", "val", "test"), parts)}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    _write_config(cfg, out)
    print(f"wrote {manifest['counts']} subjects to {out}")
    return EXIT_OK


def _horizon(data_dir: str) -> int:
    manifest = Path(data_dir) / "manifest.json"
    if manifest.exists():
        return int(json.loads(manifest.read_text())["spec"]["t_max"])
    return CohortSpec().t_max


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tr, va = _load_split(args.data, "train"), _load_split(args.data, "val")
    horizon = _horizon(args.data)
    out = _out_dir(args)
    _write_config(cfg, out, {"data": str(args.data), "horizon": horizon})
    for seed in cfg.seeds:
        tcfg = cfg.train.replace(seed=seed)
        enc = pretrain_encoder(tr, cfg.net, tcfg, horizon)
        tag = f"{tcfg.variant}_k{tcfg.order_k}_seed{seed}"
        res = train(tr, tcfg, enc, va, cfg.net, horizon, log_path=out / f"train_log_{tag}.jsonl")
        save_model(res.model, out / f"model_{tag}.json", {"seed": seed, "best_epoch": res.best_epoch})
        print(f"seed {seed}: best epoch {res.best_epoch}, {res.clip_violations} clip violations -> model_{tag}.json")
        if args.baseline:
            base = train_baseline(tr, tcfg, enc, va, cfg.net, horizon)
            save_baseline(base.model, out / f"baseline_seed{seed}.json", {"seed": seed})
    return EXIT_OK


def _evaluate_checkpoints(paths: list[str], test, order: int | None, all_times: bool, horizon: int):
    models = [load_model(p) for p in paths]
    orders = [order or m.order_k for m in models]
    gaps = None
    if all_times:
        test = full_time_subjects(test, horizon)
        gaps = list(range(1, horizon - max(orders) + 1))
    rows = []
    for path, model, k in zip(paths, models, orders):
        seed = json.loads(Path(path).read_text()).get("extra", {}).get("seed", 0)
        method = f"{model.variant}_k{k}"
        rows.append(evaluate_model(model, test, k, seed, gaps, method))
    return rows


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("at least one --checkpoint is required")
    test = _load_split(args.data, "test")
    out = _out_dir(args)
    runs = _evaluate_checkpoints(args.checkpoint, test, args.order, args.all_times, _horizon(args.data))
    flat = [r for run in runs for r in run]
    write_reports(flat, out / "report.json", out / "report.csv")
    summary = aggregate_seeds(runs)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_summary_csv(summary, out / "summary.csv")
    for row in summary:
        if row["delta_t"] is None:
            print(f"{row['method']:>28}  acc {row['acc_mean']:.4f} +- {row['acc_std']:.4f}  "
                  f"auc {row['auc_mean']:.4f} +- {row['auc_std']:.4f}  ({row['n_seeds']} runs)")
    return EXIT_OK


def _write_summary_csv(summary: list[dict], path: Path) -> None:
    cols = ["method", "order_k", "delta_t", "n_seeds", "acc_mean", "acc_std", "auc_mean", "auc_std"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in summary:
            w.writerow(["avg" if row[c] is None and c == "delta_t" else
                        (f"{row[c]:.6f}" if isinstance(row[c], float) else row[c]) for c in cols])


def cmd_verify(args) -> int:
    names = args.suite.split(",") if args.suite else list(SUITES)
    results = run_suites(names, fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<13} {r.seconds:6.2f}s  {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    tr, va, te = (_load_split(args.data, n) for n in ("train", "val", "test"))
    horizon = _horizon(args.data)
    out = _out_dir(args)
    _write_config(cfg, out, {"data": str(args.data), "variants": list(VARIANTS)})
    runs = []
    for seed in cfg.seeds:
        tcfg = cfg.train.replace(seed=seed)
        # one encoder per seed, shared by every variant
        enc = pretrain_encoder(tr, cfg.net, tcfg, horizon)
        for variant in VARIANTS:
            res = train(tr, tcfg.replace(variant=variant), enc, va, cfg.net, horizon)
            runs.append(evaluate_model(res.model, te, tcfg.order_k, seed, method=variant))
            print(f"seed {seed} {variant:>17}: auc {runs[-1][-1].auc:.4f}")
    summary = aggregate_seeds(runs)
    write_reports([r for run in runs for r in run], out / "ablation_runs.json", out / "ablation_runs.csv")
    per_gap = [row for row in summary if row["delta_t"] is not None]
    _write_summary_csv(per_gap, out / "ablation.csv")
    _write_summary_csv([row for row in summary if row["delta_t"] is None], out / "ablation_average.csv")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfpl", description="Disease forecasting via progression learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config with cohort/train/net/seeds/ratios sections")
        sp.add_argument("--seed", type=_int_list, help="seed or comma-separated seeds")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", required=True, help="directory written by gen-data")

    g = sub.add_parser("gen-data", help="generate a synthetic cohort and split it")
    common(g, data=False)
    g.add_argument("--ratios", type=_float_list, help="train,val,test fractions (default 0.6,0.2,0.2)")
    g.add_argument("--n-subjects", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain the encoder and train a model per seed")
    common(t)
    t.add_argument("--order", type=int, choices=(1, 2, 3))
    t.add_argument("--ablate", choices=sorted(set(VARIANTS) | set(ABLATE_ALIASES)))
    t.add_argument("--epochs", type=int)
    t.add_argument("--baseline", action="store_true", help="also train the direct baseline")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint", nargs="*", default=[], help="one or more checkpoint files")
    e.add_argument("--order", type=int, choices=(1, 2, 3), help="override the checkpoints' own order")
    e.add_argument("--all-times", action="store_true",
                   help="restrict to subjects with every time and to gaps valid for the highest order")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--suite", help=f"comma-separated subset of {','.join(SUITES)}")
    v.add_argument("--inject-fault", choices=SUITES, help="corrupt one suite on purpose (tests the failure path)")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="train and evaluate the five ablation variants")
    common(a)
    a.add_argument("--order", type=int, choices=(1, 2, 3))
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CohortFormatError, CheckpointFormatError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
