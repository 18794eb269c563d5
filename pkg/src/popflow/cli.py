"""Command-line entry point.

Subcommands: validate, gen-data, train, popf, compare. Every run is driven
by a JSON config file; ``--set section.key=value`` flags override individual
entries (values parse as JSON, falling back to plain strings).

Exit codes: 0 success, 1 domain failure (solver, training, validation),
2 usage or I/O failure. Console tables print 6 significant digits; machine
files carry 17.

Config keys (all optional except ``case``)::

    {
      "case": "path/to/case.json",
      "output_dir": "out",
      "dataset_dir": "out/dataset",        # default: <output_dir>/dataset
      "checkpoint": "out/model.ckpt",      # default: <output_dir>/model.ckpt
      "train": { ... TrainConfig fields ... },
      "sampling": {"n_train": 20000, "n_mcs": 10000, "seed": 0,
                   "correlation": {"group_name": [[...], ...]}},
      "report": {"bins": 50, "density_indexes": ["cost", "v_mag:8"]}
    }
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import pipeline, sdae
from .errors import PopflowError, SchemaError, ValidationError
from .grid import load_case
from .ioutil import atomic_write_text
from .sampling import CorrelationSpec

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str, overrides) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = dotted.split(".")
        for key in parts[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = value
    return cfg


class UsageError(Exception):
    pass


def _require_case(cfg: dict):
    case_path = cfg.get("case")
    if not case_path:
        raise UsageError("config is missing the 'case' path")
    try:
        return load_case(case_path)
    except OSError as exc:
        raise UsageError(f"cannot read case {case_path}: {exc}")


def _paths(cfg: dict):
    out_dir = Path(cfg.get("output_dir", "out"))
    dataset_dir = Path(cfg.get("dataset_dir", out_dir / "dataset"))
    checkpoint = Path(cfg.get("checkpoint", out_dir / "model.ckpt"))
    return out_dir, dataset_dir, checkpoint


def _train_config(cfg: dict) -> sdae.TrainConfig:
    section = dict(cfg.get("train", {}))
    if "hidden_sizes" in section:
        section["hidden_sizes"] = tuple(section["hidden_sizes"])
    try:
        return sdae.TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}")


def _correlation_spec(cfg: dict, case) -> CorrelationSpec | None:
    matrices = cfg.get("sampling", {}).get("correlation")
    if not matrices:
        return None
    try:
        return CorrelationSpec.for_case(case, matrices)
    except ValueError as exc:
        raise UsageError(f"bad correlation spec: {exc}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    try:
        text = Path(args.case).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    from .grid import parse_case

    try:
        parse_case(text)
    except SchemaError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        for v in exc.violations:
            print(v)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    case = _require_case(cfg)
    sampling_cfg = cfg.get("sampling", {})
    n = int(sampling_cfg.get("n_train", 0))
    if n < 1:
        raise UsageError("sampling.n_train must be at least 1")
    seed = int(sampling_cfg.get("seed", 0))
    spec = _correlation_spec(cfg, case)
    _, dataset_dir, _ = _paths(cfg)

    dataset = pipeline.generate_training_data(case, n, seed, spec)
    pipeline.save_dataset(dataset, dataset_dir, case)
    print(f"wrote {dataset.n_rows} rows to {dataset_dir} "
          f"(dropped {dataset.provenance['dropped']} failed draws)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    _, dataset_dir, checkpoint = _paths(cfg)
    train_cfg = _train_config(cfg)
    try:
        dataset = pipeline.load_dataset(dataset_dir)
    except OSError as exc:
        raise UsageError(f"cannot read dataset in {dataset_dir}: {exc}")

    start = time.perf_counter()
    model, history = pipeline.train_popf_model(dataset, train_cfg)
    elapsed = time.perf_counter() - start

    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    sdae.save_model(model, checkpoint)
    sdae.save_history(history, checkpoint.with_suffix(".history.tsv"))

    best_epoch = min(history, key=lambda row: row[2])[0]
    stopped_early = len(history) < train_cfg.epochs_sup
    reason = "early stop" if stopped_early else "epoch cap"
    final = history[-1]
    print(f"trained {len(history)} epochs in {elapsed:.6g} s ({reason}); "
          f"best validation epoch {best_epoch}")
    print(f"final train loss {final[1]:.6g}, val loss {final[2]:.6g}, "
          f"best val loss {history[best_epoch][2]:.6g}")
    print(f"checkpoint: {checkpoint}")
    return EXIT_OK


def cmd_popf(args) -> int:
    cfg = load_config(args.config, args.set)
    case = _require_case(cfg)
    out_dir, _, checkpoint = _paths(cfg)
    spec = _correlation_spec(cfg, case)
    sampling_cfg = cfg.get("sampling", {})
    seed = int(sampling_cfg.get("seed", 0))
    bins = int(cfg.get("report", {}).get("bins", 50))

    model = sdae.load_model(checkpoint)
    if args.converge:
        result = pipeline.run_popf(model, case, spec=spec, seed=seed, converge=True)
    else:
        n = args.samples if args.samples is not None else int(sampling_cfg.get("n_mcs", 0))
        if n < 1:
            raise UsageError("need --samples N (or sampling.n_mcs) of at least 1, or --converge")
        result = pipeline.run_popf(model, case, n_samples=n, spec=spec, seed=seed)

    out_dir.mkdir(parents=True, exist_ok=True)
    labels = pipeline.output_labels(case)
    if result.n_samples < 2:
        row = result.values[0]
        lines = ["index\tmean\tstd"]
        lines += [f"{lab}\t{row[j]:.17g}\tdegenerate" for j, lab in enumerate(labels)]
        atomic_write_text(out_dir / "popf_stats.tsv", "\n".join(lines) + "\n")
        print(f"1 sample evaluated in {result.seconds:.6g} s; std fields are degenerate")
        return EXIT_OK

    stats = pipeline.compute_statistics(result.values, bins=bins)
    lines = ["index\tmean\tstd"]
    lines += [f"{lab}\t{stats.mean[j]:.17g}\t{stats.std[j]:.17g}"
              for j, lab in enumerate(labels)]
    atomic_write_text(out_dir / "popf_stats.tsv", "\n".join(lines) + "\n")

    wanted = cfg.get("report", {}).get("density_indexes") or pipeline.default_density_labels(case)
    for label in wanted:
        j = labels.index(label)
        edges, dens = stats.densities[j]
        centers = 0.5 * (edges[:-1] + edges[1:])
        rows = ["bin_center\tdensity"]
        rows += [f"{c:.17g}\t{d:.17g}" for c, d in zip(centers, dens)]
        atomic_write_text(out_dir / f"density_{label.replace(':', '_')}.tsv",
                          "\n".join(rows) + "\n")

    mode = f"converged at {result.n_samples}" if result.converged else f"{result.n_samples} samples"
    print(f"{mode} in {result.seconds:.6g} s; statistics in {out_dir / 'popf_stats.tsv'}")
    print(f"cost mean {stats.mean[0]:.6g} $/h, std {stats.std[0]:.6g} $/h")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set)
    case = _require_case(cfg)
    out_dir, _, checkpoint = _paths(cfg)
    spec = _correlation_spec(cfg, case)
    sampling_cfg = cfg.get("sampling", {})
    seed = int(sampling_cfg.get("seed", 0))
    n = int(sampling_cfg.get("n_mcs", 10_000))
    report_cfg = cfg.get("report", {})
    bins = int(report_cfg.get("bins", 50))

    model = sdae.load_model(checkpoint)
    report = pipeline.compare_methods(case, model, spec=spec, seed=seed, n_samples=n,
                                      bins=bins,
                                      density_labels=report_cfg.get("density_indexes"),
                                      self_check=args.self_check)
    pipeline.save_report(report, out_dir)
    if report.self_check:
        print("self-check mode: surrogate outputs replaced by the oracle's")

    print(f"{report.n_samples} seed-matched samples (dropped {report.dropped})")
    print(f"{'method':<12}{'cost mean':>14}{'cost std':>12}{'e_mean %':>10}{'e_std %':>10}{'time s':>12}")
    for method in (pipeline.METHOD_ORACLE, pipeline.METHOD_SURROGATE, pipeline.METHOD_DC_ONLY):
        stats = report.stats[method]
        if method == pipeline.METHOD_ORACLE:
            e1 = e2 = 0.0
        else:
            err = report.errors[method]
            e1, e2 = 100 * err.e_mean[0], 100 * err.e_std[0]
        print(f"{method:<12}{stats.mean[0]:>14.6g}{stats.std[0]:>12.6g}"
              f"{e1:>10.4g}{e2:>10.4g}{report.timings[method]:>12.6g}")

    print()
    print(f"{'method':<12}" + "".join(
        f"{cls}>{tau:g}".rjust(18)
        for cls, taus in _exceedance_columns(report).items() for tau in taus))
    for method in (pipeline.METHOD_SURROGATE, pipeline.METHOD_DC_ONLY):
        err = report.errors[method]
        cells = []
        for cls, taus in _exceedance_columns(report).items():
            for tau in taus:
                cells.append(f"{100 * err.exceedance[cls][tau]:.4g}%".rjust(18))
        print(f"{method:<12}" + "".join(cells))
    print(f"\nreport files in {out_dir}")
    return EXIT_OK


def _exceedance_columns(report):
    any_err = next(iter(report.errors.values()))
    return {cls: sorted(d.keys(), reverse=True) for cls, d in any_err.exceedance.items()}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popflow",
        description="Probabilistic optimal power flow via a neural surrogate "
                    "of an OPF oracle.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a case file against the schema and invariants")
    p.add_argument("case", help="path to a case JSON document")
    p.set_defaults(func=cmd_validate)

    for name, func, help_text in [
        ("gen-data", cmd_gen_data, "sample operating conditions and label them with the oracle"),
        ("train", cmd_train, "pretrain and fine-tune the surrogate on a dataset"),
        ("popf", cmd_popf, "Monte-Carlo POPF by batched surrogate inference"),
        ("compare", cmd_compare, "oracle vs surrogate vs dc-only on seed-matched samples"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry, e.g. --set sampling.seed=7")
        if name == "popf":
            group = p.add_mutually_exclusive_group()
            group.add_argument("--samples", type=int, help="fixed sample count")
            group.add_argument("--converge", action="store_true",
                               help="stop when every index's variance coefficient "
                                    "is at or below 5%%, cap 50000 samples")
        if name == "compare":
            p.add_argument("--self-check", action="store_true",
                           help="replace the surrogate's outputs with the oracle's; "
                                "all error columns must come out zero")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PopflowError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
