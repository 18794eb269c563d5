"""End-to-end POPF pipeline: data generation, training, inference, metrics.

The surrogate's input vector holds the realized active and reactive
consumption at every PQ bus, so all stochastic sources must sit on PQ buses
(otherwise the OPF solution would not be a function of the feature vector).
Outputs are flattened OPF solution vectors: cost, bus voltage magnitudes,
generator outputs, branch flows.

Method comparison runs three solvers over one seed-matched sample matrix:

- ``oracle``      dispatch + AC power flow per sample (the reference)
- ``surrogate``   batched network inference
- ``dc_only``     linear dispatch alone, voltages pinned at 1.0 pu
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sdae
from .errors import DimensionMismatch, PopflowError, TooManyRejections, ValidationError
from .grid import PQ, SRC_GAUSSIAN_LOAD, NetworkCase, case_hash
from .sampling import (ConvergenceState, CorrelationSpec,
                       sample_operating_conditions, update_convergence)
from .solver import (NEWTON_MAX_ITER, NEWTON_TOL, dc_opf, oracle_opf,
                     ptdf_matrix, solution_layout)
from .ioutil import atomic_write_text

# inference always walks the sample matrix in chunks of this many rows, so
# predictions do not depend on how callers batch their queries
INFER_CHUNK = 512

# offset between successive redraw rounds of the training-data seed stream
_REDRAW_SEED_STRIDE = 1_000_003

METHOD_ORACLE = "oracle"
METHOD_SURROGATE = "surrogate"
METHOD_DC_ONLY = "dc_only"


@dataclass(frozen=True)
class TrainingDataset:
    """Oracle-labelled operating conditions plus generation provenance."""

    x: np.ndarray
    y: np.ndarray
    samples: np.ndarray
    provenance: dict

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]


@dataclass
class PopfRunResult:
    values: np.ndarray
    seconds: float
    n_samples: int
    converged: bool | None = None


@dataclass
class Statistics:
    mean: np.ndarray
    std: np.ndarray
    densities: list  # per index: (bin_edges, density)


@dataclass(frozen=True)
class ExceedanceThresholds:
    """Per-sample absolute-error thresholds, by output class."""

    voltage_pu: tuple = (0.01, 0.001)
    gen_mw: tuple = (3.0,)
    branch_mw: tuple = (3.0,)
    cost_dollars: tuple = (1000.0, 3000.0)


@dataclass
class ErrorMetrics:
    e_mean: np.ndarray          # relative error of the mean, per output index
    e_std: np.ndarray           # relative error of the std, per output index
    absolute_mean_flags: list   # indexes where the reference mean was ~0
    absolute_std_flags: list
    exceedance: dict            # class -> {threshold: pooled probability}
    exceedance_per_index: dict  # class -> {threshold: ndarray of per-index probs}


@dataclass
class PopfReport:
    n_samples: int
    dropped: int
    labels: list
    stats: dict       # method -> Statistics
    errors: dict      # method -> ErrorMetrics (vs the oracle)
    timings: dict     # method -> seconds around its solve loop
    densities: dict   # label -> {"edges": ndarray, method: density ndarray}
    failures: dict = field(default_factory=dict)
    self_check: bool = False


# ---------------------------------------------------------------------------
# features and labels


def operating_features(case: NetworkCase, sample_values: np.ndarray) -> np.ndarray:
    """PQ-bus active and reactive consumption for each sample row."""
    pq = case.pq_indices()
    for i, src in enumerate(case.sources):
        if case.buses[src.bus].kind != PQ:
            raise ValidationError(
                f"source {i}: bus {src.bus} is not PQ; the surrogate input cannot "
                "observe it")
    vals = np.atleast_2d(np.asarray(sample_values, dtype=float))
    n = vals.shape[0]
    p = np.tile(case.p_load_vector(), (n, 1))
    q = np.tile(case.q_load_vector(), (n, 1))
    for k, src in enumerate(case.sources):
        col = vals[:, k]
        if src.kind == SRC_GAUSSIAN_LOAD:
            tan_phi = math.tan(math.acos(src.params["power_factor"]))
            p[:, src.bus] = col
            q[:, src.bus] = col * tan_phi
        else:
            p[:, src.bus] -= col
    return np.hstack([p[:, pq], q[:, pq]])


def feature_labels(case: NetworkCase) -> list:
    pq = case.pq_indices()
    return [f"p@bus{b}" for b in pq] + [f"q@bus{b}" for b in pq]


def output_labels(case: NetworkCase) -> list:
    labels = ["cost"]
    labels += [f"v_mag:{b.id}" for b in case.buses]
    labels += [f"p_gen:{i}" for i in range(case.n_gen)]
    labels += [f"p_branch:{i}" for i in range(case.n_branch)]
    return labels


# ---------------------------------------------------------------------------
# step 1: training data


def generate_training_data(case: NetworkCase, n: int, seed: int,
                           spec: CorrelationSpec | None = None,
                           tol: float = NEWTON_TOL,
                           max_iter: int = NEWTON_MAX_ITER) -> TrainingDataset:
    """Sample operating conditions and label them with the oracle.

    Samples whose oracle solve fails (infeasible dispatch or non-convergent
    power flow) are dropped and replaced from a fresh seed-offset draw; the
    drop count lands in the provenance. Raises TooManyRejections once more
    than half of all draws have failed.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    kept_samples = []
    kept_y = []
    drawn = 0
    failed = 0
    round_no = 0
    while sum(len(s) for s in kept_samples) < n:
        missing = n - sum(len(s) for s in kept_samples)
        batch = sample_operating_conditions(case, missing, spec,
                                            seed + _REDRAW_SEED_STRIDE * round_no)
        ok_rows = []
        y_rows = []
        for row in batch.values:
            drawn += 1
            try:
                sol = oracle_opf(case, row, tol=tol, max_iter=max_iter)
            except PopflowError:
                failed += 1
                continue
            ok_rows.append(row)
            y_rows.append(sol.as_vector())
        if ok_rows:
            kept_samples.append(np.array(ok_rows))
            kept_y.append(np.array(y_rows))
        if failed > drawn / 2:
            raise TooManyRejections(
                f"{failed} of {drawn} oracle labelling attempts failed")
        round_no += 1

    samples = np.vstack(kept_samples)[:n]
    y = np.vstack(kept_y)[:n]
    x = operating_features(case, samples)
    provenance = {
        "case_hash": case_hash(case),
        "seed": seed,
        "n": n,
        "dropped": failed,
        "oracle": {"newton_tol": tol, "newton_max_iter": max_iter},
    }
    return TrainingDataset(x=x, y=y, samples=samples, provenance=provenance)


def save_dataset(ds: TrainingDataset, directory, case: NetworkCase) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_matrix(directory / "X.tsv", ds.x, feature_labels(case))
    _write_matrix(directory / "Y.tsv", ds.y, output_labels(case))
    _write_matrix(directory / "samples.tsv", ds.samples,
                  [f"source{i}" for i in range(ds.samples.shape[1])])
    atomic_write_text(directory / "provenance.json", json.dumps(ds.provenance, indent=1) + "\n")


def load_dataset(directory) -> TrainingDataset:
    directory = Path(directory)
    x = _read_matrix(directory / "X.tsv")
    y = _read_matrix(directory / "Y.tsv")
    samples = _read_matrix(directory / "samples.tsv")
    provenance = json.loads((directory / "provenance.json").read_text(encoding="utf-8"))
    return TrainingDataset(x=x, y=y, samples=samples, provenance=provenance)


def _write_matrix(path, matrix, labels) -> None:
    lines = ["\t".join(labels)]
    lines += ["\t".join(f"{v:.17g}" for v in row) for row in matrix]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_matrix(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    return np.array([[float(v) for v in line.split("\t")] for line in lines[1:]])


# ---------------------------------------------------------------------------
# steps 2-4: training


def split_indices(n: int, seed: int):
    """Seeded shuffled 5:1 train/validation split (60000 rows -> 50000/10000)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(10,))))
    perm = rng.permutation(n)
    n_val = n // 6
    return perm[n_val:], perm[:n_val]


def train_popf_model(dataset: TrainingDataset, cfg: sdae.TrainConfig):
    """Split 5:1, normalize, pretrain, fine-tune; returns (model, history).

    Normalization bounds come from the training split only and are frozen
    into the returned model.
    """
    n = dataset.n_rows
    if n < 2 * cfg.batch_size:
        raise ValueError(f"dataset has {n} rows; need at least {2 * cfg.batch_size}")
    train_idx, val_idx = split_indices(n, cfg.seed)

    x_lo, x_hi = sdae.fit_bounds(dataset.x[train_idx])
    y_lo, y_hi = sdae.fit_bounds(dataset.y[train_idx])
    xn_train = sdae.normalize(dataset.x[train_idx], x_lo, x_hi)
    yn_train = sdae.normalize(dataset.y[train_idx], y_lo, y_hi)
    xn_val = sdae.normalize(dataset.x[val_idx], x_lo, x_hi)
    yn_val = sdae.normalize(dataset.y[val_idx], y_lo, y_hi)

    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(11,))))
    model = sdae.init_model(dataset.x.shape[1], cfg.hidden_sizes, dataset.y.shape[1],
                            cfg.corruption_level, init_rng)
    pre_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(12,))))
    sdae.pretrain_stack(model, xn_train, cfg, pre_rng)
    model.corruption_level = cfg.finetune_corruption
    fine_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(13,))))
    model, history = sdae.finetune(model, xn_train, yn_train, xn_val, yn_val, cfg, fine_rng)

    model.x_lo, model.x_hi = x_lo, x_hi
    model.y_lo, model.y_hi = y_lo, y_hi
    return model, history


# ---------------------------------------------------------------------------
# steps 5-6: batched inference


def infer(model: sdae.SdaeModel, x: np.ndarray) -> np.ndarray:
    """Normalize, forward in fixed chunks, denormalize."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"model expects {model.input_dim} input features, got {x.shape[1]}")
    xn = sdae.normalize(x, model.x_lo, model.x_hi)
    chunks = []
    for start in range(0, xn.shape[0], INFER_CHUNK):
        yn, _ = sdae.forward(model, xn[start:start + INFER_CHUNK])
        chunks.append(yn)
    yn = np.vstack(chunks)
    return sdae.denormalize(yn, model.y_lo, model.y_hi)


def run_popf(model: sdae.SdaeModel, case: NetworkCase, n_samples: int | None = None,
             spec: CorrelationSpec | None = None, seed: int = 0,
             converge: bool = False, cv_threshold: float = 0.05,
             max_samples: int = 50_000) -> PopfRunResult:
    """Monte-Carlo POPF by batched surrogate inference.

    Either a fixed sample count or convergence-driven: the run stops once the
    variance coefficient of every output index drops to the threshold, or at
    the sample cap.
    """
    if converge:
        draw = sample_operating_conditions(case, max_samples, spec, seed)
    else:
        if n_samples is None or n_samples < 1:
            raise ValueError("n_samples must be at least 1 when not convergence-driven")
        draw = sample_operating_conditions(case, n_samples, spec, seed)

    x = operating_features(case, draw.values)
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"case yields {x.shape[1]} features but the model was trained on "
            f"{model.input_dim}; was the model trained on a different case?")

    start = time.perf_counter()
    if not converge:
        values = infer(model, x)
        return PopfRunResult(values=values, seconds=time.perf_counter() - start,
                             n_samples=values.shape[0], converged=None)

    state = ConvergenceState.for_dim(model.output_dim, threshold=cv_threshold,
                                     max_samples=max_samples)
    collected = []
    done = False
    for chunk_start in range(0, x.shape[0], INFER_CHUNK):
        block = infer(model, x[chunk_start:chunk_start + INFER_CHUNK])
        for row_no, row in enumerate(block):
            state, done = update_convergence(state, row)
            if done:
                collected.append(block[: row_no + 1])
                break
        else:
            collected.append(block)
            continue
        break
    values = np.vstack(collected)
    return PopfRunResult(values=values, seconds=time.perf_counter() - start,
                         n_samples=values.shape[0], converged=done)


# ---------------------------------------------------------------------------
# statistics


def compute_statistics(values: np.ndarray, bins: int = 50) -> Statistics:
    """Column means, sample stds, and unit-area histogram densities."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[0] < 2:
        raise ValueError("need at least 2 samples for statistics")
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1)
    densities = [_density(values[:, j], bins) for j in range(values.shape[1])]
    return Statistics(mean=mean, std=std, densities=densities)


def _density(col: np.ndarray, bins: int):
    lo, hi = float(col.min()), float(col.max())
    if lo == hi:
        # degenerate range: all mass in one unit-width bin
        return np.array([lo - 0.5, lo + 0.5]), np.array([1.0])
    density, edges = np.histogram(col, bins=bins, range=(lo, hi), density=True)
    return edges, density


# ---------------------------------------------------------------------------
# error metrics


def error_metrics(reference: np.ndarray, candidate: np.ndarray, case: NetworkCase,
                  thresholds: ExceedanceThresholds | None = None) -> ErrorMetrics:
    """Relative mean/std errors and pooled exceedance probabilities.

    ``reference`` and ``candidate`` must be seed-matched sample sets of equal
    shape: row i of both came from the same operating condition.
    """
    thresholds = thresholds or ExceedanceThresholds()
    reference = np.asarray(reference, dtype=float)
    candidate = np.asarray(candidate, dtype=float)
    if reference.shape != candidate.shape:
        raise DimensionMismatch(f"reference {reference.shape} vs candidate {candidate.shape}")

    mean0 = reference.mean(axis=0)
    mean1 = candidate.mean(axis=0)
    std0 = reference.std(axis=0, ddof=1)
    std1 = candidate.std(axis=0, ddof=1)

    e_mean = np.empty_like(mean0)
    e_std = np.empty_like(std0)
    mean_flags, std_flags = [], []
    for j in range(len(mean0)):
        if abs(mean0[j]) < 1e-12:
            e_mean[j] = abs(mean1[j] - mean0[j])
            mean_flags.append(j)
        else:
            e_mean[j] = abs(mean1[j] - mean0[j]) / abs(mean0[j])
        if abs(std0[j]) < 1e-12:
            e_std[j] = abs(std1[j] - std0[j])
            std_flags.append(j)
        else:
            e_std[j] = abs(std1[j] - std0[j]) / abs(std0[j])

    layout = solution_layout(case)
    err = np.abs(candidate - reference)
    base = case.base_mva
    class_thresholds = {
        "voltage": (layout["v_mag"], tuple(thresholds.voltage_pu)),
        "generator": (layout["p_gen"], tuple(t / base for t in thresholds.gen_mw)),
        "branch": (layout["p_branch"], tuple(t / base for t in thresholds.branch_mw)),
        "cost": (layout["cost"], tuple(thresholds.cost_dollars)),
    }
    pooled = {}
    per_index = {}
    for name, (sl, taus) in class_thresholds.items():
        block = err[:, sl]
        pooled[name] = {tau: float(np.mean(block > tau)) for tau in taus}
        per_index[name] = {tau: np.mean(block > tau, axis=0) for tau in taus}

    return ErrorMetrics(e_mean=e_mean, e_std=e_std,
                        absolute_mean_flags=mean_flags, absolute_std_flags=std_flags,
                        exceedance=pooled, exceedance_per_index=per_index)


# ---------------------------------------------------------------------------
# method comparison


def compare_methods(case: NetworkCase, model: sdae.SdaeModel,
                    spec: CorrelationSpec | None = None, seed: int = 0,
                    n_samples: int = 10_000, bins: int = 50,
                    density_labels: list | None = None,
                    thresholds: ExceedanceThresholds | None = None,
                    self_check: bool = False) -> PopfReport:
    """Run oracle, surrogate, and dc-only on one seed-matched sample matrix.

    Oracle failures drop the sample from every method so per-sample errors
    stay attributable; timings wrap each method's solve loop only.

    ``self_check`` substitutes the oracle's own outputs for the surrogate's
    (no inference): every surrogate error column must then come out zero,
    which exercises the metric plumbing end to end.
    """
    draw = sample_operating_conditions(case, n_samples, spec, seed)
    labels = output_labels(case)

    oracle_rows = []
    keep_mask = np.ones(draw.n_samples, dtype=bool)
    failures = {}
    t0 = time.perf_counter()
    for i, row in enumerate(draw.values):
        try:
            oracle_rows.append(oracle_opf(case, row).as_vector())
        except PopflowError as exc:
            keep_mask[i] = False
            failures[i] = f"{type(exc).__name__}: {exc}"
    oracle_time = time.perf_counter() - t0
    if not oracle_rows:
        raise TooManyRejections("every oracle sample failed; nothing to compare")
    oracle_vals = np.array(oracle_rows)
    kept = draw.values[keep_mask]

    if self_check:
        surrogate_vals = oracle_vals.copy()
        surrogate_time = 0.0
    else:
        x = operating_features(case, kept)
        t1 = time.perf_counter()
        surrogate_vals = infer(model, x)
        surrogate_time = time.perf_counter() - t1

    t3 = time.perf_counter()
    dc_vals = _dc_only_outputs(case, kept)
    dc_time = time.perf_counter() - t3

    method_values = {
        METHOD_ORACLE: oracle_vals,
        METHOD_SURROGATE: surrogate_vals,
        METHOD_DC_ONLY: dc_vals,
    }
    stats = {m: compute_statistics(v, bins=bins) for m, v in method_values.items()}
    errors = {
        METHOD_SURROGATE: error_metrics(oracle_vals, surrogate_vals, case, thresholds),
        METHOD_DC_ONLY: error_metrics(oracle_vals, dc_vals, case, thresholds),
    }
    timings = {
        METHOD_ORACLE: oracle_time,
        METHOD_SURROGATE: surrogate_time,
        METHOD_DC_ONLY: dc_time,
    }

    if density_labels is None:
        density_labels = default_density_labels(case)
    densities = {}
    for label in density_labels:
        j = labels.index(label)
        cols = {m: v[:, j] for m, v in method_values.items()}
        lo = min(np.min(c) for c in cols.values())
        hi = max(np.max(c) for c in cols.values())
        if lo == hi:
            edges = np.array([lo - 0.5, lo + 0.5])
            densities[label] = {"edges": edges, **{m: np.array([1.0]) for m in cols}}
        else:
            edges = np.histogram_bin_edges([], bins=bins, range=(lo, hi))
            densities[label] = {"edges": edges}
            for m, c in cols.items():
                dens, _ = np.histogram(c, bins=edges, density=True)
                densities[label][m] = dens

    return PopfReport(n_samples=int(keep_mask.sum()), dropped=int((~keep_mask).sum()),
                      labels=labels, stats=stats, errors=errors, timings=timings,
                      densities=densities, failures=failures, self_check=self_check)


def default_density_labels(case: NetworkCase) -> list:
    """One voltage, one generator, one branch, and the cost."""
    out = ["cost"]
    pq = case.pq_indices()
    if len(pq):
        out.append(f"v_mag:{pq[len(pq) // 2]}")
    if case.n_gen:
        out.append(f"p_gen:{min(1, case.n_gen - 1)}")
    if case.n_branch:
        out.append(f"p_branch:{case.n_branch // 2}")
    return out


def _dc_only_outputs(case: NetworkCase, sample_values: np.ndarray) -> np.ndarray:
    """Linear-dispatch analog: DC cost/outputs/flows, voltages flat at 1.0."""
    from .solver import apply_sample

    n = sample_values.shape[0]
    out = np.empty((n, case.solution_dim()))
    ptdf = ptdf_matrix(case)
    gen_map = np.zeros((case.n_bus, case.n_gen))
    for i, gen in enumerate(case.generators):
        gen_map[gen.bus, i] = 1.0
    nb = case.n_bus
    for i in range(n):
        p_load, _ = apply_sample(case, sample_values[i])
        dispatch = dc_opf(case, p_load)
        flows = ptdf @ (gen_map @ dispatch.p_gen - p_load)
        out[i, 0] = dispatch.cost
        out[i, 1:1 + nb] = 1.0
        out[i, 1 + nb:1 + nb + case.n_gen] = dispatch.p_gen
        out[i, 1 + nb + case.n_gen:] = flows
    return out


# ---------------------------------------------------------------------------
# report files


def save_report(report: PopfReport, directory) -> None:
    """report.json plus one density table per plotted index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "n_samples": report.n_samples,
        "dropped": report.dropped,
        "self_check": report.self_check,
        "labels": report.labels,
        "timings_seconds": report.timings,
        "stats": {
            m: {"mean": s.mean.tolist(), "std": s.std.tolist()}
            for m, s in report.stats.items()
        },
        "errors": {
            m: {
                "e_mean": e.e_mean.tolist(),
                "e_std": e.e_std.tolist(),
                "absolute_mean_flags": e.absolute_mean_flags,
                "absolute_std_flags": e.absolute_std_flags,
                "exceedance": {c: {str(t): p for t, p in d.items()}
                               for c, d in e.exceedance.items()},
            }
            for m, e in report.errors.items()
        },
        "failures": report.failures,
    }
    atomic_write_text(directory / "report.json", json.dumps(doc, indent=1) + "\n")
    for label, table in report.densities.items():
        edges = table["edges"]
        centers = 0.5 * (edges[:-1] + edges[1:])
        methods = [m for m in table if m != "edges"]
        lines = ["bin_center\t" + "\t".join(methods)]
        for k, c in enumerate(centers):
            lines.append(f"{c:.17g}\t" + "\t".join(f"{table[m][k]:.17g}" for m in methods))
        fname = "density_" + label.replace(":", "_") + ".tsv"
        atomic_write_text(directory / fname, "\n".join(lines) + "\n")
