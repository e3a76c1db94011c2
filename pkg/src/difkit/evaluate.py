"""Forecasting with decoded derivative networks, NRMSE tables, sweeps and exports.

Forecasts start from each sample's true initial state and cover the whole
grid, so the first ``T_c`` columns (the model input) are part of every score.

File schemas written here (tab separated, one header line):

``eval.txt``
    ``key=value`` lines: the four NRMSE cells, sample and exclusion counts.
``sr_data.tsv``
    ``sample  t  <shared params>  <state names>  f_c_<state> ...``. One row per
    test sample and grid column, derivatives in raw (denormalized) units.
``trajectories.tsv``
    ``sample  env  series  t  <state names>`` with ``series`` one of
    ``observed``, ``invariant``, ``forecast_full``, ``forecast_invariant``.
``quantiles.tsv``
    ``method  metric  n  n_failed  min  q25  median  q75  max``.
``candidates.tsv``
    ``method  index  status  value``, one row per sweep candidate.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dyn import IntegrationDiverged, Trajectory, integrate_batch, nrmse
from .grad import Array
from .hyper import evaluate_numpy
from .nets import DIFModel, load_checkpoint
from .systems import (COMMON_PARAMS, STATE_NAMES, Dataset, Sample, default_tc, invariant_vector_field,
                      load_dataset, system_id, vector_field)
from .train import TrainConfig, normalize_states, sample_hyperparams, train

log = logging.getLogger(__name__)

WHICH = ("invariant", "full")
CELLS = ("nrmse_fc_on_Xc", "nrmse_f_on_Xc", "nrmse_fc_on_X", "nrmse_f_on_X")


# forecasters ---------------------------------------------------------------------

class ModelForecaster:
    """Turns a trained model into batched raw-unit vector fields, one per sample."""

    def __init__(self, model: DIFModel, meta, T_c: int | None = None):
        self.model = model
        self.meta = meta
        self.T_c = int(T_c or meta.T_c)

    def function_vectors(self, samples: Sequence[Sample]):
        X = np.stack([s.x.states for s in samples])
        xp = normalize_states(X, self.meta)[:, :self.T_c]
        F, Fc, _, _ = self.model.function_vectors(Array(np.ascontiguousarray(xp)))
        return F.data.copy(), Fc.data.copy()

    def fields(self, samples: Sequence[Sample]) -> dict:
        F, Fc = self.function_vectors(samples)
        mean, std, layout = self.meta.norm_mean, self.meta.norm_std, self.model.layout

        def wrap(vecs):
            def f(x):
                return evaluate_numpy(vecs, (x - mean) / std, layout) * std
            return f
        return {"full": wrap(F), "invariant": wrap(Fc)}


class OracleModel:
    """Stands in for a model whose decoded networks are the true fields."""

    def __init__(self, system):
        self.system = system

    def fields(self, samples: Sequence[Sample]) -> dict:
        names = samples[0].params.values.keys()
        p = {k: np.array([s.params.values[k] for s in samples]) for k in names}
        env = np.array([s.env for s in samples])
        f_inv = invariant_vector_field(self.system, p)
        per_env = {e: vector_field(self.system, e, p) for e in np.unique(env)}

        def f_full(x):
            out = np.empty_like(x)
            for e, fe in per_env.items():
                mask = env == e
                out[mask] = fe(x)[mask]
            return out
        return {"full": f_full, "invariant": f_inv}


def forecast_batch(forecaster, samples: Sequence[Sample], which: str = "invariant"):
    """Integrates every sample from its column-0 state. Returns ``(states (B,d,T), diverged)``."""
    if which not in WHICH:
        raise ValueError(f"which must be one of {WHICH}")
    if not samples:
        raise ValueError("no samples to forecast")
    f = forecaster.fields(samples)[which]
    x0 = np.stack([s.x.states[:, 0] for s in samples])
    states, diverged = integrate_batch(f, x0, samples[0].x.grid)
    return states, diverged


def forecast(forecaster, sample: Sample, which: str = "invariant") -> Trajectory:
    states, diverged = forecast_batch(forecaster, [sample], which)
    if diverged[0]:
        raise IntegrationDiverged(-1)
    return Trajectory(states[0], sample.x.grid)


# evaluation -----------------------------------------------------------------------

@dataclass
class EvalMatrix:
    nrmse_fc_on_Xc: float
    nrmse_f_on_Xc: float
    nrmse_fc_on_X: float
    nrmse_f_on_X: float
    n_samples: int = 0
    n_excluded_invariant: int = 0
    n_excluded_full: int = 0

    @property
    def exclusion_rate(self) -> float:
        if not self.n_samples:
            return 0.0
        return (self.n_excluded_invariant + self.n_excluded_full) / (2 * self.n_samples)

    def orderings(self) -> dict:
        return {"fc_beats_f_on_Xc": self.nrmse_fc_on_Xc < self.nrmse_f_on_Xc,
                "f_beats_fc_on_X": self.nrmse_f_on_X < self.nrmse_fc_on_X}

    def format(self) -> str:
        lines = [f"{k}={format(getattr(self, k), '.17g')}" for k in CELLS]
        lines += [f"n_samples={self.n_samples}", f"n_excluded_invariant={self.n_excluded_invariant}",
                  f"n_excluded_full={self.n_excluded_full}",
                  f"exclusion_rate={format(self.exclusion_rate, '.17g')}"]
        lines += [f"{k}={int(v)}" for k, v in self.orderings().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "EvalMatrix":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(*(float(kv[k]) for k in CELLS), n_samples=int(kv.get("n_samples", 0)),
                   n_excluded_invariant=int(kv.get("n_excluded_invariant", 0)),
                   n_excluded_full=int(kv.get("n_excluded_full", 0)))


def _score(pred, truth, keep) -> float:
    if not keep.any():
        return float("nan")
    return nrmse(pred[keep], truth[keep])


def evaluate(forecaster, samples: Sequence[Sample]) -> EvalMatrix:
    """Four-cell NRMSE matrix. Diverged forecasts are excluded from their cells and counted."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty test set")
    if any(s.x_inv is None for s in samples):
        raise ValueError("evaluation needs invariant trajectories on every sample")
    X = np.stack([s.x.states for s in samples])
    Xc = np.stack([s.x_inv.states for s in samples])
    fc, bad_c = forecast_batch(forecaster, samples, "invariant")
    f, bad_f = forecast_batch(forecaster, samples, "full")
    if bad_c.any() or bad_f.any():
        log.warning("excluded %d invariant and %d full forecasts that diverged",
                    int(bad_c.sum()), int(bad_f.sum()))
    return EvalMatrix(
        nrmse_fc_on_Xc=_score(fc, Xc, ~bad_c), nrmse_f_on_Xc=_score(f, Xc, ~bad_f),
        nrmse_fc_on_X=_score(fc, X, ~bad_c), nrmse_f_on_X=_score(f, X, ~bad_f),
        n_samples=len(samples), n_excluded_invariant=int(bad_c.sum()), n_excluded_full=int(bad_f.sum()))


def forecaster_from_checkpoint(path, ds: Dataset) -> ModelForecaster:
    model, extra = load_checkpoint(path)
    return ModelForecaster(model, ds.meta, int(extra.get("T_c", ds.meta.T_c)))


def write_eval(em: EvalMatrix, path) -> None:
    with open(path, "w") as fh:
        fh.write(em.format())


# sweeps ---------------------------------------------------------------------------

@dataclass
class SweepSummary:
    method: str
    values: list
    n_failed: int = 0
    metric: str = "nrmse_fc_on_Xc"
    min: float = float("nan")
    q25: float = float("nan")
    median: float = float("nan")
    q75: float = float("nan")
    max: float = float("nan")

    @classmethod
    def from_values(cls, method, values, n_failed=0, metric="nrmse_fc_on_Xc"):
        vals = [float(v) for v in values]
        s = cls(method, vals, n_failed, metric)
        if vals:
            a = np.asarray(vals)
            s.min, s.q25, s.median, s.q75, s.max = (float(np.quantile(a, q)) for q in (0, .25, .5, .75, 1))
        return s


@dataclass
class CandidateRecord:
    method: str
    index: int
    seed: int
    lr: float
    weights: dict
    status: str = "ok"
    error: str = ""
    matrix: EvalMatrix | None = None

    def value(self, metric="nrmse_fc_on_Xc") -> float:
        if self.matrix is None:
            return float("nan")
        return getattr(self.matrix, metric)


def candidate_config(base: TrainConfig, method: str, seed: int, index: int) -> TrainConfig:
    """Hyperparameters and training seed of candidate ``index``, fixed by ``(seed, index)``."""
    ss = np.random.SeedSequence([seed, index])
    hp_ss, train_ss = ss.spawn(2)
    w, lr = sample_hyperparams(method, np.random.default_rng(hp_ss))
    kw = {k: v for k, v in dataclasses.asdict(w).items()}
    return dataclasses.replace(base, method=method, lr=lr, seed=int(train_ss.generate_state(1)[0]), **kw)


def run_candidate(base: TrainConfig, method: str, seed: int, index: int, out_dir=None) -> CandidateRecord:
    cfg = candidate_config(base, method, seed, index)
    w = cfg.weights()
    rec = CandidateRecord(method, index, cfg.seed, cfg.lr, dataclasses.asdict(w))
    run_dir = os.path.join(out_dir, f"{method}_{index:03d}") if out_dir else None
    try:
        ds = load_dataset(cfg.dataset)
        res = train(cfg, ds, run_dir)
        if res.diverged:
            rec.status, rec.error = "failed", "training diverged"
            return rec
        rec.matrix = evaluate(ModelForecaster(res.model, ds.meta, _tc(cfg, ds)), ds.test)
        if run_dir:
            write_eval(rec.matrix, os.path.join(run_dir, "eval.txt"))
        if not all(math.isfinite(getattr(rec.matrix, k)) for k in CELLS):
            rec.status, rec.error = "failed", "every forecast diverged"
    except Exception as exc:  # a failed candidate is recorded, the sweep goes on
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
    return rec


def _tc(cfg: TrainConfig, ds: Dataset) -> int:
    return default_tc(ds.meta.system, ds.meta.T, cfg.tc_factor) if cfg.tc_factor else ds.meta.T_c


def sweep(base: TrainConfig, method: str, n_candidates: int, seed: int = 0, workers: int = 1,
          out_dir=None, metric: str = "nrmse_fc_on_Xc"):
    """Random search of ``n_candidates`` train+evaluate runs. Returns (SweepSummary, records)."""
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    args = [(base, method, seed, i, out_dir) for i in range(n_candidates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_candidate, *zip(*args)))
    else:
        records = [run_candidate(*a) for a in args]
    ok = [r for r in records if r.status == "ok"]
    summary = SweepSummary.from_values(method, [r.value(metric) for r in ok],
                                       len(records) - len(ok), metric)
    if out_dir:
        export_sweep_data([summary], records, out_dir)
    return summary, records


# exports --------------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def export_sr_data(forecaster, samples: Sequence[Sample], path, system) -> int:
    """Rows of (shared parameters, state, predicted invariant derivative). Returns the row count."""
    samples = list(samples)
    names = STATE_NAMES[system_id(system)]
    common = COMMON_PARAMS[system_id(system)]
    header = ["sample", "t", *common, *names, *(f"f_c_{n}" for n in names)]
    f_inv = forecaster.fields(samples)["invariant"]
    X = np.stack([s.x.states for s in samples])          # (B, d, T)
    B, d, T = X.shape
    times = samples[0].x.grid.times
    rows = 0
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        derivs = np.stack([f_inv(X[:, :, k]) for k in range(T)], axis=2)
        for i, s in enumerate(samples):
            pv = [_fmt(s.params.values[k]) for k in common]
            for k in range(T):
                fh.write("\t".join([str(i), _fmt(times[k]), *pv, *map(_fmt, X[i, :, k]),
                                    *map(_fmt, derivs[i, :, k])]) + "\n")
                rows += 1
    return rows


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    return lines[0].split("\t"), [ln.split("\t") for ln in lines[1:]]


def export_trajectories(forecaster, samples: Sequence[Sample], path, system) -> None:
    samples = list(samples)
    names = STATE_NAMES[system_id(system)]
    fc, _ = forecast_batch(forecaster, samples, "invariant")
    f, _ = forecast_batch(forecaster, samples, "full")
    times = samples[0].x.grid.times
    with open(path, "w") as fh:
        fh.write("\t".join(["sample", "env", "series", "t", *names]) + "\n")
        for i, s in enumerate(samples):
            series = [("observed", s.x.states), ("invariant", s.x_inv.states),
                      ("forecast_full", f[i]), ("forecast_invariant", fc[i])]
            for label, st in series:
                for k in range(st.shape[1]):
                    fh.write("\t".join([str(i), str(s.env), label, _fmt(times[k]),
                                        *map(_fmt, st[:, k])]) + "\n")


QUANTILE_COLUMNS = ("method", "metric", "n", "n_failed", "min", "q25", "median", "q75", "max")


def export_sweep_data(summaries: Sequence[SweepSummary], records: Sequence[CandidateRecord], out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    qpath = os.path.join(out_dir, "quantiles.tsv")
    with open(qpath, "w") as fh:
        fh.write("\t".join(QUANTILE_COLUMNS) + "\n")
        for s in summaries:
            fh.write("\t".join([s.method, s.metric, str(len(s.values)), str(s.n_failed),
                                *map(_fmt, (s.min, s.q25, s.median, s.q75, s.max))]) + "\n")
    cpath = os.path.join(out_dir, "candidates.tsv")
    metric = summaries[0].metric if summaries else "nrmse_fc_on_Xc"
    with open(cpath, "w") as fh:
        fh.write("\t".join(["method", "index", "status", "value"]) + "\n")
        for r in sorted(records, key=lambda r: (r.method, r.index)):
            fh.write("\t".join([r.method, str(r.index), r.status, _fmt(r.value(metric))]) + "\n")
    return [qpath, cpath]


def read_candidates(path) -> list[CandidateRecord]:
    _, rows = read_table(path)
    out = []
    for method, index, status, value in rows:
        rec = CandidateRecord(method, int(index), 0, 0.0, {}, status)
        v = float(value)
        if status == "ok":
            rec.matrix = EvalMatrix(v, float("nan"), float("nan"), float("nan"))
        out.append(rec)
    return out


def export_plot_data(out_dir, forecaster=None, samples=None, system=None,
                     summaries=None, records=None, n_samples: int = 8) -> list[str]:
    """Writes ``trajectories.tsv`` for a run and/or the quantile files for a sweep."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if forecaster is not None:
        path = os.path.join(out_dir, "trajectories.tsv")
        export_trajectories(forecaster, list(samples)[:n_samples], path, system)
        written.append(path)
    if summaries:
        written += export_sweep_data(summaries, records or [], out_dir)
    if not written:
        raise ValueError("nothing to export: pass a run or sweep results")
    return written
