"""Synthetic crash data from a known ordered-logit SCM, plus benchmark metrics.

Each confounder is a monotone transform of a latent standard normal score
``g`` (log-normal for densities, income and segment length; scaled
logit-normal for percentages), clipped to its observed range. Treatments are
drawn from (ordered) logit models on ``g``; the severity outcome from an
ordered logit on treatment effects plus ``g``. The per-record linear
predictor and logistic noise are retained, so class probabilities and
potential outcomes under any treatment vector are exact.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (CONFOUNDER, DEFAULT_SCHEMA, TREATMENT, Dataset, VariableSpec,
                      fmt_float, read_csv_rows, write_csv)
from .effects import EffectEstimate, effects_from_probabilities
from .errors import ContractError, DataError
from .propensity import LabeledDataset, MatchPolicy, assign_preliminary_labels, sigmoid
from .scenario import Scenario
from .training import LossWeights, TrainConfig, split_labeled, train

# Marginal shares of the treatment levels, level 0 first.
TREATMENT_MARGINALS = {
    "lighting": (0.15, 0.03, 0.20, 0.62),
    "control_device": (0.74, 0.03, 0.23),
    "weather": (0.03, 0.10, 0.87),
    "improper_turning": (0.83, 0.17),
    "alcohol_drug": (0.93, 0.07),
    "pedestrian": (0.97, 0.03),
    "cyclist": (0.98, 0.02),
    "motorcyclist": (0.97, 0.03),
}

CONFOUNDER_ORDER = ("population_density", "income", "minority", "service_jobs", "industrial_jobs",
                    "retail_jobs", "transport_jobs", "segment_length", "intersection_density")

# Coefficients on the latent confounder scores, in CONFOUNDER_ORDER.
TREATMENT_ASSIGNMENT = {
    "lighting": (-0.6, 0.0, 0.0, 0.0, 0.2, 0.0, 0.2, 0.5, -0.3),
    "control_device": (0.5, 0.2, 0.0, 0.2, 0.0, 0.0, 0.0, -0.3, 0.6),
    "weather": (0.0, 0.2, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "improper_turning": (0.3, 0.0, 0.0, 0.0, 0.2, 0.0, 0.4, 0.0, 0.4),
    "alcohol_drug": (-0.2, -0.4, 0.2, 0.0, 0.0, 0.0, 0.0, 0.3, 0.0),
    "pedestrian": (0.7, -0.3, 0.3, 0.2, 0.0, 0.2, 0.0, -0.2, 0.5),
    "cyclist": (0.5, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.3),
    "motorcyclist": (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0),
}

# Additive ordered-logit effects on severity per treatment level (level 0 is 0).
OUTCOME_EFFECTS = {
    "lighting": (0.0, 0.15, 0.35, 0.7),
    "control_device": (0.3, 0.35, 0.0),
    "weather": (0.6, 0.35, 0.0),
    "improper_turning": (0.0, 0.0),
    "alcohol_drug": (0.0, 0.8),
    "pedestrian": (0.0, 2.4),
    "cyclist": (0.0, 1.6),
    "motorcyclist": (0.0, 2.0),
}

OUTCOME_CONFOUNDER = (-0.25, -0.2, 0.15, 0.0, 0.1, 0.0, 0.15, 0.25, 0.1)

LOGNORMAL = {"population_density", "income", "segment_length", "intersection_density"}

# (location, scale) of 100 * sigmoid(loc + scale * g); fitted to the reference
# mean/std by scripts/calibrate_generator.py.
PERCENT_PARAMS = {
    "minority": (-0.2642, 0.9758),
    "service_jobs": (0.365, 0.4128),
    "industrial_jobs": (-1.703, 0.5228),
    "retail_jobs": (-1.8222, 0.416),
    "transport_jobs": (-2.9137, 0.6591),
}

# Severity cutpoints giving 59.04 / 29.80 / 7.61 / 3.55 % marginals (codes 0..3)
# under the default config; fitted by scripts/calibrate_generator.py.
DEFAULT_CUTPOINTS = (1.3928, 3.381, 4.753)

SEVERITY_TARGETS = (0.5904, 0.2980, 0.0761, 0.0355)


def _frozen_dict(d):
    return {k: tuple(v) for k, v in d.items()}


@dataclass(frozen=True)
class SynthConfig:
    n: int = 5000
    seed: int = 0
    treatment_marginals: dict = field(default_factory=lambda: _frozen_dict(TREATMENT_MARGINALS))
    treatment_assignment: dict = field(default_factory=lambda: _frozen_dict(TREATMENT_ASSIGNMENT))
    outcome_effects: dict = field(default_factory=lambda: _frozen_dict(OUTCOME_EFFECTS))
    outcome_confounder: tuple = OUTCOME_CONFOUNDER
    cutpoints: tuple = DEFAULT_CUTPOINTS
    noise_scale: float = 1.0
    income_minority_corr: float = -0.4
    percent_params: dict = field(default_factory=lambda: _frozen_dict(PERCENT_PARAMS))

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("n must be >= 1")
        if not self.noise_scale > 0:
            raise ContractError("noise_scale must be positive")
        if not -1 < self.income_minority_corr < 1:
            raise ContractError("income_minority_corr must lie in (-1, 1)")
        c = self.cutpoints
        if len(c) != 3 or any(b <= a for a, b in zip(c, c[1:])):
            raise ContractError("need 3 strictly increasing cutpoints")
        for alias, m in self.treatment_marginals.items():
            if any(p <= 0 for p in m) or abs(sum(m) - 1) > 1e-9:
                raise ContractError(f"treatment marginals for {alias} must be positive and sum to 1")
        for alias, coef in self.treatment_assignment.items():
            if len(coef) != len(CONFOUNDER_ORDER):
                raise ContractError(f"assignment coefficients for {alias} need {len(CONFOUNDER_ORDER)} entries")
        if len(self.outcome_confounder) != len(CONFOUNDER_ORDER):
            raise ContractError("outcome_confounder needs one coefficient per confounder")
        for alias, eff in self.outcome_effects.items():
            if len(eff) != len(self.treatment_marginals[alias]):
                raise ContractError(f"outcome effects for {alias} need one entry per level")

    def with_effect(self, alias: str, effects: Sequence[float]) -> "SynthConfig":
        oe = dict(self.outcome_effects)
        oe[alias] = tuple(effects)
        return dataclasses.replace(self, outcome_effects=oe)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-record linear predictor pieces and noise of the outcome model."""

    record_ids: np.ndarray
    eta_confounders: np.ndarray
    noise: np.ndarray
    cutpoints: tuple
    noise_scale: float
    effects: tuple  # per treatment (schema order): tuple of per-level effects

    def _rows(self, record_ids) -> np.ndarray:
        lookup = {int(r): i for i, r in enumerate(self.record_ids)}
        try:
            return np.array([lookup[int(r)] for r in record_ids], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"record {e.args[0]} has no ground truth") from None

    def eta(self, record_ids, treatments: np.ndarray) -> np.ndarray:
        rows = self._rows(record_ids)
        treatments = np.asarray(treatments)
        if treatments.shape != (len(rows), len(self.effects)):
            raise ContractError("treatment matrix does not match the ground truth")
        eta = self.eta_confounders[rows].copy()
        for j, eff in enumerate(self.effects):
            eta += np.asarray(eff)[treatments[:, j]]
        return eta

    def probabilities(self, record_ids, treatments: np.ndarray) -> np.ndarray:
        """Exact (N, 4) class probabilities under the given treatment codes."""
        eta = self.eta(record_ids, treatments)
        cum = sigmoid((np.asarray(self.cutpoints)[None, :] - eta[:, None]) / self.noise_scale)
        cum = np.hstack([np.zeros((len(eta), 1)), cum, np.ones((len(eta), 1))])
        return np.diff(cum, axis=1)

    def potential_outcomes(self, record_ids, treatments: np.ndarray) -> np.ndarray:
        """Severity each record would show under ``treatments``, holding its noise fixed."""
        eta = self.eta(record_ids, treatments)
        latent = eta + self.noise[self._rows(record_ids)]
        return (latent[:, None] > np.asarray(self.cutpoints)[None, :]).sum(axis=1)


def _aliases(schema, role):
    return [v.alias for v in schema if v.role == role]


def generate_synthetic(config: SynthConfig = SynthConfig(),
                       schema: Sequence[VariableSpec] = DEFAULT_SCHEMA) -> tuple[Dataset, GroundTruth]:
    treat = [v for v in schema if v.role == TREATMENT]
    conf = [v for v in schema if v.role == CONFOUNDER]
    if [v.alias for v in conf] != list(CONFOUNDER_ORDER) or \
            [v.alias for v in treat] != list(TREATMENT_MARGINALS):
        raise ContractError("the generator only supports the default schema")
    rng = np.random.default_rng([config.seed, 7])
    n = config.n
    g = rng.standard_normal((n, len(conf)))
    # correlate minority with income
    i_inc, i_min = CONFOUNDER_ORDER.index("income"), CONFOUNDER_ORDER.index("minority")
    r = config.income_minority_corr
    g[:, i_min] = r * g[:, i_inc] + math.sqrt(1 - r * r) * g[:, i_min]

    X = np.empty((n, len(conf)))
    for j, v in enumerate(conf):
        if v.alias in LOGNORMAL:
            s2 = math.log(1 + (v.std / v.mean) ** 2)
            x = np.exp(math.log(v.mean) - s2 / 2 + math.sqrt(s2) * g[:, j])
        else:
            loc, scale = config.percent_params[v.alias]
            x = 100.0 * sigmoid(loc + scale * g[:, j])
        X[:, j] = np.clip(x, v.bounds[0], v.bounds[1])

    T = np.empty((n, len(treat)), dtype=np.int64)
    for j, v in enumerate(treat):
        gamma = np.asarray(config.treatment_assignment[v.alias], dtype=float)
        cum = np.cumsum(config.treatment_marginals[v.alias])[:-1]
        widen = math.sqrt(1 + math.pi * float(gamma @ gamma) / 8)
        cuts = np.log(cum / (1 - cum)) * widen
        latent = g @ gamma + rng.logistic(size=n)
        T[:, j] = (latent[:, None] > cuts[None, :]).sum(axis=1)

    eta_x = g @ np.asarray(config.outcome_confounder, dtype=float)
    noise = config.noise_scale * rng.logistic(size=n)
    truth = GroundTruth(np.arange(n), eta_x, noise, tuple(config.cutpoints), config.noise_scale,
                        tuple(tuple(config.outcome_effects[v.alias]) for v in treat))
    y = truth.potential_outcomes(np.arange(n), T)
    return Dataset(tuple(schema), np.arange(n), y, T, X), truth


def oracle_effects(truth: GroundTruth, dataset: Dataset, scenario: Scenario = Scenario()) -> EffectEstimate:
    """Exact effects from the SCM's closed-form class probabilities."""
    scenario = scenario.resolve(dataset.schema)
    pF = truth.probabilities(dataset.record_ids, dataset.treatments)
    pCF = truth.probabilities(dataset.record_ids, scenario.apply(dataset.treatments, dataset.schema))
    return effects_from_probabilities(dataset.record_ids, pF, pCF, scenario.label(dataset.schema))


class OracleModel:
    """Adapter exposing ground-truth probabilities through ``predict_proba``."""

    def __init__(self, truth: GroundTruth):
        self.truth = truth

    def predict_proba(self, dataset, scenario=Scenario(), mc_samples=1, seed=0):
        t_star = scenario.apply(dataset.treatments, dataset.schema)
        return (self.truth.probabilities(dataset.record_ids, dataset.treatments),
                self.truth.probabilities(dataset.record_ids, t_star))


# --------------------------------------------------------------------------
# ground-truth sidecar


def write_truth(truth: GroundTruth, path, schema: Sequence[VariableSpec] = DEFAULT_SCHEMA,
                comments: Sequence[str] = ()) -> None:
    treat = [v for v in schema if v.role == TREATMENT]
    effect_cols = [f"effect[{v.alias}={lvl}]" for v in treat for lvl in range(v.levels)]
    header = (["record_id", "eta_confounders", "noise", "noise_scale"]
              + [f"cut_{k}" for k in range(len(truth.cutpoints))] + effect_cols)
    consts = ([fmt_float(truth.noise_scale)] + [fmt_float(c) for c in truth.cutpoints]
              + [fmt_float(e) for eff in truth.effects for e in eff])
    rows = [[str(int(r)), fmt_float(e), fmt_float(z)] + consts
            for r, e, z in zip(truth.record_ids, truth.eta_confounders, truth.noise)]
    write_csv(path, header, rows, comments)


def load_truth(path, schema: Sequence[VariableSpec] = DEFAULT_SCHEMA) -> GroundTruth:
    header, rows = read_csv_rows(path)
    if not rows:
        raise DataError(f"{path}: empty ground-truth file")
    col = {c: i for i, c in enumerate(header)}
    try:
        ids = [int(r[col["record_id"]]) for _, r in rows]
        eta = [float(r[col["eta_confounders"]]) for _, r in rows]
        noise = [float(r[col["noise"]]) for _, r in rows]
        first = rows[0][1]
        scale = float(first[col["noise_scale"]])
        cuts = tuple(float(first[col[f"cut_{k}"]]) for k in range(3))
        effects = tuple(tuple(float(first[col[f"effect[{v.alias}={lvl}]"]]) for lvl in range(v.levels))
                        for v in schema if v.role == TREATMENT)
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: malformed ground-truth file ({e})") from None
    return GroundTruth(np.array(ids), np.array(eta), np.array(noise), cuts, scale, effects)


# --------------------------------------------------------------------------
# matching baseline and metrics


def _nearest(query: np.ndarray, pool: np.ndarray, pool_ids: np.ndarray) -> np.ndarray:
    """Row index into ``pool`` nearest to each query row; ties to the smallest id."""
    out = np.empty(len(query), dtype=np.int64)
    order = np.argsort(pool_ids, kind="stable")
    pool, pool_ids = pool[order], pool_ids[order]
    sq = (pool ** 2).sum(axis=1)
    for s in range(0, len(query), 256):
        q = query[s:s + 256]
        d = sq[None, :] - 2 * q @ pool.T + (q ** 2).sum(axis=1)[:, None]
        # exact recomputation among near-minimal candidates for stable tie-breaking
        dmin = d.min(axis=1, keepdims=True)
        for r in range(len(q)):
            cand = np.flatnonzero(d[r] <= dmin[r] + 1e-9)
            exact = ((pool[cand] - q[r]) ** 2).sum(axis=1)
            out[s + r] = order[cand[np.flatnonzero(exact == exact.min())[0]]]
    return out


def matching_baseline(labeled: LabeledDataset, test: Dataset,
                      scenario: Scenario | None = None,
                      t_star: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour (factual, counterfactual) severity predictions.

    The counterfactual donor must hold the intervened level on every changed
    variable. Pass a ``scenario`` or per-record target codes ``t_star``
    (changed variables are then those differing from the record's own codes).
    """
    train = labeled.base
    if train.n == 0:
        raise ContractError("matching baseline needs training data")
    calib = train.calibration
    tr = np.hstack([train.calibrate_confounders(), train.calibrate_treatments()])
    te_ds = test.with_calibration(calib)
    xq = te_ds.calibrate_confounders()
    fact = train.outcome[_nearest(np.hstack([xq, te_ds.calibrate_treatments()]), tr, train.record_ids)]
    if t_star is None:
        scenario = (scenario or Scenario()).resolve(test.schema)
        t_star = scenario.apply(test.treatments, test.schema)
        names = [v.name for v in test.treatment_specs]
        changed = np.zeros_like(test.treatments, dtype=bool)
        for key, _ in scenario.deltas:
            changed[:, names.index(key)] = True
    else:
        t_star = np.asarray(t_star)
        changed = t_star != test.treatments
    q = np.hstack([xq, te_ds.calibrate_treatments(t_star)])
    cf = np.empty(test.n, dtype=np.int64)
    patterns: dict = {}
    for i in range(test.n):
        cols = np.flatnonzero(changed[i])
        patterns.setdefault((tuple(cols), tuple(t_star[i, cols])), []).append(i)
    for (cols, vals), rows in patterns.items():
        mask = np.all(train.treatments[:, list(cols)] == np.array(vals, dtype=np.int64), axis=1) \
            if cols else np.ones(train.n, dtype=bool)
        pool = np.flatnonzero(mask)
        if len(pool) == 0:
            names = [test.treatment_specs[c].key for c in cols]
            raise DataError(f"no training record holds {dict(zip(names, vals))} (empty donor pool)")
        rows = np.array(rows)
        k = _nearest(q[rows], tr[pool], train.record_ids[pool])
        cf[rows] = train.outcome[pool[k]]
    return fact, cf


@dataclass(frozen=True)
class Metrics:
    mse: float
    rmse: float
    mae: float
    scenario: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate(predicted, true, scenario: str = "factual") -> Metrics:
    p, t = np.asarray(predicted, dtype=float), np.asarray(true, dtype=float)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractError(f"prediction/truth length mismatch: {p.shape} vs {t.shape}")
    if len(p) == 0:
        raise ContractError("cannot evaluate empty predictions")
    d = p - t
    mse = float(np.mean(d * d))
    return Metrics(mse, math.sqrt(mse), float(np.mean(np.abs(d))), scenario)


def benchmark_metrics(model, train_ld: LabeledDataset, test_ld: LabeledDataset,
                      truth: GroundTruth | None = None, mc_samples: int = 50,
                      seed: int = 0) -> list[dict]:
    """Factual and counterfactual error rows for the model and the matching baseline.

    The counterfactual query for each test record is its own label flip
    ``t_star``. The reference outcome is the SCM potential outcome when
    ``truth`` is given and the matched ``y_star`` otherwise. Model point
    predictions are argmax levels; ``mse_expected_severity`` scores the
    probability-weighted level instead.
    """
    test, t_star = test_ld.base, test_ld.t_star
    pf, pcf = model.predict_proba(test, Scenario(), mc_samples, seed, t_star=t_star)
    base_f, base_cf = matching_baseline(train_ld, test, t_star=t_star)
    cf_true = (truth.potential_outcomes(test.record_ids, t_star) if truth is not None
               else test_ld.y_star)
    levels = np.arange(pf.shape[1])
    rows = []
    for scen, p, true in (("factual", pf, test.outcome), ("counterfactual", pcf, cf_true)):
        m = evaluate(p.argmax(axis=1), true, scen).to_dict()
        m["mse_expected_severity"] = evaluate(p @ levels, true, scen).mse
        rows.append({"method": "DCI", **m})
    for scen, pred, true in (("factual", base_f, test.outcome), ("counterfactual", base_cf, cf_true)):
        rows.append({"method": "matching", **evaluate(pred, true, scen).to_dict()})
    return rows


@dataclass(eq=False)
class BenchmarkRun:
    seed: int
    dataset: Dataset
    truth: GroundTruth
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    model: object
    label_seconds: float
    train_seconds: float
    rows: list[dict]

    def metric(self, method: str, scenario: str, name: str = "mse") -> float:
        for r in self.rows:
            if r["method"] == method and r["scenario"] == scenario:
                return r[name]
        raise KeyError((method, scenario))


def run_benchmark(seed: int = 0, synth: SynthConfig | None = None, policy: MatchPolicy = MatchPolicy(),
                  mconfig=None, tconfig=None, w=None, mc_samples: int = 50,
                  ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> BenchmarkRun:
    """Generate, label, split, train and score one seeded synthetic benchmark."""
    synth = dataclasses.replace(synth or SynthConfig(), seed=seed)
    tconfig = dataclasses.replace(tconfig or TrainConfig(), seed=seed)
    ds, truth = generate_synthetic(synth)
    t0 = time.perf_counter()
    labeled = assign_preliminary_labels(ds, policy, seed)
    t1 = time.perf_counter()
    tr, va, te = split_labeled(labeled, ratios, seed)
    model = train(tr, va, mconfig, tconfig, w or LossWeights())
    t2 = time.perf_counter()
    rows = benchmark_metrics(model, tr, te, truth, mc_samples, seed)
    return BenchmarkRun(seed, ds, truth, tr, va, te, model, t1 - t0, t2 - t1, rows)
