"""Severity-level and probability-shift treatment effects, and stratified reports.

Per record, the level effect is ``argmax(p_cf) - argmax(p_f)`` with ties going
to the lower severity. When that is 0 the probability effect
``max(p_cf) - max(p_f)`` is defined; otherwise it is absent.

Two averages of the probability effect are kept: ``ate_prob`` over the
records whose level did not change, and ``ate_prob_over_n`` which counts the
changed records as zeros and divides by N.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dataset import CONFOUNDER, Dataset, find_variable, fmt_float, write_csv
from .errors import ContractError, DataError
from .scenario import Scenario

log = logging.getLogger(__name__)


class ProbabilityModel(Protocol):
    def predict_proba(self, dataset: Dataset, scenario: Scenario, mc_samples: int,
                      seed: int) -> tuple[np.ndarray, np.ndarray]: ...


def _check_pair(pF, pCF):
    pF, pCF = np.asarray(pF, dtype=float), np.asarray(pCF, dtype=float)
    if pF.shape != pCF.shape:
        raise ContractError(f"probability vectors differ in length: {pF.shape} vs {pCF.shape}")
    return pF, pCF


def ite_level(pF, pCF) -> int:
    pF, pCF = _check_pair(pF, pCF)
    return int(np.argmax(pCF)) - int(np.argmax(pF))


def ite_probability(pF, pCF) -> float:
    pF, pCF = _check_pair(pF, pCF)
    if ite_level(pF, pCF) != 0:
        raise ContractError("probability effect is only defined when the severity level is unchanged")
    return float(pCF.max() - pF.max())


def expected_severity(p) -> float:
    p = np.asarray(p, dtype=float)
    return float(p @ np.arange(p.shape[-1]))


@dataclass(frozen=True, eq=False)
class EffectEstimate:
    scenario: str
    record_ids: np.ndarray
    ite_level: np.ndarray
    ite_prob: np.ndarray  # NaN where the level changed
    ate_level: float
    ate_prob: float
    ate_prob_over_n: float
    ate_level_changed_mean: float
    n_total: int
    n_level_changed: int
    n_level_unchanged: int

    @property
    def per_sample(self) -> list[tuple[int, int, float | None]]:
        return [(int(r), int(l), None if math.isnan(p) else float(p))
                for r, l, p in zip(self.record_ids, self.ite_level, self.ite_prob)]

    @property
    def unchanged_subset_empty(self) -> bool:
        return self.n_level_unchanged == 0

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "ate_level": self.ate_level,
            "ate_level_changed_mean": self.ate_level_changed_mean,
            "ate_prob": self.ate_prob,
            "ate_prob_pct": 100.0 * self.ate_prob,
            "ate_prob_over_n": self.ate_prob_over_n,
            "ate_prob_over_n_pct": 100.0 * self.ate_prob_over_n,
            "n_total": self.n_total,
            "n_level_changed": self.n_level_changed,
            "n_level_unchanged": self.n_level_unchanged,
            "unchanged_subset_empty": self.unchanged_subset_empty,
        }


def effects_from_probabilities(record_ids, pF: np.ndarray, pCF: np.ndarray,
                               scenario: str = "") -> EffectEstimate:
    """Aggregate per-record effects from (N, K) factual and counterfactual tables."""
    pF, pCF = _check_pair(np.atleast_2d(pF), np.atleast_2d(pCF))
    n = pF.shape[0]
    if n == 0:
        raise ContractError("no records to estimate effects on")
    level = pCF.argmax(axis=1) - pF.argmax(axis=1)
    unchanged = level == 0
    prob = np.where(unchanged, pCF.max(axis=1) - pF.max(axis=1), np.nan)
    n_unch = int(unchanged.sum())
    changed = n - n_unch
    return EffectEstimate(
        scenario=scenario,
        record_ids=np.asarray(record_ids, dtype=np.int64),
        ite_level=level.astype(np.int64),
        ite_prob=prob,
        ate_level=float(level.sum() / n),
        ate_prob=float(prob[unchanged].mean()) if n_unch else 0.0,
        ate_prob_over_n=float(np.where(unchanged, prob, 0.0).sum() / n),
        ate_level_changed_mean=float(level[~unchanged].mean()) if changed else 0.0,
        n_total=n,
        n_level_changed=changed,
        n_level_unchanged=n_unch,
    )


def estimate_effects(model: ProbabilityModel, dataset: Dataset, scenario: Scenario = Scenario(),
                     mc_samples: int = 50, seed: int = 0) -> EffectEstimate:
    if dataset.n == 0:
        raise ContractError("cannot estimate effects on an empty dataset")
    scenario = scenario.resolve(dataset.schema)
    pF, pCF = model.predict_proba(dataset, scenario, mc_samples, seed)
    return effects_from_probabilities(dataset.record_ids, pF, pCF, scenario.label(dataset.schema))


# --------------------------------------------------------------------------
# stratified reports


@dataclass(frozen=True)
class Grouping:
    variable: str
    edges: tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        e = tuple(float(v) for v in self.edges)
        if len(e) < 2 or any(b <= a for a, b in zip(e, e[1:])):
            raise ContractError(f"bin edges must be strictly increasing with at least one bin: {e}")
        object.__setattr__(self, "edges", e)

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Bin index per value, -1 when outside every bin.

        Bins are ``[e0, e1], (e1, e2], ..., (e_{m-1}, e_m]``.
        """
        values = np.asarray(values, dtype=float)
        j = np.searchsorted(self.edges, values, side="left")
        j = np.where(values == self.edges[0], 1, j)
        return np.where((j >= 1) & (j < len(self.edges)), j - 1, -1)


def _lower_split(values, high_edge, fallback):
    low = values[values <= high_edge]
    m = float(np.median(low)) if len(low) else fallback
    if not 0 < m < high_edge:
        m = fallback
    return m


def grouping_preset(name: str, dataset: Dataset) -> Grouping:
    """Named groupings with fixed high-group thresholds.

    The low/medium split below each fixed threshold is the median of the
    records under it. Income has no fixed threshold and uses tertiles.
    """
    def col(alias):
        v = find_variable(dataset.schema, alias, CONFOUNDER)
        return v.name, dataset.confounders[:, list(dataset.confounder_specs).index(v)]

    if name == "popdensity-4000":
        var, x = col("population_density")
        return Grouping(var, (0.0, _lower_split(x, 4000.0, 2000.0), 4000.0, math.inf), name)
    if name == "minority-45":
        var, x = col("minority")
        return Grouping(var, (0.0, _lower_split(x, 45.0, 22.5), 45.0, 100.0), name)
    if name == "intersection-40-160":
        var, x = col("intersection_density")
        return Grouping(var, (0.0, _lower_split(x, 40.0, 20.0), 40.0, 160.0), name)
    if name == "income-tertiles":
        var, x = col("income")
        q1, q2 = np.quantile(x, [1 / 3, 2 / 3])
        lo = float(x.min())
        edges = (lo, float(q1), float(q2), float(x.max()))
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DataError("income values too concentrated for tertile bins")
        return Grouping(var, edges, name)
    raise ContractError(f"unknown grouping preset {name!r}; choose from {', '.join(GROUPING_PRESETS)}")


GROUPING_PRESETS = ("popdensity-4000", "minority-45", "intersection-40-160", "income-tertiles")

REPORT_COLUMNS = ("group_var", "bin_low", "bin_high", "scenario_id", "count",
                  "expected_severity", "ate_level", "ate_prob")


@dataclass
class GroupReport:
    grouping: Grouping
    rows: list[dict]
    factual: list[dict]
    n_excluded: int = 0
    bin_counts: list[int] = field(default_factory=list)


def stratified_report(model: ProbabilityModel, dataset: Dataset, scenarios: Sequence[Scenario],
                      grouping: Grouping, mc_samples: int = 50, seed: int = 0) -> GroupReport:
    var = find_variable(dataset.schema, grouping.variable, CONFOUNDER)
    j = list(dataset.confounder_specs).index(var)
    bins = grouping.assign(dataset.confounders[:, j])
    n_excluded = int((bins < 0).sum())
    if n_excluded:
        log.warning("%d record(s) fall outside every %s bin and are excluded", n_excluded, var.name)
    n_bins = len(grouping.edges) - 1
    K = dataset.outcome_spec.levels
    rows, factual = [], []
    counts = [int((bins == b).sum()) for b in range(n_bins)]
    for b in range(n_bins):
        sel = bins == b
        dist = np.bincount(dataset.outcome[sel], minlength=K) / max(counts[b], 1)
        factual.append({"group_var": var.name, "bin_low": grouping.edges[b],
                        "bin_high": grouping.edges[b + 1], "count": counts[b],
                        **{f"p_level_{k}": float(dist[k]) for k in range(K)}})
    for scenario in scenarios:
        scenario = scenario.resolve(dataset.schema)
        pF, pCF = model.predict_proba(dataset, scenario, mc_samples, seed)
        for b in range(n_bins):
            sel = bins == b
            row = {"group_var": var.name, "bin_low": grouping.edges[b], "bin_high": grouping.edges[b + 1],
                   "scenario_id": scenario.label(dataset.schema), "count": counts[b]}
            if counts[b]:
                est = effects_from_probabilities(dataset.record_ids[sel], pF[sel], pCF[sel])
                row.update(expected_severity=float(np.mean(pCF[sel] @ np.arange(K))),
                           ate_level=est.ate_level, ate_prob=est.ate_prob)
            else:
                row.update(expected_severity=math.nan, ate_level=math.nan, ate_prob=math.nan)
            rows.append(row)
    return GroupReport(grouping, rows, factual, n_excluded, counts)


# --------------------------------------------------------------------------
# writers


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else fmt_float(v)
    return str(v)


def write_ite_csv(est: EffectEstimate, path, comments: Sequence[str] = ()) -> None:
    rows = [[str(r), str(l), "" if p is None else fmt_float(p)] for r, l, p in est.per_sample]
    write_csv(path, ["record_id", "ite_level", "ite_prob_or_empty"], rows, comments)


def write_summary_json(est: EffectEstimate, path, metadata: dict | None = None) -> None:
    doc = {"metadata": metadata or {}, **est.summary()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_group_report(report: GroupReport, path, comments: Sequence[str] = ()) -> None:
    write_csv(path, list(REPORT_COLUMNS),
              [[_cell(r[c]) for c in REPORT_COLUMNS] for r in report.rows], comments)


def write_factual_distribution(report: GroupReport, path, comments: Sequence[str] = ()) -> None:
    cols = list(report.factual[0]) if report.factual else []
    write_csv(path, cols, [[_cell(r[c]) for c in cols] for r in report.factual], comments)
