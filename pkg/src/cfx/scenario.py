"""Treatment interventions: a set of (treatment variable, target level) deltas."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import TREATMENT, VariableSpec, find_variable
from .errors import ContractError


@dataclass(frozen=True)
class Scenario:
    """An intervention; the empty delta list is the identity scenario.

    Deltas are keyed by full variable name and kept sorted by schema order
    once resolved, so equal interventions compare equal.
    """

    deltas: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        names = [d[0] for d in self.deltas]
        if len(set(names)) != len(names):
            raise ContractError(f"scenario sets a variable more than once: {names}")
        object.__setattr__(self, "deltas", tuple((str(k), int(v)) for k, v in self.deltas))

    @classmethod
    def parse(cls, items: Sequence[str] | str, schema: Sequence[VariableSpec]) -> "Scenario":
        """Build from ``var=level`` strings (alias or full name); commas separate items."""
        if isinstance(items, str):
            items = [items]
        pairs = []
        for item in items:
            for part in item.split(","):
                part = part.strip()
                if not part or part == "identity":
                    continue
                if "=" not in part:
                    raise ContractError(f"scenario item {part!r} is not of the form variable=level")
                key, level = part.split("=", 1)
                try:
                    lvl = int(level)
                except ValueError:
                    raise ContractError(f"scenario level {level!r} is not an integer") from None
                pairs.append((find_variable(schema, key.strip(), TREATMENT).name, lvl))
        return cls(tuple(pairs)).resolve(schema)

    def resolve(self, schema: Sequence[VariableSpec]) -> "Scenario":
        """Validate against ``schema`` and canonicalize names and ordering."""
        treat = [v for v in schema if v.role == TREATMENT]
        order = {v.name: i for i, v in enumerate(treat)}
        out = []
        for key, level in self.deltas:
            v = find_variable(schema, key, TREATMENT)
            if not 0 <= level <= v.levels - 1:
                raise ContractError(
                    f"{v.key} level {level} outside valid range 0-{v.levels - 1}")
            out.append((v.name, level))
        return Scenario(tuple(sorted(out, key=lambda d: order[d[0]])))

    @property
    def is_identity(self) -> bool:
        return not self.deltas

    def label(self, schema: Sequence[VariableSpec] | None = None) -> str:
        if not self.deltas:
            return "identity"
        if schema is None:
            return ";".join(f"{k}={v}" for k, v in self.deltas)
        return ";".join(f"{find_variable(schema, k).key}={v}" for k, v in self.deltas)

    def apply(self, treatments: np.ndarray, schema: Sequence[VariableSpec]) -> np.ndarray:
        """Copy of the raw treatment codes (one row or a matrix) with the deltas set."""
        treat = [v.name for v in schema if v.role == TREATMENT]
        out = np.array(treatments, copy=True)
        for key, level in self.resolve(schema).deltas:
            out[..., treat.index(key)] = level
        return out
