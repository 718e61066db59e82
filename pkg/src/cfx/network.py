"""Multi-task dense network with factual and counterfactual softmax heads.

Shared ReLU layers map ``[x_hat, u]`` (calibrated confounders plus a latent
normal draw) to a representation ``H``. Each head takes ``[H, treatments]``
through one ReLU hidden layer and a linear layer to ``K`` logits. The
factual head sees the observed treatments, the counterfactual head the
intervened ones.

Weights use the row-vector convention ``a = h @ W + b``, so ``W`` has shape
``(fan_in, fan_out)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import CalibrationSpec, CrashRecord, Dataset, VariableSpec, TREATMENT
from .errors import ContractError, DataError, NumericalError
from .scenario import Scenario

HEADS = ("factual", "counterfactual")


@dataclass(frozen=True)
class ModelConfig:
    shared_layers: int = 4
    neurons: int = 128
    head_hidden: int = 256
    n_classes: int = 4
    dropout: float = 0.3
    latent_dim: int = 10
    n_confounders: int = 9
    n_treatments: int = 8

    def __post_init__(self):
        if self.shared_layers < 1 or self.neurons < 1 or self.head_hidden < 1:
            raise ContractError("layer counts and widths must be >= 1")
        if self.n_classes < 2:
            raise ContractError("need at least 2 output classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        if self.latent_dim < 0 or self.n_confounders < 0 or self.n_treatments < 1:
            raise ContractError("invalid input dimensions")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        s: dict[str, tuple[int, ...]] = {}
        fan_in = self.n_confounders + self.latent_dim
        for layer in range(self.shared_layers):
            s[f"shared.{layer}.W"] = (fan_in, self.neurons)
            s[f"shared.{layer}.b"] = (self.neurons,)
            fan_in = self.neurons
        for head in HEADS:
            s[f"{head}.hidden.W"] = (self.neurons + self.n_treatments, self.head_hidden)
            s[f"{head}.hidden.b"] = (self.head_hidden,)
            s[f"{head}.out.W"] = (self.head_hidden, self.n_classes)
            s[f"{head}.out.b"] = (self.n_classes,)
        return s


HEAD_WEIGHTS = tuple(f"{h}.{part}.W" for h in HEADS for part in ("hidden", "out"))


class NetworkParams:
    """Named float64 tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        shapes = config.shapes()
        if set(tensors) != set(shapes):
            raise ContractError("parameter names do not match the config")
        for k, v in tensors.items():
            if v.shape != shapes[k]:
                raise ContractError(f"{k}: shape {v.shape} != expected {shapes[k]}")
        self.config = config
        self.tensors = {k: np.asarray(tensors[k], dtype=float) for k in shapes}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def equal(self, other: "NetworkParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(config: ModelConfig, seed: int = 0) -> NetworkParams:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith(".W"):
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(config, tensors)


def sample_latent(config: ModelConfig, seed: int, index: int) -> np.ndarray:
    """The first latent draw of stream ``(seed, index)``; empty when ``latent_dim == 0``."""
    return latent_draws(config.latent_dim, seed, index, 1)[0]


def latent_draws(latent_dim: int, seed: int, index: int, count: int) -> np.ndarray:
    if latent_dim == 0:
        return np.zeros((count, 0))
    return np.random.default_rng([seed, index]).standard_normal((count, latent_dim))


# --------------------------------------------------------------------------
# forward


@dataclass(frozen=True)
class PredictionPair:
    y_hat_f: np.ndarray
    y_hat_cf: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dropout_masks(config: ModelConfig, batch: int, seed: int) -> list[np.ndarray]:
    """Inverted-dropout multipliers: shared layers in order, then each head's hidden layer."""
    rng = np.random.default_rng(seed)
    keep = 1.0 - config.dropout
    widths = [config.neurons] * config.shared_layers + [config.head_hidden] * len(HEADS)
    return [(rng.random((batch, w)) >= config.dropout) / keep for w in widths]


def forward(params: NetworkParams, x_hat, t_hat, t_star_hat, u,
            dropout_seed: int | None = None, masks: Sequence[np.ndarray] | None = None):
    """Both heads' class probabilities and the activation cache.

    Eval mode (the default) applies no dropout. Passing ``dropout_seed`` draws
    fresh masks; passing ``masks`` reuses given ones. Single vectors are
    treated as a batch of one and squeezed back.
    """
    cfg = params.config
    single = np.ndim(x_hat) == 1
    x_hat, t_hat, t_star_hat, u = (np.atleast_2d(np.asarray(a, dtype=float))
                                   for a in (x_hat, t_hat, t_star_hat, u))
    B = x_hat.shape[0]
    if u.shape == (1, 0) and B > 1:
        u = np.zeros((B, 0))
    if (x_hat.shape != (B, cfg.n_confounders) or u.shape != (B, cfg.latent_dim)
            or t_hat.shape != (B, cfg.n_treatments) or t_star_hat.shape != (B, cfg.n_treatments)):
        raise ContractError(
            f"input dimensions {x_hat.shape}, {u.shape}, {t_hat.shape}, {t_star_hat.shape} "
            f"do not match the network config")
    if masks is None and dropout_seed is not None:
        masks = dropout_masks(cfg, B, dropout_seed)
    masks = list(masks) if masks is not None else None

    cache: dict = {"masks": masks, "shared_in": [], "shared_pre": []}
    h = np.hstack([x_hat, u])
    for layer in range(cfg.shared_layers):
        cache["shared_in"].append(h)
        a = h @ params[f"shared.{layer}.W"] + params[f"shared.{layer}.b"]
        cache["shared_pre"].append(a)
        h = np.maximum(a, 0.0)
        if masks is not None:
            h = h * masks[layer]
    cache["H"] = h
    probs = {}
    for k, (head, t) in enumerate(zip(HEADS, (t_hat, t_star_hat))):
        inp = np.hstack([h, t])
        a = inp @ params[f"{head}.hidden.W"] + params[f"{head}.hidden.b"]
        hh = np.maximum(a, 0.0)
        if masks is not None:
            hh = hh * masks[cfg.shared_layers + k]
        z = hh @ params[f"{head}.out.W"] + params[f"{head}.out.b"]
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite logits in the {head} head")
        p = softmax(z)
        cache[head] = {"in": inp, "pre": a, "hidden": hh, "logits": z, "p": p}
        probs[head] = p
    pair = PredictionPair(probs["factual"], probs["counterfactual"])
    if single:
        pair = PredictionPair(pair.y_hat_f[0], pair.y_hat_cf[0])
    return pair, cache


# --------------------------------------------------------------------------
# trained bundle and Monte Carlo prediction


@dataclass(eq=False)
class TrainedModel:
    params: NetworkParams
    schema: tuple[VariableSpec, ...]
    calibration: dict[str, CalibrationSpec]
    meta: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def calibrated_inputs(self, dataset: Dataset, scenario: Scenario):
        if tuple(v.name for v in dataset.schema) != tuple(v.name for v in self.schema):
            raise DataError("dataset schema does not match the model schema")
        ds = dataset.with_calibration(self.calibration)
        t_star = scenario.apply(ds.treatments, ds.schema)
        return ds.calibrate_confounders(), ds.calibrate_treatments(), ds.calibrate_treatments(t_star)

    def predict_proba(self, dataset: Dataset, scenario: Scenario = Scenario(),
                      mc_samples: int = 50, seed: int = 0,
                      t_star: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode (factual, counterfactual) probabilities averaged over latent draws.

        ``t_star`` (raw codes, one row per record) overrides the scenario.
        """
        if mc_samples < 1:
            raise ContractError("mc_samples must be >= 1")
        x, t, ts = self.calibrated_inputs(dataset, scenario)
        if t_star is not None:
            ts = dataset.with_calibration(self.calibration).calibrate_treatments(t_star)
        return mc_predict(self.params, x, t, ts, dataset.record_ids, mc_samples, seed)


def mc_predict(params: NetworkParams, x, t, ts, record_ids, mc_samples: int, seed: int,
               chunk_rows: int = 16384) -> tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    M = mc_samples if cfg.latent_dim > 0 else 1
    n = len(record_ids)
    pf = np.empty((n, cfg.n_classes))
    pcf = np.empty((n, cfg.n_classes))
    per = max(1, chunk_rows // M)
    for s in range(0, n, per):
        idx = np.arange(s, min(n, s + per))
        u = np.concatenate([latent_draws(cfg.latent_dim, seed, int(record_ids[i]), M) for i in idx])
        rep = np.repeat(idx, M)
        pair, _ = forward(params, x[rep], t[rep], ts[rep], u)
        pf[idx] = pair.y_hat_f.reshape(len(idx), M, -1).mean(axis=1)
        pcf[idx] = pair.y_hat_cf.reshape(len(idx), M, -1).mean(axis=1)
    pf /= pf.sum(axis=1, keepdims=True)
    pcf /= pcf.sum(axis=1, keepdims=True)
    return pf, pcf


def predict(model: TrainedModel, record: CrashRecord, scenario: Scenario = Scenario(),
            mc_samples: int = 50, seed: int = 0) -> PredictionPair:
    """Prediction for one record; matches the batched path row for row."""
    ds = Dataset(model.schema, [record.record_id], [record.outcome], [record.treatments],
                 [record.confounders], calibration=model.calibration)
    pf, pcf = model.predict_proba(ds, scenario, mc_samples, seed)
    return PredictionPair(pf[0], pcf[0])


# --------------------------------------------------------------------------
# checkpoint
#
# Layout (all integers little-endian):
#   8 bytes   magic b"CFXCKPT\0"
#   uint32    format version
#   uint32    header length in bytes
#   header    UTF-8 JSON: config, schema, calibration, meta, tensor directory
#   tensors   float64 '<f8', C order, in directory order

MAGIC = b"CFXCKPT\x00"
FORMAT_VERSION = 1


def _spec_to_dict(v: VariableSpec) -> dict:
    d = dataclasses.asdict(v)
    if d["bounds"] is not None:
        d["bounds"] = list(d["bounds"])
    return d


def _spec_from_dict(d: dict) -> VariableSpec:
    d = dict(d)
    if d.get("bounds") is not None:
        d["bounds"] = tuple(d["bounds"])
    return VariableSpec(**d)


def save_checkpoint(model: TrainedModel, path) -> None:
    names = model.params.names()
    header = {
        "config": dataclasses.asdict(model.config),
        "schema": [_spec_to_dict(v) for v in model.schema],
        "calibration": {k: c.to_dict() for k, c in model.calibration.items()},
        "meta": model.meta,
        "tensors": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count,
                                               offset=offset).reshape(shape).astype(float)
        offset += 8 * count
    if offset != len(raw):
        raise DataError(f"{path}: trailing or missing tensor bytes")
    config = ModelConfig(**header["config"])
    return TrainedModel(
        NetworkParams(config, tensors),
        tuple(_spec_from_dict(d) for d in header["schema"]),
        {k: CalibrationSpec.from_dict(c) for k, c in header["calibration"].items()},
        meta=header["meta"],
    )


def params_digest(params: NetworkParams) -> str:
    h = hashlib.sha256()
    for k in params.names():
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()
