"""The four forecasting architectures and their checkpoint format.

=====================  =====================================  =========================
kind                   inputs                                 output
=====================  =====================================  =========================
lstm-baseline          [r | 12 NPIs] -> LSTM -> dense(1)      next-day ratio
lstm-ut-cogn           z -> LSTM -> dense(1, softplus) = h    (1 - g) * h
                       NPIs -> LSTM -> dense(1, sigmoid) = g
lstm-cultd-sir         [r, S_p, I_p, R_p | NPIs] -> LSTM,     (r, S_p, I_p, R_p)
                       + 6 culture constants -> dense(4)
transenc-cultd-sir     same io, transformer encoder block     (r, S_p, I_p, R_p)
=====================  =====================================  =========================
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .features import RATIO, RATIO_SIR, UNINFECTED, WindowSample, stack_samples
from .nn import autograd as ag
from .nn.autograd import Tensor, no_grad
from .nn.layers import (LSTM, Dense, Initializer, LayerNorm, MultiHeadAttention, ParamStore,
                        sinusoidal_encoding)

LSTM_BASELINE = "lstm-baseline"
LSTM_UT_COGN = "lstm-ut-cogn"
LSTM_CULTD_SIR = "lstm-cultd-sir"
TRANSENC_CULTD_SIR = "transenc-cultd-sir"
MODEL_KINDS = (LSTM_BASELINE, LSTM_UT_COGN, LSTM_CULTD_SIR, TRANSENC_CULTD_SIR)
DISPLAY_NAMES = {
    LSTM_BASELINE: "LSTM-Baseline",
    LSTM_UT_COGN: "LSTM-UT-Cogn",
    LSTM_CULTD_SIR: "LSTM-CultD-SIR",
    TRANSENC_CULTD_SIR: "TRANSENC-CultD-SIR",
}

CHECKPOINT_FORMAT = "epiforecast.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class IoSpec:
    context: int
    action: int
    constants: int
    outputs: int


class ModelGraph:
    kind: str = ""
    target_kind: str = RATIO

    def __init__(self, io_spec: IoSpec, lookback: int, hyperparams: dict):
        if lookback < 1:
            raise ValueError("lookback must be >= 1")
        self.io_spec = io_spec
        self.lookback = lookback
        self.hyperparams = dict(hyperparams)
        self.params = ParamStore()
        self._rng = np.random.default_rng(hyperparams.get("seed", 0))

    def __repr__(self):
        return f"<{DISPLAY_NAMES.get(self.kind, self.kind)} params={self.params.count()}>"

    def _check_io(self, context, action, constants):
        spec = self.io_spec
        ok = (
            context.ndim == 3 and action.ndim == 3 and constants.ndim == 2
            and context.shape[1:] == (self.lookback, spec.context)
            and action.shape[1:] == (self.lookback, spec.action)
            and constants.shape[1] == spec.constants
            and context.shape[0] == action.shape[0] == constants.shape[0]
        )
        if not ok:
            raise ValueError(
                f"{self.kind}: expected context [B,{self.lookback},{spec.context}], action "
                f"[B,{self.lookback},{spec.action}], constants [B,{spec.constants}]; got "
                f"{context.shape}, {action.shape}, {constants.shape}"
            )

    def forward(self, context, action, constants=None, training=False, rng=None) -> Tensor:
        context = np.asarray(context, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        if constants is None:
            constants = np.zeros((context.shape[0], 0))
        constants = np.asarray(constants, dtype=np.float64)
        if constants.ndim == 2 and constants.shape[1] != self.io_spec.constants and self.io_spec.constants == 0:
            constants = constants[:, :0]
        self._check_io(context, action, constants)
        out = self._forward(context, action, constants, training, rng if rng is not None else self._rng)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"{self.kind}: non-finite output")
        return out

    def _forward(self, context, action, constants, training, rng) -> Tensor:
        raise NotImplementedError

    def predict(self, context, action, constants=None) -> np.ndarray:
        with no_grad():
            return self.forward(context, action, constants).data

    def forward_sample(self, sample: WindowSample, mode: str = "eval", rng=None) -> np.ndarray:
        if mode not in ("eval", "train"):
            raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
        with no_grad():
            out = self.forward(sample.context[None], sample.action[None], sample.constants[None],
                               training=(mode == "train"), rng=rng)
        return out.data[0]

    def batch(self, samples: list[WindowSample]):
        context, action, constants, target = stack_samples(samples)
        if target.shape[1] != self.io_spec.outputs:
            raise ValueError(f"{self.kind}: targets have {target.shape[1]} channels, model emits {self.io_spec.outputs}")
        return context, action, constants, target

    def loss(self, batch, training=False, rng=None) -> Tensor:
        context, action, constants, target = batch
        return ag.l1_loss(self.forward(context, action, constants, training, rng), target)


class LstmBaseline(ModelGraph):
    kind = LSTM_BASELINE
    target_kind = RATIO

    def __init__(self, hidden=64, lookback=21, seed=0, init="uniform"):
        super().__init__(IoSpec(1, 12, 0, 1), lookback, dict(hidden=hidden, lookback=lookback, seed=seed, init=init))
        w = Initializer(seed, init)
        self.lstm = LSTM(self.params, "lstm", 13, hidden, w)
        self.head = Dense(self.params, "head", hidden, 1, "linear", w)

    def _forward(self, context, action, constants, training, rng):
        seq = np.concatenate([context, action], axis=2)
        return self.head(self.lstm(Tensor(seq)))


def combine_branches(h, g) -> Tensor:
    """UT-Cogn lambda layer: ``(1 - g) * h``."""
    return ag.mul(ag.add(1.0, ag.neg(ag.as_tensor(g))), h)


class LstmUtCogn(ModelGraph):
    kind = LSTM_UT_COGN
    target_kind = UNINFECTED

    def __init__(self, hidden=64, lookback=21, seed=0, init="uniform"):
        super().__init__(IoSpec(1, 12, 0, 1), lookback, dict(hidden=hidden, lookback=lookback, seed=seed, init=init))
        w = Initializer(seed, init)
        self.context_lstm = LSTM(self.params, "context_lstm", 1, hidden, w)
        self.context_head = Dense(self.params, "context_head", hidden, 1, "softplus", w)
        self.action_lstm = LSTM(self.params, "action_lstm", 12, hidden, w)
        self.action_head = Dense(self.params, "action_head", hidden, 1, "sigmoid", w)

    def branches(self, context, action) -> tuple[Tensor, Tensor]:
        h = self.context_head(self.context_lstm(Tensor(context)))
        g = self.action_head(self.action_lstm(Tensor(action)))
        return h, g

    def _forward(self, context, action, constants, training, rng):
        h, g = self.branches(context, action)
        return combine_branches(h, g)


class LstmCultdSir(ModelGraph):
    kind = LSTM_CULTD_SIR
    target_kind = RATIO_SIR

    def __init__(self, hidden=64, lookback=21, seed=0, init="uniform"):
        super().__init__(IoSpec(4, 12, 6, 4), lookback, dict(hidden=hidden, lookback=lookback, seed=seed, init=init))
        w = Initializer(seed, init)
        self.lstm = LSTM(self.params, "lstm", 16, hidden, w)
        self.head = Dense(self.params, "head", hidden + 6, 4, "linear", w)

    def encode(self, context, action, training=False, rng=None) -> Tensor:
        return self.lstm(Tensor(np.concatenate([context, action], axis=2)))

    def _forward(self, context, action, constants, training, rng):
        encoded = self.encode(context, action, training, rng)
        return self.head(ag.concat([encoded, Tensor(constants)], axis=1))


class TransencCultdSir(LstmCultdSir):
    kind = TRANSENC_CULTD_SIR
    target_kind = RATIO_SIR

    def __init__(self, heads=4, head_dim=32, lookback=21, ffn_hidden=128, dropout=0.25, eps=1e-6,
                 positional_encoding=True, pooling="last", seed=0, init="uniform"):
        if pooling not in ("last", "mean"):
            raise ValueError(f"pooling must be 'last' or 'mean', got {pooling!r}")
        ModelGraph.__init__(self, IoSpec(4, 12, 6, 4), lookback, dict(
            heads=heads, head_dim=head_dim, lookback=lookback, ffn_hidden=ffn_hidden, dropout=dropout, eps=eps,
            positional_encoding=positional_encoding, pooling=pooling, seed=seed, init=init))
        dim = 16
        w = Initializer(seed, init)
        self.dim = dim
        self.dropout = dropout
        self.pooling = pooling
        self.positional = sinusoidal_encoding(lookback, dim) if positional_encoding else None
        self.attention = MultiHeadAttention(self.params, "attention", dim, heads, head_dim, w)
        self.norm1 = LayerNorm(self.params, "norm1", dim, eps)
        self.ffn1 = Dense(self.params, "ffn1", dim, ffn_hidden, "relu", w)
        self.ffn2 = Dense(self.params, "ffn2", ffn_hidden, dim, "linear", w)
        self.norm2 = LayerNorm(self.params, "norm2", dim, eps)
        self.head = Dense(self.params, "head", dim + 6, 4, "linear", w)

    def encode(self, context, action, training=False, rng=None) -> Tensor:
        seq = np.concatenate([context, action], axis=2)
        if self.positional is not None:
            seq = seq + self.positional[None, : seq.shape[1]]
        x = Tensor(seq)
        attended = ag.dropout(self.attention(x), self.dropout, training, rng)
        x = self.norm1(ag.add(x, attended))
        ff = ag.dropout(self.ffn2(self.ffn1(x)), self.dropout, training, rng)
        x = self.norm2(ag.add(x, ff))
        if self.pooling == "last":
            return x[:, -1, :]
        return ag.mean(x, axis=1)


def _check_io_override(kind, expected: IoSpec, io_spec: IoSpec | None):
    if io_spec is not None and io_spec != expected:
        width = io_spec.context + io_spec.action
        raise ValueError(f"{kind} requires io {expected} (input width {expected.context + expected.action}), "
                         f"got {io_spec} (input width {width})")


def build_lstm_baseline(hidden=64, lookback=21, seed=0, init="uniform", io_spec=None) -> LstmBaseline:
    _check_io_override(LSTM_BASELINE, IoSpec(1, 12, 0, 1), io_spec)
    return LstmBaseline(hidden, lookback, seed, init)


def build_lstm_ut_cogn(hidden=64, lookback=21, seed=0, init="uniform", io_spec=None) -> LstmUtCogn:
    _check_io_override(LSTM_UT_COGN, IoSpec(1, 12, 0, 1), io_spec)
    return LstmUtCogn(hidden, lookback, seed, init)


def build_lstm_cultd_sir(hidden=64, lookback=21, seed=0, init="uniform", io_spec=None) -> LstmCultdSir:
    _check_io_override(LSTM_CULTD_SIR, IoSpec(4, 12, 6, 4), io_spec)
    return LstmCultdSir(hidden, lookback, seed, init)


def build_transenc_cultd_sir(heads=4, head_dim=32, lookback=21, io_spec=None, **kwargs) -> TransencCultdSir:
    _check_io_override(TRANSENC_CULTD_SIR, IoSpec(4, 12, 6, 4), io_spec)
    return TransencCultdSir(heads=heads, head_dim=head_dim, lookback=lookback, **kwargs)


BUILDERS = {
    LSTM_BASELINE: build_lstm_baseline,
    LSTM_UT_COGN: build_lstm_ut_cogn,
    LSTM_CULTD_SIR: build_lstm_cultd_sir,
    TRANSENC_CULTD_SIR: build_transenc_cultd_sir,
}


def build_model(kind: str, **hyperparams) -> ModelGraph:
    try:
        builder = BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {', '.join(MODEL_KINDS)}") from None
    return builder(**hyperparams)


# -- checkpoints --------------------------------------------------------------

def fingerprint(kind: str, hyperparams: dict, shapes: dict, train_config: dict | None = None) -> str:
    blob = json.dumps({"kind": kind, "hyperparams": hyperparams, "shapes": shapes, "train": train_config},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def checkpoint_json(model: ModelGraph, train_config=None, history=None) -> str:
    """Serialize a model: JSON header (kind, hyperparameters, io, shapes,
    fingerprint) plus flattened float parameters.  Floats use ``repr`` so
    the bytes round-trip exactly."""
    train = asdict(train_config) if train_config is not None else None
    shapes = {name: list(p.shape) for name, p in model.params.params.items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "hyperparams": model.hyperparams,
        "io_spec": asdict(model.io_spec),
        "shapes": shapes,
        "train_config": train,
        "fingerprint": fingerprint(model.kind, model.hyperparams, shapes, train),
        "best_epoch": None if history is None else history.best_epoch,
        "best_val_loss": None if history is None else history.best_val_loss,
        "params": {name: p.data.reshape(-1).tolist() for name, p in model.params.params.items()},
    }
    return json.dumps(payload, sort_keys=True) + "\n"


def save_checkpoint(model: ModelGraph, path, train_config=None, history=None):
    text = checkpoint_json(model, train_config, history)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def model_from_checkpoint(text: str, expected_fingerprint: str | None = None) -> ModelGraph:
    payload = json.loads(text)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("not a version-1 epiforecast checkpoint")
    recomputed = fingerprint(payload["kind"], payload["hyperparams"], payload["shapes"], payload["train_config"])
    if recomputed != payload["fingerprint"]:
        raise CheckpointError("checkpoint header does not match its fingerprint")
    if expected_fingerprint is not None and expected_fingerprint != payload["fingerprint"]:
        raise CheckpointError(
            f"checkpoint fingerprint {payload['fingerprint'][:12]} does not match expected {expected_fingerprint[:12]}")
    model = build_model(payload["kind"], **payload["hyperparams"])
    shapes = {name: list(p.shape) for name, p in model.params.params.items()}
    if shapes != payload["shapes"]:
        raise CheckpointError("checkpoint shapes do not match the rebuilt model")
    model.params.load({name: np.asarray(values).reshape(shapes[name])
                       for name, values in payload["params"].items()})
    return model


def load_checkpoint(path, expected_fingerprint: str | None = None) -> ModelGraph:
    with open(path) as f:
        return model_from_checkpoint(f.read(), expected_fingerprint)
