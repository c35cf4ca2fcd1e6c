"""Attention encoder-decoder: projection/conv front end, pyramid bidirectional
LSTM encoder with time decimation, LSTM decoder with additive attention, and a
softmax output layer.

Per decoding step j the order of computation is fixed: the decoder stack is
updated from (previous state, embedded previous token, previous context), then
attention is computed from the *new* state, then the combined dense layer and
the output softmax.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tz
from .tensor import Tensor

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    frontend: str = "linear"          # "linear" | "conv"
    encoder_layers: int = 2
    encoder_units: int = 24           # per direction
    decimation_after: tuple[int, ...] = (0,)
    decoder_layers: int = 1
    decoder_units: int = 48
    vocab_size: int = 26              # includes start and end symbols
    embedding_dim: int = 16
    attention_dim: int = 32
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be >= 3 (content + start + end)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.frontend not in ("linear", "conv"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.decimation_after and max(self.decimation_after) >= self.encoder_layers - 1:
            raise ValueError("decimation points must lie strictly between encoder layers "
                             "(the final layer's output is not decimated)")

    @property
    def start_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    @property
    def decimation_factor(self) -> int:
        return 2 ** len(self.decimation_after)

    @property
    def encoder_output_dim(self) -> int:
        return 2 * self.encoder_units

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim, "frontend": self.frontend,
            "encoder_layers": self.encoder_layers, "encoder_units": self.encoder_units,
            "decimation_after": list(self.decimation_after),
            "decoder_layers": self.decoder_layers, "decoder_units": self.decoder_units,
            "vocab_size": self.vocab_size, "embedding_dim": self.embedding_dim,
            "attention_dim": self.attention_dim, "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["decimation_after"] = tuple(d.get("decimation_after", ()))
        return cls(**d)


@dataclass
class ModelParams:
    """All weight/bias tensors keyed by layer name, plus the topology."""
    cfg: ModelConfig
    tensors: dict[str, Tensor]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        return h.hexdigest()

    def model_id(self) -> str:
        return self.param_hash()[:12]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: tz.parameter(v.data.copy())
                                      for k, v in self.tensors.items()})


@dataclass
class EncoderOutput:
    states: Tensor        # (E, 2 * encoder_units)
    source_length: int


@dataclass
class DecoderState:
    hidden: list[Tensor]  # per layer, (1, decoder_units)
    cell: list[Tensor]
    context: Tensor       # (1, encoder_output_dim)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.frontend == "linear":
        shapes["frontend.W"] = (cfg.feature_dim, cfg.encoder_units)
        shapes["frontend.b"] = (cfg.encoder_units,)
    else:
        dims = [cfg.feature_dim, cfg.encoder_units, cfg.encoder_units]
        for i in range(2):
            shapes[f"frontend.{i}.W"] = (3 * dims[i], dims[i + 1])
            shapes[f"frontend.{i}.b"] = (dims[i + 1],)
    in_dim = cfg.encoder_units
    for layer in range(cfg.encoder_layers):
        for d in ("f", "b"):
            shapes[f"enc.{layer}.{d}.W"] = (in_dim + cfg.encoder_units, 4 * cfg.encoder_units)
            shapes[f"enc.{layer}.{d}.b"] = (4 * cfg.encoder_units,)
        in_dim = 2 * cfg.encoder_units
        if layer in cfg.decimation_after:
            in_dim *= 2
    he = cfg.encoder_output_dim
    shapes["embed"] = (cfg.vocab_size, cfg.embedding_dim)
    dec_in = cfg.embedding_dim + he
    for layer in range(cfg.decoder_layers):
        shapes[f"dec.{layer}.W"] = (dec_in + cfg.decoder_units, 4 * cfg.decoder_units)
        shapes[f"dec.{layer}.b"] = (4 * cfg.decoder_units,)
        dec_in = cfg.decoder_units
    shapes["att.W"] = (cfg.decoder_units, cfg.attention_dim)
    shapes["att.U"] = (he, cfg.attention_dim)
    shapes["att.v"] = (cfg.attention_dim, 1)
    shapes["out_dense.W"] = (cfg.decoder_units + he, cfg.decoder_units)
    shapes["out_dense.b"] = (cfg.decoder_units,)
    shapes["out.W"] = (cfg.decoder_units, cfg.vocab_size)
    shapes["out.b"] = (cfg.vocab_size,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform [-0.05, 0.05] initialization from a named seed; LSTM forget
    gates start with bias +1."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        w = rng.uniform(-0.05, 0.05, size=shape)
        if name.endswith(".b") and (".f." in name or name.startswith("dec.")
                                    or ".b." in name) and (name.split(".")[0] in ("enc", "dec")):
            h = shape[0] // 4
            w[h:2 * h] += 1.0
        tensors[name] = tz.parameter(w)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# building blocks


def _lstm_cell(W: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor):
    hdim = h.shape[1]
    z = tz.add(tz.matmul(tz.concat([x, h], axis=1), W), b)
    i = tz.logistic(tz.tslice(z, (slice(None), slice(0, hdim))))
    f = tz.logistic(tz.tslice(z, (slice(None), slice(hdim, 2 * hdim))))
    g = tz.tanh(tz.tslice(z, (slice(None), slice(2 * hdim, 3 * hdim))))
    o = tz.logistic(tz.tslice(z, (slice(None), slice(3 * hdim, 4 * hdim))))
    c2 = tz.add(tz.mul(f, c), tz.mul(i, g))
    h2 = tz.mul(o, tz.tanh(c2))
    return h2, c2


def _lstm_seq(W: Tensor, b: Tensor, xs: Tensor, reverse: bool) -> Tensor:
    T = xs.shape[0]
    hdim = W.shape[1] // 4
    h = tz.constant(np.zeros((1, hdim)))
    c = tz.constant(np.zeros((1, hdim)))
    out: list = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        xt = tz.tslice(xs, (slice(t, t + 1), slice(None)))
        h, c = _lstm_cell(W, b, xt, h, c)
        out[t] = h
    return tz.concat(out, axis=0)


def _decimate(xs: Tensor) -> Tensor:
    """Concatenate adjacent frame pairs: length halves (ceil), width doubles.
    Odd lengths are zero-padded."""
    T, D = xs.shape
    if T % 2:
        xs = tz.concat([xs, tz.constant(np.zeros((1, D)))], axis=0)
        T += 1
    pairs = [tz.concat([tz.tslice(xs, (slice(2 * i, 2 * i + 1), slice(None))),
                        tz.tslice(xs, (slice(2 * i + 1, 2 * i + 2), slice(None)))], axis=1)
             for i in range(T // 2)]
    return tz.concat(pairs, axis=0)


def _splice3(xs: Tensor) -> Tensor:
    """Kernel-3 frame splicing with zero edge padding (conv front end)."""
    T, D = xs.shape
    zero = tz.constant(np.zeros((1, D)))
    padded = tz.concat([zero, xs, zero], axis=0)
    return tz.concat([tz.tslice(padded, (slice(0, T), slice(None))),
                      tz.tslice(padded, (slice(1, T + 1), slice(None))),
                      tz.tslice(padded, (slice(2, T + 2), slice(None)))], axis=1)


def _frontend(params: ModelParams, xs: Tensor) -> Tensor:
    p = params.tensors
    if params.cfg.frontend == "linear":
        return tz.add(tz.matmul(xs, p["frontend.W"]), p["frontend.b"])
    h = xs
    for i in range(2):
        h = tz.tanh(tz.add(tz.matmul(_splice3(h), p[f"frontend.{i}.W"]), p[f"frontend.{i}.b"]))
    return h


def _maybe_dropout(x: Tensor, p: float, dropout: bool, rng) -> Tensor:
    if not dropout or p == 0.0:
        return x
    return tz.dropout_apply(x, tz.dropout_mask(x.shape, p, rng))


def encode(params: ModelParams, features: np.ndarray, dropout: bool = False,
           rng: np.random.Generator | None = None, utt_id: str | None = None) -> EncoderOutput:
    """Run the pyramid encoder.  E = ceil(T / 2^#decimations) output states of
    width 2*encoder_units; deterministic with dropout off."""
    cfg = params.cfg
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != cfg.feature_dim:
        raise tz.ShapeError(
            f"encode: features {tuple(features.shape)} incompatible with feature_dim {cfg.feature_dim}")
    T = features.shape[0]
    if T < cfg.decimation_factor:
        raise ValueError(
            f"utterance {utt_id or '<unnamed>'}: {T} frames is shorter than the "
            f"decimation factor {cfg.decimation_factor}")
    if dropout and rng is None:
        raise ValueError("dropout requires an rng")
    h = _frontend(params, tz.constant(features))
    h = _maybe_dropout(h, cfg.dropout_p, dropout, rng)
    p = params.tensors
    for layer in range(cfg.encoder_layers):
        fwd = _lstm_seq(p[f"enc.{layer}.f.W"], p[f"enc.{layer}.f.b"], h, reverse=False)
        bwd = _lstm_seq(p[f"enc.{layer}.b.W"], p[f"enc.{layer}.b.b"], h, reverse=True)
        h = tz.concat([fwd, bwd], axis=1)
        h = _maybe_dropout(h, cfg.dropout_p, dropout, rng)
        if layer in cfg.decimation_after:
            h = _decimate(h)
    return EncoderOutput(states=h, source_length=T)


def initial_state(params: ModelParams) -> DecoderState:
    cfg = params.cfg
    zeros = lambda d: tz.constant(np.zeros((1, d)))
    return DecoderState(hidden=[zeros(cfg.decoder_units) for _ in range(cfg.decoder_layers)],
                        cell=[zeros(cfg.decoder_units) for _ in range(cfg.decoder_layers)],
                        context=zeros(cfg.encoder_output_dim))


def _decoder_step_logits(params: ModelParams, state: DecoderState, prev_token: int,
                         enc: EncoderOutput, dropout: bool, rng):
    cfg = params.cfg
    p = params.tensors
    emb = tz.embedding(p["embed"], [int(prev_token)])
    x = tz.concat([emb, state.context], axis=1)
    hs, cs = [], []
    for layer in range(cfg.decoder_layers):
        h, c = _lstm_cell(p[f"dec.{layer}.W"], p[f"dec.{layer}.b"],
                          x, state.hidden[layer], state.cell[layer])
        hs.append(h)
        cs.append(c)
        x = _maybe_dropout(h, cfg.dropout_p, dropout, rng) if layer < cfg.decoder_layers - 1 else h
    s = hs[-1]
    scores = tz.matmul(tz.tanh(tz.add(tz.matmul(enc.states, p["att.U"]),
                                      tz.matmul(s, p["att.W"]))), p["att.v"])
    alpha = tz.softmax(tz.transpose(scores))          # (1, E)
    ctx = tz.matmul(alpha, enc.states)                # (1, 2*encoder_units)
    sp = tz.tanh(tz.add(tz.matmul(tz.concat([s, ctx], axis=1), p["out_dense.W"]),
                        p["out_dense.b"]))
    sp = _maybe_dropout(sp, cfg.dropout_p, dropout, rng)
    logits = tz.add(tz.matmul(sp, p["out.W"]), p["out.b"])
    return logits, alpha, DecoderState(hidden=hs, cell=cs, context=ctx)


def decoder_step(params: ModelParams, state: DecoderState, prev_token: int,
                 enc: EncoderOutput, dropout: bool = False,
                 rng: np.random.Generator | None = None):
    """One target step: returns (posteriors, attention weights, new state).

    Posterior and attention rows are valid probability simplices.
    """
    if prev_token < 0 or prev_token >= params.cfg.vocab_size:
        raise ValueError(f"prev_token {prev_token} outside vocab of size {params.cfg.vocab_size}")
    if dropout and rng is None:
        raise ValueError("dropout requires an rng")
    logits, alpha, new_state = _decoder_step_logits(params, state, prev_token, enc, dropout, rng)
    return tz.softmax(logits), alpha, new_state


def _teacher_forced_logits(params: ModelParams, enc: EncoderOutput, tokens,
                           dropout: bool, rng):
    cfg = params.cfg
    tokens = [int(t) for t in tokens]
    state = initial_state(params)
    prev = cfg.start_id
    rows, alphas = [], []
    for tok in tokens:
        logits, alpha, state = _decoder_step_logits(params, state, prev, enc, dropout, rng)
        rows.append(logits)
        alphas.append(alpha)
        prev = tok
    return tz.concat(rows, axis=0), alphas


def forward_teacher_forced(params: ModelParams, features: np.ndarray, tokens,
                           dropout: bool = False,
                           rng: np.random.Generator | None = None) -> Tensor:
    """Posterior matrix (|tokens| x vocab); row j is p(y_j | y_<j, x).

    Bit-exact with a sequential fold of `decoder_step` under the same rng
    stream.  The implicit start symbol feeds the first step; `tokens` are the
    prediction targets (ending in the end-of-sequence symbol by convention).
    """
    tokens = list(tokens)
    if not tokens:
        raise ValueError("forward_teacher_forced: empty token sequence")
    if dropout and rng is None:
        raise ValueError("dropout requires an rng")
    enc = encode(params, features, dropout=dropout, rng=rng)
    logits, _ = _teacher_forced_logits(params, enc, tokens, dropout, rng)
    return tz.softmax(logits)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned container: config header + named float64 tensors.
    Round-trips bit-exactly."""
    header = json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION,
                         "config": params.cfg.to_dict()})
    arrays = {f"param/{k}": v.data for k, v in params.tensors.items()}
    np.savez(path, __header__=np.frombuffer(header.encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {header.get('format_version')}")
        cfg = ModelConfig.from_dict(header["config"])
        tensors = {k[len("param/"):]: tz.parameter(z[k]) for k in z.files if k.startswith("param/")}
    return ModelParams(cfg, tensors)
