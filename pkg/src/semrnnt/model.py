"""Multi-task semantic transducer network.

The network has four parts:

* a causal LSTM audio encoder producing ``h_t`` per frame,
* two independent prediction networks, one over word pieces and one over
  slot tags, whose outputs are fused into a single label embedding ``g_u``,
* a joint network with a shared tanh hidden layer and two classification
  layers (word pieces + blank, slot tags + blank),
* an intent head reading only the word-piece prediction network.

All functions accept either :class:`ModelParams` (evaluated as constants) or
:class:`BoundParams` (tensors on a tape, for training).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MAGIC = b"SMRT"
VERSION = 1
FUSION_MODES = ("add", "concat_project")


@dataclass(frozen=True)
class ModelConfig:
    n_wp: int
    n_slot: int
    n_intent: int
    feat_dim: int = 192
    enc_layers: int = 2
    enc_hidden: int = 32
    enc_out: int = 32
    wp_embed: int = 16
    wp_hidden: int = 32
    wp_out: int = 32
    slot_embed: int = 8
    slot_hidden: int = 16
    slot_out: int = 32
    joint_hidden: int = 32
    intent_hidden: int = 16
    fusion_mode: str = "add"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "fusion_mode" and (not isinstance(v, int) or v <= 0):
                raise ValueError(f"ModelConfig.{f.name} must be a positive integer, got {v!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.fusion_mode == "add" and not (self.wp_out == self.slot_out == self.enc_out):
            raise ValueError("fusion_mode 'add' requires wp_out == slot_out == enc_out")

    @classmethod
    def for_vocab(cls, vocab, **overrides) -> "ModelConfig":
        return cls(n_wp=vocab.n_wp, n_slot=vocab.n_slot, n_intent=vocab.n_intent, **overrides)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**obj)

    @property
    def blank_wp(self) -> int:
        return self.n_wp

    @property
    def blank_slot(self) -> int:
        return self.n_slot


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in a fixed order.

    Weight matrices are stored (fan_in, fan_out).
    """
    shapes: dict[str, tuple] = {}
    d_in = cfg.feat_dim
    for layer in range(cfg.enc_layers):
        shapes[f"enc.l{layer}.W"] = (d_in + cfg.enc_hidden, 4 * cfg.enc_hidden)
        shapes[f"enc.l{layer}.b"] = (4 * cfg.enc_hidden,)
        d_in = cfg.enc_hidden
    shapes["enc.proj.W"] = (cfg.enc_hidden, cfg.enc_out)
    shapes["enc.proj.b"] = (cfg.enc_out,)
    for branch, vocab, emb, hid, out in (("wp", cfg.n_wp, cfg.wp_embed, cfg.wp_hidden, cfg.wp_out),
                                         ("slot", cfg.n_slot, cfg.slot_embed, cfg.slot_hidden,
                                          cfg.slot_out)):
        shapes[f"{branch}.embed"] = (vocab, emb)
        shapes[f"{branch}.lstm.W"] = (emb + hid, 4 * hid)
        shapes[f"{branch}.lstm.b"] = (4 * hid,)
        shapes[f"{branch}.proj.W"] = (hid, out)
        shapes[f"{branch}.proj.b"] = (out,)
    if cfg.fusion_mode == "concat_project":
        shapes["fusion.W"] = (cfg.wp_out + cfg.slot_out, cfg.enc_out)
    shapes["joint.enc.W"] = (cfg.enc_out, cfg.joint_hidden)
    shapes["joint.dec.W"] = (cfg.enc_out if cfg.fusion_mode == "concat_project" else cfg.wp_out,
                             cfg.joint_hidden)
    shapes["joint.b"] = (cfg.joint_hidden,)
    shapes["joint.wp.W"] = (cfg.joint_hidden, cfg.n_wp + 1)
    shapes["joint.wp.b"] = (cfg.n_wp + 1,)
    shapes["joint.slot.W"] = (cfg.joint_hidden, cfg.n_slot + 1)
    shapes["joint.slot.b"] = (cfg.n_slot + 1,)
    shapes["intent.l1.W"] = (cfg.wp_out, cfg.intent_hidden)
    shapes["intent.l1.b"] = (cfg.intent_hidden,)
    shapes["intent.l2.W"] = (cfg.intent_hidden, cfg.intent_hidden)
    shapes["intent.l2.b"] = (cfg.intent_hidden,)
    shapes["intent.out.W"] = (cfg.intent_hidden, cfg.n_intent)
    shapes["intent.out.b"] = (cfg.n_intent,)
    return shapes


@dataclass
class BoundParams:
    """Parameters as tensors, possibly leaves on a tape."""

    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    _const: BoundParams | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names mismatch; missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr
        self.arrays = {k: self.arrays[k] for k in expected}

    def bind(self, tape: nx.Tape | None = None) -> BoundParams:
        if tape is None:
            if self._const is None:
                self._const = BoundParams(self.config, {k: Tensor(v) for k, v in self.arrays.items()})
            return self._const
        return BoundParams(self.config, tape.leaves(self.arrays))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def replace(self, **arrays) -> "ModelParams":
        new = self.copy()
        new.arrays.update({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
        new.__post_init__()
        return new

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def equals(self, other: "ModelParams") -> bool:
        return (self.config == other.config and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "ModelParams":
        return load_checkpoint(path)


ParamsLike = Union[ModelParams, BoundParams]


def _bound(params: ParamsLike) -> BoundParams:
    return params.bind() if isinstance(params, ModelParams) else params


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-k, k) weights with k = 1/sqrt(fan_in); LSTM forget biases at 1."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            k = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-k, k, size=shape)
        else:
            b = np.zeros(shape)
            if name.endswith("lstm.b") or (name.startswith("enc.l") and name.endswith(".b")):
                h = shape[0] // 4
                b[h:2 * h] = 1.0
            arrays[name] = b
    return ModelParams(config, arrays)


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    blob = json.dumps(params.config.to_json(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(params.arrays))]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    config = ModelConfig.from_json(json.loads(data[pos:pos + n].decode("utf-8")))
    pos += n
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (n,) = take("<I")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}Q")
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(config, arrays)


# -- building blocks ---------------------------------------------------------


def lstm_cell(W: Tensor, b: Tensor, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate order in W/b is input, forget, output, candidate."""
    n = h.shape[-1]
    z = nx.concat([x, h]) @ W + b
    gates = nx.sigmoid(z[:3 * n])
    i, f, o = gates[:n], gates[n:2 * n], gates[2 * n:]
    c_new = f * c + i * nx.tanh(z[3 * n:])
    return o * nx.tanh(c_new), c_new


def _dense(params: BoundParams, prefix: str, x: Tensor) -> Tensor:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


# -- encoder -----------------------------------------------------------------


@dataclass
class EncoderState:
    h: list[Tensor]
    c: list[Tensor]


def initial_encoder_state(params: ParamsLike) -> EncoderState:
    cfg = params.config
    zeros = [Tensor(np.zeros(cfg.enc_hidden)) for _ in range(cfg.enc_layers)]
    return EncoderState(list(zeros), list(zeros))


def encoder_step(params: ParamsLike, state: EncoderState, x_t) -> tuple[Tensor, EncoderState]:
    p = _bound(params)
    cfg = p.config
    x = nx.constant(x_t)
    if x.shape != (cfg.feat_dim,):
        raise nx.ShapeError("encoder_step", x.shape, (cfg.feat_dim,))
    hs, cs = [], []
    for layer in range(cfg.enc_layers):
        x, c = lstm_cell(p[f"enc.l{layer}.W"], p[f"enc.l{layer}.b"], x, state.h[layer], state.c[layer])
        hs.append(x)
        cs.append(c)
    return _dense(p, "enc.proj", x), EncoderState(hs, cs)


def encode(params: ParamsLike, features) -> Tensor:
    """Encode a (T, feat_dim) matrix of post-pipeline frames into (T, enc_out).

    Frames are processed one at a time with the same code path the streaming
    decoder uses, so prefixes encode bit-identically.
    """
    cfg = params.config
    feats = features.value if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.feat_dim:
        raise nx.ShapeError("encode", feats.shape, ("T", cfg.feat_dim))
    if feats.shape[0] == 0:
        return Tensor(np.zeros((0, cfg.enc_out)))
    state = initial_encoder_state(params)
    rows = []
    for x_t in feats:
        h, state = encoder_step(params, state, x_t)
        rows.append(h)
    return nx.stack(rows)


# -- semantic decoder --------------------------------------------------------


@dataclass
class DecoderState:
    """Recurrent state of both prediction networks plus their latest outputs.

    ``g_w`` is the word-piece network output after the last consumed label; the
    intent head reads it.  ``last_wp``/``last_slot`` are None before the start
    symbols have been fed.
    """

    wp_h: Tensor
    wp_c: Tensor
    slot_h: Tensor
    slot_c: Tensor
    last_wp: int | None = None
    last_slot: int | None = None
    g_w: Tensor | None = None
    g_s: Tensor | None = None


def initial_decoder_state(params: ParamsLike) -> DecoderState:
    cfg = params.config
    return DecoderState(Tensor(np.zeros(cfg.wp_hidden)), Tensor(np.zeros(cfg.wp_hidden)),
                        Tensor(np.zeros(cfg.slot_hidden)), Tensor(np.zeros(cfg.slot_hidden)))


def prediction_step(params: ParamsLike, branch: str, h: Tensor, c: Tensor,
                    label: int) -> tuple[Tensor, Tensor, Tensor]:
    p = _bound(params)
    x = nx.embedding(p[f"{branch}.embed"], label)
    h, c = lstm_cell(p[f"{branch}.lstm.W"], p[f"{branch}.lstm.b"], x, h, c)
    return _dense(p, f"{branch}.proj", h), h, c


def fuse(params: ParamsLike, g_w: Tensor, g_s: Tensor) -> Tensor:
    p = _bound(params)
    if p.config.fusion_mode == "add":
        return g_w + g_s
    return nx.concat([g_w, g_s]) @ p["fusion.W"]


def decoder_step(params: ParamsLike, state: DecoderState, wp: int, slot: int) -> tuple[Tensor, DecoderState]:
    """Feed one (word piece, slot tag) pair to the semantic decoder.

    Returns the fused label embedding ``g_u`` and the successor state.  The two
    prediction networks never see each other's inputs.
    """
    cfg = params.config
    if wp == cfg.blank_wp or slot == cfg.blank_slot:
        raise ValueError("blank symbols are never fed to the prediction networks")
    if not 0 <= wp < cfg.n_wp:
        raise ValueError(f"word piece {wp} outside [0, {cfg.n_wp})")
    if not 0 <= slot < cfg.n_slot:
        raise ValueError(f"slot tag {slot} outside [0, {cfg.n_slot})")
    g_w, wh, wc = prediction_step(params, "wp", state.wp_h, state.wp_c, wp)
    g_s, sh, sc = prediction_step(params, "slot", state.slot_h, state.slot_c, slot)
    return fuse(params, g_w, g_s), DecoderState(wh, wc, sh, sc, wp, slot, g_w, g_s)


def start_decoder(params: ParamsLike) -> tuple[Tensor, DecoderState]:
    """Decoder output after the start symbols (the u = 0 row of the lattice)."""
    return decoder_step(params, initial_decoder_state(params), 0, 0)


# -- joint network and intent head --------------------------------------------


def joint(params: ParamsLike, h, g) -> tuple[Tensor, Tensor]:
    """Word-piece and slot log-distributions for encoder/decoder outputs.

    ``h`` and ``g`` may carry any broadcast-compatible leading axes; the
    lattice builder passes (T, 1, E) and (1, U+1, E).  The last entry of each
    output is the corresponding blank.
    """
    p = _bound(params)
    hidden = nx.tanh(nx.constant(h) @ p["joint.enc.W"] + nx.constant(g) @ p["joint.dec.W"] + p["joint.b"])
    wp = nx.log_softmax(_dense(p, "joint.wp", hidden))
    slot = nx.log_softmax(_dense(p, "joint.slot", hidden))
    return wp, slot


def intent_logits(params: ParamsLike, g_w_final) -> Tensor:
    """Intent log-distribution from the word-piece prediction network output."""
    p = _bound(params)
    x = nx.relu(_dense(p, "intent.l1", nx.constant(g_w_final)))
    x = nx.relu(_dense(p, "intent.l2", x))
    return nx.log_softmax(_dense(p, "intent.out", x))
