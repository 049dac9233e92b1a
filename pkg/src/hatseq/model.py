"""Hierarchical attention transformer encoder-decoder.

Four variants share one configuration surface:

  hat                seq2seq with an extra encoder layer over BOS rows and a
                     third decoder attention sublayer over those states
  plain              vanilla post-norm transformer seq2seq
  encoder_only_hat   encoder stack with a BOS-keyed attention branch inside
                     every layer (for masked-token pre-training)
  encoder_only_plain encoder stack alone

The encoder input is the sum of token, position and segment embeddings.
Self-attention and feed-forward sublayers use the original post-norm
residual ordering.  The hierarchical attention branches are residual
additions with the layer norm applied inside the branch, so zeroing their
output projections reduces each hierarchical variant exactly to its plain
counterpart; the equivalence tests rely on that being an identity.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import (
    DropoutRng,
    Tensor,
    dropout,
    gather,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

MODES = ("hat", "plain", "encoder_only_hat", "encoder_only_plain")

MASK_SENTINEL = -1e9

CHECKPOINT_MAGIC = b"HATCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class HatConfig:
    num_layers: int
    hidden_size: int
    ffn_size: int
    num_heads: int
    vocab_size: int
    max_positions: int
    num_hier_layers: int = 1
    num_segments: int = 2
    dropout: float = 0.1
    mode: str = "hat"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.num_hier_layers < 0:
            raise ValueError("num_hier_layers must be >= 0")
        if self.mode != "hat":
            # only the seq2seq hat variant stacks standalone hierarchical layers
            self.num_hier_layers = 0
        for name in ("num_layers", "hidden_size", "ffn_size", "num_heads",
                     "vocab_size", "max_positions", "num_segments"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_size": self.hidden_size,
            "ffn_size": self.ffn_size,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "num_hier_layers": self.num_hier_layers,
            "num_segments": self.num_segments,
            "dropout": self.dropout,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HatConfig":
        return cls(**d)


@dataclass
class EncoderOutput:
    token_states: Tensor            # [src_len, d]
    hier_states: Tensor | None      # [num_bos, d] in hat mode, None otherwise
    bos_positions: np.ndarray


# -- parameter set ---------------------------------------------------------


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}.w{name}"] = (d, d)
        out[f"{prefix}.b{name}"] = (d,)
    return out


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, f),
        f"{prefix}.b1": (f,),
        f"{prefix}.w2": (f, d),
        f"{prefix}.b2": (d,),
    }


def parameter_shapes(cfg: HatConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array, in the fixed order used by checkpoints."""
    d, f = cfg.hidden_size, cfg.ffn_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (cfg.vocab_size, d),
        "embed.pos": (cfg.max_positions, d),
        "embed.segment": (cfg.num_segments, d),
    }
    encoder_hier = cfg.mode == "encoder_only_hat"
    for i in range(cfg.num_layers):
        shapes.update(_attn_shapes(f"enc.{i}.self", d))
        shapes.update(_ln_shapes(f"enc.{i}.ln1", d))
        if encoder_hier:
            shapes.update(_attn_shapes(f"enc.{i}.hier", d))
            shapes.update(_ln_shapes(f"enc.{i}.hier_ln", d))
        shapes.update(_ffn_shapes(f"enc.{i}.ffn", d, f))
        shapes.update(_ln_shapes(f"enc.{i}.ln2", d))
    for j in range(cfg.num_hier_layers):
        shapes.update(_attn_shapes(f"hier.{j}.self", d))
        shapes.update(_ln_shapes(f"hier.{j}.ln1", d))
        shapes.update(_ffn_shapes(f"hier.{j}.ffn", d, f))
        shapes.update(_ln_shapes(f"hier.{j}.ln2", d))
    if cfg.mode in ("hat", "plain"):
        for i in range(cfg.num_layers):
            shapes.update(_attn_shapes(f"dec.{i}.self", d))
            shapes.update(_ln_shapes(f"dec.{i}.ln1", d))
            shapes.update(_attn_shapes(f"dec.{i}.cross", d))
            shapes.update(_ln_shapes(f"dec.{i}.ln2", d))
            if cfg.mode == "hat":
                shapes.update(_attn_shapes(f"dec.{i}.hier", d))
                shapes.update(_ln_shapes(f"dec.{i}.hier_ln", d))
            shapes.update(_ffn_shapes(f"dec.{i}.ffn", d, f))
            shapes.update(_ln_shapes(f"dec.{i}.ln3", d))
    return shapes


def init_parameters(cfg: HatConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Scaled-normal init (std 0.02); zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = (rng.standard_normal(shape) * 0.02).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_parameters(cfg: HatConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def parameter_breakdown(cfg: HatConfig) -> dict[str, int]:
    """Learnable scalar count per top-level component."""
    groups: dict[str, int] = {}
    for name, shape in parameter_shapes(cfg).items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + int(np.prod(shape))
    return groups


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- forward pieces ----------------------------------------------------------


def causal_bias(n: int, dtype=np.float64) -> np.ndarray:
    """Additive [n, n] mask: MASK_SENTINEL strictly above the diagonal."""
    bias = np.zeros((n, n), dtype=dtype)
    bias[np.triu_indices(n, k=1)] = MASK_SENTINEL
    return bias


def multi_head_attention(params: dict[str, Tensor], prefix: str, cfg: HatConfig,
                         queries: Tensor, keys_values: Tensor,
                         attn_bias: np.ndarray | None = None,
                         train: bool = False, rng: DropoutRng | None = None,
                         prob_sink: list | None = None) -> Tensor:
    """Multi-head attention from [Lq, d] queries over [Lk, d] keys/values.

    ``attn_bias`` is an additive [Lq, Lk] array (0 or MASK_SENTINEL).
    When ``prob_sink`` is given the post-softmax weights [h, Lq, Lk] are
    appended to it as a plain array.
    """
    d, h, dk = cfg.hidden_size, cfg.num_heads, cfg.head_size
    lq = queries.shape[0]
    lk = keys_values.shape[0]
    if lk == 0:
        raise ValueError(f"{prefix}: attention over an empty key set")
    if attn_bias is not None:
        # a fully banned query row would have no distribution to normalize
        if np.any((attn_bias <= MASK_SENTINEL).all(axis=-1)):
            raise ValueError(f"{prefix}: some query attends to no unmasked key")

    def project(x, name, length):
        y = matmul(x, params[f"{prefix}.w{name}"]) + params[f"{prefix}.b{name}"]
        return y.reshape(length, h, dk).transpose((1, 0, 2))  # [h, L, dk]

    q = project(queries, "q", lq)
    k = project(keys_values, "k", lk)
    v = project(keys_values, "v", lk)

    scores = matmul(q, k.transpose((0, 2, 1))) * (1.0 / math.sqrt(dk))  # [h, Lq, Lk]
    if attn_bias is not None:
        scores = scores + Tensor(attn_bias)
    probs = softmax(scores, axis=-1)
    if prob_sink is not None:
        prob_sink.append(np.array(probs.data))
    probs = dropout(probs, cfg.dropout, rng, train)
    context = matmul(probs, v)                                # [h, Lq, dk]
    context = context.transpose((1, 0, 2)).reshape(lq, d)
    return matmul(context, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _feed_forward(params, prefix: str, x: Tensor) -> Tensor:
    hidden = gelu(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _post_norm(params, ln_prefix: str, x: Tensor, sub_out: Tensor, cfg,
               train, rng) -> Tensor:
    y = x + dropout(sub_out, cfg.dropout, rng, train)
    return layer_norm(y, params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"])


def _hier_branch(params, attn_prefix: str, ln_prefix: str, cfg,
                 x: Tensor, keys_values: Tensor, train, rng,
                 prob_sink=None) -> Tensor:
    # Pre-norm residual branch: with a zeroed output projection this is the
    # identity, which is what reduces hat to plain exactly.
    normed = layer_norm(x, params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"])
    attended = multi_head_attention(params, attn_prefix, cfg, normed, keys_values,
                                    train=train, rng=rng, prob_sink=prob_sink)
    return x + dropout(attended, cfg.dropout, rng, train)


def _encoder_layer(params, prefix: str, cfg, x: Tensor, train, rng) -> Tensor:
    attn = multi_head_attention(params, f"{prefix}.self", cfg, x, x,
                                train=train, rng=rng)
    x = _post_norm(params, f"{prefix}.ln1", x, attn, cfg, train, rng)
    ffn = _feed_forward(params, f"{prefix}.ffn", x)
    return _post_norm(params, f"{prefix}.ln2", x, ffn, cfg, train, rng)


def embed_tokens(params, cfg: HatConfig, ids: np.ndarray, segment_ids: np.ndarray,
                 train: bool = False, rng: DropoutRng | None = None) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("cannot embed an empty sequence")
    if n > cfg.max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    x = (gather(params["embed.token"], ids)
         + gather(params["embed.pos"], np.arange(n))
         + gather(params["embed.segment"], np.asarray(segment_ids, dtype=np.int64)))
    return dropout(x, cfg.dropout, rng, train)


def hier_encode(params, cfg: HatConfig, token_states: Tensor,
                bos_positions: np.ndarray, train: bool = False,
                rng: DropoutRng | None = None) -> Tensor:
    """Hierarchical encoder layers over the BOS rows of the token states.

    Queries, keys and values are all drawn from the gathered BOS rows, so
    the result depends on no other row of ``token_states``.
    """
    bos_positions = np.asarray(bos_positions, dtype=np.int64)
    if len(bos_positions) == 0:
        raise ValueError("hierarchical encoding needs at least one BOS position")
    states = gather(token_states, bos_positions)
    for j in range(cfg.num_hier_layers):
        states = _encoder_layer(params, f"hier.{j}", cfg, states, train, rng)
    return states


def encode(params, cfg: HatConfig, source_ids: np.ndarray, segment_ids: np.ndarray,
           bos_positions: np.ndarray, train: bool = False,
           rng: DropoutRng | None = None) -> EncoderOutput:
    """Run the token-level encoder, then the hierarchical layer in hat mode."""
    if cfg.mode not in ("hat", "plain"):
        raise ValueError(f"encode is for seq2seq modes, config has mode {cfg.mode!r}")
    x = embed_tokens(params, cfg, source_ids, segment_ids, train, rng)
    for i in range(cfg.num_layers):
        x = _encoder_layer(params, f"enc.{i}", cfg, x, train, rng)
    hier = None
    if cfg.mode == "hat":
        hier = hier_encode(params, cfg, x, bos_positions, train, rng)
    return EncoderOutput(x, hier, np.asarray(bos_positions, dtype=np.int64))


def decode_step(params, cfg: HatConfig, prefix_ids: np.ndarray,
                enc_out: EncoderOutput, train: bool = False,
                rng: DropoutRng | None = None,
                trace_sink: list | None = None) -> Tensor:
    """Logits [prefix_len, vocab] for every next-token position of the prefix.

    Sublayers per decoder layer: causal self-attention, token-level
    cross-attention, hierarchical cross-attention (hat only), feed-forward.
    ``trace_sink`` collects the hierarchical attention weights [h, T, num_bos]
    of each layer, in layer order.
    """
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    if len(prefix_ids) == 0:
        raise ValueError("decoder prefix must be non-empty")
    if cfg.mode == "hat" and enc_out.hier_states is None:
        raise ValueError("hat decoding needs encoder output with hierarchical states")
    n = len(prefix_ids)
    x = embed_tokens(params, cfg, prefix_ids, np.zeros(n, dtype=np.int64), train, rng)
    bias = causal_bias(n, dtype=x.dtype)
    for i in range(cfg.num_layers):
        self_attn = multi_head_attention(params, f"dec.{i}.self", cfg, x, x,
                                         attn_bias=bias, train=train, rng=rng)
        x = _post_norm(params, f"dec.{i}.ln1", x, self_attn, cfg, train, rng)
        cross = multi_head_attention(params, f"dec.{i}.cross", cfg, x,
                                     enc_out.token_states, train=train, rng=rng)
        x = _post_norm(params, f"dec.{i}.ln2", x, cross, cfg, train, rng)
        if cfg.mode == "hat":
            x = _hier_branch(params, f"dec.{i}.hier", f"dec.{i}.hier_ln", cfg,
                             x, enc_out.hier_states, train, rng,
                             prob_sink=trace_sink)
        ffn = _feed_forward(params, f"dec.{i}.ffn", x)
        x = _post_norm(params, f"dec.{i}.ln3", x, ffn, cfg, train, rng)
    return matmul(x, params["embed.token"].transpose())  # tied output projection


def encoder_only_forward(params, cfg: HatConfig, source_ids: np.ndarray,
                         segment_ids: np.ndarray, bos_positions: np.ndarray,
                         train: bool = False, rng: DropoutRng | None = None,
                         ) -> tuple[Tensor, Tensor]:
    """Encoder-only stack; returns (per-token states [L, d], pooled state [d]).

    In the hat variant each layer adds, after self-attention, an attention
    branch whose keys and values are the layer's current BOS rows.  The
    pooled state is the first-token row, for classification heads.
    """
    if cfg.mode not in ("encoder_only_hat", "encoder_only_plain"):
        raise ValueError(
            f"encoder_only_forward needs an encoder_only mode, got {cfg.mode!r}"
        )
    bos_positions = np.asarray(bos_positions, dtype=np.int64)
    hier = cfg.mode == "encoder_only_hat"
    if hier and len(bos_positions) == 0:
        raise ValueError("encoder_only_hat needs at least one BOS position")
    x = embed_tokens(params, cfg, source_ids, segment_ids, train, rng)
    for i in range(cfg.num_layers):
        attn = multi_head_attention(params, f"enc.{i}.self", cfg, x, x,
                                    train=train, rng=rng)
        x = _post_norm(params, f"enc.{i}.ln1", x, attn, cfg, train, rng)
        if hier:
            bos_rows = gather(x, bos_positions)
            x = _hier_branch(params, f"enc.{i}.hier", f"enc.{i}.hier_ln", cfg,
                             x, bos_rows, train, rng)
        ffn = _feed_forward(params, f"enc.{i}.ffn", x)
        x = _post_norm(params, f"enc.{i}.ln2", x, ffn, cfg, train, rng)
    pooled = gather(x, np.array([0]))
    return x, pooled.reshape(cfg.hidden_size)


def masked_token_logits(params, states: Tensor, positions: np.ndarray) -> Tensor:
    """Prediction head for masked-token training: [len(positions), vocab]."""
    picked = gather(states, np.asarray(positions, dtype=np.int64))
    return matmul(picked, params["embed.token"].transpose())


def encode_batch(params, cfg: HatConfig, batch, train: bool = False,
                 rng: DropoutRng | None = None) -> list[EncoderOutput]:
    """Encode each row of a collated batch, stripping padding via its masks."""
    outs = []
    for i in range(len(batch)):
        m = batch.source_mask[i]
        outs.append(encode(
            params, cfg,
            batch.source[i, m],
            batch.segments[i, m],
            np.flatnonzero(batch.bos_mask[i, m]),
            train=train, rng=rng,
        ))
    return outs


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, cfg: HatConfig, params: dict[str, Tensor]) -> Path:
    """Versioned binary checkpoint: header, config echo, float32 LE blobs."""
    path = Path(path)
    expected = parameter_shapes(cfg)
    if list(params.keys()) != list(expected.keys()):
        raise ValueError("parameter set does not match the config's layout")
    cfg_blob = json.dumps(cfg.to_dict()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        for name, tensor in params.items():
            blob = np.ascontiguousarray(tensor.data, dtype="<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", blob.ndim))
            f.write(struct.pack(f"<{blob.ndim}I", *blob.shape))
            f.write(blob.tobytes())
    return path


def load_checkpoint(path, dtype=np.float32) -> tuple[HatConfig, dict[str, Tensor]]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        cfg = HatConfig.from_dict(json.loads(f.read(cfg_len).decode("utf-8")))
        expected = parameter_shapes(cfg)
        params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            (name_len,) = struct.unpack("<H", f.read(2))
            stored = f.read(name_len).decode("utf-8")
            if stored != name:
                raise ValueError(f"{path}: expected parameter {name!r}, found {stored!r}")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            if dims != shape:
                raise ValueError(
                    f"{path}: parameter {name!r} has shape {dims}, config implies {shape}"
                )
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            params[name] = Tensor(data.astype(dtype), requires_grad=True)
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after last parameter")
    return cfg, params


def load_matching_parameters(params: dict[str, Tensor], path) -> list[str]:
    """Copy same-name, same-shape parameters from a checkpoint into ``params``.

    Entries that are absent or shaped differently keep their fresh
    initialization (how a trained seq2seq run seeds a new task that adds,
    for example, a larger segment table).  Returns the names skipped.
    """
    _, loaded = load_checkpoint(path)
    skipped = []
    for name, p in params.items():
        src = loaded.get(name)
        if src is not None and src.data.shape == p.data.shape:
            p.data = src.data.astype(p.data.dtype)
        else:
            skipped.append(name)
    return skipped


def plain_twin(cfg: HatConfig) -> HatConfig:
    """The non-hierarchical counterpart of a config (and vice versa)."""
    twin = {"hat": "plain", "plain": "hat",
            "encoder_only_hat": "encoder_only_plain",
            "encoder_only_plain": "encoder_only_hat"}[cfg.mode]
    hier = 1 if twin == "hat" and cfg.num_hier_layers == 0 else cfg.num_hier_layers
    return replace(cfg, mode=twin, num_hier_layers=hier)
