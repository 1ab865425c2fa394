"""Toy encoder-decoder transformer with pluggable projections.

All sentences of a batch are packed into one token matrix (tokens x features).
Attention keeps them apart through segment ids, so no padding ever enters a
projection and every differentiable value stays 2-D.

FFN strategies:

``dense``         one shared FFN per layer
``full_rank_ls``  one full-rank FFN per language; the shared FFN is the
                  second (fused) route
``switch_top1``   every second FFN layer is a top-1 mixture of experts
``lms``           shared FFN weights plus per-language low-rank factors
``lms_fd``        as ``lms`` plus shared low-rank factors for the fused route
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal

import numpy as np

from . import numerics as nx
from .data import BOS, PAD, TAG_OFFSET, Batch, DataError
from .lms import VERTICAL_STD, ConfigurationError, LmsLinear
from .numerics import Node

STRATEGIES = ("dense", "full_rank_ls", "switch_top1", "lms", "lms_fd")
PLACEMENTS = ("ffn_only", "attn_only", "both")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 64
    ffn_dim: int = 128
    n_layers: int = 2
    n_heads: int = 2
    n_languages: int = 4
    ffn_strategy: str = "dense"
    lms_rank: int = 8
    lms_mode: str = "pair-wise"
    placement: str = "ffn_only"
    n_experts: int = 4
    balance_weight: float = 0.01
    freeze_base: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.ffn_strategy not in STRATEGIES:
            raise ConfigurationError(f"ffn_strategy must be one of {STRATEGIES}, got {self.ffn_strategy!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigurationError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.lms_mode not in ("language-wise", "pair-wise"):
            raise ConfigurationError(f"lms_mode must be 'language-wise' or 'pair-wise', got {self.lms_mode!r}")
        if self.placement != "ffn_only" and not self.uses_lms:
            raise ConfigurationError(f"placement {self.placement!r} is only valid for lms / lms_fd")
        if min(self.embed_dim, self.ffn_dim, self.n_heads, self.n_languages) < 1 or self.n_layers < 0:
            raise ConfigurationError("dimensions must be positive")
        if self.embed_dim % self.n_heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.uses_lms:
            limit = min(self.embed_dim, self.ffn_dim) if self.placement != "attn_only" else self.embed_dim
            if self.lms_rank < 1 or 2 * self.lms_rank > limit:
                raise ConfigurationError(f"lms_rank {self.lms_rank} must lie in [1, {limit // 2}]")
        if self.ffn_strategy == "switch_top1" and self.n_experts < 1:
            raise ConfigurationError("switch_top1 needs n_experts >= 1")
        if self.vocab_size < TAG_OFFSET + self.n_languages:
            raise ConfigurationError(f"vocab_size {self.vocab_size} leaves no room for language tags")

    @property
    def uses_lms(self) -> bool:
        return self.ffn_strategy in ("lms", "lms_fd")

    @property
    def has_shared_route(self) -> bool:
        return self.ffn_strategy in ("lms_fd", "full_rank_ls")

    def lms_on_ffn(self) -> bool:
        return self.uses_lms and self.placement in ("ffn_only", "both")

    def lms_on_attn(self) -> bool:
        return self.uses_lms and self.placement in ("attn_only", "both")

    def is_switch_layer(self, index: int) -> bool:
        return self.ffn_strategy == "switch_top1" and index % 2 == 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# projections: every one maps token rows (T x in) to (T x out)


class Projection:
    def __init__(self, base: Node):
        self.base = base

    def __call__(self, h: Node, keys: tuple[int, int], route: str) -> Node:
        return nx.transpose(nx.matmul(self.base, nx.transpose(h)))


class LmsProjection(Projection):
    def __init__(self, layer: LmsLinear):
        super().__init__(layer.base)
        self.layer = layer

    def __call__(self, h, keys, route):
        return nx.transpose(self.layer.forward(nx.transpose(h), keys[0], keys[1], route))


class FullRankProjection(Projection):
    """Per-language full weights on the ``ls`` route, the shared base otherwise."""

    def __init__(self, base: Node, per_language: list[Node]):
        super().__init__(base)
        self.per_language = per_language

    def __call__(self, h, keys, route):
        w = self.base if route == "shared" else self.per_language[keys[0]]
        return nx.transpose(nx.matmul(w, nx.transpose(h)))


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class Layout:
    """Which packed key rows each packed query row may attend to."""

    seg_q: np.ndarray
    pos_q: np.ndarray
    seg_k: np.ndarray
    pos_k: np.ndarray
    causal: bool = False


class Attention:
    def __init__(self, q, k, v, o, n_heads):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads

    def __call__(self, x: Node, mem: Node, layout: Layout, keys, route) -> Node:
        q, k, v = self.q(x, keys, route), self.k(mem, keys, route), self.v(mem, keys, route)
        lay = layout
        ctx = nx.segment_attention(q, k, v, lay.seg_q, lay.pos_q, lay.seg_k, lay.pos_k, self.n_heads, lay.causal)
        return self.o(ctx, keys, route)


class FeedForward:
    def __init__(self, up: Projection, down: Projection):
        self.up, self.down = up, down

    def __call__(self, x, keys, route):
        return self.down(nx.relu(self.up(x, keys, route)), keys, route), None


def switch_gate(hidden: Node, gate: Node, n_experts: int) -> tuple[np.ndarray, Node, Node]:
    """Top-1 routing: ``(expert per token, balance loss, gate probabilities)``.

    The balance loss is ``E * sum_e f_e * P_e`` with ``f_e`` the fraction of
    tokens sent to expert ``e`` and ``P_e`` its mean gate probability. Ties go
    to the lowest expert index.
    """
    probs = nx.softmax_rows(nx.matmul(hidden, gate))
    choice = np.argmax(probs.value, axis=1)
    n_tokens = hidden.shape[0]
    frac = np.bincount(choice, minlength=n_experts) / n_tokens
    weights = np.broadcast_to(frac, probs.shape)
    balance = nx.scale(nx.total(nx.mul(probs, nx.constant(weights))), n_experts / n_tokens)
    return choice, balance, probs


class SwitchFeedForward:
    def __init__(self, gate: Node, experts: list[tuple[Node, Node]]):
        self.gate = gate
        self.experts = experts

    def __call__(self, x, keys, route):
        n = x.shape[0]
        choice, balance, probs = switch_gate(x, self.gate, len(self.experts))
        parts = []
        for e, (up, down) in enumerate(self.experts):
            rows = np.flatnonzero(choice == e)
            if rows.size == 0:
                continue
            xe = nx.take_rows(x, rows)
            ye = nx.transpose(nx.matmul(down, nx.relu(nx.matmul(up, nx.transpose(xe)))))
            pe = nx.take_rows(nx.cols(probs, e, e + 1), rows)
            parts.append(nx.scatter_rows(nx.scale_rows(ye, pe), rows, n))
        return nx.add_all(parts), balance


@dataclass
class _Norm:
    gain: Node
    bias: Node

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias)


class EncoderLayer:
    def __init__(self, norm1, attn, norm2, ffn):
        self.norm1, self.attn, self.norm2, self.ffn = norm1, attn, norm2, ffn

    def __call__(self, x, layout, keys, route, aux):
        h = self.norm1(x)
        x = nx.add(x, self.attn(h, h, layout, keys, route))
        y, bal = self.ffn(self.norm2(x), keys, route)
        if bal is not None:
            aux.append(bal)
        return nx.add(x, y)


class DecoderLayer:
    def __init__(self, norm1, self_attn, norm2, cross_attn, norm3, ffn):
        self.norm1, self.self_attn = norm1, self_attn
        self.norm2, self.cross_attn = norm2, cross_attn
        self.norm3, self.ffn = norm3, ffn

    def __call__(self, x, mem, self_layout, cross_layout, keys, route, aux):
        h = self.norm1(x)
        x = nx.add(x, self.self_attn(h, h, self_layout, keys, route))
        x = nx.add(x, self.cross_attn(self.norm2(x), mem, cross_layout, keys, route))
        y, bal = self.ffn(self.norm3(x), keys, route)
        if bal is not None:
            aux.append(bal)
        return nx.add(x, y)


# ---------------------------------------------------------------------------
# model


def sinusoidal(positions: np.ndarray, dim: int) -> np.ndarray:
    pos = positions[:, None].astype(np.float64)
    i = np.arange(dim // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((len(positions), dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : (dim - dim // 2)])
    return out


def _packed(rows: np.ndarray, pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten non-pad tokens: (ids, sentence index, position in sentence)."""
    ids, seg, pos = [], [], []
    for s, row in enumerate(rows):
        toks = row[row != pad]
        ids.append(toks)
        seg.append(np.full(len(toks), s))
        pos.append(np.arange(len(toks)))
    return np.concatenate(ids), np.concatenate(seg), np.concatenate(pos)


@dataclass
class ForwardOutput:
    logits: Node
    targets: np.ndarray
    segments: np.ndarray
    balance_loss: Node | None

    def sentence_logits(self, k: int) -> np.ndarray:
        return self.logits.value[self.segments == k]


class Model:
    """Parameters live in ``self.params`` (name -> leaf Node), in creation order."""

    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Node] = {}
        self._values = values
        c, r = cfg.embed_dim, cfg.ffn_dim
        self.embed = self._param("embed", (cfg.vocab_size, c), c**-0.5)
        self.enc_layers = []
        self.dec_layers = []
        for i in range(cfg.n_layers):
            p = f"enc.{i}"
            self.enc_layers.append(
                EncoderLayer(
                    self._norm(f"{p}.norm1"),
                    self._attention(f"{p}.attn"),
                    self._norm(f"{p}.norm2"),
                    self._ffn(f"{p}.ffn", i),
                )
            )
        self.enc_norm = self._norm("enc.norm")
        for i in range(cfg.n_layers):
            p = f"dec.{i}"
            self.dec_layers.append(
                DecoderLayer(
                    self._norm(f"{p}.norm1"),
                    self._attention(f"{p}.self_attn"),
                    self._norm(f"{p}.norm2"),
                    self._attention(f"{p}.cross_attn"),
                    self._norm(f"{p}.norm3"),
                    self._ffn(f"{p}.ffn", i),
                )
            )
        self.dec_norm = self._norm("dec.norm")
        self._values = None

    # -- construction helpers -------------------------------------------------

    def _param(self, name: str, shape, std: float | None) -> Node:
        if self._values is not None:
            value = np.array(self._values[name], dtype=np.float64)
            if value.shape != tuple(shape):
                raise ConfigurationError(f"{name}: stored shape {value.shape} != expected {tuple(shape)}")
        elif std is None:
            value = np.zeros(shape)
        else:
            # each tensor has its own stream so strategies share base weights
            rng = np.random.default_rng([self.cfg.seed, zlib.crc32(name.encode())])
            value = rng.normal(0.0, std, size=shape)
        node = nx.parameter(value, name)
        self.params[name] = node
        return node

    def _norm(self, name) -> _Norm:
        gain = self._param(f"{name}.gain", (1, self.cfg.embed_dim), None)
        if self._values is None:
            gain.value[:] = 1.0
        return _Norm(gain, self._param(f"{name}.bias", (1, self.cfg.embed_dim), None))

    def _projection(self, name: str, out_dim: int, in_dim: int, lms: bool) -> Projection:
        cfg = self.cfg
        base = self._param(f"{name}.base", (out_dim, in_dim), in_dim**-0.5)
        if lms:
            L, d = cfg.n_languages, cfg.lms_rank
            verts = [self._param(f"{name}.vertical.{l}", (out_dim, d), VERTICAL_STD) for l in range(L)]
            flats = [self._param(f"{name}.flat.{l}", (d, in_dim), None) for l in range(L)]
            sv = sf = None
            if cfg.ffn_strategy == "lms_fd":
                sv = self._param(f"{name}.shared_vertical", (out_dim, d), VERTICAL_STD)
                sf = self._param(f"{name}.shared_flat", (d, in_dim), None)
            return LmsProjection(LmsLinear(base, verts, flats, cfg.lms_mode, sv, sf, name=name))
        return Projection(base)

    def _attention(self, name: str) -> Attention:
        c, lms = self.cfg.embed_dim, self.cfg.lms_on_attn()
        projs = [self._projection(f"{name}.{k}", c, c, lms) for k in "qkvo"]
        return Attention(*projs, self.cfg.n_heads)

    def _ffn(self, name: str, index: int):
        cfg = self.cfg
        c, r = cfg.embed_dim, cfg.ffn_dim
        if cfg.is_switch_layer(index):
            gate = self._param(f"{name}.gate", (c, cfg.n_experts), 0.02)
            experts = [
                (
                    self._param(f"{name}.expert.{e}.up", (r, c), c**-0.5),
                    self._param(f"{name}.expert.{e}.down", (c, r), r**-0.5),
                )
                for e in range(cfg.n_experts)
            ]
            return SwitchFeedForward(gate, experts)
        if cfg.ffn_strategy == "full_rank_ls":
            projs = []
            for k, (o, i) in (("up", (r, c)), ("down", (c, r))):
                base = self._param(f"{name}.{k}.base", (o, i), i**-0.5)
                per = [self._param(f"{name}.{k}.language.{l}", (o, i), i**-0.5) for l in range(cfg.n_languages)]
                projs.append(FullRankProjection(base, per))
            return FeedForward(*projs)
        lms = cfg.lms_on_ffn()
        return FeedForward(self._projection(f"{name}.up", r, c, lms), self._projection(f"{name}.down", c, r, lms))

    # -- parameters -------------------------------------------------------------

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Node]:
        if not self.cfg.freeze_base or not self.cfg.uses_lms:
            return self.parameters()
        lms_bases = {f"{n[: -len('.vertical.0')]}.base" for n in self.params if n.endswith(".vertical.0")}
        return [p for n, p in self.params.items() if n not in lms_bases]

    def language_parameters(self) -> list[Node]:
        """Per-language weights: LMS factors or full-rank language FFNs."""
        return [p for n, p in self.params.items() if param_category(n) == "language_specific"]

    def shared_factor_parameters(self) -> list[Node]:
        return [p for n, p in self.params.items() if param_category(n) == "shared_factors"]

    def census(self) -> dict[str, int]:
        out = {k: 0 for k in CATEGORIES}
        for name, p in self.params.items():
            out[param_category(name)] += p.value.size
        out["total"] = sum(out[k] for k in CATEGORIES)
        return out

    def census_by_side(self, category: str = "language_specific") -> dict[str, int]:
        out = {"enc": 0, "dec": 0}
        for name, p in self.params.items():
            side = name.split(".", 1)[0]
            if side in out and param_category(name) == category:
                out[side] += p.value.size
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    # -- forward ---------------------------------------------------------------

    def _keys(self, src: int, tgt: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """Factor keys (vertical, flat) for encoder and decoder projections."""
        if self.cfg.ffn_strategy == "full_rank_ls" or self.cfg.lms_mode == "language-wise":
            return (src, src), (tgt, tgt)
        return (src, tgt), (src, tgt)

    def _embed(self, ids: np.ndarray, pos: np.ndarray) -> Node:
        c = self.cfg.embed_dim
        x = nx.scale(nx.take_rows(self.embed, ids), np.sqrt(c))
        return nx.add(x, nx.constant(sinusoidal(pos, c)))

    def forward(self, batch: Batch, route: str = "ls") -> ForwardOutput:
        cfg = self.cfg
        if route not in ("ls", "shared"):
            raise ConfigurationError(f"unknown route {route!r}")
        if route == "shared" and not cfg.has_shared_route:
            raise ConfigurationError(f"strategy {cfg.ffn_strategy!r} has no shared route")
        for lang in batch.pair:
            if not 0 <= lang < cfg.n_languages:
                raise DataError(f"language {lang} outside [0, {cfg.n_languages})")
        for arr in (batch.src, batch.tgt):
            if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
                raise DataError(f"token id outside [0, {cfg.vocab_size})")
        if (batch.tgt[:, 0] == batch.pad_id).any():
            raise DataError("empty target sentence")
        enc_keys, dec_keys = self._keys(batch.src_lang, batch.tgt_lang)
        aux: list[Node] = []

        tag = np.full((batch.size, 1), TAG_OFFSET + batch.tgt_lang)
        src_ids, src_seg, src_pos = _packed(np.hstack([tag, batch.src]), batch.pad_id)
        x = self._embed(src_ids, src_pos)
        enc_layout = Layout(src_seg, src_pos, src_seg, src_pos)
        for layer in self.enc_layers:
            x = layer(x, enc_layout, enc_keys, route, aux)
        mem = self.enc_norm(x)

        tgt_ids, tgt_seg, tgt_pos = _packed(batch.tgt, batch.pad_id)
        # teacher forcing: decoder input is the target shifted right behind BOS
        dec_ids = np.where(tgt_pos == 0, BOS, np.roll(tgt_ids, 1))
        y = self._embed(dec_ids, tgt_pos)
        self_layout = Layout(tgt_seg, tgt_pos, tgt_seg, tgt_pos, causal=True)
        cross_layout = Layout(tgt_seg, tgt_pos, src_seg, src_pos)
        for layer in self.dec_layers:
            y = layer(y, mem, self_layout, cross_layout, dec_keys, route, aux)
        logits = nx.matmul(self.dec_norm(y), nx.transpose(self.embed))
        balance = nx.add_all(aux) if aux else None
        return ForwardOutput(logits, tgt_ids, tgt_seg, balance)

    # -- checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        meta = json.dumps({"version": CHECKPOINT_VERSION, "config": asdict(self.cfg)}, sort_keys=True)
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(meta), **self.state_dict())

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')!r}")
            values = {k: z[k] for k in z.files if k != "__meta__"}
        return cls(ModelConfig(**meta["config"]), values)


CATEGORIES = ("base", "language_specific", "shared_factors", "experts", "gate")


def param_category(name: str) -> str:
    parts = name.split(".")
    if "vertical" in parts or "flat" in parts or "language" in parts:
        return "language_specific"
    if parts[-1] in ("shared_vertical", "shared_flat"):
        return "shared_factors"
    if "expert" in parts:
        return "experts"
    if parts[-1] == "gate":
        return "gate"
    return "base"


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward_model(model: Model, batch: Batch, route: str = "ls") -> ForwardOutput:
    return model.forward(batch, route)
