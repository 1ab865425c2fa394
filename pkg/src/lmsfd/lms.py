"""Language-specific matrix synthesis.

A :class:`LmsLinear` holds a shared ``r x c`` weight ``W`` and, for every
language ``l``, a tall ``r x d`` vertical factor and a wide ``d x c`` flat
factor. The effective weight for a source/target pair is::

    pair-wise:      W + V[src] @ F[tgt]
    language-wise:  W + V[src] @ F[src]

The training path never builds the ``r x c`` product; it applies the factors
to the input in sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import numerics as nx
from .numerics import Node

Mode = Literal["language-wise", "pair-wise"]
Route = Literal["ls", "shared"]

VERTICAL_STD = 0.02


class ConfigurationError(ValueError):
    """Raised for invalid layer or model settings."""


class UnknownLanguageError(KeyError):
    """Raised when a language index has no factors."""


def _leaf(x, name: str) -> Node:
    return x if isinstance(x, Node) else nx.parameter(x, name)


class LmsLinear:
    """Base linear map plus per-language low-rank factors.

    Parameters are :class:`~lmsfd.numerics.Node` leaves, so the same object
    serves both forward passes and optimizer updates. Arrays are wrapped in
    new leaves; existing nodes are used as given.
    """

    def __init__(
        self,
        base: np.ndarray | Node,
        verticals: list,
        flats: list,
        mode: Mode = "pair-wise",
        shared_vertical: np.ndarray | Node | None = None,
        shared_flat: np.ndarray | Node | None = None,
        name: str = "lms",
    ):
        if mode not in ("language-wise", "pair-wise"):
            raise ConfigurationError(f"unknown synthesis mode {mode!r}")
        if (shared_vertical is None) != (shared_flat is None):
            raise ConfigurationError("shared vertical and flat factors must be given together")
        if len(verticals) != len(flats) or not verticals:
            raise ConfigurationError("need one vertical and one flat factor per language (L >= 1)")
        self.mode = mode
        self.name = name
        self.base = _leaf(base, f"{name}.base")
        self.verticals = [_leaf(v, f"{name}.vertical.{i}") for i, v in enumerate(verticals)]
        self.flats = [_leaf(f, f"{name}.flat.{i}") for i, f in enumerate(flats)]
        self.shared_vertical = None if shared_vertical is None else _leaf(shared_vertical, f"{name}.shared_vertical")
        self.shared_flat = None if shared_flat is None else _leaf(shared_flat, f"{name}.shared_flat")
        r, c = self.base.shape
        d = self.verticals[0].shape[1]
        if 2 * d > min(r, c):
            raise ConfigurationError(f"rank d={d} exceeds min(r, c)/2 for a {r}x{c} weight")
        pairs = list(zip(self.verticals, self.flats))
        if self.has_shared:
            pairs.append((self.shared_vertical, self.shared_flat))
        for v, f in pairs:
            if v.shape != (r, d) or f.shape != (d, c):
                raise ConfigurationError(f"factor shapes {v.shape}, {f.shape} do not fit r={r}, c={c}, d={d}")

    @property
    def r(self) -> int:
        return self.base.shape[0]

    @property
    def c(self) -> int:
        return self.base.shape[1]

    @property
    def rank(self) -> int:
        return self.verticals[0].shape[1]

    @property
    def n_languages(self) -> int:
        return len(self.verticals)

    @property
    def has_shared(self) -> bool:
        return self.shared_vertical is not None

    def parameters(self) -> list[Node]:
        out = [self.base, *self.verticals, *self.flats]
        if self.has_shared:
            out += [self.shared_vertical, self.shared_flat]
        return out

    def language_parameters(self) -> list[Node]:
        return [*self.verticals, *self.flats]

    def extra_parameter_count(self) -> int:
        n = sum(p.value.size for p in self.language_parameters())
        if self.has_shared:
            n += self.shared_vertical.value.size + self.shared_flat.value.size
        return n

    def factor_keys(self, src: int, tgt: int) -> tuple[int, int]:
        """(vertical language, flat language) used for a src->tgt input."""
        for lang in (src, tgt):
            if not 0 <= lang < self.n_languages:
                raise UnknownLanguageError(f"language {lang} not in [0, {self.n_languages})")
        if self.mode == "pair-wise":
            return src, tgt
        return src, src

    def factors(self, src: int, tgt: int, route: Route = "ls") -> tuple[Node, Node]:
        if route == "shared":
            if not self.has_shared:
                raise ConfigurationError(f"{self.name}: shared route requested but no shared factors")
            return self.shared_vertical, self.shared_flat
        if route != "ls":
            raise ConfigurationError(f"unknown route {route!r}")
        v, f = self.factor_keys(src, tgt)
        return self.verticals[v], self.flats[f]

    def synthesize(self, src: int, tgt: int, route: Route = "ls") -> np.ndarray:
        """Materialized ``W + V F`` for the pair; used only for checking."""
        v, f = self.factors(src, tgt, route)
        return self.base.value + v.value @ f.value

    def forward(self, x: Node, src: int, tgt: int, route: Route = "ls") -> Node:
        """``W x + V (F x)`` for column inputs ``x`` of shape ``c x B``."""
        if x.shape[0] != self.c:
            raise nx.ShapeError(f"{self.name}: input has {x.shape[0]} rows, expected {self.c}")
        v, f = self.factors(src, tgt, route)
        return nx.add(nx.matmul(self.base, x), nx.matmul(v, nx.matmul(f, x)))

    def to_record(self) -> dict:
        rec = {
            "r": self.r,
            "c": self.c,
            "d": self.rank,
            "mode": self.mode,
            "base": self.base.value.tolist(),
            "verticals": [p.value.tolist() for p in self.verticals],
            "flats": [p.value.tolist() for p in self.flats],
        }
        if self.has_shared:
            rec["shared_vertical"] = self.shared_vertical.value.tolist()
            rec["shared_flat"] = self.shared_flat.value.tolist()
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict, name: str = "lms") -> "LmsLinear":
        sv = rec.get("shared_vertical")
        sf = rec.get("shared_flat")
        return cls(
            np.array(rec["base"], dtype=np.float64),
            [np.array(v, dtype=np.float64) for v in rec["verticals"]],
            [np.array(f, dtype=np.float64) for f in rec["flats"]],
            mode=rec["mode"],
            shared_vertical=None if sv is None else np.array(sv, dtype=np.float64),
            shared_flat=None if sf is None else np.array(sf, dtype=np.float64),
            name=name,
        )


def new_lms_linear(
    r: int,
    c: int,
    d: int,
    n_languages: int,
    mode: Mode = "pair-wise",
    with_shared: bool = False,
    seed: int | np.random.Generator = 0,
    name: str = "lms",
) -> LmsLinear:
    """Fresh layer: Gaussian base (std 1/sqrt(c)), Gaussian verticals, zero flats."""
    if min(r, c, d, n_languages) < 1:
        raise ConfigurationError(f"r, c, d, L must be >= 1 (got {r}, {c}, {d}, {n_languages})")
    if 2 * d > min(r, c):
        raise ConfigurationError(f"rank d={d} exceeds min(r, c)/2 = {min(r, c) / 2}")
    rng = np.random.default_rng(seed)
    base = rng.normal(0.0, 1.0 / np.sqrt(c), size=(r, c))
    verticals = [rng.normal(0.0, VERTICAL_STD, size=(r, d)) for _ in range(n_languages)]
    flats = [np.zeros((d, c)) for _ in range(n_languages)]
    sv = sf = None
    if with_shared:
        sv = rng.normal(0.0, VERTICAL_STD, size=(r, d))
        sf = np.zeros((d, c))
    return LmsLinear(base, verticals, flats, mode, sv, sf, name=name)


@dataclass(frozen=True)
class LayerFlops:
    """Multiply-adds per token column."""

    base: int
    lms_extra: int

    @property
    def ratio(self) -> float:
        return self.base / self.lms_extra if self.lms_extra else float("inf")


def layer_flops_per_token(r: int, c: int, d: int) -> LayerFlops:
    return LayerFlops(base=r * c, lms_extra=d * (r + c))


def flops_of(layer: LmsLinear) -> LayerFlops:
    return layer_flops_per_token(layer.r, layer.c, layer.rank)
