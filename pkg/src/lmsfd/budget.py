"""Closed-form parameter and FLOPs accounting.

Single-projection budgets compare extra language-specific (or expert)
parameters of one ``r x c`` projection across methods. ``budget_full_model``
applies the two-projections-per-FFN rule over ``N`` layers, and
``model_params`` predicts the full stored-parameter census of a toy model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

METHODS = ("ls", "moe", "lms", "lms_fd")


@dataclass(frozen=True)
class ShapeParams:
    L: int
    r: int
    c: int
    d: int
    E: int = 0
    N: int = 1
    projections_per_ffn: int = 2

    def __post_init__(self):
        for name in ("L", "r", "c", "d", "E", "N", "projections_per_ffn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class MethodBudget:
    train_extra_params: int
    inference_extra_params: int
    extra_flops_per_token: int


@dataclass(frozen=True)
class BudgetReport:
    shape: ShapeParams
    methods: dict[str, MethodBudget]

    @property
    def lms_is_parameter_efficient(self) -> bool:
        """True when the low-rank budget undercuts full-rank LS, i.e. d < rc/(r+c)."""
        return self.methods["lms"].train_extra_params < self.methods["ls"].train_extra_params

    def to_dict(self) -> dict:
        return {
            "shape": asdict(self.shape),
            "methods": {k: asdict(v) for k, v in self.methods.items()},
            "lms_is_parameter_efficient": self.lms_is_parameter_efficient,
        }

    def format_table(self) -> str:
        s = self.shape
        lines = [
            f"L={s.L} r={s.r} c={s.c} d={s.d} E={s.E}",
            f"{'method':<8}{'train':>16}{'inference':>16}{'flops/tok':>14}",
        ]
        for name, b in self.methods.items():
            lines.append(
                f"{name:<8}{b.train_extra_params:>16,}{b.inference_extra_params:>16,}{b.extra_flops_per_token:>14,}"
            )
        lines.append(f"lms parameter-efficient: {'yes' if self.lms_is_parameter_efficient else 'no'}")
        return "\n".join(lines)


def budget_single_projection(p: ShapeParams) -> BudgetReport:
    """Extra parameters of one projection for LS, MoE, LMS and LMS+FD."""
    low_rank = p.d * (p.r + p.c)
    full = p.r * p.c
    methods = {
        # each token only passes through its own language's matrix / one expert
        "ls": MethodBudget(p.L * full, p.L * full, 0),
        "moe": MethodBudget(p.E * full, p.E * full, 0),
        "lms": MethodBudget(p.L * low_rank, p.L * low_rank, low_rank),
        "lms_fd": MethodBudget((p.L + 1) * low_rank, low_rank, low_rank),
    }
    return BudgetReport(p, methods)


def budget_full_model(p: ShapeParams) -> int:
    """Language-specific parameters added to ``N`` FFN layers: ``2 L N d (c + r)``."""
    return p.projections_per_ffn * p.L * p.N * p.d * (p.c + p.r)


def flops_ratio(r: int, c: int, d: int) -> Fraction:
    """Base projection multiply-adds over low-rank extra multiply-adds."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return Fraction(r * c, d * (r + c))


def render_ratio(ratio: Fraction) -> str:
    return f"{float(ratio):g} (≈{round(ratio)}×)"


def model_params(cfg) -> dict[str, int]:
    """Predicted stored-parameter counts of ``Model(cfg)`` by category.

    Categories match :func:`lmsfd.model.param_category`. Projections are
    bias-free; each layer norm has a gain and a bias row.
    """
    V, c, r, N, L = cfg.vocab_size, cfg.embed_dim, cfg.ffn_dim, cfg.n_layers, cfg.n_languages
    strategy = cfg.ffn_strategy
    lms = strategy in ("lms", "lms_fd")
    on_ffn = lms and cfg.placement in ("ffn_only", "both")
    on_attn = lms and cfg.placement in ("attn_only", "both")
    attn_blocks = 3 * N  # encoder self, decoder self, decoder cross
    norms = 2 * N + 3 * N + 2
    switch_layers = N // 2 if strategy == "switch_top1" else 0
    dense_ffn_layers = 2 * (N - switch_layers)

    out = {"base": 0, "language_specific": 0, "shared_factors": 0, "experts": 0, "gate": 0}
    out["base"] = V * c + 2 * c * norms + attn_blocks * 4 * c * c + dense_ffn_layers * 2 * r * c
    if on_ffn:
        shape = ShapeParams(L=L, r=r, c=c, d=cfg.lms_rank, N=dense_ffn_layers)
        out["language_specific"] += budget_full_model(shape)
        if strategy == "lms_fd":
            out["shared_factors"] += budget_full_model(ShapeParams(L=1, r=r, c=c, d=cfg.lms_rank, N=dense_ffn_layers))
    if on_attn:
        per = budget_single_projection(ShapeParams(L=L, r=c, c=c, d=cfg.lms_rank)).methods
        out["language_specific"] += 4 * attn_blocks * per["lms"].train_extra_params
        if strategy == "lms_fd":
            out["shared_factors"] += 4 * attn_blocks * per["lms_fd"].inference_extra_params
    if strategy == "full_rank_ls":
        per = budget_single_projection(ShapeParams(L=L, r=r, c=c, d=0)).methods["ls"]
        out["language_specific"] += 2 * dense_ffn_layers * per.train_extra_params
    if switch_layers:
        per = budget_single_projection(ShapeParams(L=L, r=r, c=c, d=0, E=cfg.n_experts)).methods["moe"]
        out["experts"] = 2 * 2 * switch_layers * per.train_extra_params
        out["gate"] = 2 * switch_layers * c * cfg.n_experts
    out["total"] = sum(out[k] for k in ("base", "language_specific", "shared_factors", "experts", "gate"))
    return out
