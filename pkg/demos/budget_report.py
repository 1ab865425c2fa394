"""How many extra parameters does each way of adding language-specific capacity cost?

Start from one r x c projection and 15 languages. Full-rank language-specific
copies grow with L*r*c, a mixture of experts with E*r*c, and low-rank
synthesis with L*d*(r+c). Fuse distillation keeps only the shared factors at
inference time.
"""

from lmsfd.budget import ShapeParams, budget_full_model, budget_single_projection, flops_ratio, render_ratio

shape = ShapeParams(L=15, r=4096, c=1024, E=8, d=32)
report = budget_single_projection(shape)
print(report.format_table())

# the low-rank path costs d(r+c) multiply-adds per token on top of rc
print("\nextra FLOPs are small next to the base projection:")
for r, c, d in [(2048, 512, 20), (4096, 1024, 32), (1024, 512, 64)]:
    print(f"  r={r:<5} c={c:<5} d={d:<3} base/extra = {render_ratio(flops_ratio(r, c, d))}")

# where does low rank stop paying off? d < rc/(r+c)
r, c = 1024, 512
print(f"\nbreak-even rank for {r}x{c}: {r * c / (r + c):.1f}")
for d in (16, 64, 256, 341, 342, 512):
    eff = budget_single_projection(ShapeParams(L=8, r=r, c=c, d=d)).lms_is_parameter_efficient
    print(f"  d={d:<4} LMS cheaper than full-rank LS: {eff}")

# whole model: two projections per FFN, N layers per side
full = ShapeParams(L=8, r=1024, c=512, d=32, N=2)
print(f"\n2 L N d (c+r) for L=8, N=2, d=32, c=512, r=1024: {budget_full_model(full):,}")
