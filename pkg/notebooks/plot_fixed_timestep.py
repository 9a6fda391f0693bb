"""
Why the timestep schedule matters
=================================

Compare optimizing at a single fixed timestep against the default schedule
that walks from T down to near zero. On the untrained toy network the runs
converge to similar ratios; point ``build_toy`` at a pretrained descriptor
via ``load_backbone`` to see the schedule pay off on real features.
"""
from attndistill import synthetic
from attndistill.backbone import build_toy
from attndistill.optimize import OptimizeConfig, content_preserving_optimize

toy = build_toy({"dtype": "float64"})
style, content = synthetic.stripes(64, 64), synthetic.scene(64, 64)

runs = {"schedule": OptimizeConfig(iterations=100)}
for t in (900, 500, 100):
    runs[f"fixed t={t}"] = OptimizeConfig(iterations=100, fixed_timestep=t, cache_reference=True)

# %%
# Each run reports its own final loss at its own last timestep, so the
# numbers are a convergence ratio rather than a ranking across runs.
for name, cfg in runs.items():
    res = content_preserving_optimize(toy, style, content, cfg)
    print(f"{name:<12} final/initial = {res.final_loss / res.losses[0]:.3f}")
