"""The lead-time curriculum and the stage structure of training.

The admissible forecast horizons grow with the training step; every sampled
batch of lead times includes the current maximum. Later stages train the
one-hour processor and extra-source encoders with everything else frozen.
"""

import numpy as np

from gridcast.model import init_model_params, tiny_config
from gridcast.synthdata import generate_dataset
from gridcast.training import (add_source_encoders, admissible_dts, cosine_lr,
                               sample_dts, train, trainable_names)

print("admissible lead times by step:")
for step in (0, 999, 1000, 15000, 21000, 26000, 30000):
    dts = admissible_dts(step)
    print(f"  step {step:>6}: 0..{max(dts)} h in sixes")

rng = np.random.default_rng(0)
print("\nsampled lead-time batches at step 30000 (max always present):")
for _ in range(4):
    print(f"  {sample_dts(rng, admissible_dts(30000))}")

steps = [round(cosine_lr(i, 10, lr_max=1.0), 3) for i in range(10)]
print(f"\ncosine schedule over 10 steps: {steps}")

cfg = tiny_config()
params = init_model_params(cfg, seed=0, zero_residual=False)
for stage in ("pretrain", "1h", "operational"):
    if stage == "operational":
        add_source_encoders(params, cfg, ["op1"], seed=5)
    names = trainable_names(params, stage)
    heads = sorted({n.split(".")[0] for n in names})
    print(f"\nstage {stage!r}: {len(names)} trainable arrays in {heads}")

ds = generate_dataset(cfg.grid, cfg.surface_in, cfg.surface_out,
                      cfg.atmos_vars, cfg.levels, hours=30, seed=4,
                      n_sources=2)
hist = train(params, cfg, ds, "pretrain", steps=30, seed=2, lr_max=3e-3)
losses = [h["loss"] for h in hist]
print(f"\n30 pretrain steps: loss {losses[0]:.3f} -> {losses[-1]:.3f}")
print(f"lead times seen: {sorted(set(d for h in hist for d in h['dts']))}")
