import dataclasses
import time

import numpy as np

from pyradiff import TrainConfig, Trainer, evaluate, generate_dataset, copy_source_report
from pyradiff.metrics import paired_t_test

cfg = TrainConfig(image_size=64, num_levels=3, patch_size=8, timesteps=250,
                  batch_size=8, epochs=10**6, seed=0, embed_dim=96, num_heads=4,
                  num_encoder_blocks=1, num_decoder_blocks=2, time_embed_dim=64,
                  learning_rate=1e-3, cgr_weight=0.1)
train, test = generate_dataset(64, 32, 8, seed=0, difficulty=1.0)
test50 = generate_dataset(64, 0, 50, seed=123, difficulty=1.0)[1]
cs = copy_source_report(test)

tr = Trainer(cfg, train)
t0 = time.time()
for target, name in [(1000, "/root/ckpt_4000.phmd"), (1100, "/root/ckpt_4400.phmd")]:
    while tr.epoch < target:
        tr.train_epoch()
    tr.save(name)
    print(f"saved {name} at step {tr.global_step} ({(time.time()-t0)/60:.1f} min), "
          f"tail loss {np.mean([r[2] for r in tr.history[-25:]]):.3f}", flush=True)

for name in ("/root/ckpt_4000.phmd", "/root/ckpt_4400.phmd"):
    res = Trainer.resume(name, train)
    params = res.params
    print(f"== {name} ==", flush=True)
    for rf in (0.06, 0.1, 0.15, 0.25, 0.35):
        c = dataclasses.replace(cfg, refine_fraction=rf)
        t1 = time.time()
        ev8 = evaluate(test, params, c, seed=7, num_timesteps=250)
        wins = sum(ev8.report.psnr_values[i] > cs.psnr_values[i] for i in range(len(test)))
        tstat, p = paired_t_test(ev8.report.psnr_values, cs.psnr_values)
        ev50 = evaluate(test50, params, c, seed=11, num_timesteps=250)
        mono = sum(all(r[k+1] >= r[k] - 1e-9 for k in range(len(r)-1))
                   for r in ev50.per_level_psnr)
        lv = np.mean(ev50.per_level_psnr, axis=0)
        print(f"rf {rf:.2f}: 8-test PSNR {ev8.report.psnr_mean:5.2f} beats {wins}/8 "
              f"t={tstat:+.2f} p={p:.4f} | 50-test mono {mono}/50 "
              f"lvl {lv[0]:.2f}/{lv[1]:.2f}/{lv[2]:.2f} ({time.time()-t1:.0f} s)",
              flush=True)
print("done", flush=True)
