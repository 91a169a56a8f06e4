import numpy as np, time
from pyradiff import TrainConfig, Trainer, generate_dataset, evaluate, copy_source_report
from pyradiff.metrics import paired_t_test

cfg = TrainConfig(image_size=64, num_levels=3, patch_size=8, timesteps=250,
                  batch_size=8, epochs=10**6, seed=0, embed_dim=96, num_heads=4,
                  num_encoder_blocks=1, num_decoder_blocks=2, time_embed_dim=64,
                  learning_rate=1e-3, cgr_weight=0.1)
train, test = generate_dataset(64, 32, 8, seed=0, difficulty=1.0)
cs = copy_source_report(test)
print(f"copy-source PSNR {cs.psnr_mean:.2f} +- {cs.psnr_std:.2f}  SSIM {cs.ssim_mean:.3f}", flush=True)
tr = Trainer(cfg, train)
t0 = time.time()
budget_s = 30 * 60
while time.time() - t0 < budget_s:
    for _ in range(100):  # 400 steps
        tr.train_epoch()
        if time.time() - t0 > budget_s:
            break
    steps = len(tr.history)
    np.savez("/root/ckpt_calib8.npz", **{k: v.data for k, v in tr.params.items()})
    tail = np.mean([r[2] for r in tr.history[-25:]])
    te = time.time()
    ev = evaluate(test, tr.params, cfg, seed=7, num_timesteps=250)
    mono = sum(all(r[k+1] >= r[k] - 1e-9 for k in range(len(r)-1)) for r in ev.per_level_psnr)
    wins = sum(ev.report.psnr_values[i] > cs.psnr_values[i] for i in range(len(test)))
    try:
        tstat, p = paired_t_test(ev.report.psnr_values, cs.psnr_values)
    except Exception:
        tstat, p = float("nan"), float("nan")
    lv = np.mean(ev.per_level_psnr, axis=0)
    print(f"steps {steps:5d} ({(time.time()-t0)/60:4.1f} min, eval {time.time()-te:.0f} s) "
          f"loss {tail:.3f}  PSNR {ev.report.psnr_mean:5.2f}  SSIM {ev.report.ssim_mean:+.3f}  "
          f"beats-copy {wins}/8 t={tstat:+.2f} p={p:.3f}  lvl {lv[0]:.1f}/{lv[1]:.1f}/{lv[2]:.1f}  mono {mono}/8",
          flush=True)
print("done", flush=True)
