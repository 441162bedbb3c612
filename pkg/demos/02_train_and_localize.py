"""Train the tiny profile on normal textures, then detect and localise anomalies.

The default 200 epochs take a few minutes on one CPU core. Pass --epochs 20 for
a quick look (the model is still near the predict-the-mean stage then, so the
numbers will be poor).

    python demos/02_train_and_localize.py --out-dir runs/demo02
"""

import argparse
import time
from pathlib import Path

import numpy as np

from memmc_mae.config import EvalConfig, SyntheticSpec, tiny_model_config, tiny_scoring_config, tiny_train_config
from memmc_mae.data import generate_synthetic
from memmc_mae.evaluation import evaluate
from memmc_mae.patchgrid import sample_mask
from memmc_mae.scoring import score_images
from memmc_mae.training import train
from memmc_mae.viz import plot_loss_curve, save_heatmap, save_triptych


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/demo02")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mode", choices=["full", "mem", "plain"], default="full")
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    normal, test = generate_synthetic(SyntheticSpec())
    model_cfg = tiny_model_config(mem_enc=args.mode != "plain", mc_dec=args.mode == "full")
    t0 = time.time()
    train_cfg = tiny_train_config(epochs=args.epochs, warmup_epochs=min(5, args.epochs - 1), seed=args.seed)
    ckpt = train(normal, model_cfg, train_cfg, out_dir=out, progress=True)
    plot_loss_curve(out / "loss.png", ckpt.loss_curve)
    print(f"trained {ckpt.epoch} epochs in {time.time() - t0:.0f}s, last loss {ckpt.loss_curve[-1][2]:.5f}")

    # ten random 75% masks per image; each patch is scored only where it was hidden
    model = ckpt.build_model()
    results = score_images(model, test.images, tiny_scoring_config(), ids=test.ids)
    report = evaluate(test, results, EvalConfig(group_size=25, n_groups=2))
    print(report.summary())
    (out / "report.json").write_text(report.to_json())

    scores = np.array([r.image_score for r in results])
    worst = np.argsort(scores)[::-1][:3]
    part = sample_mask(model_cfg.num_patches, model_cfg.mask_ratio, seed=0)
    for i in worst:
        stem = test.ids[i]
        print(f"  {stem} ({test.labels[i]}): score {scores[i]:.4f}")
        save_heatmap(out / f"{stem}_heat.png", results[i].pixel_map)
        recon, _ = model.reconstruct(test.images[i], part)
        save_triptych(out / f"{stem}_triptych.png", test.images[i], recon, part, model_cfg.patch_side)
    print(f"heatmaps and triptychs for the three highest scores in {out}")


if __name__ == "__main__":
    main()
