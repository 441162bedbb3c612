"""Look at the synthetic data and at what the encoder actually gets to see.

Writes a contact sheet: four normal textures, four anomalous ones with their
ground-truth outline, and one image under a 75% random patch mask.

    python demos/01_textures_and_masks.py --out-dir runs/demo01
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from memmc_mae.config import SyntheticSpec, tiny_model_config
from memmc_mae.data import generate_synthetic
from memmc_mae.patchgrid import sample_mask
from memmc_mae.viz import masked_view


def outline(mask):
    inner = mask.copy()
    inner[1:-1, 1:-1] &= mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
    return mask.astype(bool) & ~inner.astype(bool)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out-dir", default="runs/demo01")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    spec = SyntheticSpec(seed=args.seed)
    normal, test = generate_synthetic(spec)
    print(f"{len(normal)} normal training images, {len(test)} test images "
          f"({test.labels.count('anomalous')} anomalous), {spec.image_size}px")

    # every image shares the grating family; only phase, jitter and noise vary
    row_normal = [normal.images[i, ..., 0] for i in range(4)]
    anomalous = test.anomalous_with_masks()[:4]
    row_anom = []
    for i in anomalous:
        img = test.images[i, ..., 0].copy()
        img[outline(test.masks[i])] = 1.0
        row_anom.append(img)
        print(f"  {test.ids[i]}: anomaly covers {int(test.masks[i].sum())} px")

    cfg = tiny_model_config()
    part = sample_mask(cfg.num_patches, cfg.mask_ratio, seed=0)
    seen = masked_view(normal.images[0], part, cfg.patch_side, fill=0.0)[..., 0]
    print(f"mask ratio {cfg.mask_ratio}: {len(part.visible_idx)} of {cfg.num_patches} patches visible")

    gap = np.ones((spec.image_size, 2))
    rows = [np.hstack(sum([[im, gap] for im in r], [])[:-1]) for r in (row_normal, row_anom)]
    pad = np.ones((spec.image_size, rows[0].shape[1] - spec.image_size))
    sheet = np.vstack([rows[0], np.ones((2, rows[0].shape[1])), rows[1],
                       np.ones((2, rows[0].shape[1])), np.hstack([seen, pad])])
    path = out / "textures.png"
    Image.fromarray(np.round(np.clip(sheet, 0, 1) * 255).astype(np.uint8)).resize(
        (sheet.shape[1] * 3, sheet.shape[0] * 3), Image.NEAREST).save(path)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
