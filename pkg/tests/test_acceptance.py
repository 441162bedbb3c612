"""Acceptance suite: one test per criterion; the summary prints a PASS/FAIL line for each.

Criteria 4 and 5 train the desk-scale profile (nine 200-epoch runs in total)
and take tens of minutes on CPU.
"""

import time

import numpy as np
import pytest
import torch

import reference as ref
from memmc_mae.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from memmc_mae.config import (
    DecoderConfig,
    EncoderConfig,
    ModelConfig,
    MsSsimParams,
    SyntheticSpec,
    TrainConfig,
    tiny_model_config,
)
from memmc_mae.data import generate_synthetic
from memmc_mae.decoder import MultiLevelCrossAttentionBlock, partition_index
from memmc_mae.encoder import MemorySelfAttention
from memmc_mae.evaluation import write_scores_csv
from memmc_mae.metrics import grouped_iou, roc_auc
from memmc_mae.model import MemMCMAE, masked_mse_loss
from memmc_mae.patchgrid import from_patches, sample_mask, to_patches
from memmc_mae.scoring import ms_ssim, score_images
from memmc_mae.training import train

SEEDS = (0, 1, 2)


def _detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


# -- 1 ------------------------------------------------------------------------------


def _random_plain_config(rng):
    heads_e, heads_d = int(rng.choice([1, 2, 4])), int(rng.choice([1, 2]))
    patch = int(rng.choice([4, 8]))
    grid = int(rng.integers(2, 5))
    return ModelConfig(
        image_size=patch * grid,
        channels=int(rng.choice([1, 3])),
        patch_side=patch,
        encoder=EncoderConfig(depth=int(rng.integers(1, 6)), width=heads_e * 2 * int(rng.integers(2, 6)),
                              heads=heads_e, memory_slots=int(rng.choice([0, 7])),
                              mlp_ratio=float(rng.choice([2.0, 4.0])), long_skips=bool(rng.integers(2))),
        decoder=DecoderConfig(depth=int(rng.integers(1, 4)), width=heads_d * 2 * int(rng.integers(2, 5)),
                              heads=heads_d, long_skips=bool(rng.integers(2))),
        # slots requested but switched off, or explicitly zero
        mem_enc=False,
        mc_dec=False,
    )


@pytest.mark.criterion(1, "plain-MAE oracle equivalence on 10 random tiny configs (rel err < 1e-6)")
def test_criterion_1_oracle_equivalence(request):
    start = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(10):
        cfg = _random_plain_config(rng)
        torch.manual_seed(trial)
        model = MemMCMAE(cfg).double()
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.05 * torch.randn_like(p))  # leave the symmetric default init behind
        b = 3
        images = torch.rand(b, cfg.image_size, cfg.image_size, cfg.channels, dtype=torch.float64)
        keep = int(rng.integers(1, cfg.num_patches))  # at least one visible and one masked patch
        ratio = 1.0 - keep / cfg.num_patches
        parts = [sample_mask(cfg.num_patches, ratio, 100 * trial + i) for i in range(b)]
        vis = partition_index(parts)
        sd = {k: v.detach() for k, v in model.state_dict().items()}
        expected = ref.plain_mae_forward(sd, cfg, images, vis)
        with torch.no_grad():
            got = model(images, vis)
        rel = float((got - expected).abs().max() / expected.abs().max())
        worst = max(worst, rel)
    elapsed = time.time() - start
    _detail(request, f"worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 60


# -- 2 ------------------------------------------------------------------------------

GRAD_TARGETS = {
    "memory keys": r"encoder\.blocks\.\d+\.attn\.mem_k",
    "memory values": r"encoder\.blocks\.\d+\.attn\.mem_v",
    "fusion gates": r"decoder\.blocks\.\d+\.gates\.\d+\.weight",
    "encoder self-attention": r"encoder\.blocks\.0\.attn\.q\.weight",
    "decoder self-attention": r"decoder\.blocks\.0\.self_attn\.k\.weight",
    "cross-attention": r"decoder\.blocks\.1\.cross\.v\.weight",
}


@pytest.mark.criterion(2, "analytic vs central-difference gradients, >=200 coords (rel err < 1e-4)")
def test_criterion_2_gradients(request):
    import re

    start = time.time()
    cfg = ModelConfig(
        image_size=16, channels=1, patch_side=4,
        encoder=EncoderConfig(depth=3, width=16, heads=2, memory_slots=5),
        decoder=DecoderConfig(depth=2, width=8, heads=2),
    )
    torch.manual_seed(0)
    model = MemMCMAE(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    rng = np.random.default_rng(0)
    image = torch.rand(16, 16, 1, dtype=torch.float64)
    part = sample_mask(cfg.num_patches, 0.75, 3)
    vis = partition_index(part)

    def loss_fn():
        pred = model(image[None], vis)[0]
        recon = from_patches(pred, cfg.patch_side, cfg.grid_dims, cfg.channels)
        return masked_mse_loss(recon, image, part, cfg.patch_side)

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    worst, count, per_group = 0.0, 0, {}
    h = 1e-5  # ~cbrt(eps): balances truncation against cancellation in float64
    for group, pattern in GRAD_TARGETS.items():
        names = [n for n in params if re.fullmatch(pattern, n)]
        assert names, group
        errs = []
        for _ in range(40):
            name = names[rng.integers(len(names))]
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            with torch.no_grad():
                orig = float(p[idx])
                p[idx] = orig + h
                up = float(loss_fn())
                p[idx] = orig - h
                down = float(loss_fn())
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            errs.append(abs(analytic - numeric) / denom)
        per_group[group] = max(errs)
        worst = max(worst, max(errs))
        count += len(errs)
    elapsed = time.time() - start
    summary = ", ".join(f"{g} {e:.1e}" for g, e in per_group.items())
    _detail(request, f"{count} coords, worst {worst:.2e} ({summary}), {elapsed:.0f}s")
    assert count >= 200
    assert worst < 1e-4
    assert elapsed < 300


# -- 3 ------------------------------------------------------------------------------


@pytest.mark.criterion(3, "invariant suite")
def test_criterion_3_invariants(request):
    from scipy.stats import chisquare

    start = time.time()
    rng = np.random.default_rng(0)
    checks = {}

    # patchify round trip, exact
    for shape, p in (((32, 48, 3), 8), ((16, 16, 1), 4), ((224, 224, 3), 16)):
        x = rng.random(shape)
        assert np.array_equal(from_patches(to_patches(x, p), p, (shape[0] // p, shape[1] // p), shape[2]), x)
    checks["patchify"] = True

    # partition: disjoint cover of the index set, visible count, uniform membership
    n, hits, draws = 64, np.zeros(64), 4000
    for s in range(draws):
        part = sample_mask(n, 0.75, s)
        both = np.concatenate([part.visible_idx, part.masked_idx])
        assert len(part.visible_idx) == 16 and np.array_equal(np.sort(both), np.arange(n))
        hits[part.visible_idx] += 1
    assert np.abs(hits / draws - 0.25).max() < 0.03
    assert chisquare(hits).pvalue > 1e-3
    checks["partition"] = True

    # attention weights normalised over tokens + memory
    attn = MemorySelfAttention(16, 4, slots=6)
    _, w = attn(torch.randn(3, 9, 16), return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(3, 4, 9), atol=1e-6)
    checks["attention rows"] = True

    # gates strictly inside (0, 1)
    block = MultiLevelCrossAttentionBlock(16, 24, 4, num_levels=4).double()
    _, gates = block(torch.randn(2, 7, 16, dtype=torch.float64),
                     [torch.randn(2, 5, 24, dtype=torch.float64) for _ in range(4)], return_gates=True)
    assert all(((g > 0) & (g < 1)).all() for g in gates)
    checks["gates"] = True

    # loss ignores visible pixels
    for s in range(50):
        part = sample_mask(16, 0.75, s)
        rec, tgt = rng.random((16, 16, 1)), rng.random((16, 16, 1))
        vis_pix = np.kron(~part.masked_flags().reshape(4, 4), np.ones((4, 4), bool))[..., None]
        base = float(masked_mse_loss(rec, tgt, part, 4))
        rec2 = np.where(vis_pix, rng.random(rec.shape) * 5, rec)
        assert float(masked_mse_loss(rec2, tgt, part, 4)) == base
    checks["loss locality"] = True

    # MS-SSIM identity, symmetry, bounds
    params = MsSsimParams(scales=3, window_side=5, sigma=1.0)
    for _ in range(30):
        a, b = rng.random((24, 24, 1)), rng.random((24, 24, 1))
        assert abs(ms_ssim(a, a, params) - 1.0) < 1e-9
        ab = ms_ssim(a, b, params)
        assert ab == ms_ssim(b, a, params) and 0.0 <= ab <= 1.0
    checks["ms-ssim"] = True

    # AUC equals the all-pairs oracle, ties included
    for _ in range(300):
        k = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=k)
        labels[0], labels[-1] = 0, 1
        scores = rng.integers(0, 8, size=k) / 8.0
        pos, neg = scores[labels == 1], scores[labels == 0]
        oracle = ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (len(pos) * len(neg))
        assert roc_auc(scores, labels) == oracle
    checks["auc"] = True

    # image score is the mean of the patch scores
    torch.manual_seed(0)
    model = MemMCMAE(tiny_model_config(encoder=EncoderConfig(depth=1, width=16, heads=2, memory_slots=2),
                                       decoder=DecoderConfig(depth=1, width=8, heads=2)))
    model.epochs_trained = 1
    from memmc_mae.config import tiny_scoring_config

    for r in score_images(model, rng.random((4, 64, 64, 1)), tiny_scoring_config()):
        assert r.image_score == float(r.patch_scores.mean())
    checks["image score"] = True

    elapsed = time.time() - start
    _detail(request, f"{len(checks)} invariant groups, {elapsed:.0f}s")
    assert elapsed < 300


# -- 4 ------------------------------------------------------------------------------


def _auc_iou(trained_runs, mode, seed):
    _, test = trained_runs.data
    _, _, results = trained_runs.get(mode, seed)
    auc = roc_auc([r.image_score for r in results], test.binary_labels)
    idx = test.anomalous_with_masks()
    g = grouped_iou([results[i] for i in idx], [test.masks[i] for i in idx], group_size=25, n_groups=2, seed=0)
    return auc, g


@pytest.mark.slow
@pytest.mark.criterion(4, "desk-scale end to end: AUC >= 0.85 and grouped IoU >= 0.30")
def test_criterion_4_end_to_end(request, trained_runs):
    spec = SyntheticSpec()
    assert (spec.image_size, spec.n_train, spec.n_test_normal, spec.n_test_anomalous, spec.anomaly) == (
        64, 200, 50, 50, "blob")
    cfg = tiny_model_config()
    assert (cfg.encoder.depth, cfg.encoder.width, cfg.decoder.depth, cfg.decoder.width) == (4, 128, 2, 64)
    start = time.time()
    auc, g = _auc_iou(trained_runs, "full", 0)
    elapsed = time.time() - start
    _detail(request, f"AUC {auc:.3f}, IoU {g['mean_iou']:.3f} at t={g['threshold']:.2f}, {elapsed:.0f}s")
    assert auc >= 0.85
    assert g["mean_iou"] >= 0.30


# -- 5 ------------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(5, "ablation direction over 3 seeds: full >= mem >= plain (0.02 slack), full - plain >= 0.02")
def test_criterion_5_ablation(request, trained_runs):
    means = {}
    for mode in ("full", "mem", "plain"):
        means[mode] = float(np.mean([_auc_iou(trained_runs, mode, s)[0] for s in SEEDS]))
    _detail(request, ", ".join(f"{m} {v:.3f}" for m, v in means.items()))
    assert means["full"] >= means["mem"] - 0.02
    assert means["mem"] >= means["plain"] - 0.02
    assert means["full"] - means["plain"] >= 0.02


# -- 6 ------------------------------------------------------------------------------


@pytest.mark.criterion(6, "determinism and persistence")
def test_criterion_6_determinism(request, tmp_path):
    spec = SyntheticSpec(image_size=32, n_train=12, n_test_normal=3, n_test_anomalous=3,
                         anomaly_size=(3, 6), seed=9)
    normal, test = generate_synthetic(spec)
    cfg = ModelConfig(image_size=32, channels=1, patch_side=8,
                      encoder=EncoderConfig(depth=2, width=16, heads=2, memory_slots=4),
                      decoder=DecoderConfig(depth=2, width=8, heads=2))
    tcfg = TrainConfig(epochs=3, batch_size=4, warmup_epochs=1, seed=5)
    a = train(normal, cfg, tcfg)
    b = train(normal, cfg, tcfg)
    assert a.loss_curve == b.loss_curve

    from memmc_mae.config import ScoringConfig

    scoring = ScoringConfig(n_seeds=3, ms_ssim=MsSsimParams(scales=2, window_side=5, sigma=1.0))
    csvs = []
    for ckpt, name in ((a, "a.csv"), (b, "b.csv")):
        results = score_images(ckpt.build_model(), test.images, scoring, ids=test.ids)
        write_scores_csv(tmp_path / name, test.ids, test.labels, [r.image_score for r in results])
        csvs.append((tmp_path / name).read_bytes())
    assert csvs[0] == csvs[1]

    save_checkpoint(a, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    assert to_bytes(loaded) == (tmp_path / "a.ckpt").read_bytes()
    assert to_bytes(from_bytes(to_bytes(loaded))) == to_bytes(loaded)
    assert loaded.rng == a.rng and loaded.optimizer_steps == a.optimizer_steps
    for k in a.optimizer:
        assert np.array_equal(loaded.optimizer[k], a.optimizer[k])
    part = sample_mask(cfg.num_patches, 0.75, 1)
    x, _ = a.build_model().reconstruct(test.images[0], part)
    y, _ = loaded.build_model().reconstruct(test.images[0], part)
    assert np.array_equal(x, y)
    _detail(request, f"{len(a.loss_curve)} loss rows identical, scores.csv identical, checkpoint round trip exact")
