import numpy as np
import pytest

import plenoxel as px
from plenoxel.optim import LrSchedule
from plenoxel.sh import SH_C0
from plenoxel.trainer import (EpochBatcher, LadderRung, ResourceError,
                              TrainConfig, TrainingDiverged, apply_override,
                              config_from_dict, config_to_dict, default_config,
                              load_config, save_config)


# -- per-scene-type defaults -------------------------------------------------


def test_bounded_defaults():
    cfg = default_config("bounded")
    assert [(r.step, r.dims) for r in cfg.ladder] == [
        (0, (256, 256, 256)), (38400, (512, 512, 512))]
    assert cfg.total_steps == 128000
    assert cfg.batch_size == 5000
    assert cfg.prune_criterion == "weight"
    assert cfg.prune_threshold == 0.256
    assert cfg.lambda_tv_sigma == 1e-5
    assert cfg.lambda_tv_sh == 1e-3
    assert cfg.tv_until_step == 38400         # regularization off after rung 1
    assert cfg.tv_until_step == cfg.ladder[1].step
    assert cfg.lambda_sparsity == 0.0
    assert cfg.lambda_beta == 0.0
    assert cfg.background == (1.0, 1.0, 1.0)
    assert cfg.lr_sigma.kind == "delayed_exponential"
    assert (cfg.lr_sigma.lr_init, cfg.lr_sigma.lr_final) == (30.0, 0.05)
    assert (cfg.lr_sigma.total_steps, cfg.lr_sigma.delay_steps) == (250000, 15000)
    assert cfg.lr_sh.kind == "exponential"
    assert (cfg.lr_sh.lr_init, cfg.lr_sh.lr_final) == (0.01, 5e-6)
    assert cfg.optimizer == "rmsprop"


def test_forward_facing_defaults():
    cfg = default_config("forward_facing_ndc")
    assert [(r.step, r.dims) for r in cfg.ladder] == [
        (0, (256, 256, 128)), (38400, (512, 512, 128)),
        (76800, (1408, 1156, 128))]
    assert cfg.prune_criterion == "density"
    assert cfg.prune_threshold == 5.0
    assert cfg.lambda_tv_sigma == 5e-4
    assert cfg.lambda_tv_sh == 5e-3
    assert cfg.lambda_sparsity == 1e-12
    assert cfg.tv_until_step == -1            # TV stays on throughout
    assert cfg.ndc_z_pad == 0.0


def test_unbounded_360_defaults():
    cfg = default_config("unbounded_360")
    assert [(r.step, r.dims) for r in cfg.ladder] == [
        (0, (128,) * 3), (25600, (256,) * 3), (51200, (512,) * 3),
        (76800, (640,) * 3)]
    assert cfg.total_steps == 102400
    assert cfg.prune_threshold == 1.28
    assert cfg.lambda_sparsity == 1e-11
    assert cfg.lambda_beta == 1e-5
    assert (cfg.bg_layers, cfg.bg_width, cfg.bg_height) == (64, 2048, 1024)
    assert cfg.bg_lr_sigma.kind == "exponential"   # no delay for background


def test_config_yaml_round_trip(tmp_path):
    cfg = default_config("unbounded_360")
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert config_to_dict(back) == config_to_dict(cfg)


def test_unknown_config_keys_rejected():
    d = config_to_dict(default_config("bounded"))
    d["not_a_key"] = 1
    with pytest.raises(ValueError, match="not_a_key"):
        config_from_dict(d)
    d2 = config_to_dict(default_config("bounded"))
    d2["lr_sigma"]["warmup"] = 5
    with pytest.raises(ValueError, match="warmup"):
        config_from_dict(d2)


def test_override_rejects_unknown_dotted_keys():
    d = config_to_dict(default_config("bounded"))
    apply_override(d, "optimizer", "sgd")
    assert d["optimizer"] == "sgd"
    apply_override(d, "lr_sh.lr_init", 0.5)
    assert d["lr_sh"]["lr_init"] == 0.5
    with pytest.raises(KeyError):
        apply_override(d, "nope.nope", 1)


def test_invalid_ladder_rejected():
    with pytest.raises(ValueError):
        TrainConfig(ladder=[LadderRung(10, (4, 4, 4))], total_steps=100)
    with pytest.raises(ValueError):
        TrainConfig(ladder=[LadderRung(0, (4, 4, 4)), LadderRung(200, (8, 8, 8))],
                    total_steps=100)


# -- batch sampler -----------------------------------------------------------


def test_epoch_batcher_covers_every_ray_exactly_once_per_epoch():
    rng = np.random.default_rng(0)
    b = EpochBatcher(103, 10, rng)
    seen = []
    for _ in range(103):  # 10 epochs + 30 rays
        seen.append(b.next())
    flat = np.concatenate(seen)
    for e in range(10):
        epoch = flat[e * 103:(e + 1) * 103]
        assert len(np.unique(epoch)) == 103


def test_epoch_batcher_handles_batch_larger_than_pool():
    rng = np.random.default_rng(1)
    b = EpochBatcher(7, 20, rng)
    idx = b.next()
    assert len(idx) == 20
    counts = np.bincount(idx, minlength=7)
    assert counts.min() >= 2 and counts.max() <= 3


# -- training behavior --------------------------------------------------------


def _tiny_dataset(toy_tiny_dir):
    train = px.load_nerf_dataset(toy_tiny_dir, "bounded", "train")
    test = px.load_nerf_dataset(toy_tiny_dir, "bounded", "test")
    return train, test


def test_zero_total_steps_returns_initialized_grid(toy_tiny_dir):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=0, batch_size=16)
    res = px.train(train, cfg)
    g = res.grid
    assert g.dims == (8, 8, 8)
    np.testing.assert_allclose(g.table[:, 0], cfg.init_sigma, atol=1e-12)
    np.testing.assert_allclose(g.table[:, 1::9], cfg.init_rgb / SH_C0, atol=1e-12)
    assert np.all(g.table[:, 2:9] == 0)


def test_training_is_deterministic_for_fixed_seed(toy_tiny_dir):
    train, test = _tiny_dataset(toy_tiny_dir)

    def run():
        cfg = px.toy_config(grid_dim=8, total_steps=30, batch_size=64)
        cfg.eval_every = 0
        cfg.log_every = 1
        cfg.seed = 11
        return px.train(train, cfg, test_ds=test)

    a = run()
    b = run()
    la = [m["loss"] for m in a.metrics if "loss" in m]
    lb = [m["loss"] for m in b.metrics if "loss" in m]
    assert la == lb
    np.testing.assert_array_equal(a.grid.table, b.grid.table)


def test_training_loss_decreases(toy_tiny_dir):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=16, total_steps=120, batch_size=256)
    cfg.log_every = 10
    res = px.train(train, cfg)
    losses = [m["loss"] for m in res.metrics if "loss" in m]
    assert losses[-1] < 0.5 * losses[0]


def test_gradient_sparsity_shrinks_during_training(toy_tiny_dir):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=16, total_steps=300, batch_size=256)
    cfg.log_every = 10
    res = px.train(train, cfg)
    fracs = [m["nnz_fraction"] for m in res.metrics if "nnz_fraction" in m]
    assert fracs[-1] < fracs[0]


def test_ladder_event_prunes_and_upsamples(toy_tiny_dir):
    train, test = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=40, batch_size=128)
    cfg.ladder = [LadderRung(0, (8, 8, 8)), LadderRung(20, (12, 12, 12))]
    cfg.prune_criterion = "weight"
    cfg.prune_threshold = 1e-5
    res = px.train(train, cfg, test_ds=test)
    assert res.grid.dims == (12, 12, 12)
    res.grid.validate()
    # pruning must have dropped some of the 8^3 cells before upsampling
    assert res.grid.n_rows < 12 ** 3


def test_upsample_resource_guard_names_dims(toy_tiny_dir):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=40, batch_size=64)
    cfg.ladder = [LadderRung(0, (8, 8, 8)), LadderRung(5, (4096, 4096, 4096))]
    with pytest.raises(ResourceError, match="4096"):
        px.train(train, cfg)


def test_nan_loss_aborts_with_diagnostic(toy_tiny_dir, tmp_path):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=200, batch_size=64)
    cfg.optimizer = "sgd"   # unnormalized updates compound to overflow
    cfg.lr_sigma = LrSchedule(kind="constant", lr_init=1e30, lr_final=1e30,
                              total_steps=100)
    cfg.lr_sh = LrSchedule(kind="constant", lr_init=1e30, lr_final=1e30,
                           total_steps=100)
    out = tmp_path / "diverge"
    with pytest.raises(TrainingDiverged, match="step"):
        px.train(train, cfg, out_dir=out)
    assert (out / "diverged.plnx").exists()


def test_metrics_contain_eval_records_with_wall_time(toy_tiny_dir):
    train, test = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=20, batch_size=64)
    cfg.eval_every = 10
    res = px.train(train, cfg, test_ds=test)
    evals = [m for m in res.metrics if "psnr" in m]
    assert [m["step"] for m in evals] == [10, 20]
    for m in evals:
        assert set(m) == {"step", "psnr", "ssim", "wall_time_s"}
        assert m["wall_time_s"] > 0


def test_checkpoints_written_at_rungs_and_end(toy_tiny_dir, tmp_path):
    train, _ = _tiny_dataset(toy_tiny_dir)
    cfg = px.toy_config(grid_dim=8, total_steps=20, batch_size=64)
    cfg.ladder = [LadderRung(0, (8, 8, 8)), LadderRung(10, (10, 10, 10))]
    cfg.prune_threshold = 1e-6
    out = tmp_path / "run"
    px.train(train, cfg, out_dir=out)
    assert (out / "checkpoint_0000010.plnx").exists()
    assert (out / "final.plnx").exists()
    grid, bg, state, bg_state, step = px.load_checkpoint(out / "final.plnx")
    assert step == 20
    assert state.v.shape[0] == grid.n_rows


def test_train_split_scene_scale_matches_loader(toy_tiny_dir):
    from plenoxel.trainer import _scale_from_positions, train_split_scene_scale

    s = train_split_scene_scale(toy_tiny_dir)
    ds = px.load_nerf_dataset(toy_tiny_dir, "bounded", "train")
    pos = np.stack([c.position for c in ds.cameras])
    assert s == pytest.approx(_scale_from_positions(pos, 1.1), rel=1e-12)


# -- 360 pipeline (reduced scale) ---------------------------------------------


def test_360_training_smoke_runs_and_improves():
    rng = np.random.default_rng(5)
    # build a small 360-style dataset: cameras inside, looking outward at a
    # colored background sphere plus one foreground blob
    from plenoxel.camera import Camera, Dataset
    from plenoxel.msi import MsiBackground, render_rays_with_background
    from plenoxel.camera import generate_rays

    gt_grid = px.SparseGrid.dense((12, 12, 12), (-1, -1, -1), (1, 1, 1),
                                  sigma=0.0)
    axis = np.linspace(-1, 1, 12)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    blob = np.exp(-((gx - 0.2) ** 2 + gy ** 2 + gz ** 2) / 0.05)
    gt_grid.table[:, 0] = 25.0 * blob.ravel()
    gt_grid.table[:, 1] = 0.8 / SH_C0
    gt_grid.table[:, 10] = 0.3 / SH_C0
    gt_grid.table[:, 19] = 0.2 / SH_C0
    gt_bg = MsiBackground.create(6, 12, 24)
    gt_bg.data[..., 0] = 3.0
    theta = (np.arange(12) + 0.5) / 12
    gt_bg.data[..., 1] = 0.2 + 0.6 * theta[None, :, None]
    gt_bg.data[..., 2] = 0.5
    gt_bg.data[..., 3] = 0.8 - 0.5 * theta[None, :, None]

    cams = []
    images = []
    res = 24
    for i in range(6):
        ang = i * np.pi / 3
        pos = 0.55 * np.array([np.cos(ang), np.sin(ang), 0.1])
        zc = -np.array([np.cos(ang + np.pi / 2.5), np.sin(ang + np.pi / 2.5), 0.0])
        up = np.array([0.0, 0.0, 1.0])
        xc = np.cross(up, zc)
        xc /= np.linalg.norm(xc)
        yc = np.cross(zc, xc)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = xc, yc, zc, pos
        cam = Camera(c2w=c2w, focal=res * 0.8, width=res, height=res)
        o, d = generate_rays(cam)
        rgb = render_rays_with_background(gt_grid, gt_bg, o, d)[0]
        cams.append(cam)
        images.append(rgb.reshape(res, res, 3).astype(np.float32))
    ds = Dataset(images=np.stack(images), cameras=cams,
                 scene_type="unbounded_360",
                 background=np.zeros(3),
                 paths=[f"mem://{i}" for i in range(6)])

    cfg = px.default_config("unbounded_360")
    # choose the margin so the camera prescale is exactly 1: the ground truth
    # above was rendered in unscaled coordinates
    pos = np.stack([c.position for c in cams])
    maxdist = float(np.max(np.linalg.norm(pos - pos.mean(axis=0), axis=1)))
    cfg.scene_margin = 1.0 / maxdist
    cfg.ladder = [LadderRung(0, (12, 12, 12))]
    cfg.total_steps = 150
    cfg.batch_size = 512
    cfg.bg_layers, cfg.bg_height, cfg.bg_width = 6, 12, 24
    cfg.eval_every = 0
    cfg.log_every = 10
    cfg.lr_sigma = LrSchedule(kind="delayed_exponential", lr_init=2.0,
                              lr_final=0.1, total_steps=300, delay_steps=20)
    cfg.lr_sh = LrSchedule(kind="exponential", lr_init=0.01, lr_final=1e-3,
                           total_steps=300)
    cfg.bg_lr_sigma = LrSchedule(kind="exponential", lr_init=2.0, lr_final=0.1,
                                 total_steps=300)
    cfg.bg_lr_rgb = LrSchedule(kind="exponential", lr_init=0.01, lr_final=1e-3,
                               total_steps=300)
    result = px.train(ds, cfg)
    losses = [m["loss"] for m in result.metrics if "loss" in m]
    assert losses[-1] < 0.5 * losses[0]
    assert result.background is not None
    assert result.scene_scale == pytest.approx(1.0, rel=1e-9)
