"""Training loops and schedules: schedule values at the published constants,
smoke/determinism/resume contracts, the frozen-tokenizer guarantee, and the
numeric-failure abort path."""

import numpy as np
import pytest

from gpm.config import GPMConfig
from gpm.data_io import Dataset, SyntheticShapeSpec, synth_dataset
from gpm.runtime import NumericFailure, cosine_schedule
from gpm.training import (
    build_dvae,
    build_gpm,
    cloud_seed,
    eval_dvae_chamfer,
    eval_gpm_loss,
    kl_weight_at,
    parameter_checksum,
    precompute_tokens,
    prepare_clouds,
    temperature_at,
    train_dvae,
    train_gpm,
    write_log,
    TrainLogRecord,
)


def tiny_cfg(**kw):
    base = dict(points_per_cloud=64, num_patches=8, patch_points=8,
                vocab_size=32, code_dim=8, embed_dim=8, model_dim=16,
                depth=2, heads=2, graph_neighbors=4, conv_depth=2,
                dvae_steps=3, dvae_batch=2, gpm_steps=3, gpm_batch=2,
                kl_flat_steps=1, kl_ramp_steps=1, tau_decay_steps=2,
                checkpoint_every=100)
    base.update(kw)
    return GPMConfig(**base)


def tiny_dataset(n_per=1, seed=3):
    specs = [SyntheticShapeSpec("sphere", point_count=96),
             SyntheticShapeSpec("cube", point_count=96)]
    return synth_dataset(specs, per_class=n_per, seed=seed)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def test_kl_schedule_published_constants():
    flat, ramp, final = 10_000, 100_000, 0.1
    assert kl_weight_at(0, flat, ramp, final) == 0.0
    assert kl_weight_at(flat - 1, flat, ramp, final) == 0.0
    np.testing.assert_allclose(kl_weight_at(flat + ramp // 2, flat, ramp, final), 0.05)
    np.testing.assert_allclose(kl_weight_at(flat + ramp, flat, ramp, final), 0.1)
    np.testing.assert_allclose(kl_weight_at(10 ** 9, flat, ramp, final), 0.1)
    # degenerate ramp jumps straight to the final weight
    assert kl_weight_at(5, 0, 0, 0.1) == 0.1


def test_temperature_schedule_published_constants():
    decay = 100_000
    assert temperature_at(0, 1.0, 0.0625, decay) == 1.0
    assert temperature_at(decay, 1.0, 0.0625, decay) == 0.0625
    assert temperature_at(decay * 3, 1.0, 0.0625, decay) == 0.0625
    np.testing.assert_allclose(temperature_at(decay // 2, 1.0, 0.0625, decay),
                               0.53125)


def test_temperature_cosine_option():
    decay = 1000
    # midpoint coincides with linear, the early curve sits above it
    np.testing.assert_allclose(
        temperature_at(500, 1.0, 0.0625, decay, "cosine"), 0.53125)
    assert temperature_at(250, 1.0, 0.0625, decay, "cosine") > \
        temperature_at(250, 1.0, 0.0625, decay, "linear")
    with pytest.raises(ValueError, match="decay shape"):
        temperature_at(0, 1.0, 0.0625, decay, "exponential")


def test_schedules_never_leave_their_ranges():
    cfg = GPMConfig()
    for step in range(0, cfg.dvae_steps + 500, 37):
        kl = kl_weight_at(step, cfg.kl_flat_steps, cfg.kl_ramp_steps, cfg.kl_final)
        tau = temperature_at(step, cfg.tau_start, cfg.tau_end, cfg.tau_decay_steps)
        lr = cosine_schedule(min(step, cfg.dvae_steps), cfg.dvae_steps,
                             cfg.dvae_lr, cfg.dvae_min_lr)
        assert 0.0 <= kl <= cfg.kl_final
        assert cfg.tau_end <= tau <= cfg.tau_start
        assert cfg.dvae_min_lr <= lr <= cfg.dvae_lr


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def test_prepare_clouds_shapes_and_union_target():
    cfg = tiny_cfg()
    data = prepare_clouds(tiny_dataset(), cfg)
    n, m, k = 2, cfg.num_patches, cfg.patch_points
    assert data.clouds.shape == (n, cfg.points_per_cloud, 3)
    assert data.patches.shape == (n, m, k, 3)
    assert data.centers.shape == (n, m, 3)
    assert data.targets.shape == (n, m * k, 3)
    rebuilt = (data.patches + data.centers[:, :, None, :]).reshape(n, m * k, 3)
    np.testing.assert_array_equal(data.targets, rebuilt)


def test_prepare_clouds_deterministic():
    cfg = tiny_cfg()
    a = prepare_clouds(tiny_dataset(), cfg)
    b = prepare_clouds(tiny_dataset(), cfg)
    np.testing.assert_array_equal(a.clouds, b.clouds)
    np.testing.assert_array_equal(a.patches, b.patches)


def test_prepare_clouds_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        prepare_clouds(Dataset([]), tiny_cfg())


def test_cloud_seed_separates_purposes():
    seeds = {cloud_seed(0, i, p) for i in range(4) for p in (1, 2)}
    assert len(seeds) == 8


# ---------------------------------------------------------------------------
# stage-1 loop
# ---------------------------------------------------------------------------

def test_train_dvae_smoke(tmp_path):
    cfg = tiny_cfg(dvae_steps=2)
    model, records = train_dvae(cfg, tiny_dataset(), out_dir=tmp_path)
    assert [r.step for r in records] == [0, 1]
    for r in records:
        assert np.isfinite([r.lr, r.temperature, r.kl_weight,
                            r.chamfer, r.kl, r.loss]).all()
    assert (tmp_path / "dvae.ckpt").exists()
    log = (tmp_path / "dvae_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == list(TrainLogRecord.FIELDS)
    assert len(log) == 3


def test_train_dvae_deterministic():
    cfg = tiny_cfg(dvae_steps=5)
    _, rec_a = train_dvae(cfg, tiny_dataset())
    _, rec_b = train_dvae(cfg, tiny_dataset())
    for a, b in zip(rec_a, rec_b):
        np.testing.assert_allclose(a.loss, b.loss, rtol=1e-5)
        np.testing.assert_allclose(a.chamfer, b.chamfer, rtol=1e-5)


def test_train_dvae_resume_matches_unbroken_run(tmp_path):
    ds = tiny_dataset()
    straight_cfg = tiny_cfg(dvae_steps=6, dvae_lr_span=6)
    data = prepare_clouds(ds, straight_cfg)
    straight, _ = train_dvae(straight_cfg, ds, prepared=data)

    first_cfg = tiny_cfg(dvae_steps=3, dvae_lr_span=6)
    train_dvae(first_cfg, ds, out_dir=tmp_path, prepared=data)
    resumed, records = train_dvae(straight_cfg, ds, prepared=data,
                                  resume_from=tmp_path / "dvae.ckpt")
    assert [r.step for r in records] == [3, 4, 5]
    np.testing.assert_allclose(eval_dvae_chamfer(resumed, data),
                               eval_dvae_chamfer(straight, data), rtol=1e-5)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_train_dvae_numeric_failure_names_the_step():
    cfg = tiny_cfg(dvae_steps=3, dvae_lr=1e30)
    with pytest.raises(NumericFailure, match="step"):
        train_dvae(cfg, tiny_dataset())


def test_eval_dvae_chamfer_deterministic():
    cfg = tiny_cfg()
    data = prepare_clouds(tiny_dataset(), cfg)
    model = build_dvae(cfg)
    assert eval_dvae_chamfer(model, data) == eval_dvae_chamfer(model, data)


# ---------------------------------------------------------------------------
# stage-2 loop
# ---------------------------------------------------------------------------

def test_train_gpm_keeps_tokenizer_frozen():
    cfg = tiny_cfg()
    ds = tiny_dataset()
    dvae = build_dvae(cfg)
    before = parameter_checksum(dvae)
    model, records = train_gpm(cfg, ds, dvae)
    assert parameter_checksum(dvae) == before
    assert len(records) == cfg.gpm_steps
    assert all(np.isfinite(r.loss) for r in records)


def test_train_gpm_ae_only_configuration():
    cfg = tiny_cfg(w_ar=0.0)
    model, records = train_gpm(cfg, tiny_dataset(), build_dvae(cfg))
    assert all(r.ar == 0.0 for r in records)
    assert all(r.ae > 0.0 for r in records)


def test_train_gpm_deterministic():
    cfg = tiny_cfg()
    ds = tiny_dataset()
    _, rec_a = train_gpm(cfg, ds, build_dvae(cfg))
    _, rec_b = train_gpm(cfg, ds, build_dvae(cfg))
    for a, b in zip(rec_a, rec_b):
        np.testing.assert_allclose(a.loss, b.loss, rtol=1e-5)


def test_train_gpm_resume_matches_unbroken_run(tmp_path):
    cfg6 = tiny_cfg(gpm_steps=6, gpm_lr_span=6)
    ds = tiny_dataset()
    dvae = build_dvae(cfg6)
    data = prepare_clouds(ds, cfg6)
    frozen = precompute_tokens(dvae, data)
    straight, _ = train_gpm(cfg6, ds, dvae, prepared=data, frozen=frozen)

    cfg3 = tiny_cfg(gpm_steps=3, gpm_lr_span=6)
    train_gpm(cfg3, ds, dvae, out_dir=tmp_path, prepared=data, frozen=frozen)
    resumed, records = train_gpm(cfg6, ds, dvae, prepared=data, frozen=frozen,
                                 resume_from=tmp_path / "gpm.ckpt")
    assert [r.step for r in records] == [3, 4, 5]
    np.testing.assert_allclose(
        eval_gpm_loss(resumed, cfg6, data, frozen),
        eval_gpm_loss(straight, cfg6, data, frozen), rtol=1e-5)


def test_eval_gpm_loss_deterministic():
    cfg = tiny_cfg()
    data = prepare_clouds(tiny_dataset(), cfg)
    dvae = build_dvae(cfg)
    frozen = precompute_tokens(dvae, data)
    model = build_gpm(cfg)
    assert eval_gpm_loss(model, cfg, data, frozen) == \
        eval_gpm_loss(model, cfg, data, frozen)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def test_write_log_parses_back(tmp_path):
    records = [TrainLogRecord(step=0, lr=5e-4, chamfer=0.5, loss=0.6, wall=0.1),
               TrainLogRecord(step=1, lr=4e-4, chamfer=0.4, loss=0.5, wall=0.2)]
    write_log(tmp_path / "log.tsv", records)
    lines = (tmp_path / "log.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header == list(TrainLogRecord.FIELDS)
    row = dict(zip(header, lines[1].split("\t")))
    assert float(row["lr"]) == 5e-4
    assert int(float(row["step"])) == 0


def test_parameter_checksum_reacts_to_any_change():
    cfg = tiny_cfg()
    dvae = build_dvae(cfg)
    base = parameter_checksum(dvae)
    dvae.codebook.data[0, 0] += 0.5
    assert parameter_checksum(dvae) != base
