import csv
import importlib

import numpy as np
import pytest

from pyramidreg import autodiff as ad
from pyramidreg.grid import Grid3D
from pyramidreg.harness import io
from pyramidreg.harness.synth import synth_pair
from pyramidreg.harness.train import TrainConfig, deterministic, evaluate, register, resume_state, train
from pyramidreg.loss import LossConfig, total_loss
from pyramidreg.metrics import CSV_COLUMNS
from pyramidreg.net import forward, init_params
from pyramidreg.warp import warp_by_field

train_mod = importlib.import_module("pyramidreg.harness.train")

SMALL = dict(dims=(16, 16, 16), epochs=4, decay_start_epoch=2, lr0=1e-3, lr_final=1e-4, window=5,
             checkpoint_every=2)


@pytest.fixture(scope="module")
def small_pair():
    return synth_pair(seed=1, dims=(16, 16, 16), deform_max=3.0, deform_sigma=4.0, dice_range=None)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=1e-6, lr_final=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(decay_start_epoch=300)
    with pytest.raises(ValueError):
        TrainConfig(batch=2)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig.from_dict({"betas": [0.9, 0.999], "dims": [16, 16, 16]})
    assert cfg.betas == (0.9, 0.999) and TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_defaults_follow_published_settings():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.lr_final, cfg.decay_start_epoch, cfg.epochs) == (1e-4, 1e-6, 200, 300)
    assert cfg.betas == (0.99, 0.999) and cfg.window == 9 and cfg.lam == 1.0 and cfg.steps == 7


def test_self_pair_starts_at_exact_zero():
    p = synth_pair(seed=2, dims=(16, 16, 16), deform_max=0.0)
    params = init_params(seed=0)
    fw = forward(params, p.fixed, p.fixed)
    terms = total_loss(p.fixed, p.fixed, fw.phi, LossConfig(window=5))
    ad.backward(terms.total)
    assert float(terms.total.value) == 0.0
    assert max(float(np.abs(n.grad).max()) for _, n in params.items()) < 1e-12


def test_self_pair_stays_at_zero_under_gradient_descent():
    p = synth_pair(seed=2, dims=(16, 16, 16), deform_max=0.0)
    params = init_params(seed=0)
    for _ in range(6):
        params.zero_grad()
        fw = forward(params, p.fixed, p.fixed)
        terms = total_loss(p.fixed, p.fixed, fw.phi, LossConfig(window=5))
        assert abs(float(terms.total.value)) < 1e-12
        ad.backward(terms.total)
        for _, n in params.items():
            n.value -= np.float32(1e-3) * n.grad.astype(np.float32)


def test_self_pair_first_adam_steps_stay_at_zero():
    # Adam rescales even a vanishing gradient to an lr-sized step, so over
    # long runs a self-pair wanders; the opening steps must still be flat.
    p = synth_pair(seed=2, dims=(16, 16, 16), deform_max=0.0)
    cfg = TrainConfig(dims=(16, 16, 16), epochs=3, decay_start_epoch=1, window=5)
    res = train([(p.fixed, p.fixed)], cfg)
    assert max(abs(r["loss"]) for r in res.trace) < 1e-6


def test_loss_csv_and_checkpoints(tmp_path, small_pair):
    res = train([(small_pair.fixed, small_pair.moving)], TrainConfig(**SMALL), tmp_path)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "pair", "loss", "sim", "reg"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert [c.name for c in res.checkpoints] == ["ckpt_0001.json", "ckpt_0003.json"]
    _, state, epoch, meta = resume_state(res.checkpoints[-1])
    assert epoch == 3 and state.step == 4 and meta["train_config"]["epochs"] == 4


def test_resume_matches_uninterrupted_run(tmp_path, small_pair):
    pairs = [(small_pair.fixed, small_pair.moving)]
    cfg = TrainConfig(**SMALL)
    with deterministic():
        full = train(pairs, cfg, tmp_path / "full")
        train(pairs, cfg, tmp_path / "part", stop_after=1)
        resumed = train(pairs, cfg, tmp_path / "part", resume=tmp_path / "part" / "ckpt_0001.json")
    a = (tmp_path / "full" / "ckpt_0003.bin").read_bytes()
    b = (tmp_path / "part" / "ckpt_0003.bin").read_bytes()
    assert a == b
    assert (tmp_path / "full" / "loss.csv").read_text() == (tmp_path / "part" / "loss.csv").read_text()
    assert resumed.state.step == full.state.step


def test_nan_loss_aborts(monkeypatch, small_pair):
    real = train_mod.total_loss

    def poisoned(*args, **kw):
        terms = real(*args, **kw)
        terms.total.value = np.asarray(np.nan, dtype=terms.total.dtype)
        return terms

    monkeypatch.setattr(train_mod, "total_loss", poisoned)
    with pytest.raises(FloatingPointError, match="epoch 0"):
        train([(small_pair.fixed, small_pair.moving)], TrainConfig(**SMALL))


def test_train_rejects_mixed_dims(small_pair):
    other = Grid3D(np.zeros((1, 32, 32, 32), np.float32))
    with pytest.raises(ValueError):
        train([(small_pair.fixed, small_pair.moving), (other, other)], TrainConfig(**SMALL))
    with pytest.raises(ValueError):
        train([], TrainConfig(**SMALL))


def test_register_zero_init_and_reload(tmp_path, small_pair):
    reg = register(init_params(seed=0), small_pair.fixed, small_pair.moving, out_dir=tmp_path)
    assert not reg.phi.data.any()
    assert (tmp_path / "warped.raw").read_bytes() == io.save_bundle(tmp_path / "m", small_pair.moving).with_suffix(
        ".raw").read_bytes()
    assert [g.dims for g in reg.levels] == [(1, 1, 1), (2, 2, 2), (4, 4, 4), (8, 8, 8)]
    assert (tmp_path / "phi_level4.json").exists() and (tmp_path / "phi_level1.json").exists()


def test_register_outputs_rewarp_bitwise(tmp_path, small_pair):
    params = init_params(seed=0)
    rng = np.random.default_rng(0)
    for path in ("lgam.flow.weight", "fifm.L1.cwam.flow.weight"):
        params[path].value = (rng.standard_normal(params[path].shape) * 0.05).astype(np.float32)
    reg = register(params, small_pair.fixed, small_pair.moving, out_dir=tmp_path)
    phi = io.load_bundle(tmp_path / "phi.json").grid()
    warped = io.load_bundle(tmp_path / "warped.json").grid()
    moving = io.load_bundle(io.save_bundle(tmp_path / "moving", small_pair.moving)).grid()
    assert reg.phi.data.any()
    assert np.array_equal(warp_by_field(moving, phi).data, warped.data)


def test_evaluate_identity_and_ground_truth(tmp_path, small_pair):
    zero = Grid3D(np.zeros((3, 16, 16, 16), np.float32))
    rep = evaluate(zero, small_pair.labels_fixed, small_pair.labels_fixed)
    assert rep.mean_dsc == 1.0 and rep.mean("hd95_mm") == 0.0 and rep.njd == 0.0
    rep = evaluate(small_pair.phi_true, small_pair.labels_fixed, small_pair.labels_moving,
                   small_pair.landmarks_fixed, small_pair.landmarks_moving, out_dir=tmp_path)
    assert rep.tre_mm < 0.1
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header.split(",") == list(CSV_COLUMNS)
    assert (tmp_path / "report.json").exists()


def test_evaluate_dim_mismatch(small_pair):
    with pytest.raises(ValueError):
        evaluate(Grid3D(np.zeros((3, 8, 8, 8))), small_pair.labels_fixed, small_pair.labels_moving)
