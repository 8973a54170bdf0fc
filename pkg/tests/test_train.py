import json

import numpy as np
import pytest

from centermask import train as train_mod
from centermask.data import SceneConfig
from centermask.losses import LossConfig
from centermask.model import CLASS_SPECIFIC, ModelConfig
from centermask.optim import Adam, OptimConfig, learning_rate
from centermask.serialize import CheckpointVersionError
from centermask.tensor import Tensor
from centermask.train import RunConfig, load_model, train


def tiny_config(tmp_path, **kw):
    base = dict(
        model=ModelConfig(input_size=(32, 32), backbone_channels=(4, 8, 8, 8), feature_channels=8,
                          head_channels=8, shape_size=4),
        scenes=SceneConfig(canvas=(32, 32), num_objects=(1, 2), size_range=(0.3, 0.5)),
        steps=4, batch_size=2, train_seeds=(0, 3), eval_seeds=(50, 2), checkpoint_every=2, out=str(tmp_path / "run"),
    )
    base.update(kw)
    return RunConfig(**base)


def test_adam_first_step_and_schedule():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], OptimConfig(lr=0.1))
    p.grad = np.array([3.0, -0.5])
    opt.step(0.1)
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)
    cfg = OptimConfig(lr=2.5e-4)
    assert learning_rate(cfg, 0, 5000) == 2.5e-4
    assert learning_rate(cfg, 3999, 5000) == 2.5e-4
    assert learning_rate(cfg, 4000, 5000) == pytest.approx(2.5e-5)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], OptimConfig(lr=0.1))
    for _ in range(500):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step(0.1)
    assert np.abs(p.data).max() < 1e-2


def test_run_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError):
        RunConfig.from_dict({**cfg.to_dict(), "bogus": 1})


def test_run_config_checks_consistency(tmp_path):
    with pytest.raises(ValueError):
        tiny_config(tmp_path, scenes=SceneConfig(canvas=(64, 64)))


def test_training_logs_checkpoints_and_loss_finite(tmp_path):
    cfg = tiny_config(tmp_path)
    res = train(cfg)
    out = tmp_path / "run"
    assert (out / "checkpoint-000002.ckpt").exists() and (out / "checkpoint-000004.ckpt").exists()
    assert (out / "final.ckpt").exists()
    lines = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3, 4]
    for r in lines:
        assert set(r) >= {"L_p", "L_off", "L_size", "L_mask", "L_aux", "L_seg"}
        assert np.isfinite(r["L_seg"])
    assert res.step == 4


def test_resume_reproduces_next_steps(tmp_path):
    cfg = tiny_config(tmp_path)
    full = train(cfg).history
    cfg2 = tiny_config(tmp_path, out=str(tmp_path / "resumed"))
    resumed = train(cfg2, resume=str(tmp_path / "run" / "checkpoint-000002.ckpt")).history
    assert [r["step"] for r in resumed] == [3, 4]
    for a, b in zip(full[2:], resumed):
        assert abs(a["L_seg"] - b["L_seg"]) < 1e-6


def test_training_is_reproducible(tmp_path):
    a = train(tiny_config(tmp_path, out=str(tmp_path / "a"))).history
    b = train(tiny_config(tmp_path, out=str(tmp_path / "b"))).history
    assert json.dumps(a) == json.dumps(b)


def test_nan_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    cfg = tiny_config(tmp_path, steps=6)
    real = train_mod.compute_losses
    calls = {"n": 0}

    def poisoned(outputs, batch, config, stride, mode, stats=None):
        calls["n"] += 1
        if calls["n"] == 3:
            outputs.heatmap.data[...] = np.nan
        return real(outputs, batch, config, stride, mode, stats)

    monkeypatch.setattr(train_mod, "compute_losses", poisoned)
    res = train(cfg)
    assert res.aborted and res.step == 2
    out = tmp_path / "run"
    assert (out / "checkpoint-000002.ckpt").exists()
    assert not (out / "final.ckpt").exists()
    _, params, header, _ = load_model(out / "checkpoint-000002.ckpt")
    assert header["step"] == 2
    assert all(np.all(np.isfinite(v)) for v in params.arrays().values())


def test_load_model_rejects_incompatible(tmp_path):
    cfg = tiny_config(tmp_path, steps=2)
    train(cfg)
    other = ModelConfig(input_size=(32, 32), backbone_channels=(4, 8, 8, 8), feature_channels=8, head_channels=8,
                        shape_size=6)
    with pytest.raises(CheckpointVersionError):
        load_model(tmp_path / "run" / "final.ckpt", expect=other)


def test_class_specific_training_uses_aux(tmp_path):
    m = ModelConfig(input_size=(32, 32), backbone_channels=(4, 8, 8, 8), feature_channels=8, head_channels=8,
                    shape_size=4, saliency_mode=CLASS_SPECIFIC)
    res = train(tiny_config(tmp_path, model=m, steps=2, checkpoint_every=0))
    assert all(r["L_aux"] > 0 for r in res.history)
    res = train(tiny_config(tmp_path, model=m, steps=2, loss=LossConfig(aux_saliency=False), checkpoint_every=0))
    assert all(r["L_aux"] == 0 for r in res.history)


def test_shape_only_training_ignores_saliency(tmp_path):
    cfg = tiny_config(tmp_path, steps=1, checkpoint_every=0)
    cfg.loss = LossConfig(ablation="shape_only")
    cfg.decode.ablation = "shape_only"
    params = train_mod.build_model(cfg.model, rng_seed=0)
    scenes = train_mod.training_scenes(cfg)
    ex = train_mod.prepare_examples(scenes, cfg.model, False)
    parts = train_mod.loss_on_batch(params, ex[:2], cfg)
    parts.total.backward()
    assert params["saliency.out.weight"].grad is None or not params["saliency.out.weight"].grad.any()
    assert np.abs(params["shape.out.weight"].grad).sum() > 0
