import json
import math
import struct

import numpy as np
import pytest

from milscene import gradcore as gc
from milscene import trainer as tr
from milscene.fusenet import init_params
from milscene.gradcore import Tensor
from milscene.milhead import LossConfig, assign_instance_labels, forward, loss_from_logits, wbce_mean
from milscene.trainer import Example, TrainConfig

TINY_MODEL = {"n_mels": 16, "channels": [2, 2, 3, 3], "n_blocks": 2}
SCENES = ["airport", "park", "tram"]


def tiny_cfg(**kw):
    base = dict(epochs=6, warmup_epochs=2, batch_size=2, initial_lr=0.02, scenes=SCENES, model=TINY_MODEL)
    base.update(kw)
    return TrainConfig(**base)


def toy_examples(n_per_class=2, frames=16, seed=0):
    """Class-dependent band energy on top of noise, shaped like (16 mels, T) features."""
    rng = np.random.default_rng(seed)
    out = []
    for cls in range(3):
        for i in range(n_per_class):
            x = rng.normal(0, 1, (16, frames))
            x[4 * cls : 4 * cls + 4, rng.integers(0, frames - 4) :][:, :4] += 3.0
            out.append(Example(f"c{cls}-{i}", x.astype(np.float32), cls))
    return out


# ----------------------------------------------------------------------------
# schedule


def test_lr_reference_points():
    cfg = TrainConfig()
    assert tr.lr_at(5, cfg) == pytest.approx(0.06, abs=1e-12)
    assert tr.lr_at(100, cfg) == pytest.approx(0.0, abs=1e-12)
    assert tr.lr_at(52.5, cfg) == pytest.approx(0.03, abs=1e-12)
    assert tr.lr_at(0, cfg) == pytest.approx(0.012, abs=1e-12)


def test_lr_continuous_at_warmup_junction():
    cfg = TrainConfig()
    # the scheduler steps on integer epochs; the last warmup epoch already sits at the peak
    assert tr.lr_at(cfg.warmup_epochs - 1, cfg) == pytest.approx(cfg.initial_lr, abs=1e-15)
    assert tr.lr_at(cfg.warmup_epochs, cfg) == pytest.approx(cfg.initial_lr, abs=1e-15)


def test_lr_never_negative_and_monotone_after_warmup():
    cfg = TrainConfig()
    lrs = [tr.lr_at(e, cfg) for e in np.linspace(5, 100, 400)]
    assert min(lrs) >= 0
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ----------------------------------------------------------------------------
# config


def test_train_config_defaults_and_json_round_trip(tmp_path):
    cfg = TrainConfig()
    assert (cfg.initial_lr, cfg.weight_decay, cfg.batch_size, cfg.epochs, cfg.warmup_epochs) == (0.06, 0.001, 48, 100, 5)
    assert cfg.momentum == 0.9
    path = tmp_path / "cfg.json"
    tiny_cfg(loss=LossConfig(objective="ce")).to_json(path)
    keys = set(json.loads(path.read_text()))
    assert {"initial_lr", "weight_decay", "batch_size", "epochs", "warmup_epochs", "momentum", "seed", "loss",
            "eval_every"} <= keys
    assert TrainConfig.from_json(path) == tiny_cfg(loss=LossConfig(objective="ce"))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=0.0)


# ----------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = tiny_cfg()
    params = init_params(cfg.model_config(), 4)
    rng = np.random.default_rng(0)
    for name in params.momentum:
        params.momentum[name][...] = rng.normal(size=params.momentum[name].shape)
    path = tmp_path / "m.milc"
    tr.save_checkpoint(params, 7, path)
    loaded, epoch, names = tr.load_checkpoint(path)
    assert epoch == 7
    assert [n for n, _ in loaded] == [n for n, _ in params]
    for (name, a), (_, b) in zip(params, loaded):
        assert np.array_equal(a.data, b.data) and a.data.dtype == b.data.dtype, name
        assert a.requires_grad == b.requires_grad
    for name in params.momentum:
        assert np.array_equal(params.momentum[name], loaded.momentum[name])
    raw = path.read_bytes()
    assert raw[:4] == b"MILC"
    version, ep, count = struct.unpack_from("<III", raw, 4)
    assert (version, ep) == (1, 7)
    assert count == len(names) == len(params) + len(params.momentum)
    assert sum(1 for n in names if n.endswith(".m")) == len(params.momentum)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.milc"
    tr.save_checkpoint(init_params(tiny_cfg().model_config(), 0), 1, path)
    raw = path.read_bytes()
    path.write_bytes(b"MILX" + raw[4:])
    with pytest.raises(tr.CheckpointError, match="offset 0"):
        tr.load_checkpoint(path)
    path.write_bytes(raw[:-10])
    with pytest.raises(tr.CheckpointError, match="truncated at offset"):
        tr.load_checkpoint(path)
    path.write_bytes(raw + b"\0\0")
    with pytest.raises(tr.CheckpointError, match="trailing"):
        tr.load_checkpoint(path)


# ----------------------------------------------------------------------------
# batches


def test_stack_batch_rejects_mixed_lengths():
    a = Example("a", np.zeros((16, 16), np.float32), 0)
    b = Example("b", np.zeros((16, 24), np.float32), 1)
    with pytest.raises(ValueError, match="share one shape"):
        tr.stack_batch([a, b])
    x, t = tr.stack_batch([a, a])
    assert x.shape == (2, 1, 16, 16) and list(t) == [0, 0]


# ----------------------------------------------------------------------------
# training loop


def _loss_on(params, cfg, examples):
    probe = params.copy()
    x, t = tr.stack_batch(examples)
    _, logits = forward(x, probe, cfg.model_config(), train=True)
    return loss_from_logits(logits, t, cfg.loss).total


def test_one_epoch_reduces_training_loss():
    cfg = tiny_cfg(batch_size=2, epochs=10)
    data = toy_examples(frames=16)[::3][:2]
    params = init_params(cfg.model_config(), cfg.seed)
    before = _loss_on(params, cfg, data)
    params, _ = tr.fit(data, [], cfg, params=params, stop_epoch=1)
    assert _loss_on(params, cfg, data) < before


def test_identical_seed_gives_identical_history():
    cfg = tiny_cfg()
    data = toy_examples()
    _, h1 = tr.fit(data, data, cfg)
    _, h2 = tr.fit(data, data, cfg)
    assert h1.to_dict() == h2.to_dict()
    assert len(h1.records) == cfg.epochs
    assert h1.records[-1].val_accuracy is not None


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(epochs=8, warmup_epochs=2)
    data = toy_examples()
    _, full = tr.fit(data, [], cfg)
    params, head = tr.fit(data, [], cfg, stop_epoch=4)
    tr.save_checkpoint(params, 4, tmp_path / "c.milc")
    resumed, start, _ = tr.load_checkpoint(tmp_path / "c.milc")
    _, tail = tr.fit(data, [], cfg, params=resumed, start_epoch=start, history=head)
    assert [r.epoch for r in tail.records] == list(range(8))
    assert tail.records[-1].total_loss == pytest.approx(full.records[-1].total_loss, abs=1e-6)


def test_non_finite_loss_names_clips():
    cfg = tiny_cfg()
    data = toy_examples()
    params = init_params(cfg.model_config(), 0)
    params["det.b"].data[:] = np.nan
    with pytest.raises(tr.NonFiniteLoss, match="c[0-2]-[01]"):
        tr.fit(data, [], cfg, params=params)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        tr.fit([], [], tiny_cfg())


def test_history_reports_final_and_best():
    h = tr.TrainHistory([tr.EpochRecord(0, 0.1, 1, 1, 0, 0.5, 0.5), tr.EpochRecord(1, 0.1, 1, 1, 0, 0.5, None),
                         tr.EpochRecord(2, 0.1, 1, 1, 0, 0.5, 0.9), tr.EpochRecord(3, 0.1, 1, 1, 0, 0.5, 0.7)])
    assert h.final_val_accuracy == 0.7 and h.best_val_accuracy == 0.9


def test_pnl_gradient_is_none_gradient_plus_instance_term():
    cfg = tiny_cfg()
    mcfg = cfg.model_config()
    x, t = tr.stack_batch(toy_examples()[:2])
    grads = {}
    for mode in ("none", "pnl"):
        params = init_params(mcfg, 0, dtype=np.float64)
        _, logits = forward(Tensor(x.data.astype(np.float64)), params, mcfg, train=True)
        loss_from_logits(logits, t, LossConfig(instance_label_mode=mode)).tensor.backward()
        grads[mode] = params["det.w"].grad.copy()
        if mode == "pnl":
            inst = gc.activate(logits, "sigmoid")
            params.zero_grad()
            lab = assign_instance_labels(inst.data, t, "pnl")
            wbce_mean(inst, lab.labels, 2.0).backward()
            grads["instance"] = params["det.w"].grad.copy()
    np.testing.assert_allclose(grads["pnl"], grads["none"] + grads["instance"], rtol=1e-10, atol=1e-14)
    # all-zero instance labels still push confidences down, so the two trajectories split at the first step
    assert np.abs(grads["instance"]).max() > 0


def test_weight_decay_with_zero_gradient_shrinks_norm():
    params = init_params(tiny_cfg().model_config(), 0)
    for _, p in params.trainable():
        p.grad = np.zeros_like(p.data)
    before = {n: float(np.linalg.norm(p.data)) for n, p in params.trainable()}
    gc.sgd_step(params, 0.1, 0.9, 0.001)
    for n, p in params.trainable():
        if before[n] > 0:
            assert np.linalg.norm(p.data) < before[n], n


def test_lr_schedule_reaches_fit():
    cfg = tiny_cfg(epochs=4, warmup_epochs=1)
    _, h = tr.fit(toy_examples(1), [], cfg)
    assert [r.lr for r in h.records] == pytest.approx([0.02, 0.02, 0.015, 0.005], abs=1e-12)
    assert math.isfinite(h.records[-1].total_loss)
