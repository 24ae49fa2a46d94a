import math

import numpy as np
import pytest

from forge import gpam, training
from forge.errors import ConfigOutOfRange, ShapeMismatch
from forge.gpam import HeadSpec, ModelConfig
from forge.leakage import SimConfig, gen_dataset


def test_lr_schedule_shape():
    total, lr = 1000, 1e-3
    assert training.lr_at(0, total, lr) == pytest.approx(1e-5)
    assert training.lr_at(50, total, lr) == pytest.approx(lr)
    assert training.lr_at(25, total, lr) == pytest.approx(1e-5 + (lr - 1e-5) / 2)
    assert training.lr_at(1000, total, lr) == pytest.approx(0, abs=1e-15)
    mid = 50 + 950 / 2
    assert training.lr_at(mid, total, lr) == pytest.approx(lr / 2)
    decay = [training.lr_at(s, total, lr) for s in range(50, 1001)]
    assert all(a >= b for a, b in zip(decay, decay[1:]))
    assert training.lr_at(0, 0, lr) == lr


def _toy_data(n, seed=0, L=32):
    # the label byte is spelled out as 8 bits at offset 0 plus a little noise
    rng = np.random.default_rng(seed)
    k = rng.integers(0, 256, n)
    X = rng.normal(0, 0.05, size=(n, L))
    X[:, :8] += (k[:, None] >> np.arange(7, -1, -1)) & 1
    return X, {"k": k.astype(np.uint8)[:, None]}


def _cfg(**kw):
    base = dict(trace_length=32, patch_size=8, model_dim=16, attn_dim=8, gau_blocks=1,
                merge_filter_1=0, merge_filter_2=0, head_units=[64], dropout_p=0.0,
                epochs=4, steps_per_epoch=60, batch_size=32, target_lr=3e-3,
                heads=[HeadSpec("k0", "k", 0)])
    base.update(kw)
    return ModelConfig(**base)


def test_loss_decreases_on_learnable_task():
    data = {"train": _toy_data(512), "test": _toy_data(128, 1)}
    run = training.train(_cfg(), data, seed=0)
    losses = [e["train"]["k0"]["loss"] for e in run.history]
    assert losses[0] > losses[-1]
    assert losses[-1] < math.log(256) / 2
    assert run.history[-1]["test"]["k0"]["accuracy"] > 0.2


def test_training_is_deterministic():
    data = {"train": _toy_data(200)}
    cfg = _cfg(epochs=1, steps_per_epoch=5, dropout_p=0.1)
    a = training.train(cfg, data, seed=3, eval_split=None)
    b = training.train(cfg, data, seed=3, eval_split=None)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = training.train(cfg, data, seed=4, eval_split=None)
    assert not np.array_equal(a.params["stem.proj"].data, c.params["stem.proj"].data)


def test_fraction_and_zero_epochs():
    data = {"train": _toy_data(100)}
    run = training.train(_cfg(epochs=0), data, fraction=0.5, eval_split=None)
    assert run.train_count == 50 and run.history == []
    # zero epochs leaves the initialisation untouched
    init = gpam.init_params(_cfg(), 0)
    assert all(np.array_equal(init[k].data, run.params[k].data) for k in init)
    with pytest.raises(ConfigOutOfRange):
        training.train(_cfg(), data, fraction=0.0)
    with pytest.raises(ShapeMismatch):
        training.train(_cfg(trace_length=64), data)


def test_train_from_dataset_writes_provenance(tmp_path):
    sim = SimConfig("cm0", 64, scalar_bytes=4, noise_sigma=0.1, seed=9)
    gen_dataset(sim, {"train": 64, "test": 16, "holdout": 16}, tmp_path / "ds")
    cfg = _cfg(trace_length=64, epochs=1, steps_per_epoch=2, batch_size=16)
    ck = tmp_path / "m.gpam"
    run = training.train(cfg, tmp_path / "ds", seed=1, checkpoint=ck)
    assert "test" in run.history[0]
    _, _, meta = gpam.load_checkpoint(ck)
    prov = meta["provenance"]
    assert prov["seed"] == 1 and prov["train_count"] == 64
    assert prov["sim_config"]["scheme"] == "cm0"
    training.write_history(run, tmp_path / "h.json")
    assert (tmp_path / "h.json").read_text().startswith("{")


def test_evaluate_reports_every_head():
    X, Y = _toy_data(40)
    cfg = _cfg(heads=[HeadSpec("k0", "k", 0), HeadSpec("dep", "k", 0, depends_on=["k0"])])
    params = gpam.init_params(cfg, 0)
    out = training.evaluate(X, Y, cfg, params)
    assert set(out) == {"k0", "dep"}
    for v in out.values():
        assert 0 <= v["accuracy"] <= 1 and v["loss"] > 0
