import json
import logging
import math

import numpy as np
import pytest

from forge import gpam
from forge.ad import tensor as ad
from forge.ad.gradcheck import grad_check
from forge.ad.suite import model_check, tiny_model_setup
from forge.ad.tensor import Tensor, precision
from forge.errors import (ConfigOutOfRange, CorruptShard, CyclicDag, IndivisibleLength,
                          MissingDependency, MissingLabel, ShapeMismatch, UnknownVersion)
from forge.gpam import HeadSpec, ModelConfig


def _cfg(**kw):
    base = dict(trace_length=64, patch_size=8, model_dim=8, attn_dim=4, gau_blocks=2,
                merge_filter_1=4, merge_filter_2=2, head_units=[16, 8], dropout_p=0.0,
                heads=[HeadSpec("km", "km"), HeadSpec("r", "r"),
                       HeadSpec("k", "k", depends_on=["km", "r"])])
    base.update(kw)
    return ModelConfig(**base)


def test_default_patch_size():
    assert gpam.default_patch_size(4096) == 64
    # 1,620,000-sample traces; the sqrt is ~1272.8
    p = gpam.default_patch_size(1_620_000)
    assert 1_620_000 % p == 0 and abs(p - 1273) <= 30
    assert p != 1200  # the heuristic, not a hand-picked value
    assert gpam.default_patch_size(100) == 10


def test_prime_length_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert gpam.default_patch_size(4099) == 1
    assert "no divisor" in caplog.text


def test_patchify():
    t = np.arange(12.0)
    assert gpam.patchify(t, 4).tolist() == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]]
    with pytest.raises(IndivisibleLength):
        gpam.patchify(t, 5)
    with pytest.raises(IndivisibleLength):
        _cfg(patch_size=7).validate()


def test_combiner_length():
    # 64 patches, two stride-2 K=3 convolutions: 64 -> 31 -> 15 positions, 8 filters
    cfg = ModelConfig(trace_length=4096, heads=[HeadSpec("k0", "k")])
    assert gpam.combiner_length(cfg) == 15 * 8
    cfg = ModelConfig(trace_length=4096, merge_filter_1=0, merge_filter_2=0,
                      heads=[HeadSpec("k0", "k")])
    assert gpam.combiner_length(cfg) == 64 * 3 * 64
    cfg = ModelConfig(trace_length=4096, merge_filter_1=0, heads=[HeadSpec("k0", "k")])
    assert gpam.combiner_length(cfg) == 31 * 8


def test_topo_order():
    heads = [HeadSpec("k0", "k", depends_on=["km0", "r0"]), HeadSpec("r0", "r"),
             HeadSpec("km0", "km")]
    assert [h.name for h in gpam.topo_order(heads)] == ["km0", "r0", "k0"]
    with pytest.raises(CyclicDag):
        gpam.topo_order([HeadSpec("a", "k", depends_on=["b"]),
                         HeadSpec("b", "k", depends_on=["a"])])
    with pytest.raises(MissingDependency):
        gpam.topo_order([HeadSpec("a", "k", depends_on=["zz"])])
    with pytest.raises(ConfigOutOfRange):
        gpam.topo_order([HeadSpec("a", "k"), HeadSpec("a", "r")])


def test_stem_shapes_and_error():
    cfg = _cfg()
    params = gpam.init_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 64))
    X = gpam.stem(gpam.patchify(x, 8), params)
    assert X.shape == (2, 8, 8)
    with pytest.raises(ShapeMismatch):
        gpam.stem(gpam.patchify(x, 4), params)


def _naive_gau(x, p, prefix):
    g = {k[len(prefix):]: v.data.astype(np.float64) for k, v in p.items() if k.startswith(prefix)}
    T, d = x.shape
    mu = x.mean(1, keepdims=True)
    var = ((x - mu) ** 2).mean(1, keepdims=True)
    n = (x - mu) / np.sqrt(var + 1e-5) * g["ln.scale"] + g["ln.offset"]
    sw = lambda z: z / (1 + np.exp(-z))  # noqa: E731
    U, V, Z = sw(n @ g["w_u"]), sw(n @ g["w_v"]), sw(n @ g["w_z"])
    Q = Z * g["q.gamma"] + g["q.beta"]
    K = Z * g["k.gamma"] + g["k.beta"]
    s = Z.shape[1]
    A = np.zeros((T, T))
    for i in range(T):
        for j in range(T):
            score = sum(Q[i, c] * K[j, c] for c in range(s)) / math.sqrt(s)
            A[i, j] = max(score, 0.0) ** 2 / T
    return x + (U * (A @ V)) @ g["w_o"]


def test_gau_block_against_loops():
    with precision(64):
        cfg, params, x, _ = tiny_model_setup(2)
        X = gpam.stem(gpam.patchify(x, cfg.patch_size), params)
        out = gpam.gau_block(X, params, "gau1.").data
        for b in range(X.shape[0]):
            assert np.allclose(out[b], _naive_gau(X.data[b], params, "gau1."), atol=1e-10)


def _naive_conv(x, w, b, stride=2):
    K, C, F = w.shape
    T = (x.shape[0] - K) // stride + 1
    out = np.zeros((T, F))
    for t in range(T):
        for f in range(F):
            out[t, f] = b[f] + sum(x[t * stride + k, c] * w[k, c, f]
                                   for k in range(K) for c in range(C))
    return out / (1 + np.exp(-out))


def test_combiner_against_loops():
    with precision(64):
        cfg, params, x, _ = tiny_model_setup(3)
        rng = np.random.default_rng(0)
        outs = [Tensor(rng.normal(size=(2, cfg.n_patches, cfg.model_dim)))
                for _ in range(cfg.gau_blocks)]
        got = gpam.combiner(outs, cfg, params).data
        h = np.concatenate([o.data for o in outs], -1)
        for b in range(2):
            y = _naive_conv(h[b], params["comb.conv1.w"].data, params["comb.conv1.b"].data)
            y = _naive_conv(y, params["comb.conv2.w"].data, params["comb.conv2.b"].data)
            assert np.allclose(got[b], y.reshape(-1), atol=1e-12)


def test_tiny_model_grad_check():
    assert model_check(0) < 1e-4


def test_stop_grad_deps_blocks_dependency_params():
    with precision(64):
        cfg, params, x, labels = tiny_model_setup(4)
        cfg.heads[2].stop_grad_deps = True
        # only the dependent head's loss: nothing may reach km/r head weights
        for p in params.values():
            p.grad = None
        _, losses, _ = gpam.model_loss(x, labels, cfg, params)
        losses["k"].backward()
        for name, p in params.items():
            if name.startswith(("head.km.", "head.r.")):
                assert p.grad is None or not np.any(p.grad), name
        assert np.any(params["head.k.d0.w"].grad)
        # and without stop-gradient the dependency heads do receive gradient
        cfg.heads[2].stop_grad_deps = False
        for p in params.values():
            p.grad = None
        _, losses, _ = gpam.model_loss(x, labels, cfg, params)
        losses["k"].backward()
        assert np.any(params["head.km.d0.w"].grad)


def test_no_trunk_head_has_only_relational_inputs():
    cfg = _cfg(heads=[HeadSpec("km", "km"), HeadSpec("r", "r"),
                      HeadSpec("k", "k", depends_on=["km", "r"], use_trunk=False)])
    shapes = gpam.param_shapes(cfg)
    assert shapes["head.k.d0.w"] == (512, 16)
    assert shapes["head.km.d0.w"][0] == gpam.combiner_length(cfg)
    with pytest.raises(ShapeMismatch):
        gpam.param_shapes(_cfg(heads=[HeadSpec("k", "k", use_trunk=False)]))


def test_forward_order_and_probabilities():
    cfg = _cfg()
    params = gpam.init_params(cfg, 1)
    out = gpam.model_forward(np.zeros((3, 64)), cfg, params)
    assert list(out) == ["km", "r", "k"]
    for logits, probs in out.values():
        assert probs.shape == (3, 256)
        assert np.allclose(probs.data.sum(-1), 1, atol=1e-5)
    with pytest.raises(ShapeMismatch):
        gpam.model_forward(np.zeros((3, 32)), cfg, params)


def test_head_targets():
    cfg = _cfg(heads=[HeadSpec("k3", "k", 3)])
    labels = {"k": np.array([[1, 2, 3, 4], [5, 6, 7, 8]], dtype=np.uint8)}
    assert gpam.head_targets(cfg, labels)["k3"].tolist() == [4, 8]
    with pytest.raises(MissingLabel):
        gpam.head_targets(_cfg(heads=[HeadSpec("x", "rm")]), labels)


def test_init_is_deterministic_and_per_tensor():
    a = gpam.init_params(_cfg(), 5)
    b = gpam.init_params(_cfg(), 5)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = gpam.init_params(_cfg(), 6)
    assert not np.array_equal(a["stem.proj"].data, c["stem.proj"].data)


def test_config_json(tmp_path):
    cfg = _cfg()
    d = json.loads(json.dumps(cfg.to_json()))
    assert ModelConfig.from_json(d) == cfg
    bad = dict(d)
    del bad["target_lr"]
    with pytest.raises(gpam.MissingConfigKey, match="target_lr"):
        ModelConfig.from_json(bad)
    with pytest.raises(ConfigOutOfRange):
        ModelConfig.from_json({**d, "bogus": 1})
    with pytest.raises(ConfigOutOfRange):
        ModelConfig.from_json({**d, "dropout_p": 1.5})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    assert gpam.load_config(path) == cfg


def test_checkpoint_round_trip(tmp_path):
    cfg = _cfg()
    params = gpam.init_params(cfg, 2)
    a, b = tmp_path / "a.gpam", tmp_path / "b.gpam"
    gpam.save_checkpoint(a, cfg, params, {"provenance": {"seed": 2}})
    cfg2, params2, meta = gpam.load_checkpoint(a)
    assert cfg2 == cfg and meta == {"provenance": {"seed": 2}}
    gpam.save_checkpoint(b, cfg2, params2, meta)
    assert a.read_bytes() == b.read_bytes()
    x = np.random.default_rng(0).normal(size=(4, 64)).astype(np.float32)
    p1 = gpam.predict(x, cfg, {k: Tensor(v.data.astype(np.float32)) for k, v in params.items()})
    p2 = gpam.predict(x, cfg2, params2)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_checkpoint_rejects_bad_files(tmp_path):
    cfg = _cfg()
    params = gpam.init_params(cfg, 2)
    path = tmp_path / "m.gpam"
    gpam.save_checkpoint(path, cfg, params)
    data = path.read_bytes()
    (tmp_path / "t.gpam").write_bytes(data[:-10])
    with pytest.raises(CorruptShard):
        gpam.load_checkpoint(tmp_path / "t.gpam")
    (tmp_path / "v.gpam").write_bytes(data[:4] + b"\x07\x00\x00\x00" + data[8:])
    with pytest.raises(UnknownVersion):
        gpam.load_checkpoint(tmp_path / "v.gpam")
    extra = dict(params)
    extra["head.zz.d0.w"] = Tensor(np.zeros((2, 2)))
    gpam.save_checkpoint(tmp_path / "u.gpam", cfg, extra)
    with pytest.raises(gpam.CheckpointMismatch):
        gpam.load_checkpoint(tmp_path / "u.gpam")
    del params["stem.pos"]
    gpam.save_checkpoint(tmp_path / "m2.gpam", cfg, params)
    with pytest.raises(gpam.CheckpointMismatch):
        gpam.load_checkpoint(tmp_path / "m2.gpam")


def test_dropout_only_in_training():
    cfg = _cfg(dropout_p=0.5)
    params = gpam.init_params(cfg, 0)
    x = np.random.default_rng(1).normal(size=(2, 64))
    e1 = gpam.model_forward(x, cfg, params)["k"][1].data
    e2 = gpam.model_forward(x, cfg, params)["k"][1].data
    assert np.array_equal(e1, e2)
    t = gpam.model_forward(x, cfg, params, train=True, rng=np.random.default_rng(0))["k"][1].data
    assert not np.array_equal(e1, t)


def test_grad_check_on_single_head_no_combiner():
    with precision(64):
        cfg = ModelConfig(trace_length=16, patch_size=4, model_dim=4, attn_dim=2, gau_blocks=1,
                          merge_filter_1=0, merge_filter_2=0, head_units=[6], dropout_p=0.0,
                          heads=[HeadSpec("k", "k")])
        params = gpam.init_params(cfg, 0)
        rng = np.random.default_rng(0)
        for name, t in params.items():
            t.data = rng.normal(0, 0.5, size=t.shape) + (1.0 if ".beta" in name else 0.0)
        x = rng.normal(size=(2, 16))
        labels = {"k": np.array([3, 200])}
        f = lambda: gpam.model_loss(x, labels, cfg, params)[0]  # noqa: E731
        assert grad_check(f, list(params.values())) < 1e-4
        assert isinstance(ad.sum_(params["stem.pos"]), Tensor)
