"""The trace classifier: patch stem, GAU trunk, conv combiner and a DAG of heads.

Every head predicts one byte (256 classes). A head may take the softmax output
of other heads as extra input; heads are evaluated in topological order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forge.ad import tensor as ad
from forge.ad.tensor import Tensor
from forge.errors import (ConfigOutOfRange, CorruptShard, CyclicDag, IndivisibleLength,
                          IoFailure, MissingDependency, MissingLabel, ShapeMismatch,
                          UnknownVersion)

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("batch_size", "steps_per_epoch", "epochs", "target_lr", "merge_filter_1",
                 "merge_filter_2", "trace_length", "patch_size", "heads")
CKPT_MAGIC = b"GPAM"
CKPT_VERSION = 1
N_CLASSES = 256


class MissingConfigKey(ConfigOutOfRange):
    def __init__(self, key: str):
        super().__init__(f"missing config key: {key}")
        self.key = key


class CheckpointMismatch(ConfigOutOfRange):
    """The checkpoint holds a tensor the model does not have, or lacks one."""


@dataclass
class HeadSpec:
    name: str
    attack_point: str
    byte_index: int = 0
    depends_on: list[str] = field(default_factory=list)
    stop_grad_deps: bool = False
    use_trunk: bool = True
    loss_weight: float = 1.0


@dataclass
class ModelConfig:
    trace_length: int
    patch_size: int | None = None
    model_dim: int = 64
    gau_blocks: int = 3
    expansion: int | None = None
    attn_dim: int = 64
    merge_filter_1: int = 16
    merge_filter_2: int = 8
    head_units: list[int] = field(default_factory=lambda: [256, 128])
    dropout_p: float = 0.05
    heads: list[HeadSpec] = field(default_factory=list)
    batch_size: int = 64
    steps_per_epoch: int = 200
    epochs: int = 25
    target_lr: float = 6e-4

    def __post_init__(self):
        if self.patch_size is None:
            self.patch_size = default_patch_size(self.trace_length)
        if self.expansion is None:
            self.expansion = 2 * self.model_dim
        self.heads = [h if isinstance(h, HeadSpec) else HeadSpec(**h) for h in self.heads]

    @property
    def n_patches(self) -> int:
        return self.trace_length // self.patch_size

    def validate(self) -> None:
        if self.trace_length % self.patch_size:
            raise IndivisibleLength(
                f"trace_length {self.trace_length} not divisible by patch_size {self.patch_size}")
        if self.merge_filter_1 < 0 or self.merge_filter_2 < 0:
            raise ConfigOutOfRange("merge filters must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigOutOfRange("dropout_p must be in [0, 1)")
        for k in ("batch_size", "model_dim", "attn_dim", "expansion"):
            if getattr(self, k) < 1:
                raise ConfigOutOfRange(f"{k} must be positive")
        if self.steps_per_epoch < 0 or self.epochs < 0:
            raise ConfigOutOfRange("steps_per_epoch and epochs must be >= 0")
        if not self.heads:
            raise ConfigOutOfRange("at least one head is required")
        combiner_length(self)
        topo_order(self.heads)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        for key in REQUIRED_KEYS:
            if key not in d:
                raise MissingConfigKey(key)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigOutOfRange(f"unknown config keys: {', '.join(unknown)}")
        heads = []
        for h in d["heads"]:
            for key in ("name", "attack_point"):
                if key not in h:
                    raise MissingConfigKey(f"heads[].{key}")
            heads.append(HeadSpec(**h))
        cfg = cls(**{**d, "heads": heads})
        cfg.validate()
        return cfg


def load_config(path) -> ModelConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return ModelConfig.from_json(json.loads(text))


def topo_order(heads: list[HeadSpec]) -> list[HeadSpec]:
    """Heads sorted so that every dependency precedes its dependents.

    Ties keep the lexicographic order of names, which makes the result
    independent of declaration order.
    """
    by_name = {}
    for h in heads:
        if h.name in by_name:
            raise ConfigOutOfRange(f"duplicate head name {h.name!r}")
        by_name[h.name] = h
    for h in heads:
        for dep in h.depends_on:
            if dep not in by_name:
                raise MissingDependency(f"head {h.name!r} depends on unknown head {dep!r}")
    indeg = {n: len(by_name[n].depends_on) for n in by_name}
    order = []
    ready = sorted(n for n, d in indeg.items() if d == 0)
    while ready:
        n = ready.pop(0)
        order.append(by_name[n])
        for h in sorted(by_name):
            if n in by_name[h].depends_on:
                indeg[h] -= 1
                if indeg[h] == 0:
                    ready.append(h)
                    ready.sort()
    if len(order) != len(heads):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CyclicDag(f"head dependencies form a cycle among {stuck}")
    return order


# --- shape helpers ---------------------------------------------------------

def default_patch_size(trace_length: int) -> int:
    """Divisor of ``trace_length`` closest to round(sqrt(trace_length)); ties go low."""
    if trace_length < 1:
        raise ValueError("trace_length must be >= 1")
    target = round(math.sqrt(trace_length))
    best = 1
    for d in range(1, math.isqrt(trace_length) + 1):
        if trace_length % d:
            continue
        for cand in (d, trace_length // d):
            if abs(cand - target) < abs(best - target) or (
                    abs(cand - target) == abs(best - target) and cand < best):
                best = cand
    if best == 1 and trace_length > 1:
        log.warning("trace length %d has no divisor near its square root; patch size is 1",
                    trace_length)
    return best


def patchify(trace: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., L) -> (..., L/P, P) of contiguous non-overlapping chunks."""
    trace = np.asarray(trace)
    L = trace.shape[-1]
    if patch_size < 1 or L % patch_size:
        raise IndivisibleLength(f"length {L} not divisible by patch size {patch_size}")
    return trace.reshape(trace.shape[:-1] + (L // patch_size, patch_size))


def _conv_len(T: int, k: int = 3, stride: int = 2) -> int:
    return (T - k) // stride + 1


def combiner_length(cfg: ModelConfig) -> int:
    """Length of the flattened trunk vector."""
    T = cfg.n_patches
    C = cfg.gau_blocks * cfg.model_dim if cfg.gau_blocks else cfg.model_dim
    for F in (cfg.merge_filter_1, cfg.merge_filter_2):
        if F > 0:
            if T < 3:
                raise ShapeMismatch(f"combiner needs >= 3 positions, got {T}")
            T, C = _conv_len(T), F
    return T * C


# --- parameters ------------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _glorot(name, shape, seed, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return _rng_for(seed, name).uniform(-lim, lim, size=shape)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, e, s, T, P = cfg.model_dim, cfg.expansion, cfg.attn_dim, cfg.n_patches, cfg.patch_size
    shapes = {"stem.proj": (P, d), "stem.pos": (T, d)}
    for b in range(cfg.gau_blocks):
        p = f"gau{b}."
        shapes.update({p + "ln.scale": (d,), p + "ln.offset": (d,), p + "w_u": (d, e),
                       p + "w_v": (d, e), p + "w_z": (d, s), p + "q.gamma": (s,),
                       p + "q.beta": (s,), p + "k.gamma": (s,), p + "k.beta": (s,),
                       p + "w_o": (e, d)})
    C = cfg.gau_blocks * d if cfg.gau_blocks else d
    for i, F in enumerate((cfg.merge_filter_1, cfg.merge_filter_2), 1):
        if F > 0:
            shapes[f"comb.conv{i}.w"] = (3, C, F)
            shapes[f"comb.conv{i}.b"] = (F,)
            C = F
    trunk = combiner_length(cfg)
    for h in cfg.heads:
        width = (trunk if h.use_trunk else 0) + N_CLASSES * len(h.depends_on)
        if width == 0:
            raise ShapeMismatch(f"head {h.name!r} has no inputs")
        units = list(cfg.head_units) + [N_CLASSES]
        for j, u in enumerate(units):
            shapes[f"head.{h.name}.d{j}.w"] = (width, u)
            shapes[f"head.{h.name}.d{j}.b"] = (u,)
            width = u
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters. Each tensor draws from its own (seed, name) stream."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "offset", "beta"):
            arr = np.zeros(shape)
        elif leaf == "scale":
            arr = np.ones(shape)
        elif leaf in ("gamma", "pos"):
            arr = _rng_for(seed, name).normal(0.0, 0.02, size=shape)
        elif len(shape) == 3:
            K, C, F = shape
            arr = _glorot(name, shape, seed, K * C, K * F)
        else:
            arr = _glorot(name, shape, seed, shape[0], shape[1])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# --- forward pieces --------------------------------------------------------

def stem(patches, params) -> Tensor:
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    proj, pos = params["stem.proj"], params["stem.pos"]
    if patches.shape[-2:] != (pos.shape[0], proj.shape[0]):
        raise ShapeMismatch(f"patches {patches.shape} vs stem {proj.shape}, {pos.shape}")
    return ad.add(ad.matmul(patches, proj), pos)


def gau_block(X: Tensor, params, prefix: str = "gau0.") -> Tensor:
    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    T = X.shape[-2]
    s = p["w_z"].shape[1]
    if X.shape[-1] != p["w_u"].shape[0]:
        raise ShapeMismatch(f"block input {X.shape} vs width {p['w_u'].shape[0]}")
    N = ad.layer_norm(X, p["ln.scale"], p["ln.offset"])
    U = ad.swish(ad.matmul(N, p["w_u"]))
    V = ad.swish(ad.matmul(N, p["w_v"]))
    Z = ad.swish(ad.matmul(N, p["w_z"]))
    Q = ad.add(ad.mul(Z, p["q.gamma"]), p["q.beta"])
    K = ad.add(ad.mul(Z, p["k.gamma"]), p["k.beta"])
    A = ad.scale(ad.squared_relu(ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(s))),
                 1.0 / T)
    return ad.add(X, ad.matmul(ad.mul(U, ad.matmul(A, V)), p["w_o"]))


def combiner(outputs: list[Tensor], cfg: ModelConfig, params) -> Tensor:
    h = ad.concat(outputs, axis=-1) if len(outputs) > 1 else outputs[0]
    for i, F in enumerate((cfg.merge_filter_1, cfg.merge_filter_2), 1):
        if F > 0:
            h = ad.swish(ad.add(ad.conv1d(h, params[f"comb.conv{i}.w"], stride=2),
                                params[f"comb.conv{i}.b"]))
    return ad.reshape(h, h.shape[:-2] + (h.shape[-2] * h.shape[-1],))


def trunk_forward(traces, cfg: ModelConfig, params) -> Tensor:
    X = stem(patchify(traces, cfg.patch_size), params)
    outs = []
    for b in range(cfg.gau_blocks):
        X = gau_block(X, params, f"gau{b}.")
        outs.append(X)
    return combiner(outs or [X], cfg, params)


def head_forward(trunk: Tensor | None, rel_inputs: list[Tensor], spec: HeadSpec, params,
                 n_dense: int, dropout_p: float = 0.0, train: bool = False,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Returns (logits, probabilities) of one head."""
    if len(rel_inputs) != len(spec.depends_on):
        raise MissingDependency(f"head {spec.name!r} expects inputs from {spec.depends_on}")
    parts = [trunk] if spec.use_trunk else []
    parts += [ad.stop_gradient(r) if spec.stop_grad_deps else r for r in rel_inputs]
    x = ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    pre = f"head.{spec.name}."
    w0 = params[pre + "d0.w"]
    if x.shape[-1] != w0.shape[0]:
        raise ShapeMismatch(f"head {spec.name!r} input width {x.shape[-1]} != {w0.shape[0]}")
    for j in range(n_dense):
        x = ad.swish(ad.add(ad.matmul(x, params[f"{pre}d{j}.w"]), params[f"{pre}d{j}.b"]))
    x = ad.dropout(x, dropout_p, train, rng)
    logits = ad.add(ad.matmul(x, params[f"{pre}d{n_dense}.w"]), params[f"{pre}d{n_dense}.b"])
    return logits, ad.softmax(logits)


def model_forward(traces, cfg: ModelConfig, params, train: bool = False,
                  rng: np.random.Generator | None = None) -> dict[str, tuple[Tensor, Tensor]]:
    """All heads for a batch of traces (B, L): name -> (logits, probs)."""
    traces = np.asarray(traces)
    if traces.ndim == 1:
        traces = traces[None]
    if traces.shape[-1] != cfg.trace_length:
        raise ShapeMismatch(f"trace length {traces.shape[-1]} != {cfg.trace_length}")
    if any(h.use_trunk for h in cfg.heads):
        trunk = trunk_forward(traces, cfg, params)
    else:
        trunk = None
    out: dict[str, tuple[Tensor, Tensor]] = {}
    for spec in topo_order(cfg.heads):
        rel = [out[d][1] for d in spec.depends_on]
        out[spec.name] = head_forward(trunk, rel, spec, params, len(cfg.head_units),
                                      cfg.dropout_p, train, rng)
    return out


def head_targets(cfg: ModelConfig, labels: dict) -> dict[str, np.ndarray]:
    """Pick each head's byte out of dataset labels (attack point -> (N, bytes))."""
    out = {}
    for h in cfg.heads:
        if h.name in labels and np.ndim(labels[h.name]) == 1:
            out[h.name] = np.asarray(labels[h.name])
            continue
        if h.attack_point not in labels:
            raise MissingLabel(f"no labels for attack point {h.attack_point!r} (head {h.name!r})")
        arr = np.asarray(labels[h.attack_point])
        if arr.ndim != 2 or h.byte_index >= arr.shape[1]:
            raise MissingLabel(f"{h.attack_point}[{h.byte_index}] not in labels")
        out[h.name] = arr[:, h.byte_index]
    return out


def model_loss(traces, labels: dict, cfg: ModelConfig, params, train: bool = False,
               rng: np.random.Generator | None = None):
    """(total loss, per-head loss tensors, forward outputs).

    ``labels`` may map head names to (B,) arrays or attack points to (B, bytes).
    """
    targets = head_targets(cfg, labels)
    outs = model_forward(traces, cfg, params, train, rng)
    losses = {}
    total = None
    for h in cfg.heads:
        losses[h.name] = ad.cross_entropy(outs[h.name][0], targets[h.name])
        term = ad.scale(losses[h.name], h.loss_weight)
        total = term if total is None else ad.add(total, term)
    return total, losses, outs


def predict(traces: np.ndarray, cfg: ModelConfig, params, batch_size: int = 256) -> dict:
    """Eval-mode probabilities for every head: name -> (N, 256)."""
    res: dict[str, list] = {h.name: [] for h in cfg.heads}
    for i in range(0, len(traces), batch_size):
        outs = model_forward(traces[i:i + batch_size], cfg, params, train=False)
        for name, (_, probs) in outs.items():
            res[name].append(probs.data)
    return {k: (np.concatenate(v) if v else np.zeros((0, N_CLASSES))) for k, v in res.items()}


# --- checkpoint ------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> None:
    """Write ``GPAM`` | u32 version | config JSON | tensors (name, rank, dims, f32 data)."""
    blob = json.dumps({"model": cfg.to_json(), **(extra or {})}, sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    for name in sorted(params):
        p = params[name]
        arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict]:
    """Returns (config, parameters, the rest of the config blob)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if data[:4] != CKPT_MAGIC:
        raise CorruptShard("not a GPAM checkpoint")
    try:
        version, blen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise UnknownVersion(f"checkpoint version {version}")
        pos = 12
        meta = json.loads(data[pos:pos + blen].decode())
        pos += blen
        cfg = ModelConfig.from_json(meta.pop("model"))
        expected = param_shapes(cfg)
        params = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise CorruptShard("checkpoint truncated")
            if name not in expected:
                raise CheckpointMismatch(f"unknown tensor {name!r} in checkpoint")
            if tuple(dims) != tuple(expected[name]):
                raise CheckpointMismatch(f"{name}: shape {dims} != {expected[name]}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptShard(f"checkpoint unreadable: {exc}") from exc
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks tensors: {', '.join(missing[:5])}")
    return cfg, params, meta
