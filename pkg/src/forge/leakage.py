"""Synthetic power traces and the on-disk dataset container.

A trace is Gaussian noise around a baseline; every configured leak point adds
``alpha * f(byte)`` at its time offset, where ``f`` is one of

* ``bits``  - one sample per bit, MSB first, value 0 or 1 (footprint 8)
* ``hw``    - Hamming weight of the byte (footprint 1)
* ``value`` - byte / 255 (footprint 1)

``hw`` loses information: a byte cannot in general be recovered from its
Hamming weight, so do not expect perfect accuracy under that model.

Dataset layout: ``manifest.json`` plus ``<split>-<idx>.shard`` files. Shards
are little-endian: magic ``GPDS``, u32 version, u32 trace_length,
u32 record_count, then per record the f32 samples, the label bytes of every
attack point in manifest order, and a u32 CRC32 of the record.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from forge import masking
from forge.ec import P256
from forge.errors import (ConfigOutOfRange, CorruptShard, DuplicateKeyAcrossSplits,
                          IoFailure, UnknownVersion)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SHARD_MAGIC = b"GPDS"
SPLITS = ("train", "test", "holdout")
LEAK_MODELS = ("bits", "hw", "value")
FOOTPRINT = {"bits": 8, "hw": 1, "value": 1}
AES_SCHEME = "ascadv2-sim"
AES_VALUES = {"k": 16, "pt": 16, "rm": 1, "rout": 1, "perm": 16, "c": 16, "sbox": 16}

_HEADER = struct.Struct("<4sIII")
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.float64)


@dataclass(frozen=True)
class LeakPoint:
    attack_point: str
    byte_index: int
    time_offset: int
    model: str = "bits"
    alpha: float = 1.0
    beta: float = 0.0

    @property
    def footprint(self) -> int:
        return FOOTPRINT[self.model]


@dataclass
class SimConfig:
    scheme: str
    trace_length: int
    leak_points: list[LeakPoint] = field(default_factory=list)
    noise_sigma: float = 0.0
    jitter_max: int = 0
    scalar_bytes: int = 32
    seed: int = 0
    # Options of the default leak layout and of the mask arithmetic.
    leak_model: str = "bits"
    leak_values: list[str] | None = None
    alpha: float = 1.0
    beta: float = 0.0
    stride_gap: int = 4
    repeats: int | None = None
    modulus: str = "auto"
    shuffle: bool = True

    def validate(self) -> None:
        if self.noise_sigma < 0:
            raise ConfigOutOfRange("noise_sigma must be >= 0")
        if self.jitter_max < 0:
            raise ConfigOutOfRange("jitter_max must be >= 0")
        if self.trace_length <= 0:
            raise ConfigOutOfRange("trace_length must be positive")
        if self.scheme not in masking.SCHEMES + (AES_SCHEME,):
            raise ConfigOutOfRange(f"unknown scheme {self.scheme!r}")
        if self.scheme != AES_SCHEME and not 1 <= self.scalar_bytes <= 64:
            raise ConfigOutOfRange("scalar_bytes must be in 1..64")
        sizes = attack_point_sizes(self)
        for lp in self.leak_points:
            if lp.model not in LEAK_MODELS:
                raise ConfigOutOfRange(f"unknown leak model {lp.model!r}")
            if lp.attack_point not in sizes or not 0 <= lp.byte_index < sizes[lp.attack_point]:
                raise ConfigOutOfRange(f"leak point {lp.attack_point}[{lp.byte_index}] unknown")
            if lp.time_offset < 0 or lp.time_offset + lp.footprint + self.jitter_max > self.trace_length:
                raise ConfigOutOfRange(
                    f"leak point {lp.attack_point}[{lp.byte_index}] at {lp.time_offset} "
                    f"does not fit a {self.trace_length}-sample trace with jitter {self.jitter_max}")

    def modulus_value(self) -> int:
        if self.scheme == AES_SCHEME:
            return 0
        if self.modulus == "auto":
            return P256.n if self.scalar_bytes == 32 else masking.desk_modulus(self.scalar_bytes)
        if self.modulus in ("pow2", "prime"):
            return masking.desk_modulus(self.scalar_bytes, self.modulus)
        return int(self.modulus, 0)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["leak_points"] = [dataclasses.asdict(lp) for lp in self.leak_points]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["leak_points"] = [LeakPoint(**lp) for lp in d.get("leak_points", [])]
        return cls(**d)


def attack_point_sizes(cfg: SimConfig) -> dict[str, int]:
    """Attack point name -> label byte count, in manifest order."""
    if cfg.scheme == AES_SCHEME:
        return dict(AES_VALUES)
    return {name: cfg.scalar_bytes for name in masking.SCHEME_VALUES[cfg.scheme]}


def default_leak_values(scheme: str) -> list[str]:
    if scheme == AES_SCHEME:
        return ["c", "rm", "rout", "perm"]
    if scheme == "cm0":
        return ["k"]
    # the masked schemes never handle k itself on the device
    return [v for v in masking.SCHEME_VALUES[scheme] if v != "k"]


_SEL = re.compile(r"^(\w+)(?:\[(\d+)\])?$")


def _expand_values(values: Sequence[str], sizes: dict[str, int]) -> list[tuple[str, int]]:
    out = []
    for item in values:
        m = _SEL.match(item)
        if not m or m.group(1) not in sizes:
            raise ConfigOutOfRange(f"unknown leak value {item!r}")
        name = m.group(1)
        if m.group(2) is None:
            out.extend((name, i) for i in range(sizes[name]))
        else:
            out.append((name, int(m.group(2))))
    return out


def build_leak_points(cfg: SimConfig) -> list[LeakPoint]:
    """Default placement: leaked bytes laid out back to back, each followed by
    ``stride_gap`` quiet samples; the whole round repeats as many times as it
    fits (or ``cfg.repeats`` times)."""
    sizes = attack_point_sizes(cfg)
    targets = _expand_values(cfg.leak_values or default_leak_values(cfg.scheme), sizes)
    fp = FOOTPRINT[cfg.leak_model]
    step = fp + cfg.stride_gap
    round_len = step * len(targets)
    usable = cfg.trace_length - cfg.jitter_max
    fits = usable // round_len if round_len else 0
    repeats = fits if cfg.repeats is None else cfg.repeats
    if repeats < 1 or repeats > fits:
        raise ConfigOutOfRange(
            f"{len(targets)} leaked bytes x {repeats} repeats need {round_len * max(repeats, 1)} "
            f"samples; only {usable} available")
    points = []
    for rep in range(repeats):
        for j, (name, idx) in enumerate(targets):
            points.append(LeakPoint(name, idx, rep * round_len + j * step,
                                    cfg.leak_model, cfg.alpha, cfg.beta))
    return points


def resolved(cfg: SimConfig) -> SimConfig:
    """Copy of ``cfg`` with the default leak layout filled in when empty."""
    out = dataclasses.replace(cfg, leak_points=list(cfg.leak_points))
    if not out.leak_points:
        out.leak_points = build_leak_points(out)
    out.validate()
    return out


class _Layout:
    """Precomputed gather indices so a trace is a handful of numpy ops."""

    def __init__(self, cfg: SimConfig):
        sizes = attack_point_sizes(cfg)
        self.names = list(sizes)
        starts = np.cumsum([0] + [sizes[n] for n in self.names])
        self.offset = dict(zip(self.names, starts[:-1].tolist()))
        self.width = int(starts[-1])
        pos, src, kind, shift, alpha = [], [], [], [], []
        beta_at = np.zeros(cfg.trace_length)
        beta_set = np.zeros(cfg.trace_length, dtype=bool)
        kind_code = {"bits": 0, "hw": 1, "value": 2}
        for lp in cfg.leak_points:
            s = self.offset[lp.attack_point] + lp.byte_index
            for j in range(lp.footprint):
                pos.append(lp.time_offset + j)
                src.append(s)
                kind.append(kind_code[lp.model])
                shift.append(7 - j)
                alpha.append(lp.alpha)
                beta_at[lp.time_offset + j] = lp.beta
                beta_set[lp.time_offset + j] = True
        self.pos = np.array(pos, dtype=np.intp)
        self.src = np.array(src, dtype=np.intp)
        self.kind = np.array(kind, dtype=np.int8)
        self.shift = np.array(shift, dtype=np.uint8)
        self.alpha = np.array(alpha)
        self.baseline = np.where(beta_set, beta_at, cfg.beta)

    def signal(self, flat: np.ndarray) -> np.ndarray:
        vals = flat[self.src]
        f = np.where(self.kind == 0, (vals >> self.shift) & 1,
                     np.where(self.kind == 1, _POPCOUNT[vals], vals / 255.0))
        return self.alpha * f


def _flat_labels(byte_views: dict[str, bytes], layout: _Layout) -> np.ndarray:
    flat = np.zeros(layout.width, dtype=np.int64)
    for name in layout.names:
        if name in byte_views:
            v = np.frombuffer(bytes(byte_views[name]), dtype=np.uint8)
            flat[layout.offset[name]:layout.offset[name] + len(v)] = v
    return flat


def synth_trace(byte_views: dict[str, bytes], cfg: SimConfig, rng: np.random.Generator,
                _layout: _Layout | None = None) -> np.ndarray:
    """One float32 trace for the given labelled byte values."""
    layout = _layout or _Layout(cfg)
    L = cfg.trace_length
    shift = int(rng.integers(0, cfg.jitter_max + 1)) if cfg.jitter_max else 0
    trace = layout.baseline.copy()
    if cfg.noise_sigma:
        trace += rng.normal(0.0, cfg.noise_sigma, L)
    if len(layout.pos):
        np.add.at(trace, layout.pos, layout.signal(_flat_labels(byte_views, layout)))
    if shift:
        trace = np.concatenate([np.zeros(shift), trace[:L - shift]])
    return trace.astype(np.float32)


@dataclass
class TraceExample:
    trace: np.ndarray
    labels: dict[str, np.ndarray]


# --- example generation ----------------------------------------------------

def _example_rng(seed: int, split: str, index: int, attempt: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(SPLITS.index(split), index, attempt))
    return np.random.Generator(np.random.PCG64(ss))


def _sample_values(cfg: SimConfig, n: int, rng: np.random.Generator):
    """Returns (secret key as bytes, byte views of every attack point)."""
    if cfg.scheme == AES_SCHEME:
        st = masking.sample_aes(rng, shuffle=cfg.shuffle)
        x = st.pt[st.perm] ^ st.key[st.perm]
        views = {"k": st.key.tobytes(), "pt": st.pt.tobytes(), "rm": bytes([st.r_m]),
                 "rout": bytes([st.r_out]), "perm": st.perm.astype(np.uint8).tobytes(),
                 "c": st.c.tobytes(), "sbox": masking.SBOX[x].tobytes()}
        return views["k"], views
    t = masking.sample_ecc(cfg.scheme, cfg.scalar_bytes, n, rng)
    views = t.byte_views
    return views["k"], views


def default_counts(total: int) -> dict[str, int]:
    """87.5 / 6.25 / 6.25 percent train / test / holdout."""
    small = int(total * 0.0625)
    return {"train": total - 2 * small, "test": small, "holdout": small}


def _write_shard(path: Path, traces: np.ndarray, labels: list[np.ndarray]) -> None:
    n, L = traces.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SHARD_MAGIC, FORMAT_VERSION, L, n))
        for i in range(n):
            rec = traces[i].astype("<f4").tobytes() + b"".join(lab[i].tobytes() for lab in labels)
            fh.write(rec)
            fh.write(struct.pack("<I", zlib.crc32(rec)))


def write_shard(path, traces: np.ndarray, labels: dict[str, np.ndarray],
                order: Sequence[str]) -> None:
    try:
        _write_shard(Path(path), np.asarray(traces, dtype=np.float32),
                     [np.asarray(labels[name], dtype=np.uint8) for name in order])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def gen_dataset(cfg: SimConfig, counts: dict[str, int], out_dir, shard_size: int = 1024,
                name: str | None = None) -> dict:
    """Generate every split, write shards and ``manifest.json``; return the manifest."""
    cfg = resolved(cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    n = cfg.modulus_value()
    layout = _Layout(cfg)
    sizes = attack_point_sizes(cfg)
    order = list(sizes)
    seen: dict[bytes, str] = {}
    manifest_splits = {}
    for split in SPLITS:
        count = int(counts.get(split, 0))
        shards = []
        for s_idx, start in enumerate(range(0, count, shard_size)):
            stop = min(start + shard_size, count)
            traces = np.zeros((stop - start, cfg.trace_length), dtype=np.float32)
            labels = {nm: np.zeros((stop - start, sizes[nm]), dtype=np.uint8) for nm in order}
            for i in range(start, stop):
                attempt = 0
                while True:
                    rng = _example_rng(cfg.seed, split, i, attempt)
                    key, views = _sample_values(cfg, n, rng)
                    owner = seen.get(key)
                    if owner is None or owner == split:
                        break
                    attempt += 1
                seen[key] = split
                traces[i - start] = synth_trace(views, cfg, rng, layout)
                for nm in order:
                    labels[nm][i - start] = np.frombuffer(views[nm], dtype=np.uint8)
            fname = f"{split}-{s_idx:05d}.shard"
            write_shard(out / fname, traces, labels, order)
            shards.append({"file": fname, "records": stop - start})
        manifest_splits[split] = {"count": count, "shards": shards}
    _check_disjoint(out, order, manifest_splits, cfg)
    manifest = {
        "name": name or out.name,
        "scheme": cfg.scheme,
        "format_version": FORMAT_VERSION,
        "trace_length": cfg.trace_length,
        "sample_encoding": "f32le",
        "label_byte_order": "big-endian (byte 0 is the most significant byte)",
        "attack_points": sizes,
        "key_attack_point": "k",
        "key_disjoint_splits": True,
        "modulus": hex(n) if n else None,
        "container": "forge GPDS shards; not the original capture container",
        "splits": manifest_splits,
        "sim_config": cfg.to_json(),
    }
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def _check_disjoint(out: Path, order, splits, cfg) -> None:
    keysets = {}
    kidx = order.index("k")
    for split, info in splits.items():
        keys = set()
        for sh in info["shards"]:
            for ex in _iter_shard(out / sh["file"], cfg.trace_length,
                                  [attack_point_sizes(cfg)[n] for n in order]):
                keys.add(ex[1][kidx].tobytes())
        keysets[split] = keys
    names = list(keysets)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            if keysets[a] & keysets[b]:
                raise DuplicateKeyAcrossSplits(f"{a} and {b} share keys")


# --- reading ---------------------------------------------------------------

def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise UnknownVersion(f"dataset format {manifest.get('format_version')!r} not supported")
    return manifest


def _iter_shard(path: Path, trace_length: int, label_sizes: list[int]):
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(data) < _HEADER.size:
        raise CorruptShard(f"{path.name}: truncated header")
    magic, version, L, count = _HEADER.unpack_from(data)
    if magic != SHARD_MAGIC:
        raise CorruptShard(f"{path.name}: bad magic")
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"{path.name}: shard version {version}")
    if L != trace_length:
        raise CorruptShard(f"{path.name}: trace length {L} != {trace_length}")
    rec_len = 4 * L + sum(label_sizes)
    if len(data) != _HEADER.size + count * (rec_len + 4):
        raise CorruptShard(f"{path.name}: expected {count} records, size mismatch")
    pos = _HEADER.size
    for _ in range(count):
        rec = data[pos:pos + rec_len]
        (crc,) = struct.unpack_from("<I", data, pos + rec_len)
        if zlib.crc32(rec) != crc:
            raise CorruptShard(f"{path.name}: CRC mismatch")
        trace = np.frombuffer(rec, dtype="<f4", count=L)
        labels, o = [], 4 * L
        for n in label_sizes:
            labels.append(np.frombuffer(rec, dtype=np.uint8, count=n, offset=o))
            o += n
        yield trace, labels
        pos += rec_len + 4


def read_split(dataset_dir, split: str) -> Iterator[TraceExample]:
    """Yield the examples of one split in stored order."""
    manifest = read_manifest(dataset_dir)
    names = list(manifest["attack_points"])
    sizes = [manifest["attack_points"][n] for n in names]
    for sh in manifest["splits"][split]["shards"]:
        for trace, labels in _iter_shard(Path(dataset_dir) / sh["file"],
                                         manifest["trace_length"], sizes):
            yield TraceExample(trace, dict(zip(names, labels)))


def load_split(dataset_dir, split: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Whole split in memory: traces (N, L) float32 and labels name -> (N, bytes) uint8."""
    manifest = read_manifest(dataset_dir)
    names = list(manifest["attack_points"])
    sizes = [manifest["attack_points"][n] for n in names]
    count = manifest["splits"][split]["count"]
    L = manifest["trace_length"]
    traces = np.zeros((count, L), dtype=np.float32)
    labels = {n: np.zeros((count, s), dtype=np.uint8) for n, s in zip(names, sizes)}
    i = 0
    for sh in manifest["splits"][split]["shards"]:
        for trace, labs in _iter_shard(Path(dataset_dir) / sh["file"], L, sizes):
            if i >= count:
                raise CorruptShard("more records than the manifest declares")
            traces[i] = trace
            for n, lab in zip(names, labs):
                labels[n][i] = lab
            i += 1
    if i != count:
        raise CorruptShard(f"split {split}: {i} records, manifest says {count}")
    return traces, labels


def file_digests(dataset_dir) -> dict[str, str]:
    """SHA-256 of every file in a dataset directory, for quick equality checks.

    A whole-file CRC32 is useless here: each record ends with its own CRC, and
    CRC32 over a message followed by its CRC is a constant, so shards of equal
    size would all collide.
    """
    out = {}
    for p in sorted(Path(dataset_dir).iterdir()):
        if p.is_file():
            out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
