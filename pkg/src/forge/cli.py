"""``forge`` command line.

Exit codes: 0 success, 1 the attack ran but failed, 2 bad usage or config,
3 file-system or data-format problem. ``FORGE_THREADS`` caps the number of
BLAS/OpenMP worker threads.
"""

from __future__ import annotations

import os
import sys

_threads = os.environ.get("FORGE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import copy  # noqa: E402
import itertools  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import random  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from forge import errors  # noqa: E402

EXIT_OK, EXIT_ATTACK_FAILED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("forge")


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise errors.IoFailure(str(exc)) from exc


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise errors.IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            elif part in node:
                node = node[part]
            else:
                raise UsageError(f"override names unknown key {key!r}")
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return cfg


# --- dataset -----------------------------------------------------------------

def cmd_dataset_gen(args) -> int:
    from forge import leakage
    if args.traces < 1:
        raise UsageError("--traces must be >= 1")
    cfg = leakage.SimConfig(
        scheme=args.scheme, trace_length=args.trace_len, noise_sigma=args.sigma,
        jitter_max=args.jitter, scalar_bytes=args.scalar_bytes, seed=args.seed,
        leak_model=args.leak, alpha=args.alpha, beta=args.beta,
        leak_values=args.leak_values.split(",") if args.leak_values else None,
        stride_gap=args.stride_gap, repeats=args.repeats, modulus=args.modulus,
        shuffle=not args.no_shuffle)
    if args.counts:
        parts = [int(x) for x in args.counts.split(",")]
        if len(parts) != 3:
            raise UsageError("--counts takes train,test,holdout")
        counts = dict(zip(leakage.SPLITS, parts))
    else:
        counts = leakage.default_counts(args.traces)
    manifest = leakage.gen_dataset(cfg, counts, args.out, shard_size=args.shard_size)
    digests = leakage.file_digests(args.out)
    _emit({"out": str(args.out), "scheme": manifest["scheme"],
           "trace_length": manifest["trace_length"],
           "counts": {k: v["count"] for k, v in manifest["splits"].items()},
           "attack_points": manifest["attack_points"],
           "leak_points": len(manifest["sim_config"]["leak_points"]),
           "sha256": {k: v[:16] for k, v in digests.items()}})
    return EXIT_OK


# --- training ------------------------------------------------------------------

def _load_model_config(path, overrides=None):
    from forge import gpam
    raw = apply_overrides(_read_json(path), overrides)
    return gpam.ModelConfig.from_json(raw)


def cmd_train(args) -> int:
    from forge import training
    cfg = _load_model_config(args.config, args.set)
    run = training.train(cfg, args.dataset, seed=args.seed, fraction=args.fraction,
                         eval_split=args.eval_split, eval_limit=args.eval_limit,
                         checkpoint=args.out)
    hist_path = args.history or str(args.out) + ".history.json"
    training.write_history(run, hist_path)
    print(f"trained on {run.train_count} examples (fraction {args.fraction}); "
          f"checkpoint {args.out}; history {hist_path}")
    if run.history:
        last = run.history[-1]
        _emit({k: v for k, v in last.items() if k in ("epoch", "train", args.eval_split)})
    return EXIT_OK


# --- eval --------------------------------------------------------------------------

def _aes_heads(cfg):
    """Names of the c / rm / rout heads if the model has all three."""
    found = {}
    for h in cfg.heads:
        if h.attack_point in ("c", "rm", "rout") and h.attack_point not in found:
            found[h.attack_point] = h.name
    return found if len(found) == 3 else None


def _ge_counts(text: str, pool: int) -> list[int]:
    counts = sorted({int(x) for x in text.split(",") if x.strip()})
    return [c for c in counts if c <= pool]


def aes_ge_report(cfg, probs, labels, byte: int, counts, n_samples: int, seed: int,
                  shuffled: bool = False) -> dict:
    """Key-byte GE from share predictions, on the fixed-key view of the split."""
    from forge import metrics
    heads = _aes_heads(cfg)
    if heads is None:
        raise UsageError("model needs heads for c, rm and rout to score AES keys")
    c_head = next(h for h in cfg.heads if h.name == heads["c"])
    if c_head.byte_index != byte and not shuffled:
        log.warning("c head predicts byte %d, GE requested for key byte %d",
                    c_head.byte_index, byte)
    pt, key = metrics.fixed_key_view(labels["pt"][:, byte], labels["k"][:, byte])
    key_probs = metrics.aes_key_probs(probs[heads["c"]], probs[heads["rm"]],
                                      probs[heads["rout"]], pt)
    counts = _ge_counts(counts, len(key_probs)) if isinstance(counts, str) else counts
    ge = metrics.guessing_entropy(key_probs, 0, counts, n_samples,
                                  rng=np.random.default_rng(seed))
    return {"byte": byte, "pool": int(len(key_probs)), "samples": n_samples,
            "points": [{"traces": int(c), "ge": float(g)} for c, g in zip(counts, ge)]}


def _predict(args):
    from forge import gpam, leakage
    cfg, params, meta = gpam.load_checkpoint(args.model)
    manifest = leakage.read_manifest(args.dataset)
    if manifest["trace_length"] != cfg.trace_length:
        raise errors.ShapeMismatch(
            f"dataset trace length {manifest['trace_length']} != model {cfg.trace_length}")
    X, Y = leakage.load_split(args.dataset, args.split)
    if args.limit:
        X, Y = X[:args.limit], {k: v[:args.limit] for k, v in Y.items()}
    probs = gpam.predict(X, cfg, params)
    return cfg, meta, manifest, probs, Y


def cmd_eval(args) -> int:
    from forge import gpam, metrics
    cfg, meta, manifest, probs, Y = _predict(args)
    targets = gpam.head_targets(cfg, Y)
    heads = {}
    for h in cfg.heads:
        summary = metrics.metrics_summary(probs[h.name], targets[h.name])
        conf = metrics.confidence(probs[h.name])
        summary["confidence_histogram"] = metrics.confidence_histogram(np.atleast_1d(conf), 32)
        heads[h.name] = summary
    report = {"dataset": str(args.dataset), "split": args.split, "model": str(args.model),
              "model_config": cfg.to_json(), "provenance": meta.get("provenance"),
              "heads": heads}
    if manifest["scheme"] == "ascadv2-sim" and _aes_heads(cfg):
        report["ge"] = aes_ge_report(cfg, probs, Y, args.byte, args.ge_counts,
                                     args.ge_samples, args.seed,
                                     manifest["sim_config"].get("shuffle", True))
    if args.predictions_out:
        _write_json(args.predictions_out, {
            "heads": {h.name: {"attack_point": h.attack_point, "byte_index": h.byte_index,
                               "probs": probs[h.name].tolist(),
                               "labels": targets[h.name].tolist()} for h in cfg.heads}})
    if args.out:
        _write_json(args.out, report)
    _emit({"heads": {k: {m: v[m] for m in ("accuracy", "mean_rank", "max_rank")}
                     for k, v in heads.items()}, **({"ge": report["ge"]} if "ge" in report else {})})
    return EXIT_OK


# --- attacks -----------------------------------------------------------------

def load_ecdsa_predictions(path):
    """Records, public key (or None) and the raw file header from a predictions file."""
    from forge import lattice
    from forge.ec import Point
    raw = _read_json(path)
    try:
        records = [lattice.SignatureRecord(int(r["h"], 16), int(r["r"], 16), int(r["s"], 16),
                                           np.asarray(r["probs"], dtype=np.float64))
                   for r in raw["records"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: malformed predictions ({exc})") from exc
    for rec in records:
        if rec.probs.shape != (256,):
            raise UsageError(f"{path}: each record needs 256 probabilities")
    pub = raw.get("public_key")
    Q = Point(int(pub["x"], 16), int(pub["y"], 16)) if pub else None
    return records, Q, raw


def cmd_attack_ecdsa(args) -> int:
    from forge import lattice
    records, Q, raw = load_ecdsa_predictions(args.predictions)
    curve_name = args.curve or raw.get("curve")
    curve, n = None, None
    if curve_name:
        curve = _load_curve(curve_name)
    elif raw.get("modulus"):
        n = int(raw["modulus"], 16)
    else:
        raise UsageError("no curve given and the predictions file names none")
    res = lattice.attack_ecdsa(records, curve, m=args.m, weight_exp=args.weight_exp,
                               max_conf=args.max_conf, max_retries=args.max_retries,
                               seed=args.seed, public_key=Q, n=n,
                               reduction=args.reduction)
    out = {"curve": curve.name if curve else None,
           "modulus": hex(curve.n if curve else n), "records": len(records), "m": args.m,
           "weight_exp": args.weight_exp, "max_conf": args.max_conf,
           "reduction": args.reduction, **res.to_json()}
    if args.out:
        _write_json(args.out, out)
    if res.success:
        print(f"recovered key {hex(res.key)} after {res.retries} attempt(s)")
    else:
        print(f"no key after {res.retries} attempts")
    return EXIT_OK if res.success else EXIT_ATTACK_FAILED


def _load_curve(spec):
    from forge.ec import load_curve
    try:
        return load_curve(spec)
    except OSError as exc:
        raise errors.IoFailure(str(exc)) from exc


def cmd_attack_ecdsa_sim(args) -> int:
    """Write a predictions file for simulated signatures with a chosen MSB accuracy.

    With ``--bits`` the file holds bare HNP relations over a random prime
    modulus instead of real signatures on a curve.
    """
    from forge import lattice
    from forge.ec import public_key
    rng = random.Random(args.seed)
    nrng = np.random.default_rng(args.seed)
    if args.bits:
        if args.bits % 8:
            raise UsageError("--bits must be a multiple of 8")
        curve, n = None, lattice.random_prime(args.bits, rng)
    else:
        curve = _load_curve(args.curve)
        n = curve.n
    if n.bit_length() % 8:
        raise UsageError(f"group order has {n.bit_length()} bits; top-byte leakage "
                         "needs a multiple of 8")
    d = int(args.key, 16) if args.key else rng.randrange(2, n - 1)
    sigs = lattice.simulate_signatures(n, d, args.records, rng, curve=curve)
    recs = []
    for sig, k in sigs:
        top = lattice.top_byte(k, n)
        recs.append({"h": hex(sig.h), "r": hex(sig.r), "s": hex(sig.s),
                     "probs": simulated_top_byte_probs(top, args.accuracy, nrng).tolist()})
    doc = {"curve": curve.name if curve else None, "modulus": hex(n),
           "planted_key": hex(d), "records": recs}
    if curve is not None:
        Q = public_key(d, curve)
        doc["public_key"] = {"x": hex(Q.x), "y": hex(Q.y)}
    _write_json(args.out, doc)
    print(f"wrote {len(recs)} records to {args.out}")
    return EXIT_OK


def simulated_top_byte_probs(top: int, accuracy: float, rng: np.random.Generator) -> np.ndarray:
    """Top-byte probabilities whose 4-bit aggregate is right with prob ``accuracy``.

    Correct guesses get a confident peak; wrong ones a flat, low-margin profile.
    """
    p = np.full(256, 1e-4)
    if rng.random() < accuracy:
        p[top] += 1.0
    else:
        wrong = (top >> 4 ^ int(rng.integers(1, 16))) << 4 | int(rng.integers(0, 16))
        p[wrong] += 0.05
        p[top] += 0.04
    return p / p.sum()


def cmd_attack_aes_ge(args) -> int:
    cfg, meta, manifest, probs, Y = _predict(args)
    if manifest["scheme"] != "ascadv2-sim":
        raise UsageError("aes-ge needs an ascadv2-sim dataset")
    report = aes_ge_report(cfg, probs, Y, args.byte, args.counts, args.samples, args.seed,
                           manifest["sim_config"].get("shuffle", True))
    report.update({"dataset": str(args.dataset), "split": args.split, "model": str(args.model)})
    if args.out:
        _write_json(args.out, report)
    _emit(report["points"])
    final = report["points"][-1]["ge"] if report["points"] else float("inf")
    return EXIT_OK if final < args.success_ge else EXIT_ATTACK_FAILED


# --- gradcheck / sweep ---------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from forge.ad import suite
    worst = suite.run_suite(range(args.seed, args.seed + args.seeds), args.eps,
                            max_coords=args.max_coords)
    bad = False
    for name, err in sorted(worst.items()):
        ok = err < args.tol
        bad |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:16s} {err:.3e}")
    return EXIT_ATTACK_FAILED if bad else EXIT_OK


SWEEP_KEYS = ("batch_size", "steps_per_epoch", "epochs", "target_lr", "merge_filter_1",
              "merge_filter_2", "patch_size", "model_dim")


def cmd_sweep(args) -> int:
    from forge import gpam, training
    if args.grid.lstrip().startswith(("{", "[")):
        try:
            grid = json.loads(args.grid)
        except json.JSONDecodeError as exc:
            raise UsageError(f"bad inline grid: {exc}") from exc
    else:
        grid = _read_json(args.grid)
    if not isinstance(grid, dict) or not grid:
        raise UsageError("grid must map config keys to lists of values")
    base = apply_overrides(_read_json(args.config), args.set)
    for key in grid:
        if key.split(".")[0] not in gpam.ModelConfig.__dataclass_fields__:
            raise UsageError(f"grid names unknown key {key!r}")
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, values)]
        cfg = gpam.ModelConfig.from_json(apply_overrides(base, overrides))
        epochs = max(1, round(cfg.epochs * args.epoch_fraction))
        run = training.train(cfg, args.dataset, seed=args.seed, epochs=epochs,
                             eval_split="test", eval_limit=args.eval_limit)
        head = args.head or cfg.heads[0].name
        acc = run.history[-1]["test"][head]["accuracy"] if run.history else float("nan")
        rows.append({**dict(zip(keys, values)), "epochs_run": epochs, "head": head,
                     "test_accuracy": acc})
    rows.sort(key=lambda r: -r["test_accuracy"])
    print("\t".join(["rank"] + keys + ["epochs_run", "test_accuracy"]))
    for i, r in enumerate(rows, 1):
        print("\t".join([str(i)] + [json.dumps(r[k]) for k in keys]
                        + [str(r["epochs_run"]), f"{r['test_accuracy']:.4f}"]))
    if args.out:
        _write_json(args.out, {"grid": grid, "base_config": base, "seed": args.seed,
                               "epoch_fraction": args.epoch_fraction, "rows": rows})
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset tools").add_subparsers(dest="action",
                                                                      required=True)
    g = ds.add_parser("gen", help="generate a simulated trace dataset")
    g.add_argument("--scheme", required=True,
                   choices=["cm0", "cm1", "cm2", "cm3", "ascadv2-sim"])
    g.add_argument("--traces", type=int, required=True,
                   help="total examples, split 87.5/6.25/6.25 unless --counts is given")
    g.add_argument("--trace-len", type=int, default=4096)
    g.add_argument("--leak", choices=["bits", "hw", "value"], default="bits")
    g.add_argument("--sigma", type=float, default=0.5, help="noise std (units of alpha)")
    g.add_argument("--jitter", type=int, default=0, help="max uniform right shift")
    g.add_argument("--scalar-bytes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--counts", help="explicit train,test,holdout counts")
    g.add_argument("--leak-values", help="comma list of leaked values, e.g. km,r or c[0],rm")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--beta", type=float, default=0.0)
    g.add_argument("--stride-gap", type=int, default=4)
    g.add_argument("--repeats", type=int, help="leak rounds per trace (default: as many as fit)")
    g.add_argument("--modulus", default="auto",
                   help="mask modulus: auto, pow2, prime or an integer")
    g.add_argument("--no-shuffle", action="store_true", help="AES: identity permutation")
    g.add_argument("--shard-size", type=int, default=1024)
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", required=True, help="model config (JSON)")
    t.add_argument("--fraction", type=float, default=1.0, help="share of train split used")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history JSON (default: <out>.history.json)")
    t.add_argument("--eval-split", default="test")
    t.add_argument("--eval-limit", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on a split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", default="holdout")
    e.add_argument("--limit", type=int)
    e.add_argument("--out", help="metrics report JSON")
    e.add_argument("--predictions-out", help="per-example probabilities JSON")
    e.add_argument("--byte", type=int, default=0, help="AES key byte for GE")
    e.add_argument("--ge-counts", default="1,2,5,10,20,50,100,200")
    e.add_argument("--ge-samples", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack", help="key recovery").add_subparsers(dest="action",
                                                                     required=True)
    ae = a.add_parser("ecdsa", help="lattice attack from nonce top-byte predictions")
    ae.add_argument("--predictions", required=True)
    ae.add_argument("--curve", help="toy17, p256 or a curve config file "
                    "(default: the curve named in the predictions file)")
    ae.add_argument("--m", type=int, default=80, help="signatures per lattice")
    ae.add_argument("--weight-exp", type=float, default=1.0)
    ae.add_argument("--max-conf", type=float)
    ae.add_argument("--max-retries", type=int, default=100)
    ae.add_argument("--reduction", choices=["auto", "lll", "bkz"], default="auto",
                    help="auto: built-in LLL, then BKZ if fpylll is installed")
    ae.add_argument("--seed", type=int, default=0)
    ae.add_argument("--out", help="result and attack log JSON")
    ae.set_defaults(func=cmd_attack_ecdsa)

    sim = a.add_parser("ecdsa-sim", help="write a predictions file for simulated signatures")
    sim.add_argument("--curve", default="p256")
    sim.add_argument("--bits", type=int, help="bare HNP over a random prime of this size")
    sim.add_argument("--records", type=int, default=100)
    sim.add_argument("--accuracy", type=float, default=1.0, help="top-nibble accuracy")
    sim.add_argument("--key", help="private key in hex (default: random)")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_attack_ecdsa_sim)

    ag = a.add_parser("aes-ge", help="guessing entropy of one AES key byte")
    ag.add_argument("--dataset", required=True)
    ag.add_argument("--model", required=True)
    ag.add_argument("--split", default="holdout")
    ag.add_argument("--limit", type=int)
    ag.add_argument("--byte", type=int, default=0)
    ag.add_argument("--counts", default="1,2,5,10,20,50,100,200")
    ag.add_argument("--samples", type=int, default=10_000)
    ag.add_argument("--success-ge", type=float, default=1.0,
                    help="exit 1 unless GE at the largest count is below this")
    ag.add_argument("--seed", type=int, default=0)
    ag.add_argument("--out")
    ag.set_defaults(func=cmd_attack_aes_ge)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    gc.add_argument("--seeds", type=int, default=10)
    gc.add_argument("--seed", type=int, default=0, help="first seed")
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--max-coords", type=int, default=10,
                    help="model coordinates checked per tensor")
    gc.set_defaults(func=cmd_gradcheck)

    sw = sub.add_parser("sweep", help="grid search with short training runs")
    sw.add_argument("--dataset", required=True)
    sw.add_argument("--config", required=True, help="base model config")
    sw.add_argument("--grid", required=True, help="JSON file or inline JSON: key -> list of values")
    sw.add_argument("--epoch-fraction", type=float, default=0.2)
    sw.add_argument("--head", help="head ranked by (default: first head)")
    sw.add_argument("--eval-limit", type=int)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--set", action="append", metavar="KEY=VALUE")
    sw.add_argument("--out", help="table as JSON")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (errors.IoFailure, errors.CorruptShard, errors.UnknownVersion, OSError) as exc:
        print(f"forge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, errors.ForgeError, ValueError, KeyError, ImportError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"forge: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
