"""Command-line entry point: ``flipequiv <command> [options]``.

Exit status: 0 success, 1 usage or input error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from flipequiv import __version__
from flipequiv import data as D
from flipequiv import experiment as E
from flipequiv import kernels
from flipequiv import matching as MT
from flipequiv import merge as G
from flipequiv import model as M
from flipequiv import symmetry as S
from flipequiv import tensor as T
from flipequiv import theory as TH

log = logging.getLogger("flipequiv")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _on_off_auto(value: str):
    v = value.lower()
    if v == "auto":
        return None
    return _on_off(v)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def manifest(args, inputs=(), outputs=()) -> dict:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "rng": T.RNG_ALGORITHM,
        "kernel_backend": kernels.BACKEND,
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "outputs": [str(p) for p in outputs if p is not None],
    }


def _write_manifest(path, man) -> None:
    Path(f"{path}.manifest.json").write_text(_dumps(man) + "\n")


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(_dumps(payload))
    elif text is not None:
        print(text)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    per_class = args.per_class if args.per_class is not None else (1500 if args.split == "train" else 500)
    spec = D.DataSpec(
        classes=args.classes,
        per_class=per_class,
        channels=args.channels,
        height=args.height,
        width=args.width,
        noise_sigma=args.noise,
        kind=args.kind,
    )
    seed = E.sub_seed(args.seed, f"data/{args.split}")
    outputs = [args.out]
    if args.kind == "cooccurrence":
        if args.classes > len(D.COOCCUR_ORDER):
            spec.classes = len(D.COOCCUR_ORDER)
        ds, probes = D.gen_cooccurrence(spec, seed)
        probe_path = f"{args.out}.probes.eqds"
        D.save_dataset(probes, probe_path)
        outputs.append(probe_path)
    else:
        ds = D.gen_flip_invariant(spec, seed)
    D.save_dataset(ds, args.out)
    man = manifest(args, outputs=outputs)
    man["dataset"] = ds.spec
    _write_manifest(args.out, man)
    _emit(args, {"out": args.out, "samples": len(ds), "spec": asdict(spec), "sha256": _sha256(args.out)}, f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_set = D.load_dataset(args.data)
    val_set = D.load_dataset(args.val) if args.val else None
    net = E.build_model(args.model, args.seed, train_set.images.shape[1:], train_set.num_classes, width=args.width)
    cfg = E.train_config(
        args.model,
        args.seed,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        inv_loss_weight=args.inv_weight,
        inv_loss_start_fraction=args.inv_start,
        hflip_aug_prob=args.aug_prob,
    )
    net, metrics = M.train(net, train_set, cfg, val_set)
    net.meta.update({"model_kind": args.model, "seed": args.seed, "train_config": asdict(cfg), "inv_loss_batch": "augmented"})
    M.save_checkpoint(net, args.out)
    _write_manifest(args.out, manifest(args, [args.data, args.val], [args.out]))
    payload = {"out": args.out, "model": args.model, "config": asdict(cfg), "metrics": asdict(metrics)}
    _emit(args, payload, f"{args.model}: accuracy {metrics.accuracy:.4f}, invariance error {metrics.invariance_error:.4g} -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = M.load_checkpoint(args.ckpt)
    ds = D.load_dataset(args.data)
    count = min(args.samples, len(ds))
    inv, skipped = M.invariance_error(net, ds, count, return_skipped=True)
    payload = {
        "accuracy": M.accuracy(net, ds),
        "invariance_error": inv,
        "invariance_skipped": skipped,
        "samples": count,
        "constraint_residuals": net.constraint.residuals(net) if net.constraint is not None else None,
        "model_kind": net.meta.get("model_kind"),
    }
    _emit(args, payload, f"accuracy {payload['accuracy']:.4f}  invariance error {inv:.4g}")
    return EXIT_OK


def cmd_match(args) -> int:
    net_a = M.load_checkpoint(args.ckpt_a)
    net_b = M.load_checkpoint(args.ckpt_b) if args.ckpt_b else S.flip_network(net_a)
    ds = D.load_dataset(args.data)
    res = MT.match_networks(net_a, net_b, ds, max_samples=args.samples)
    res.meta["partner"] = args.ckpt_b or "flipped twin"
    payload = res.to_dict()
    if args.out:
        Path(args.out).write_text(res.to_json() + "\n")
        _write_manifest(args.out, manifest(args, [args.ckpt_a, args.ckpt_b, args.data], [args.out]))
    _emit(args, payload, "order histogram: " + json.dumps(payload["order_histogram"]))
    return EXIT_OK


def cmd_merge(args) -> int:
    net_a = M.load_checkpoint(args.ckpt_a)
    net_b = M.load_checkpoint(args.ckpt_b) if args.ckpt_b else S.flip_network(net_a)
    ds = D.load_dataset(args.data)
    if args.match:
        net_b = G.apply_perms(net_b, MT.match_networks(net_a, net_b, ds, max_samples=args.samples).perms)
    merged = G.interpolate(net_a, net_b, args.t)
    reset = merged.has_batchnorm() if args.bn_reset is None else (args.bn_reset and merged.has_batchnorm())
    if reset:
        merged = M.bn_reset_stats(merged, ds)
    if args.repair:
        merged = G.repair(merged, net_a, net_b, ds)
    merged.meta = {"merged_from": [args.ckpt_a, args.ckpt_b or "flipped twin"], "t": args.t, "repair": args.repair, "bn_reset": reset}
    M.save_checkpoint(merged, args.out)
    _write_manifest(args.out, manifest(args, [args.ckpt_a, args.ckpt_b, args.data], [args.out]))
    _emit(args, {"out": args.out, "accuracy": M.accuracy(merged, ds)}, f"merged net -> {args.out}")
    return EXIT_OK


def _barrier_outputs(args, report, norepair, match, net, ds, kind):
    payload = {"barrier": report.to_dict(), "barrier_norepair": norepair.to_dict()}
    if match is not None:
        payload["match"] = match.to_dict()
        if args.emit_match:
            Path(args.emit_match).write_text(match.to_json() + "\n")
    if args.out:
        Path(args.out).write_text(_dumps(payload) + "\n")
    if args.results:
        G.append_results_csv(
            args.results,
            {
                "run_id": args.run_id or Path(args.ckpt if kind == "gcnn" else args.ckpt_a).stem,
                "model_kind": net.meta.get("model_kind", "unknown"),
                "seed": net.meta.get("seed", ""),
                "accuracy": report.zeta_a,
                "invariance_error": M.invariance_error(net, ds, min(1024, len(ds))),
                "gcnn_barrier": report.relative,
                "gcnn_barrier_norepair": norepair.relative,
                "absolute_barrier": report.absolute,
            },
        )
    for path in (args.out, args.emit_match):
        if path:
            _write_manifest(path, manifest(args, [getattr(args, "ckpt", None), getattr(args, "ckpt_a", None), getattr(args, "ckpt_b", None), args.data], [path]))
    rel = "undefined" if report.relative is None else f"{report.relative:.4g}"
    _emit(args, payload, f"barrier {rel} (absolute {report.absolute:.4g}; accuracies {report.zeta_a:.4f} / {report.zeta_b:.4f} / mid {report.zeta_mid:.4f})")


def cmd_gcnn_barrier(args) -> int:
    net = M.load_checkpoint(args.ckpt)
    ds = D.load_dataset(args.data)
    ev = D.load_dataset(args.eval_data) if args.eval_data else ds
    norepair, match = G.gcnn_barrier(net, ds, repair=False, bn_reset=args.bn_reset, eval_set=ev, max_samples=args.samples)
    report = norepair
    if args.repair:
        report, _ = G.gcnn_barrier(net, ds, repair=True, bn_reset=args.bn_reset, eval_set=ev, perms=match.perms)
    _barrier_outputs(args, report, norepair, match, net, ds, "gcnn")
    return EXIT_OK


def cmd_two_net_barrier(args) -> int:
    net_a, net_b = M.load_checkpoint(args.ckpt_a), M.load_checkpoint(args.ckpt_b)
    ds = D.load_dataset(args.data)
    ev = D.load_dataset(args.eval_data) if args.eval_data else ds
    norepair, match = G.two_net_barrier(net_a, net_b, ds, False, args.bn_reset, ev, args.match, args.samples)
    report = norepair
    if args.repair:
        aligned = G.apply_perms(net_b, match.perms) if match is not None else net_b
        report, _ = G.two_net_barrier(net_a, aligned, ds, True, args.bn_reset, ev, match=False)
    _barrier_outputs(args, report, norepair, match, net_a, ds, "two-net")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = TH.run_battery(args.suite, args.trials, args.seed)
    report["version"] = __version__
    if args.out:
        Path(args.out).write_text(_dumps(report) + "\n")
        _write_manifest(args.out, manifest(args, outputs=[args.out]))
    lines = [f"{e['suite']:<10} {'PASS' if e['pass'] else 'FAIL'}  checks={e['checks']}" for e in report["suites"]]
    _emit(args, report, "\n".join(lines))
    return EXIT_OK if report["pass"] else EXIT_VERIFY


def summarize_results(rows) -> dict:
    """Median and interquartile range (linear quantiles) per model kind."""
    metrics = [c for c in G.RESULT_COLUMNS if c not in ("run_id", "model_kind", "seed")]
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["model_kind"], []).append(row)
    out = {}
    for kind in sorted(groups):
        entry = {"count": len(groups[kind])}
        for m in metrics:
            vals = np.array([float(r[m]) for r in groups[kind] if r.get(m) not in ("", None)], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                entry[m] = None
                continue
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            entry[m] = {"median": float(med), "iqr": float(q3 - q1), "n": int(vals.size)}
        out[kind] = entry
    return out


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "model_kind" not in reader.fieldnames:
            raise ValueError(f"{path}: not a results table (missing model_kind column)")
        missing = [c for c in G.RESULT_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = list(reader)
    for i, row in enumerate(rows):
        for c in G.RESULT_COLUMNS[3:]:
            if row[c] not in ("", None):
                try:
                    float(row[c])
                except ValueError:
                    raise ValueError(f"{path}: row {i + 2} column {c} is not numeric: {row[c]!r}") from None
    return rows


def cmd_report(args) -> int:
    summary = {"by_model_kind": summarize_results(read_results_csv(args.results)), "source": str(args.results)}
    if args.out:
        Path(args.out).write_text(_dumps(summary) + "\n")
        _write_manifest(args.out, manifest(args, [args.results], [args.out]))
    print(_dumps(summary))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (sub-seeds are derived by label hashing)")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="flipequiv", description="Flip symmetry analysis for small ReLU CNNs.")
    p.add_argument("--version", action="version", version=f"flipequiv {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset (EQDS)")
    g.add_argument("--out", required=True)
    g.add_argument("--kind", choices=("flip_invariant", "cooccurrence"), default="flip_invariant")
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=None, help="default 1500 (train) / 500 (test)")
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--height", type=int, default=33)
    g.add_argument("--width", type=int, default=33)
    g.add_argument("--noise", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a mini-VGG variant")
    t.add_argument("--data", required=True)
    t.add_argument("--val", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=E.MODEL_KINDS, default="cnn")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--inv-weight", type=float, default=None)
    t.add_argument("--inv-start", type=float, default=None)
    t.add_argument("--aug-prob", type=float, default=None)
    t.add_argument("--width", type=int, default=16, help="channels per conv layer")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy and invariance error of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, default=1024)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("match", parents=[common], help="activation matching (default partner: flipped twin)")
    m.add_argument("--ckpt-a", required=True)
    m.add_argument("--ckpt-b", default=None)
    m.add_argument("--data", required=True)
    m.add_argument("--out", default=None)
    m.add_argument("--samples", type=int, default=1024)
    m.set_defaults(func=cmd_match)

    mg = sub.add_parser("merge", parents=[common], help="interpolate two (aligned) nets")
    mg.add_argument("--ckpt-a", required=True)
    mg.add_argument("--ckpt-b", default=None)
    mg.add_argument("--data", required=True)
    mg.add_argument("--out", required=True)
    mg.add_argument("--t", type=float, default=0.5)
    mg.add_argument("--match", type=_on_off, default=True)
    mg.add_argument("--repair", type=_on_off, default=False)
    mg.add_argument("--bn-reset", type=_on_off_auto, default=None)
    mg.add_argument("--samples", type=int, default=1024)
    mg.set_defaults(func=cmd_merge)

    for name, func, help_ in (
        ("gcnn-barrier", cmd_gcnn_barrier, "barrier between a net and its aligned flipped twin"),
        ("two-net-barrier", cmd_two_net_barrier, "barrier between two nets"),
    ):
        b = sub.add_parser(name, parents=[common], help=help_)
        if name == "gcnn-barrier":
            b.add_argument("--ckpt", required=True)
        else:
            b.add_argument("--ckpt-a", required=True)
            b.add_argument("--ckpt-b", required=True)
            b.add_argument("--match", type=_on_off, default=True)
        b.add_argument("--data", required=True, help="data for matching, BN reset and REPAIR")
        b.add_argument("--eval-data", default=None, help="data for the accuracies (default: --data)")
        b.add_argument("--repair", type=_on_off, default=False)
        b.add_argument("--bn-reset", type=_on_off_auto, default=None, help="on|off|auto (auto: iff BN layers exist)")
        b.add_argument("--emit-match", default=None)
        b.add_argument("--out", default=None)
        b.add_argument("--results", default=None, help="append a row to this CSV table")
        b.add_argument("--run-id", default=None)
        b.add_argument("--samples", type=int, default=1024)
        b.set_defaults(func=func)

    v = sub.add_parser("verify", parents=[common], help="run the theory battery")
    v.add_argument("--suite", choices=TH.SUITES + ("all",), default="all")
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", parents=[common], help="aggregate a results CSV")
    r.add_argument("--results", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, M.CheckpointError, D.DatasetFormatError, T.ShapeError) as exc:
        print(f"flipequiv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
