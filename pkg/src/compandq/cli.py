"""Command-line front end.

One executable, five subcommands: ``train`` runs the optimization loop from a
config file, ``eval`` scores a checkpoint through both the float and the
integer LUT paths and insists they agree, ``gradcheck`` runs the oracle
suite, ``lut`` exports/checks/sizes lookup tables, and ``report`` merges
metrics files into a comparison table.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime
failure.  Every subcommand is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

__all__ = ["main", "entry"]

USAGE_EXIT = 1
VERIFY_EXIT = 2
RUNTIME_EXIT = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="compandq", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", help="key = value config file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--bits", help="weight/activation bits, e.g. 2/2")
    p_train.add_argument("--method",
                         choices=["lcq", "uniform", "lcq-no-lwn", "fp"])
    p_train.add_argument("--dataset", choices=["mnist", "synth"])
    p_train.add_argument("--data-root")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--out")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--init-from",
                         help="checkpoint whose weights seed this run")
    p_train.add_argument("--quiet", action="store_true")

    p_eval = sub.add_parser("eval", help="score a checkpoint (float and LUT)")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", default="mnist",
                        choices=["mnist", "synth"])
    p_eval.add_argument("--data-root")
    p_eval.add_argument("--limit", type=int, default=0,
                        help="cap on evaluated examples (0 = all)")
    p_eval.add_argument("--tolerance", type=float, default=1e-5)
    p_eval.add_argument("--emit-curves",
                        help="directory for companding curve samples")

    p_grad = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    p_grad.add_argument("--samples", type=int, default=2000)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--csv", help="write per-check errors here")

    p_lut = sub.add_parser("lut", help="lookup-table tools")
    lut_sub = p_lut.add_subparsers(dest="lut_command")
    p_size = lut_sub.add_parser("size", help="table memory from bit-widths")
    p_size.add_argument("--bw", type=int, required=True)
    p_size.add_argument("--ba", type=int, required=True)
    p_size.add_argument("--obw", type=int, required=True)
    p_size.add_argument("--oba", type=int, required=True)
    p_check = lut_sub.add_parser("check", help="integer-vs-float equivalence")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument("--csv")
    p_export = lut_sub.add_parser("export",
                                  help="write per-layer tables and encodings")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out", required=True)

    p_rep = sub.add_parser("report", help="merge metrics files")
    p_rep.add_argument("inputs", nargs="+",
                       help="metrics.csv files (label=path or path)")
    p_rep.add_argument("--out", help="write the table here instead of stdout")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("a subcommand is required")
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "lut":
            return _cmd_lut(args, parser)
        if args.command == "report":
            return _cmd_report(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # noqa: BLE001 - map to the documented exit code
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


def entry():
    sys.exit(main())


def _cmd_train(args) -> int:
    from .quantizer import ContractViolation
    from .train import TrainConfig, parse_config_file, train_loop

    file_values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise _UsageError(f"config file {args.config!r} not found")
        file_values = parse_config_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bits:
        try:
            w_bits, a_bits = (int(b) for b in args.bits.split("/"))
        except ValueError as exc:
            raise _UsageError(f"--bits expects W/A, got {args.bits!r}") from exc
        overrides["w_bits"] = w_bits
        overrides["a_bits"] = a_bits
    for key, val in (("method", args.method), ("dataset", args.dataset),
                     ("data_root", args.data_root), ("epochs", args.epochs),
                     ("out_dir", args.out)):
        if val is not None:
            overrides[key] = val
    try:
        cfg = TrainConfig.from_sources(file_values, overrides)
    except ContractViolation as exc:
        raise _UsageError(str(exc)) from exc
    _, metrics = train_loop(cfg, init_from=args.init_from, resume=args.resume,
                            quiet=args.quiet)
    final = [m for m in metrics if m["split"] == "test"][-1]
    print(f"final test top1 {final['top1']:.2f}% "
          f"(metrics: {os.path.join(cfg.out_dir, 'metrics.csv')})")
    return 0


def _cmd_eval(args) -> int:
    from .data import Dataset
    from .nn import load_checkpoint
    from .train import TrainConfig, load_dataset

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_sources(
        {}, {"dataset": args.dataset, "data_root": args.data_root or ""}
    )
    ds = load_dataset(cfg, "test")
    if args.limit and args.limit < len(ds):
        ds = Dataset(ds.images[: args.limit], ds.labels[: args.limit],
                     ds.split, ds.classes)
    if args.emit_curves:
        _emit_curves(model, args.emit_curves)

    correct_f = correct_l = 0
    worst = 0.0
    batch = 500
    for start in range(0, len(ds), batch):
        xb = ds.images[start : start + batch]
        yb = ds.labels[start : start + batch]
        logits_f = model.forward(xb, train=False)
        logits_l = model.forward_lut(xb)
        correct_f += int((logits_f.argmax(axis=1) == yb).sum())
        correct_l += int((logits_l.argmax(axis=1) == yb).sum())
        scale = np.abs(logits_f).max()
        worst = max(worst, float(np.abs(logits_f - logits_l).max() / scale))
    acc_f = 100.0 * correct_f / len(ds)
    acc_l = 100.0 * correct_l / len(ds)
    print(f"float path top1 {acc_f:.2f}%")
    print(f"lut path   top1 {acc_l:.2f}%")
    print(f"max relative logit difference {worst:.3g}")
    if worst >= args.tolerance:
        print(f"FAIL: paths disagree beyond {args.tolerance}", file=sys.stderr)
        return VERIFY_EXIT
    return 0


def _emit_curves(model, out_dir):
    """Companding curve samples per quantizer: (v, compress, compand) rows,
    plus the breakpoint table (d_k, beta_k)."""
    from .nn import ActQuant, Conv2d, Linear
    from .quantizer import compand, compress

    os.makedirs(out_dir, exist_ok=True)
    grid = np.linspace(0.0, 1.0, 513)[:-1]
    for layer in model._walk():
        nodes = []
        if isinstance(layer, (Conv2d, Linear)) and layer.wq is not None:
            nodes.append(layer.wq)
        if isinstance(layer, ActQuant) and layer.quant is not None:
            nodes.append(layer.quant)
        for node in nodes:
            state = node.state()
            fv = compress(grid, state)
            gv = compand(grid, state, node.spec)
            base = os.path.join(out_dir, f"{node.name.replace('.', '_')}")
            with open(base + "_curve.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["v", "compress", "compand"])
                for row in zip(grid, fv, gv):
                    writer.writerow([f"{val:.9g}" for val in row])
            with open(base + "_breakpoints.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["d", "beta"])
                for dk, bk in zip(state.d[1:], state.beta[1:]):
                    writer.writerow([f"{dk:.9g}", f"{bk:.9g}"])


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "cases", "max_err", "threshold", "passed"])
        for row in rows:
            writer.writerow(row)


def _cmd_gradcheck(args) -> int:
    from .verify import gradcheck_suite

    rows = gradcheck_suite(samples=args.samples, seed=args.seed)
    ok = True
    for check, cases, err, thr, passed in rows:
        ok &= bool(passed)
        print(f"{'PASS' if passed else 'FAIL'} {check}: max_err={err:.3g} "
              f"(threshold {thr:g}, {cases} cases)")
    if args.csv:
        _write_rows(rows, args.csv)
    return 0 if ok else VERIFY_EXIT


def _cmd_lut(args, parser) -> int:
    if args.lut_command == "size":
        from .lut import lut_memory_bytes

        print(lut_memory_bytes(args.bw, args.ba, args.obw, args.oba))
        return 0
    if args.lut_command == "check":
        from .verify import lut_check_suite

        rows = lut_check_suite(seed=args.seed)
        ok = True
        for check, cases, err, thr, passed in rows:
            ok &= bool(passed)
            print(f"{'PASS' if passed else 'FAIL'} {check}: max_err={err:.3g} "
                  f"(threshold {thr:g}, {cases} cases)")
        if args.csv:
            _write_rows(rows, args.csv)
        return 0 if ok else VERIFY_EXIT
    if args.lut_command == "export":
        return _cmd_lut_export(args)
    raise _UsageError("lut requires one of: size, check, export")


def _cmd_lut_export(args) -> int:
    from .lut import write_lut
    from .nn import Conv2d, Linear, build_layer_lut, load_checkpoint

    model, _, _ = load_checkpoint(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    arrays = {}
    exported = []
    for layer in model._walk():
        if not isinstance(layer, (Conv2d, Linear)) or layer.wq is None:
            continue
        if layer.paired_act is None or layer.paired_act.quant is None:
            continue  # fed by raw data; no lattice on the input side
        pack = build_layer_lut(layer)
        write_lut(os.path.join(args.out, f"{layer.name}.lut"), pack["lut"])
        enc = pack["w_enc"]
        arrays[f"{layer.name}/codes"] = enc.codes
        arrays[f"{layer.name}/signs"] = enc.signs
        arrays[f"{layer.name}/zero"] = enc.zero
        exported.append(layer.name)
    records = np.array(model.quantizer_records())
    np.savez_compressed(os.path.join(args.out, "encoded_model.npz"),
                        records=records, **arrays)
    print(f"exported {len(exported)} layer tables to {args.out}: "
          f"{', '.join(exported)}")
    return 0


def _cmd_report(args) -> int:
    from .train import read_metrics

    rows = []
    for item in args.inputs:
        label, _, path = item.rpartition("=")
        if not label:
            label = os.path.basename(os.path.dirname(path)) or path
        if not os.path.exists(path):
            raise _UsageError(f"metrics file {path!r} not found")
        metrics = read_metrics(path)
        test = [m for m in metrics if m["split"] == "test"]
        if not test:
            raise _UsageError(f"{path!r} has no test rows")
        rows.append({
            "label": label,
            "final_top1": float(test[-1]["top1"]),
            "best_top1": max(float(m["top1"]) for m in test),
            "epochs": len(test),
        })
    by_label = {}
    for row in rows:
        by_label.setdefault(row["label"], []).append(row)
    out = sys.stdout if not args.out else open(args.out, "w", newline="")
    try:
        writer = csv.writer(out)
        writer.writerow(["label", "runs", "mean_final_top1", "std_final_top1",
                         "mean_best_top1"])
        for label in sorted(by_label):
            finals = [r["final_top1"] for r in by_label[label]]
            bests = [r["best_top1"] for r in by_label[label]]
            writer.writerow([
                label, len(finals), f"{np.mean(finals):.3f}",
                f"{np.std(finals):.3f}", f"{np.mean(bests):.3f}",
            ])
    finally:
        if args.out:
            out.close()
    return 0


if __name__ == "__main__":
    entry()
