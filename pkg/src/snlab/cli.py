"""``snlab`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys

from . import __version__
from .config import ConfigError, build, load_file, parse_lines
from .gradcheck import TOLERANCE, run_suite
from .inference import batch_average, moving_average_finalize, random_minibatches
from .snlayer import NORMALIZERS
from .tensor import make_rng
from .trainer import evaluate, finetune_hard, make_dataset, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

RATIO_COLUMNS = (["epoch", "layer"] + [f"w_mu_{k}" for k in NORMALIZERS]
                 + [f"w_sigma_{k}" for k in NORMALIZERS] + ["divergence"])


class UsageError(Exception):
    pass


def _claim(path: str, force: bool) -> str:
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    return path


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_metadata(out: str, command: str, argv) -> None:
    # timestamps live only here so the other outputs stay byte-reproducible
    _write_json(os.path.join(out, f"metadata-{command}.json"), {
        "command": command,
        "argv": list(argv),
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "version": __version__,
    })


def _experiment(args):
    settings = load_file(args.config) if args.config else {}
    settings.update(parse_lines(args.overrides))
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    return build(settings)


def cmd_gradcheck(args) -> int:
    path = _claim(os.path.join(args.out, "gradcheck.json"), args.force)
    report = run_suite(seed=0 if args.seed is None else args.seed, corrupt=args.corrupt_grad)
    _write_json(path, {"tolerance": TOLERANCE, "results": report})
    for r in report:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['layer']:<20} max_rel_err={r['max_rel_err']:.3e}")
    return EXIT_OK if all(r["pass"] for r in report) else EXIT_FAIL


def _write_run(out: str, rep, model, exp, force: bool) -> None:
    from .serialize import save_model

    with open(_claim(os.path.join(out, "report.jsonl"), force), "w") as f:
        f.write(rep.to_jsonl())
    with open(_claim(os.path.join(out, "ratios.csv"), force), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RATIO_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rep.ratio_rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    save_model(_claim(os.path.join(out, "model.json"), force), model, exp)
    with open(_claim(os.path.join(out, "config.txt"), force), "w") as f:
        f.writelines(f"{k}={v}\n" for k, v in exp.flat().items())


def cmd_train(args) -> int:
    exp = _experiment(args)
    runs = [(b, os.path.join(args.out, f"batch{b}")) for b in exp.batch_sweep] or [(None, args.out)]
    for _, out in runs:
        os.makedirs(out, exist_ok=True)
        for name in ("report.jsonl", "ratios.csv", "model.json", "config.txt"):
            _claim(os.path.join(out, name), args.force)
    ds = make_dataset(exp.data)
    status = EXIT_OK
    for b, out in runs:
        run_exp = exp
        if b is not None:
            run_exp = build({**exp.raw, "batch": str(b), "batch_sweep": ""})
        rep = train(run_exp.model, ds, run_exp.train)
        _write_run(out, rep, rep.model, run_exp, args.force)
        print(f"{out}: epochs={len(rep.records)} eval_acc={rep.final_eval_acc()}")
        if rep.diverged:
            print(f"diverged: {rep.divergence_message}", file=sys.stderr)
            return EXIT_DIVERGED
        if exp.finetune_hard_epochs > 0 and rep.model.sn_layers:
            hard_exp = build({**run_exp.raw, "epochs": str(exp.finetune_hard_epochs),
                              "batch_sweep": ""})
            hard_out = os.path.join(out, "hard")
            os.makedirs(hard_out, exist_ok=True)
            hrep = finetune_hard(rep.model, ds, hard_exp.train)
            _write_run(hard_out, hrep, hrep.model, hard_exp, args.force)
            if hrep.diverged:
                return EXIT_DIVERGED
    return status


def _load(path):
    from .serialize import load_model

    if not os.path.exists(path):
        raise UsageError(f"model file {path} not found")
    return load_model(path)


def cmd_finalize(args) -> int:
    from .serialize import save_model

    src = args.model or os.path.join(args.out, "model.json")
    model, exp = _load(src)
    dst = _claim(os.path.join(args.out, "model_finalized.json"), args.force)
    before = model.checksum()
    ds = make_dataset(exp.data)
    if args.method == "moving-average":
        moving_average_finalize(model)
    else:
        rng = make_rng(exp.seed, 3)
        batch = args.batch_size or exp.train.total_batch
        batch_average(model, random_minibatches(ds.train_x, batch, args.batches, rng))
    after = model.checksum()
    save_model(dst, model, exp)
    _write_json(_claim(os.path.join(args.out, "finalize.json"), args.force), {
        "method": args.method, "batches": args.batches, "source": os.path.basename(src),
        "checksum_before": before, "checksum_after": after,
    })
    print(f"wrote {dst} ({args.method})")
    return EXIT_OK


def cmd_eval(args) -> int:
    src = args.model or os.path.join(args.out, "model_finalized.json")
    model, exp = _load(src)
    ds = make_dataset(exp.data)
    try:
        acc = evaluate(model, ds.eval_x, ds.eval_y, exp.train.eval_batch)
    except RuntimeError as e:  # no frozen statistics installed
        raise UsageError(f"{src}: {e}") from e
    _write_json(_claim(os.path.join(args.out, "eval.json"), args.force),
                {"eval_acc": acc, "n_eval": len(ds.eval_y), "source": os.path.basename(src)})
    print(f"eval_acc={acc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", default=".", help="output directory (created if absent)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("overrides", nargs="*", metavar="key=value")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    common(p)
    p.add_argument("--corrupt-grad", action="store_true", help="self-test: perturb analytic grads")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a model and export reports")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finalize", help="install test-time BN statistics")
    common(p)
    p.add_argument("--model", help="model file (default OUT/model.json)")
    p.add_argument("--method", choices=("batch-average", "moving-average"), default="batch-average")
    p.add_argument("--batches", type=int, default=None, help="minibatch budget (default: one pass)")
    p.add_argument("--batch-size", type=int, default=None, help="default: training batch size")
    p.set_defaults(func=cmd_finalize)

    p = sub.add_parser("eval", help="evaluate a finalized model")
    common(p)
    p.add_argument("--model", help="model file (default OUT/model_finalized.json)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        os.makedirs(args.out, exist_ok=True)
        code = args.func(args)
        _write_metadata(args.out, args.command, argv)
        return code
    except (ConfigError, UsageError, OSError, ValueError) as e:
        print(f"snlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
