"""``afa`` command line: data generation, training, evaluation, reports and checks.

Exit status: 0 on success, 1 on a contract error (bad arguments, invalid
config, failed check), 2 on an I/O or file format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .errors import ContractError, FormatError

log = logging.getLogger("afa")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return obj


def _write(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def _threads(args) -> int:
    value = args.threads
    if value is None:
        env = os.environ.get("AFA_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ContractError(f"AFA_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ContractError(f"thread count must be positive, got {value}")
    return value


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, gen_data

    raw = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SyntheticSpec.from_dict(raw)
    diag = gen_data(spec, args.out)
    print(json.dumps({"spec": spec.to_dict(), "separation": diag}, indent=2, sort_keys=True))
    return 0


def train_to_dir(config, data_dir, out_dir, threads: int = 1, on_task=None):
    """Train the stream in ``data_dir`` and write checkpoint, matrix, metrics and log to ``out_dir``."""
    from .checkpoint import save_checkpoint
    from .data import load_split
    from .evaluation import metrics
    from .trainer import run_stream

    train_sets = load_split(data_dir, "train")
    test_sets = load_split(data_dir, "test")

    def progress(i, state, recs):
        log.info("task %d/%d done, final loss %.4f", i + 1, len(train_sets), recs[-1]["loss"] if recs else float("nan"))
        if on_task is not None:
            on_task(i, state, recs)

    state, matrix, records = run_stream(config, train_sets, test_sets, threads, progress)
    out = Path(out_dir)
    save_checkpoint(state, out)
    _write(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(out / "matrix.csv", matrix.to_csv())
    _write(out / "metrics.json", metrics(matrix).to_json() + "\n")
    _write(out / "log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return state, matrix, records


def cmd_train(args) -> int:
    from .evaluation import metrics
    from .model import TrainConfig

    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    config = TrainConfig.from_dict(raw)
    _, matrix, _ = train_to_dir(config, args.data, args.out, _threads(args))
    print(metrics(matrix).to_table(3), end="")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_split
    from .evaluation import AccuracyMatrix, evaluate_row, metrics, task_selection_table

    state = load_checkpoint(args.ckpt)
    test_sets = load_split(args.data, "test")
    if len(test_sets) != state.trained_tasks:
        raise ContractError(f"checkpoint has {state.trained_tasks} trained tasks, data has {len(test_sets)}")
    last = evaluate_row(state, test_sets, _threads(args))
    out = {
        "tasks": state.task_names,
        "last": last,
        "last_mean": sum(last) / len(last),
        "threshold": state.bank.threshold,
        "task_selection": task_selection_table(state, test_sets),
        "config": state.config.to_dict(),
    }
    matrix_csv = Path(args.ckpt) / "matrix.csv"
    if matrix_csv.exists():
        out["metrics"] = metrics(AccuracyMatrix.from_csv(matrix_csv.read_text())).to_dict()
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        print(text, end="")
    return 0


def cmd_report(args) -> int:
    from .evaluation import AccuracyMatrix, metrics

    try:
        text = Path(args.matrix).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {args.matrix}: {exc}") from exc
    report = metrics(AccuracyMatrix.from_csv(text))
    if args.format == "json":
        print(report.to_json())
    elif args.format == "csv":
        print(report.to_csv(), end="")
    else:
        print(report.to_table(), end="")
    return 0


def cmd_route(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .evaluation import route_batch

    state = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    if ds.d_in != state.encoder.d_in:
        raise ContractError(f"data has d_in={ds.d_in}, checkpoint expects {state.encoder.d_in}")
    x = torch.from_numpy(ds.x.astype("float64"))
    tasks, scores = route_batch(state, x) if len(ds) else (torch.empty(0), torch.empty(0))
    lines = []
    for i in range(len(ds)):
        t = int(tasks[i])
        lines.append(
            json.dumps(
                {
                    "index": i,
                    "task_id": int(ds.task_ids[i]),
                    "label": int(ds.labels[i]),
                    "seen": t >= 0,
                    "selected_task": t if t >= 0 else None,
                    "score": float(scores[i]),
                }
            )
        )
    sys.stdout.write("".join(line + "\n" for line in lines))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck

    report = run_gradcheck(args.seed if args.seed is not None else 0)
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.passed else 1


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.seed if args.seed is not None else 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    common.add_argument(
        "--threads", type=int, default=argparse.SUPPRESS, help="evaluation workers (default: $AFA_THREADS or 1)"
    )
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="afa", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic task stream")
    s.add_argument("--spec", help="JSON synthetic spec (missing fields take defaults)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the task stream and write a checkpoint")
    s.add_argument("--config", help="JSON training config (missing fields take defaults)")
    s.add_argument("--data", required=True, help="directory with train.bin and test.bin")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on test data")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="report path (default: stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="Transfer / Average / Last from a matrix CSV")
    s.add_argument("--matrix", required=True)
    s.add_argument("--format", choices=("json", "csv", "table"), default="table")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("route", parents=[common], help="per-sample domain selection as JSON lines")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="an embedding dataset file")
    s.set_defaults(func=cmd_route)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a tiny model")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "threads", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"afa: error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"afa: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
