"""``fpad`` command line: gen, split, train, eval, sweep, compare-splits, gradcheck.

Every command writes ``<command>_config.json`` next to its outputs with the
fully resolved configuration, so a run can be repeated from that file and
its seed. Exit codes: 0 ok, 2 config, 3 I/O, 4 infeasible split, 5 numeric
failure, 6 gradcheck failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .container import ContainerError
from .diffmath import ContractError
from .engine.config import EvalConfig, TrainConfig
from .engine.evaluation import evaluate
from .engine.model import load_params, save_params
from .engine.studies import (DEFAULT_LAMBDAS, DEFAULT_THRESHOLDS, LAMBDA_COLUMNS, SPLIT_RUN_COLUMNS,
                             SPLIT_SUMMARY_COLUMNS, THRESHOLD_COLUMNS, compare_splits, format_split_summary,
                             format_table, sweep_lambda, sweep_proposal_threshold, write_csv)
from .engine.training import train, write_loss_log
from .episodes import SamplingError
from .fewshot import NonFiniteLossError
from .gradcheck import run_gradcheck
from .splits import InfeasibleSplitError, SplitError, load_split, make_split, save_split, split_report
from .synthcorpus import ConfigError, CorpusConfig, GenerationError, generate_corpus, load_corpus, save_corpus

log = logging.getLogger("fpad")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SPLIT, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6

CORPUS_FILE = "corpus.fpad"
SPLIT_FILE = "split.json"
PARAMS_FILE = "params.fpad"
LOSS_LOG_FILE = "loss_log.csv"
REPORT_FILE = "eval_report.json"


class CliConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def read_json(path) -> dict:
    """Config JSON as a dict. Missing file is an I/O error, bad JSON a config error."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliConfigError(f"{path}: top level must be a JSON object")
    return data


def echo_config(out: Path, command: str, payload: dict) -> Path:
    path = out / f"{command.replace('-', '_')}_config.json"
    doc = {"command": command, "version": __version__, **payload}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_grid(text: str | None, default) -> tuple[float, ...]:
    if text is None:
        return tuple(default)
    try:
        grid = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise CliConfigError(f"--grid: {exc}") from exc
    if not grid:
        raise CliConfigError("--grid: must not be empty")
    return grid


def train_config(args) -> TrainConfig:
    data = read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    return TrainConfig.from_dict(data)


def eval_config(args, base: dict | None = None) -> EvalConfig:
    data = dict(base or {})
    for key in ("count", "workers", "proposal_threshold", "similarity_threshold"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "eval_seed", None) is not None:
        data["seed"] = args.eval_seed
    return EvalConfig.from_dict(data)


def say(args, text: str) -> None:
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    data = read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    config = CorpusConfig.from_dict(data)
    corpus = generate_corpus(config)
    out = out_dir(args)
    path = out / CORPUS_FILE
    save_corpus(corpus, path)
    echo_config(out, "gen", {"seed": config.seed, "corpus_config": config.to_dict(), "outputs": [str(path)]})
    cat = corpus.catalog
    say(args, f"corpus {path}: {cat.num_classes} classes ({len(cat.visible_ids)} pretraining-visible), "
              f"{len(corpus.exemplars)} exemplars, {len(corpus.sequences)} untrimmed sequences, "
              f"min prototype distance {cat.min_pairwise_distance():.3f}")
    return EXIT_OK


def cmd_split(args) -> int:
    corpus = load_corpus(args.corpus)
    seed = 0 if args.seed is None else args.seed
    split = make_split(corpus.catalog, args.mode, args.n_novel, seed)
    out = out_dir(args)
    path = out / SPLIT_FILE
    save_split(split, path)
    report = split_report(split, corpus.catalog)
    echo_config(out, "split", {"seed": seed, "corpus": str(args.corpus), "mode": args.mode,
                               "n_novel": args.n_novel, "report": report, "outputs": [str(path)]})
    say(args, f"split {path}: {args.mode}, {report['n_base']} base / {report['n_novel']} novel, "
              f"{report['novel_pretrain_overlap']} novel classes seen in pretraining")
    return EXIT_OK


def cmd_train(args) -> int:
    config = train_config(args)
    corpus = load_corpus(args.corpus)
    split = load_split(args.split)
    params, records = train(config, corpus, split)
    out = out_dir(args)
    ppath, lpath = out / PARAMS_FILE, out / LOSS_LOG_FILE
    save_params(params, ppath, extra={"train_config": config.to_dict(), "corpus_config": corpus.config.to_dict()})
    write_loss_log(records, lpath)
    echo_config(out, "train", {"seed": config.seed, "corpus": str(args.corpus), "split": str(args.split),
                               "train_config": config.to_dict(), "outputs": [str(ppath), str(lpath)]})
    last = f", final total loss {records[-1].l_total:.4f}" if records else ""
    say(args, f"trained {config.iterations} iterations{last}; params {ppath}, loss log {lpath}")
    return EXIT_OK


def load_model(path) -> tuple:
    params, extra = load_params(path)
    if "train_config" not in extra:
        raise CliConfigError(f"{path}: params file carries no training config")
    return params, TrainConfig.from_dict(extra["train_config"])


def cmd_eval(args) -> int:
    base = read_json(args.config) if args.config else {}
    if args.seed is not None:
        base["seed"] = args.seed
    econf = eval_config(args, base)
    params, config = load_model(args.params)
    corpus = load_corpus(args.corpus)
    split = load_split(args.split)
    report = evaluate(params, corpus, split, config, econf)
    out = out_dir(args)
    path = out / REPORT_FILE
    path.write_text(report.to_json(), encoding="utf-8")
    echo_config(out, "eval", {"seed": econf.seed, "params": str(args.params), "corpus": str(args.corpus),
                              "split": str(args.split), "eval_config": econf.to_dict(), "outputs": [str(path)]})
    say(args, report.summary())
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.kind not in ("threshold", "lambda"):
        raise CliConfigError(f"unknown sweep kind {args.kind!r} (expected threshold or lambda)")
    corpus = load_corpus(args.corpus)
    split = load_split(args.split)
    if args.kind == "threshold":
        if not args.params:
            raise CliConfigError("--params is required for a threshold sweep")
        grid = parse_grid(args.grid, DEFAULT_THRESHOLDS)
        if args.seed is not None:
            args.eval_seed = args.seed
        econf = eval_config(args)
        params, config = load_model(args.params)
        rows = sweep_proposal_threshold(params, corpus, split, config, grid, econf)
        columns, seed = THRESHOLD_COLUMNS, econf.seed
    else:
        grid = parse_grid(args.grid, DEFAULT_LAMBDAS)
        config = train_config(args)
        econf = eval_config(args)
        rows = sweep_lambda(config, corpus, split, grid, econf)
        columns, seed = LAMBDA_COLUMNS, config.seed
    out = out_dir(args)
    path = out / f"sweep_{args.kind}.csv"
    write_csv(rows, path, columns)
    echo_config(out, "sweep", {"seed": seed, "kind": args.kind, "grid": list(grid), "corpus": str(args.corpus),
                               "split": str(args.split), "params": args.params,
                               "train_config": config.to_dict(), "eval_config": econf.to_dict(),
                               "outputs": [str(path)]})
    say(args, format_table(rows, columns))
    return EXIT_OK


def cmd_compare_splits(args) -> int:
    config = train_config(args)
    econf = eval_config(args)
    corpus = load_corpus(args.corpus)
    first = 0 if args.seed is None else args.seed
    seed_sets = tuple(range(first, first + args.seed_sets))
    runs, summary = compare_splits(corpus, config, args.n_novel, seed_sets, args.n_random, args.n_controlled, econf)
    out = out_dir(args)
    rpath, spath = out / "compare_splits_runs.csv", out / "compare_splits.csv"
    write_csv(runs, rpath, SPLIT_RUN_COLUMNS)
    write_csv(summary, spath, SPLIT_SUMMARY_COLUMNS)
    echo_config(out, "compare-splits", {"seed": first, "seed_sets": list(seed_sets), "corpus": str(args.corpus),
                                        "n_novel": args.n_novel, "n_random": args.n_random,
                                        "n_controlled": args.n_controlled, "train_config": config.to_dict(),
                                        "eval_config": econf.to_dict(), "outputs": [str(rpath), str(spath)]})
    say(args, format_split_summary(summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    summary = run_gradcheck(instances=args.instances, seed=seed, step=args.step, tolerance=args.tolerance)
    text = summary.format()
    if args.out:
        out = out_dir(args)
        (out / "gradcheck_report.txt").write_text(text + "\n", encoding="utf-8")
        echo_config(out, "gradcheck", {"seed": seed, "instances": args.instances, "step": args.step,
                                       "tolerance": args.tolerance})
    if summary.passed:
        say(args, text)
        return EXIT_OK
    # failures are always reported, quiet or not
    print(text, file=sys.stderr)
    return EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="master seed for the command")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--quiet", action="store_true", help="suppress summary output")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    def eval_flags(p, seed_flag=True):
        p.add_argument("--count", type=int, help="evaluation episodes (default 1000)")
        p.add_argument("--workers", type=int, help="evaluation worker threads")
        p.add_argument("--proposal-threshold", type=float, dest="proposal_threshold")
        p.add_argument("--similarity-threshold", type=float, dest="similarity_threshold")
        if seed_flag:
            p.add_argument("--eval-seed", type=int, dest="eval_seed", help="evaluation episode seed")

    parser = argparse.ArgumentParser(prog="fpad", description="Few-shot temporal activity detection on synthetic features.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus (--config: corpus JSON)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", parents=[common], help="draw a base/novel class split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("random", "controlled"), default="random")
    p.add_argument("--n-novel", type=int, dest="n_novel", default=20)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="episodic training (--config: training JSON)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate on novel-class episodes (--config: evaluation JSON)")
    p.add_argument("--params", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    eval_flags(p, seed_flag=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="proposal-threshold or lambda sweep")
    p.add_argument("--kind", required=True, help="threshold or lambda")
    p.add_argument("--grid", help="comma-separated grid values")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--params", help="trained params (threshold sweep)")
    eval_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-splits", parents=[common], help="random vs controlled split study")
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-novel", type=int, dest="n_novel", default=20)
    p.add_argument("--n-random", type=int, dest="n_random", default=3)
    p.add_argument("--n-controlled", type=int, dest="n_controlled", default=3)
    p.add_argument("--seed-sets", type=int, dest="seed_sets", default=1, help="seed sets starting at --seed")
    eval_flags(p)
    p.set_defaults(func=cmd_compare_splits)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss path")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--step", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck, out=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InfeasibleSplitError as exc:
        print(f"error: {exc}; available non-visible classes: {exc.available}", file=sys.stderr)
        return EXIT_SPLIT
    except (ConfigError, CliConfigError, SplitError, GenerationError, SamplingError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContainerError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
