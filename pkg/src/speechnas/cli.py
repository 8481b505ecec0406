"""Command-line entry point: ``speechnas <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .archspace import check, resolve, serialize
from .bayesopt import SearchHistory
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, read_manifest
from .metrics import evaluate_scores, read_trials
from .network import CandidateNet, CheckpointError, Supernet, count_params, load_checkpoint


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run = replace(cfg.run, seed=args.seed)
    return cfg


def _dataset(cfg: RunConfig) -> Dataset:
    if not cfg.data.dir:
        raise ConfigError("data.dir is not set; point it at a gen-data output directory")
    return Dataset.load(cfg.data.dir)


def _supernet(path) -> Supernet:
    net, _ = load_checkpoint(path)
    if not isinstance(net, Supernet):
        raise CheckpointError(f"{path}: expected a supernet checkpoint")
    return net


def cmd_gen_data(args) -> int:
    manifest = pipeline.gen_data(_config(args), args.out)
    print(f"manifest = {manifest}")
    return 0


def cmd_train_supernet(args) -> int:
    cfg = _config(args)
    loss = args.loss or cfg.train.supernet_loss
    net, hist = pipeline.train_supernet(cfg, _dataset(cfg), loss=loss)
    path = pipeline.write_training_outputs(args.out, net, hist, {"loss": loss, "seed": cfg.run.seed})
    print(f"checkpoint = {path}")
    print(f"final_loss = {hist[-1].loss:.6g}")
    print(f"final_accuracy = {hist[-1].accuracy:.6g}")
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    net = _supernet(args.supernet)
    history = pipeline.search(cfg, net, _dataset(cfg), args.out, resume=args.resume)
    text = pipeline.search_report(history, cfg.search.top_k)
    (Path(args.out) / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_retrain(args) -> int:
    cfg = _config(args)
    arch = resolve(args.arch)
    supernet = _supernet(args.supernet) if args.supernet else None
    space = supernet.space if supernet else cfg.search_space()
    check(arch, space)
    _, report, _ = pipeline.retrain(cfg, arch, _dataset(cfg), supernet, args.out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    t0 = time.time()
    net, _ = load_checkpoint(args.model)
    if not isinstance(net, CandidateNet):
        raise CheckpointError(f"{args.model}: expected a candidate checkpoint")
    if not cfg.data.dir:
        raise ConfigError("data.dir is not set")
    trials = read_trials(args.trials)
    wanted = {i for t in trials.trials for i in (t.enroll, t.test)}
    utts = [u for u in read_manifest(Path(cfg.data.dir) / "manifest.tsv") if u.id in wanted]
    scores = trials.score_with(pipeline.embed(net, None, utts))
    m = evaluate_scores(scores, trials.labels)
    report = pipeline.EvalReport(serialize(net.arch), m["eer"], m["dcf_0.01"], m["dcf_0.001"],
                                 count_params(net.arch, net.config), time.time() - t0, cfg.run.seed, m["threshold"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return 0


def cmd_report(args) -> int:
    sys.stdout.write(pipeline.search_report(SearchHistory.load(args.history), args.top))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechnas", description="D-TDNN architecture search on synthetic speaker data")
    p.add_argument("-v", "--verbose", action="store_true", help="log training and search progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-supernet", help="single-path uniform-sampling supernet training")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss", choices=("ce", "aam_mhe"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_supernet)

    s = sub.add_parser("search", help="Bayesian optimisation over the supernet's space")
    s.add_argument("--config", required=True)
    s.add_argument("--supernet", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("retrain", help="train one architecture with AAM + MHE")
    s.add_argument("--config", required=True)
    s.add_argument("--arch", required=True, help="serialised code or preset name")
    s.add_argument("--supernet")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrain)

    s = sub.add_parser("eval", help="score a trial list with a retrained candidate")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="best architectures in a search history")
    s.add_argument("--history", required=True)
    s.add_argument("--top", type=int, required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"speechnas: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
