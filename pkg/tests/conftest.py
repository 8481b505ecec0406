"""Shared fixtures: a tiny pipeline config and the five-seed desk run.

The desk run drives the real CLI in a subprocess, once per test session,
and is reused by the slow pipeline tests and the acceptance suite.
"""

import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import pytest

from speechnas import config as cf
from speechnas import pipeline
from speechnas.data import Dataset
from speechnas.metrics import parse_report

DESK_SEEDS = (0, 1, 2, 3, 4)
ACCEPTANCE_COUNT = 11
_verdicts = pytest.StashKey[dict]()

TINY_OVERRIDES = {
    "run.profile": "desk",
    "space.num_layers": "2", "space.cdim_options": "4,8", "space.sdim_options": "2,4",
    "net.stem_channels": "6", "net.embedding_dim": "4",
    "data.num_speakers": "4", "data.utts_per_speaker": "10", "data.feat_dim": "5",
    "data.t_min": "10", "data.t_max": "16", "data.val_fraction": "0.3",
    "train.batch_size": "8", "train.epochs": "3", "train.milestones": "1,2", "train.crop_min": "8",
    "train.crop_max": "12",
    "search.init_count": "6", "search.n1": "2", "search.n2": "3", "search.pool_size": "50", "search.bn_batches": "1",
    "retrain.epochs": "3", "retrain.milestones": "2",
}


def tiny_config(**extra) -> cf.RunConfig:
    return cf.load_config(overrides={**TINY_OVERRIDES, **extra})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    pipeline.gen_data(tiny_config(), out)
    return out


@pytest.fixture
def tiny(tiny_data):
    cfg = tiny_config(**{"data.dir": str(tiny_data)})
    return cfg, Dataset.load(tiny_data)


def speechnas_cli(*args) -> str:
    done = subprocess.run([sys.executable, "-m", "speechnas", *map(str, args)], capture_output=True, text=True)
    if done.returncode != 0:
        raise AssertionError(f"speechnas {' '.join(map(str, args))} failed:\n{done.stderr}")
    return done.stdout


@dataclass
class DeskRun:
    seed: int
    root: Path
    config: Path
    supernet_accuracy: float
    shared_eer: float  # weight-sharing EER of the top searched arch
    retrained_eer: float
    top_arch: str
    stage_seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def seconds(self) -> float:
        return sum(self.stage_seconds.values())

    @property
    def supernet(self) -> Path:
        return self.root / "supernet" / "supernet.snck"

    @property
    def data(self) -> Path:
        return self.root / "data"


def run_desk_pipeline(root: Path, seed: int) -> DeskRun:
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "desk.cfg"
    cfg_path.write_text(f"run.profile = desk\nrun.seed = {seed}\ndata.seed = {seed}\ndata.dir = {root / 'data'}\n")
    stages = {}

    def stage(name, *args):
        t0 = time.perf_counter()
        out = speechnas_cli(name, "--config", cfg_path, *args)
        stages[name] = time.perf_counter() - t0
        return parse_report(out)

    stage("gen-data", "--out", root / "data")
    trained = stage("train-supernet", "--out", root / "supernet")
    searched = stage("search", "--supernet", root / "supernet" / "supernet.snck", "--out", root / "search")
    top_arch, shared = searched["rank1"].split("\t")
    stage("retrain", "--arch", top_arch, "--supernet", root / "supernet" / "supernet.snck", "--out", root / "retrain")
    evaluated = stage("eval", "--model", root / "retrain" / "candidate.snck", "--trials",
                      root / "data" / "val_trials.tsv", "--out", root / "eval.txt")
    return DeskRun(seed, root, cfg_path, float(trained["final_accuracy"]), float(shared), float(evaluated["eer"]),
                   top_arch, stages)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("desk")
    return [run_desk_pipeline(base / f"seed{s}", s) for s in DESK_SEEDS]


# ---------------------------------------------------------------- acceptance verdicts


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records criterion ``n`` for the end-of-run summary and asserts it."""
    store = request.config.stash.setdefault(_verdicts, {})

    def record(n: int, ok: bool, detail: str):
        store[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_verdicts, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in store:
            ok, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d}  {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}  ----  not run (deselected, or errored before a verdict)")
