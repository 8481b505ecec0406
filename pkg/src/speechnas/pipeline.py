"""End-to-end orchestration: supernet training, BO search, candidate retraining."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bayesopt, losses
from . import tensorcore as tc
from .archspace import ArchCode, check, sample_uniform, serialize
from .config import RunConfig, lr_at
from .data import Dataset, Utterance, batches, generate
from .metrics import TrialSet, evaluate_scores, format_report
from .network import CandidateNet, Supernet, count_params, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    arch: str
    eer: float
    dcf_0_01: float
    dcf_0_001: float
    params: int
    wall_clock: float
    seed: int
    threshold: float = float("nan")

    def to_text(self) -> str:
        return format_report({"arch": self.arch, "eer": self.eer, "dcf_0.01": self.dcf_0_01,
                              "dcf_0.001": self.dcf_0_001, "params": self.params, "wall_clock": self.wall_clock,
                              "seed": self.seed, "threshold": self.threshold})


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    val_eer: float = float("nan")


def gen_data(cfg: RunConfig, out_dir) -> Path:
    return generate(cfg.synth_spec(), out_dir)


# ---------------------------------------------------------------- training


def _loss(kind: str, net, graph: tc.Graph, emb: tc.Tensor, logits: tc.Tensor, y, cfg: RunConfig
          ) -> Tuple[tc.Tensor, np.ndarray]:
    """Loss tensor and per-sample predictions."""
    if kind == "ce":
        return losses.cross_entropy(logits, y), logits.data.argmax(axis=1)
    if kind == "aam_mhe":
        W = graph.param("cls.W", net.params["cls.W"])
        loss = losses.aam_mhe(emb, W, y, cfg.loss.s_scale, cfg.loss.margin, cfg.loss.mhe_lambda)
        cos = emb.data @ W.data / (np.linalg.norm(emb.data, axis=1, keepdims=True) + 1e-8) \
            / (np.linalg.norm(W.data, axis=0, keepdims=True) + 1e-8)
        return loss, cos.argmax(axis=1)
    raise ValueError(f"unknown loss {kind!r}")


def train_step(net, arch: Optional[ArchCode], x: np.ndarray, y: np.ndarray, kind: str, lr: float, cfg: RunConfig,
               velocity: Dict[str, np.ndarray]) -> Tuple[float, float, tc.Gradients]:
    """One forward/backward/SGD step on a single path; returns (loss, accuracy, gradients)."""
    graph = tc.Graph(np.float32)
    emb, logits = net.build(graph, x, arch, "train")
    loss, pred = _loss(kind, net, graph, emb, logits, y, cfg)
    grads = tc.backward(graph, loss)
    tc.sgd_step(net.params, grads, lr, cfg.train.momentum, cfg.train.weight_decay, velocity)
    return float(loss.data), float(np.mean(pred == y)), grads


def _run_epochs(net, train: List[Utterance], pick_arch: Callable[[np.random.Generator], Optional[ArchCode]],
                kind: str, base_lr: float, epochs: int, milestones, cfg: RunConfig, rng: np.random.Generator,
                on_epoch: Optional[Callable[[EpochLog], None]] = None) -> List[EpochLog]:
    velocity: Dict[str, np.ndarray] = {}
    history = []
    for epoch in range(epochs):
        lr = lr_at(epoch, base_lr, milestones, cfg.train.lr_factor)
        tot_loss = tot_acc = 0.0
        n = 0
        for x, y in batches(train, cfg.train.batch_size, cfg.train.crop_min, cfg.train.crop_max, rng):
            loss, acc, _ = train_step(net, pick_arch(rng), x, y, kind, lr, cfg, velocity)
            if not np.isfinite(loss):
                raise tc.NonFiniteError(f"non-finite loss at epoch {epoch}")
            tot_loss += loss * len(y)
            tot_acc += acc * len(y)
            n += len(y)
        entry = EpochLog(epoch, lr, tot_loss / n, tot_acc / n)
        if on_epoch is not None:
            on_epoch(entry)
        history.append(entry)
        log.info("epoch %d lr %.2g loss %.4f acc %.3f", epoch, lr, entry.loss, entry.accuracy)
    return history


def train_supernet(cfg: RunConfig, dataset: Dataset, loss: Optional[str] = None, seed: Optional[int] = None
                   ) -> Tuple[Supernet, List[EpochLog]]:
    """Single-path uniform-sampling training: one random architecture per mini-batch."""
    if not dataset.train:
        raise ValueError("empty training set")
    seed = cfg.run.seed if seed is None else seed
    space = cfg.search_space()
    net = Supernet(space, cfg.net_config(dataset.num_speakers, dataset.feat_dim), seed=seed)
    rng = np.random.default_rng([seed, 1])
    hist = _run_epochs(net, dataset.train, lambda r: sample_uniform(space, r), loss or cfg.train.supernet_loss,
                       cfg.train.lr, cfg.train.epochs, cfg.train.milestones, cfg, rng)
    return net, hist


# ---------------------------------------------------------------- embedding and evaluation


def recalibrate_bn(net, arch: Optional[ArchCode], utts: List[Utterance], cfg: RunConfig, n_batches: int,
                   seed: int = 0) -> Dict[str, np.ndarray]:
    """Fresh BN running statistics for ``arch`` from a few training batches.

    Works on a copy, so the network's own buffers are left untouched.  The
    k-th batch is blended with momentum ``1/k``, which makes the result the
    plain average of the per-batch statistics.  Slices the path does not
    read keep their previous values.
    """
    buffers = {k: v.copy() for k, v in net.buffers.items()}
    rng = np.random.default_rng([seed, 7])
    done = 0
    for x, _ in batches(utts, cfg.train.batch_size, cfg.train.crop_min, cfg.train.crop_max, rng):
        if done >= n_batches:
            break
        done += 1
        net.build(tc.Graph(np.float32), x, arch, "train", buffers=buffers, bn_momentum=1.0 / done)
    return buffers


def embed(net, arch: Optional[ArchCode], utts: Sequence[Utterance], buffers=None, max_batch: int = 64
          ) -> Dict[str, np.ndarray]:
    """Eval-mode embeddings of whole utterances, batched by equal length."""
    by_len: Dict[int, List[Utterance]] = {}
    for u in utts:
        by_len.setdefault(u.features.shape[0], []).append(u)
    out = {}
    for T in sorted(by_len):
        group = by_len[T]
        for lo in range(0, len(group), max_batch):
            chunk = group[lo:lo + max_batch]
            graph = tc.Graph(np.float32)
            emb, _ = net.build(graph, np.stack([u.features for u in chunk]), arch, "eval", buffers=buffers)
            for u, e in zip(chunk, emb.data):
                out[u.id] = e
    return out


def score_trials(net, arch, dataset: Dataset, buffers=None) -> Tuple[np.ndarray, np.ndarray]:
    ts = TrialSet(dataset.trials)
    scores = ts.score_with(embed(net, arch, dataset.val, buffers))
    return scores, ts.labels


def evaluate_shared(net: Supernet, arch: ArchCode, dataset: Dataset, cfg: RunConfig) -> float:
    """Validation EER of ``arch`` using the supernet's shared weights (weights are not modified)."""
    check(arch, net.space)
    buffers = recalibrate_bn(net, arch, dataset.train, cfg, cfg.search.bn_batches, cfg.run.seed)
    scores, labels = score_trials(net, arch, dataset, buffers)
    return evaluate_scores(scores, labels)["eer"]


def evaluate_model(net, dataset: Dataset, trials: Optional[TrialSet] = None, arch=None) -> Dict[str, float]:
    ts = trials or TrialSet(dataset.trials)
    scores = ts.score_with(embed(net, arch, dataset.val))
    return evaluate_scores(scores, ts.labels)


# ---------------------------------------------------------------- search


def _evaluate_many(net, archs: List[ArchCode], dataset: Dataset, cfg: RunConfig) -> List[float]:
    workers = cfg.threads()
    if workers <= 1 or len(archs) <= 1:
        return [evaluate_shared(net, a, dataset, cfg) for a in archs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: evaluate_shared(net, a, dataset, cfg), archs))


def search(cfg: RunConfig, net: Supernet, dataset: Dataset, out_dir=None, resume=None,
           evaluate: Optional[Callable[[ArchCode], float]] = None) -> bayesopt.SearchHistory:
    """Random initialisation followed by ``n1`` GP/PoF proposal rounds of ``n2`` architectures.

    With ``out_dir`` every evaluation is appended to ``history.tsv`` and
    ``search_log.tsv`` (``iteration<TAB>arch<TAB>eer``; iteration 0 is the
    random phase).  ``resume`` reloads a history file and continues from
    the next unfinished iteration without re-evaluating stored codes.
    """
    space = net.space
    sc = cfg.search
    seed = cfg.run.seed
    history = bayesopt.SearchHistory.load(resume) if resume else bayesopt.SearchHistory()
    if resume:
        bayesopt.check_history_space(history, space)
    hist_fh = log_fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "history.tsv"
        if resume and Path(resume).resolve() != hist_path.resolve():
            history.save(hist_path)
        elif not resume:
            hist_path.write_text("")
        hist_fh = open(hist_path, "a")
        log_fh = open(out / "search_log.tsv", "a" if resume else "w")

    def run_batch(archs: List[ArchCode], iteration: int):
        if evaluate is None:
            values = _evaluate_many(net, archs, dataset, cfg)
        else:
            values = [evaluate(a) for a in archs]
        for a, v in zip(archs, values):
            history.add(a, v)
            if hist_fh:
                hist_fh.write(bayesopt.SearchHistory.format_line(a, v))
                log_fh.write(f"{iteration}\t{serialize(a)}\t{float(v)!r}\n")
        if hist_fh:
            hist_fh.flush()
            log_fh.flush()

    try:
        rng = np.random.default_rng([seed, 0])
        pending: List[ArchCode] = []
        keys = set()
        while len(history) + len(pending) < sc.init_count:
            a = sample_uniform(space, rng)
            if a not in history and serialize(a) not in keys:
                keys.add(serialize(a))
                pending.append(a)
        if pending:
            run_batch(pending, 0)
        done = max(0, -(-(len(history) - sc.init_count) // sc.n2)) if sc.n2 else 0
        for it in range(done + 1, sc.n1 + 1):
            gp = bayesopt.fit(history.archs, history.values, space)
            props = bayesopt.propose(gp, history, space, sc.n2, sc.pool_size, np.random.default_rng([seed, it]),
                                     n_parents=sc.parents, mutation_rate=sc.mutation_rate)
            run_batch(props, it)
            log.info("search iteration %d best %.4f", it, history.tau)
    finally:
        if hist_fh:
            hist_fh.close()
            log_fh.close()
    return history


def random_search(net: Supernet, dataset: Dataset, cfg: RunConfig, budget: int, seed: int,
                  evaluate: Optional[Callable[[ArchCode], float]] = None) -> bayesopt.SearchHistory:
    """Uniform random baseline with the same evaluation routine."""
    rng = np.random.default_rng([seed, 99])
    history = bayesopt.SearchHistory()
    while len(history) < budget:
        a = sample_uniform(net.space, rng)
        if a not in history:
            history.add(a, evaluate(a) if evaluate else evaluate_shared(net, a, dataset, cfg))
    return history


def search_report(history: bayesopt.SearchHistory, top: int) -> str:
    lines = [f"evaluated = {len(history)}", f"best_eer = {history.tau:.6g}"]
    for rank, (a, v) in enumerate(history.ranked(top), 1):
        lines.append(f"rank{rank} = {serialize(a)}\t{v:.6g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- retraining


def retrain(cfg: RunConfig, arch: ArchCode, dataset: Dataset, supernet: Optional[Supernet] = None,
            out_dir=None, seed: Optional[int] = None) -> Tuple[CandidateNet, EvalReport, List[EpochLog]]:
    """Train ``arch`` alone with AAM + MHE and keep the epoch with the best validation EER."""
    seed = cfg.run.seed if seed is None else seed
    t0 = time.time()
    config = cfg.net_config(dataset.num_speakers, dataset.feat_dim)
    if supernet is not None and cfg.retrain.warm_start:
        net = supernet.instantiate(arch)
        fresh = CandidateNet(arch, config, seed=seed + 1)
        net.params["cls.W"], net.params["cls.b"] = fresh.params["cls.W"], fresh.params["cls.b"]
    else:
        net = CandidateNet(arch, config, seed=seed + 1)
    rng = np.random.default_rng([seed, 2])
    best = {"eer": np.inf, "params": None, "buffers": None, "metrics": None}

    def on_epoch(entry: EpochLog):
        metrics = evaluate_model(net, dataset)
        entry.val_eer = metrics["eer"]
        if metrics["eer"] < best["eer"]:
            best.update(eer=metrics["eer"], metrics=metrics,
                        params={k: v.copy() for k, v in net.params.items()},
                        buffers={k: v.copy() for k, v in net.buffers.items()})

    hist = _run_epochs(net, dataset.train, lambda r: None, "aam_mhe", cfg.retrain.lr, cfg.retrain.epochs,
                       cfg.retrain.milestones, cfg, rng, on_epoch)
    net.params, net.buffers = best["params"], best["buffers"]
    m = best["metrics"]
    report = EvalReport(serialize(arch), m["eer"], m["dcf_0.01"], m["dcf_0.001"], count_params(arch, config),
                        time.time() - t0, seed, m["threshold"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "candidate.snck", net, {"report": asdict(report)})
        (out / "report.txt").write_text(report.to_text())
        (out / "train_log.tsv").write_text(_format_log(hist))
    return net, report, hist


def _format_log(hist: List[EpochLog]) -> str:
    rows = ["epoch\tlr\tloss\taccuracy\tval_eer"]
    rows += [f"{h.epoch}\t{h.lr:g}\t{h.loss:.6f}\t{h.accuracy:.6f}\t{h.val_eer:.6f}" for h in hist]
    return "\n".join(rows) + "\n"


def write_training_outputs(out_dir, net, hist: List[EpochLog], extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "supernet.snck", net, extra)
    (out / "train_log.tsv").write_text(_format_log(hist))
    return out / "supernet.snck"


# ---------------------------------------------------------------- loss comparison


def compare_supernet_losses(cfg: RunConfig, dataset: Dataset, out_dir=None) -> Dict[str, object]:
    """Cross entropy vs AAM + MHE as the supernet loss: shared-weight EER range and retrained EER."""
    report: Dict[str, object] = {}
    for kind in ("ce", "aam_mhe"):
        net, _ = train_supernet(cfg, dataset, loss=kind)
        sub = None if out_dir is None else Path(out_dir) / kind
        history = search(cfg, net, dataset, sub)
        top = history.ranked(cfg.search.top_k)
        _, rep, _ = retrain(cfg, top[0][0], dataset, net)
        report[f"{kind}.shared_min"] = top[0][1]
        report[f"{kind}.shared_max"] = top[-1][1]
        report[f"{kind}.retrain"] = rep.eer
        report[f"{kind}.best_arch"] = serialize(top[0][0])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "loss_comparison.txt").write_text(format_report(report))
    return report
