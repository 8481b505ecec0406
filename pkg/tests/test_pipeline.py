from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import bo_objective
from conftest import tiny_config
from speechnas import cli, pipeline
from speechnas import config as cf
from speechnas.archspace import make_space, parse, sample_many, serialize
from speechnas.bayesopt import SearchHistory
from speechnas.data import Dataset
from speechnas.metrics import parse_report
from speechnas.network import Supernet, count_params, load_checkpoint, save_checkpoint


def fake_evaluator(space, seed=0):
    f = bo_objective.make_objective(seed, space)
    calls = []

    def evaluate(arch):
        calls.append(serialize(arch))
        return f(arch)

    return evaluate, calls


def log_rows(path):
    return [line.split("\t") for line in Path(path).read_text().splitlines()]


# ---------------------------------------------------------------- supernet training


def test_train_supernet_is_deterministic(tiny):
    cfg, ds = tiny
    net1, h1 = pipeline.train_supernet(cfg, ds)
    net2, h2 = pipeline.train_supernet(cfg, ds)
    assert [e.loss for e in h1] == [e.loss for e in h2]
    for k in net1.params:
        np.testing.assert_array_equal(net1.params[k], net2.params[k])


def test_lr_log_shows_configured_drops(tiny, tmp_path):
    cfg, ds = tiny
    net, hist = pipeline.train_supernet(cfg, ds)
    assert [e.lr for e in hist] == pytest.approx([0.03, 0.003, 0.0003])
    pipeline.write_training_outputs(tmp_path, net, hist)
    rows = log_rows(tmp_path / "train_log.tsv")
    assert rows[0] == ["epoch", "lr", "loss", "accuracy", "val_eer"]
    assert [float(r[1]) for r in rows[1:]] == pytest.approx([0.03, 0.003, 0.0003])


def test_train_supernet_rejects_empty_training_set(tiny):
    cfg, ds = tiny
    with pytest.raises(ValueError, match="empty"):
        pipeline.train_supernet(cfg, replace(ds, train=[]))


def test_unknown_supernet_loss(tiny):
    cfg, ds = tiny
    with pytest.raises(ValueError, match="unknown loss"):
        pipeline.train_supernet(cfg, ds, loss="triplet")


# ---------------------------------------------------------------- shared-weight evaluation


def test_evaluate_shared_is_repeatable_and_read_only(tiny):
    cfg, ds = tiny
    net, _ = pipeline.train_supernet(cfg, ds)
    before = net.snapshot()
    arch = sample_many(net.space, 1, 5)[0]
    e1 = pipeline.evaluate_shared(net, arch, ds, cfg)
    e2 = pipeline.evaluate_shared(net, arch, ds, cfg)
    assert e1 == e2 and 0.0 <= e1 <= 1.0
    after = net.snapshot()
    assert before.keys() == after.keys()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_evaluate_shared_rejects_foreign_arch(tiny):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    with pytest.raises(ValueError):
        pipeline.evaluate_shared(net, parse("4,8,2;4,8,2"), ds, cfg)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("deskdata")
    pipeline.gen_data(cf.load_config(overrides={"run.profile": "desk"}), out)
    return Dataset.load(out)


def test_untrained_supernet_is_at_chance(desk_data):
    cfg = cf.load_config(overrides={"run.profile": "desk"})
    net = Supernet(cfg.search_space(), cfg.net_config(desk_data.num_speakers, desk_data.feat_dim), seed=3)
    eers = [pipeline.evaluate_shared(net, a, desk_data, cfg) for a in sample_many(net.space, 3, 0)]
    assert all(abs(e - 0.5) <= 0.1 for e in eers), eers


# ---------------------------------------------------------------- search bookkeeping


def test_search_history_size_and_log(tiny, tmp_path):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    evaluate, calls = fake_evaluator(net.space)
    history = pipeline.search(cfg, net, ds, tmp_path, evaluate=evaluate)
    sc = cfg.search
    assert len(history) == len(calls) == sc.init_count + sc.n1 * sc.n2 == len(set(calls))
    assert len(log_rows(tmp_path / "history.tsv")) == len(history)
    iters = [int(r[0]) for r in log_rows(tmp_path / "search_log.tsv")]
    assert iters == [0] * sc.init_count + [i for i in range(1, sc.n1 + 1) for _ in range(sc.n2)]


def test_best_so_far_never_increases(tiny, tmp_path):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    pipeline.search(cfg, net, ds, tmp_path, evaluate=fake_evaluator(net.space, 3)[0])
    rows = log_rows(tmp_path / "search_log.tsv")
    taus = [min(float(r[2]) for r in rows if int(r[0]) <= it) for it in range(cfg.search.n1 + 1)]
    assert all(b <= a for a, b in zip(taus, taus[1:]))


def test_resume_continues_without_reevaluating(tiny, tmp_path):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    short = replace(cfg, search=replace(cfg.search, n1=1))
    pipeline.search(short, net, ds, tmp_path / "run", evaluate=fake_evaluator(net.space)[0])
    stored = {r[0] for r in log_rows(tmp_path / "run" / "history.tsv")}

    evaluate, calls = fake_evaluator(net.space)
    resumed = pipeline.search(cfg, net, ds, tmp_path / "run", resume=tmp_path / "run" / "history.tsv",
                              evaluate=evaluate)
    assert len(calls) == cfg.search.n2 and not stored & set(calls)
    iters = [int(r[0]) for r in log_rows(tmp_path / "run" / "search_log.tsv")]
    assert iters[-cfg.search.n2:] == [2] * cfg.search.n2 and max(iters[:-cfg.search.n2]) == 1

    straight = pipeline.search(cfg, net, ds, evaluate=fake_evaluator(net.space)[0])
    assert [serialize(a) for a in resumed.archs] == [serialize(a) for a in straight.archs]


def test_resume_rejects_history_from_another_space(tiny, tmp_path):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    other = SearchHistory()
    other.add(sample_many(make_space("space3"), 1, 0)[0], 0.2)
    other.save(tmp_path / "h.tsv")
    with pytest.raises(ValueError):
        pipeline.search(cfg, net, ds, resume=tmp_path / "h.tsv", evaluate=fake_evaluator(net.space)[0])


def test_random_search_budget_and_dedup(tiny):
    cfg, ds = tiny
    net = Supernet(cfg.search_space(), cfg.net_config(ds.num_speakers, ds.feat_dim))
    evaluate, calls = fake_evaluator(net.space)
    h = pipeline.random_search(net, ds, cfg, 20, seed=1, evaluate=evaluate)
    assert len(h) == len(calls) == len(set(calls)) == 20


def test_search_report_lists_best_first():
    h = SearchHistory()
    for code, v in [("2,4,2;2,4,2", 0.3), ("3,8,4;2,4,2", 0.1), ("2,8,4;3,4,2", 0.2)]:
        h.add(parse(code), v)
    r = parse_report(pipeline.search_report(h, 2))
    assert r["evaluated"] == "3" and float(r["best_eer"]) == 0.1
    assert r["rank1"].split("\t")[0] == "3,8,4;2,4,2" and r["rank2"].split("\t")[0] == "2,8,4;3,4,2"
    assert "rank3" not in r


# ---------------------------------------------------------------- retraining and loss comparison


def test_retrain_report_and_outputs(tiny, tmp_path):
    cfg, ds = tiny
    arch = sample_many(cfg.search_space(), 1, 2)[0]
    net, report, hist = pipeline.retrain(cfg, arch, ds, out_dir=tmp_path)
    assert report.params == count_params(arch, net.config) == net.num_params()
    assert report.arch == serialize(arch)
    assert report.eer == min(h.val_eer for h in hist)
    for name in ("candidate.snck", "report.txt", "train_log.tsv"):
        assert (tmp_path / name).is_file()
    saved, extra = load_checkpoint(tmp_path / "candidate.snck")
    assert pipeline.evaluate_model(saved, ds)["eer"] == pytest.approx(report.eer, abs=1e-12)
    assert float(parse_report((tmp_path / "report.txt").read_text())["params"]) == report.params


def test_warm_start_retrain_uses_supernet_body(tiny):
    cfg, ds = tiny
    cfg = replace(cfg, retrain=replace(cfg.retrain, warm_start=True, epochs=1, milestones=()))
    sn, _ = pipeline.train_supernet(cfg, ds)
    arch = sample_many(sn.space, 1, 4)[0]
    warm, _, _ = pipeline.retrain(cfg, arch, ds, sn)
    cold, _, _ = pipeline.retrain(replace(cfg, retrain=replace(cfg.retrain, warm_start=False)), arch, ds, sn)
    body = [k for k in warm.params if not k.startswith("cls.")]
    # one epoch from the slices stays closer to them than one epoch from a fresh init
    ref = sn.instantiate(arch).params
    dist = lambda net: sum(float(np.abs(net.params[k] - ref[k]).sum()) for k in body)
    assert dist(warm) < dist(cold)


def test_compare_supernet_losses_has_four_cells_and_is_deterministic(tiny, tmp_path):
    cfg, ds = tiny
    r1 = pipeline.compare_supernet_losses(cfg, ds, tmp_path)
    cells = {k for k in r1 if not k.endswith("best_arch")}
    assert cells == {f"{loss}.{col}" for loss in ("ce", "aam_mhe") for col in ("shared_min", "shared_max", "retrain")}
    assert all(r1[f"{loss}.shared_min"] <= r1[f"{loss}.shared_max"] for loss in ("ce", "aam_mhe"))
    assert (tmp_path / "loss_comparison.txt").is_file()
    assert pipeline.compare_supernet_losses(cfg, ds) == r1


# ---------------------------------------------------------------- command line


def write_config(path, data_dir, **extra):
    path.write_text(tiny_config(**{"data.dir": str(data_dir), **extra}).to_text())
    return path


def test_cli_end_to_end(tmp_path, capsys):
    cfg = write_config(tmp_path / "tiny.cfg", tmp_path / "data")
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert cli.main(["train-supernet", "--config", str(cfg), "--out", str(tmp_path / "sn"), "--seed", "2"]) == 0
    assert 0.0 <= float(parse_report(capsys.readouterr().out)["final_accuracy"]) <= 1.0
    sn = str(tmp_path / "sn" / "supernet.snck")
    assert cli.main(["search", "--config", str(cfg), "--supernet", sn, "--out", str(tmp_path / "search")]) == 0
    searched = parse_report(capsys.readouterr().out)
    assert searched == parse_report((tmp_path / "search" / "report.txt").read_text())
    top = searched["rank1"].split("\t")[0]

    assert cli.main(["report", "--history", str(tmp_path / "search" / "history.tsv"), "--top", "1"]) == 0
    assert parse_report(capsys.readouterr().out)["rank1"] == searched["rank1"]

    assert cli.main(["retrain", "--config", str(cfg), "--arch", top, "--supernet", sn,
                     "--out", str(tmp_path / "rt")]) == 0
    retrained = parse_report(capsys.readouterr().out)
    assert cli.main(["eval", "--config", str(cfg), "--model", str(tmp_path / "rt" / "candidate.snck"),
                     "--trials", str(tmp_path / "data" / "val_trials.tsv"), "--out", str(tmp_path / "eval.txt")]) == 0
    evaluated = parse_report((tmp_path / "eval.txt").read_text())
    assert evaluated["arch"] == retrained["arch"] == top
    assert float(evaluated["eer"]) == pytest.approx(float(retrained["eer"]), abs=1e-6)
    assert evaluated["params"] == retrained["params"]


def test_cli_resume_matches_uninterrupted_search(tmp_path, tiny_data, capsys):
    cfg = write_config(tmp_path / "a.cfg", tiny_data)
    short = write_config(tmp_path / "b.cfg", tiny_data, **{"search.n1": "1"})
    ds = Dataset.load(tiny_data)
    net = Supernet(tiny_config().search_space(), tiny_config().net_config(ds.num_speakers, ds.feat_dim))
    save_checkpoint(tmp_path / "sn.snck", net)
    sn = str(tmp_path / "sn.snck")
    cli.main(["search", "--config", str(cfg), "--supernet", sn, "--out", str(tmp_path / "full")])
    cli.main(["search", "--config", str(short), "--supernet", sn, "--out", str(tmp_path / "part")])
    cli.main(["search", "--config", str(cfg), "--supernet", sn, "--out", str(tmp_path / "part"),
              "--resume", str(tmp_path / "part" / "history.tsv")])
    capsys.readouterr()
    assert (tmp_path / "full" / "history.tsv").read_text() == (tmp_path / "part" / "history.tsv").read_text()


def test_cli_errors_exit_with_status_2(tmp_path, tiny_data, capsys):
    cfg = write_config(tmp_path / "c.cfg", tiny_data)
    no_data = tmp_path / "nodata.cfg"
    no_data.write_text("run.profile = desk\n")
    ds = Dataset.load(tiny_data)
    net = Supernet(tiny_config().search_space(), tiny_config().net_config(ds.num_speakers, ds.feat_dim))
    save_checkpoint(tmp_path / "sn.snck", net)
    bad = [
        ["train-supernet", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "x")],
        ["train-supernet", "--config", str(no_data), "--out", str(tmp_path / "x")],
        ["retrain", "--config", str(cfg), "--arch", "speechnas5", "--out", str(tmp_path / "x")],
        ["retrain", "--config", str(cfg), "--arch", "2,4", "--out", str(tmp_path / "x")],
        ["eval", "--config", str(cfg), "--model", str(tmp_path / "sn.snck"),
         "--trials", str(tiny_data / "val_trials.tsv"), "--out", str(tmp_path / "e.txt")],
        ["search", "--config", str(cfg), "--supernet", str(tiny_data / "train.tsv"), "--out", str(tmp_path / "x")],
    ]
    for argv in bad:
        assert cli.main(argv) == 2, argv
        assert "speechnas: error:" in capsys.readouterr().err


# ---------------------------------------------------------------- desk-scale checks (slow)


@pytest.mark.slow
def test_desk_supernet_training_accuracy(desk_runs):
    accs = [r.supernet_accuracy for r in desk_runs]
    assert all(a > 0.8 for a in accs), accs


@pytest.mark.slow
def test_desk_supernet_ranks_architectures_apart(desk_runs):
    run = desk_runs[0]
    cfg = cf.load_config(run.config)
    net, _ = load_checkpoint(run.supernet)
    ds = Dataset.load(run.data)
    eers = [pipeline.evaluate_shared(net, a, ds, cfg) for a in sample_many(net.space, 50, 11)]
    assert min(eers) < max(eers)


@pytest.mark.slow
def test_desk_search_is_no_worse_than_equal_budget_random(desk_runs):
    gaps = []
    for run in desk_runs:
        cfg = cf.load_config(run.config)
        net, _ = load_checkpoint(run.supernet)
        ds = Dataset.load(run.data)
        searched = SearchHistory.load(run.root / "search" / "history.tsv")
        known = dict(zip(map(serialize, searched.archs), searched.values))

        def evaluate(arch):
            key = serialize(arch)
            return known[key] if key in known else pipeline.evaluate_shared(net, arch, ds, cfg)

        rand = pipeline.random_search(net, ds, cfg, len(searched), seed=run.seed, evaluate=evaluate)
        gaps.append(searched.tau - rand.tau)
    print("search minus random best EER per seed:", [round(g, 4) for g in gaps])
    assert np.median(gaps) <= 0.0


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at desk scale the AAM+MHE supernet ranks no better than cross entropy; "
                                       "measurements are in the decisions ledger")
def test_desk_aam_supernet_beats_cross_entropy(desk_runs):
    run = desk_runs[0]
    cfg = cf.load_config(run.config)
    ds = Dataset.load(run.data)
    ce, _ = load_checkpoint(run.supernet)
    aam, _ = pipeline.train_supernet(cfg, ds, loss="aam_mhe")
    archs = sample_many(ce.space, 20, 123)
    ce_eers = [pipeline.evaluate_shared(ce, a, ds, cfg) for a in archs]
    aam_eers = [pipeline.evaluate_shared(aam, a, ds, cfg) for a in archs]
    print(f"shared EER median: aam_mhe {np.median(aam_eers):.4f} ce {np.median(ce_eers):.4f}")
    assert np.median(aam_eers) < np.median(ce_eers)
