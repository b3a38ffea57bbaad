import dataclasses
import math

import numpy as np
import pytest

from rdflow.harness import runner
from rdflow.harness.cli import main
from rdflow.harness.config import merge, parse, preset
from rdflow.metrics import read_metrics_csv, read_summary_csv
from rdflow.net import load_checkpoint, save_checkpoint
from rdflow.solver import load_trajectory

TINY = """
system: {kind: gs}
method: ddol_art
grid: 8
dt_op: 0.01
T: 0.04
T_test: 0.06
train: {B: 4, b: 2, budget_start: 3, budget_end: 1, K: 2, milestone_interval: 1}
net: {c_mid: 4, n_blocks: 1, groups: 2}
eval: {n_seeds: 2, families: [single_gaussian, stripes]}
corr: {K: 2, seeds: [0, 1], n_fail_values: [1, .inf], probe_families: [patch, stripes]}
"""


def tiny(tmp_path, extra="", name="run"):
    cfg = parse(TINY)
    if extra:
        cfg = merge(cfg, extra)
    return dataclasses.replace(cfg, out=str(tmp_path / name))


def _bytes(paths):
    return [p.read_bytes() for p in paths]


def test_split_layout_and_default_seed_count():
    cfg = preset("desk-gs-ddol")
    parts = runner.split_parts(cfg, "test")
    assert [p.family for p in parts] == list(cfg.eval.families)
    assert all(p.count == 10 and p.steps == 200 for p in parts)
    assert runner.split_parts(cfg, "train")[0].count == 8
    assert runner.split_parts(cfg, "train")[0].steps == 50
    nlol = merge(cfg, "method: nlol")
    assert runner.split_parts(nlol, "train")[0].steps == 1
    with pytest.raises(runner.HarnessError):
        runner.split_parts(cfg, "bogus")


def test_gen_data_is_byte_reproducible_and_thread_independent(tmp_path, monkeypatch):
    a = runner.gen_data(tiny(tmp_path, name="a"))
    b = runner.gen_data(tiny(tmp_path, name="b"))
    monkeypatch.setenv(runner.THREADS_ENV, "3")
    c = runner.gen_data(tiny(tmp_path, name="c"))
    assert len(a) == 4 + 2 + 4
    assert _bytes(a) == _bytes(b) == _bytes(c)
    t = load_trajectory(a[0])
    assert t.meta["provenance"] == tiny(tmp_path).provenance()
    assert t.meta["split"] == "train" and t.meta["index"] == 0


def test_splits_use_distinct_streams(tmp_path):
    cfg = tiny(tmp_path)
    train = runner.load_split(cfg, "train")["single_gaussian"]
    val = runner.load_split(cfg, "val")["single_gaussian"]
    test = runner.load_split(cfg, "test")["single_gaussian"]
    firsts = [t.states[0] for t in train + val + test]
    for i in range(len(firsts)):
        for j in range(i):
            assert not np.array_equal(firsts[i], firsts[j])


def test_thread_env_validation(monkeypatch):
    monkeypatch.setenv(runner.THREADS_ENV, "many")
    with pytest.raises(runner.HarnessError):
        runner.n_threads()
    monkeypatch.setenv(runner.THREADS_ENV, "0")
    assert runner.n_threads() == 1
    monkeypatch.setenv(runner.THREADS_ENV, "4")
    assert runner.parallel_map(lambda x: x * x, range(7)) == [x * x for x in range(7)]


def test_load_split_rejects_mismatched_files(tmp_path):
    cfg = tiny(tmp_path)
    runner.gen_data(cfg, ("train",))
    with pytest.raises(runner.HarnessError, match="grid"):
        runner.load_split(dataclasses.replace(cfg, grid=16), "train")
    with pytest.raises(runner.HarnessError, match="steps"):
        runner.load_split(merge(cfg, "T: 0.08"), "train")
    with pytest.raises(runner.HarnessError, match="missing"):
        runner.load_split(cfg, "test", generate_missing=False)


def test_fixed_point_operator_scores_zero(tmp_path):
    """Constant-equilibrium references (noise-free Turing seeding) under the fixed-point operator."""
    cfg = tiny(tmp_path, "eval: {families: [turing_noise], n_seeds: 3}\nic: {params: {turing_sigma: 0.0}}\n")
    params = runner.fixed_point_params(cfg, [1.0, 0.0])
    ckpt = tmp_path / "fixed.ckpt"
    save_checkpoint(ckpt, params)
    records, summaries = runner.evaluate(cfg, runner.load_operator(cfg, ckpt))
    assert summaries[0][2].amae == 0.0
    assert all(np.all(r.errors == 0.0) for _, _, r in records)
    rows = read_summary_csv(tmp_path / "run" / "summary.csv")
    assert rows == [{"system": "gs", "method": "ddol_art", "family": "turing_noise", "amae": 0.0, "n_seeds": 3}]
    assert len(read_metrics_csv(tmp_path / "run" / "metrics.csv")) == 3 * (cfg.steps_test + 1)


def test_train_eval_render_reproducible(tmp_path):
    outputs = []
    for name in ("a", "b"):
        cfg = tiny(tmp_path, name=name)
        runner.train(cfg)
        op = runner.load_operator(cfg)
        runner.evaluate(cfg, op)
        pred, _ = runner.rollout_dump(cfg, op, "stripes", 1)
        imgs = runner.render(cfg, pred) + runner.render(cfg, pred, use_palette=True)
        out = tmp_path / name
        files = [out / "ckpt" / f for f in ("best.ckpt", "final.ckpt", "last.ckpt")]
        files += [out / "metrics.csv", out / "summary.csv"] + imgs
        outputs.append(_bytes(files))
    assert outputs[0] == outputs[1]


def test_train_outputs_and_provenance(tmp_path):
    cfg = tiny(tmp_path)
    result = runner.train(cfg)
    out = tmp_path / "run"
    head = f"# {cfg.provenance()}\n"
    assert (out / "train_log.csv").read_text().startswith(head)
    for name in ("best.ckpt", "final.ckpt", "last.ckpt"):
        _, _, meta = load_checkpoint(out / "ckpt" / name, cfg.net)
        assert meta["provenance"] == cfg.provenance()
        assert "seconds" not in meta["trainer"]
    best, _, _ = load_checkpoint(out / "ckpt" / "best.ckpt", cfg.net)
    for k in best:
        np.testing.assert_allclose(best[k], result.params[k], rtol=1e-6, atol=1e-7)
    assert result.state.updates == sum(r.cum_updates for r in result.log.events("batch_end")[-1:])


def test_resume_matches_uninterrupted_run(tmp_path):
    full = tiny(tmp_path, name="full")
    ref = runner.train(full)

    cfg = tiny(tmp_path, name="cut")

    class Stop(Exception):
        pass

    def stop_after_two(msg):
        if msg.startswith("epoch 0 batch 1"):
            raise Stop

    with pytest.raises(Stop):
        runner.train(cfg, progress=stop_after_two)
    resumed = runner.train(cfg, resume=True)
    assert resumed.state.updates == ref.state.updates
    assert [(r.epoch, r.batch, r.step, r.event) for r in resumed.log.records] == \
        [(r.epoch, r.batch, r.step, r.event) for r in ref.log.records]
    # The resumed run restarts from float32-rounded parameters and moments.
    # Single-precision agreement is the expectation.
    for k in ref.final_params:
        np.testing.assert_allclose(resumed.final_params[k], ref.final_params[k], rtol=1e-3, atol=1e-5)


def test_resume_rejects_other_config(tmp_path):
    cfg = tiny(tmp_path)
    runner.train(cfg)
    other = merge(cfg, "train: {eta0: 0.01}")
    with pytest.raises(runner.HarnessError, match="written by config"):
        runner.train(other, resume=True)


def test_checkpoint_architecture_mismatch(tmp_path):
    cfg = tiny(tmp_path)
    runner.train(merge(cfg, "method: ddol"))
    with pytest.raises(ValueError, match="architecture"):
        runner.load_operator(merge(cfg, "net: {c_mid: 8}"))
    with pytest.raises(runner.HarnessError, match="does not exist"):
        runner.load_operator(cfg, tmp_path / "missing.ckpt")


def test_nlol_training_runs(tmp_path):
    cfg = tiny(tmp_path, "method: nlol")
    result = runner.train(cfg)
    assert result.state.updates == 2 * 2 * sum(cfg.train_config().budgets())


def test_pgm_mapping_and_header():
    field = np.array([[-1.0, 0.0], [0.5, 2.0]])
    raw = runner.pgm_bytes(field, 0.0, 1.0, "config=x version=y")
    head, w_h, maxval, data = raw.split(b"\n", 4)[0], raw.split(b"\n")[2], raw.split(b"\n")[3], raw[-4:]
    assert head == b"P5" and w_h == b"2 2" and maxval == b"255"
    assert b"# config=x version=y" in raw
    # Rows run from the top (largest y); x runs left to right.
    img = np.frombuffer(data, dtype=np.uint8).reshape(2, 2)
    assert img.tolist() == [[0, 255], [0, 128]]
    q = runner.quantize(np.array([np.nan, np.inf, 0.25]), 0.0, 1.0)
    assert q.tolist() == [0, 0, 64]


def test_ppm_palette_side_by_side():
    lut = runner.palette()
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    raw = runner.ppm_bytes([np.zeros((4, 4)), np.ones((4, 4))], 0.0, 1.0, gap=2)
    assert raw.startswith(b"P6\n10 4\n255\n")
    img = np.frombuffer(raw[len(b"P6\n10 4\n255\n"):], dtype=np.uint8).reshape(4, 10, 3)
    assert img[0, 0].tolist() == lut[0].tolist()
    assert img[0, 5].tolist() == [255, 255, 255]
    assert img[0, 9].tolist() == lut[255].tolist()


def test_corr_study(tmp_path):
    cfg = tiny(tmp_path)
    points, summary = runner.corr_study(cfg)
    # 2 n_fail values x 2 seeds x (2 epochs x 2 batches).
    assert len(points) == 16
    assert set(summary) == {1.0, math.inf, "all"}
    n, r, p = summary["all"]
    assert n == 16 and -1.0 <= r <= 1.0 and 0.0 <= p <= 1.0
    text = (tmp_path / "run" / "corr_summary.csv").read_text().splitlines()
    assert text[0] == f"# {cfg.provenance()}"
    assert text[1] == "n_fail,n_points,r,p"
    assert text[3].startswith("inf,")


def test_cli_pipeline(tmp_path, capsys):
    cfgfile = tmp_path / "tiny.yaml"
    cfgfile.write_text(TINY)
    base = ["--config", str(cfgfile), "--out", str(tmp_path / "cli"), "--quiet"]
    assert main(["gen-data", *base, "--split", "train", "--split", "val"]) == 0
    assert sorted(p.name for p in (tmp_path / "cli" / "data").iterdir()) == ["train", "val"]
    assert main(["train", *base]) == 0
    assert main(["eval", *base]) == 0
    out = capsys.readouterr().out
    assert "single_gaussian: AMAE" in out and "stripes: AMAE" in out
    assert main(["rollout", *base, "--family", "patch", "--index", "1"]) == 0
    pred = tmp_path / "cli" / "rollout" / "patch_0001_pred.rdtraj"
    assert pred.exists()
    assert main(["render", *base, str(pred), "--every", "3"]) == 0
    assert len(list((tmp_path / "cli" / "render").glob("*.pgm"))) == 2 * 3


def test_cli_seed_and_preset_overrides(tmp_path):
    from rdflow.harness.cli import build_parser, resolve_config
    args = build_parser().parse_args(["train", "--preset", "gs-ddol-art", "--seed", "5", "--out", "x"])
    cfg = resolve_config(args)
    assert (cfg.seeds.ics, cfg.seeds.val, cfg.seeds.weights, cfg.seeds.eval) == (5, 6, 5, 7)
    assert cfg.out == "x" and cfg.dt_op == 0.05
    over = tmp_path / "over.yaml"
    over.write_text("train: {B: 64}\n")
    args = build_parser().parse_args(["train", "--preset", "gs-ddol-art", "--config", str(over)])
    assert resolve_config(args).train.B == 64


def test_cli_errors(tmp_path, capsys):
    assert main(["train", "--preset", "nope"]) == 2
    assert "unknown preset" in capsys.readouterr().err
    assert main(["eval", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert "does not exist" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: 8\ndt_op: quick\n")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert "dt_op (line 2)" in capsys.readouterr().err
    cfgfile = tmp_path / "tiny.yaml"
    cfgfile.write_text(TINY)
    assert main(["eval", "--config", str(cfgfile), "--out", str(tmp_path / "none"), "--quiet"]) == 2
    assert "checkpoint" in capsys.readouterr().err
    assert main(["render", "--config", str(cfgfile), str(tmp_path / "nope.rdtraj")]) == 2


def test_cli_presets_listing(capsys):
    assert main(["presets"]) == 0
    names = capsys.readouterr().out.split()
    assert "gs-ddol-art" in names and "desk-gs-ddol" in names and "corr-gs" in names
