import csv
import json
import types

import pytest

from adavla.cli import (
    RESULT_COLUMNS,
    _fmt,
    aggregate,
    main,
    median_step_seconds,
    pareto_front,
)


TINY_INI = """
[backbone]
num_layers = 2
d_model = 16
num_heads = 2

[router]
d_router = 16
d_match = 8
d_step_embed = 8
d_v = 16
d_text = 16
num_layers = 2

[head]
d_z = 16
horizon = 4
denoise_steps = 4
hidden = 32
step_embed_dim = 8

[env]
max_steps = 8

[bc]
episodes = 2
steps = 6
batch_size = 8

[distill]
teacher_episodes = 1
steps = 3
batch_size = 8
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    out = root / "train"
    rc = main(["train", "--config", str(ini), "--out", str(out), "--seed", "0"])
    assert rc == 0
    return types.SimpleNamespace(root=root, ini=ini, train_dir=out,
                                 checkpoint=out / "checkpoint.npz")


# ---------------------------------------------------------------------------
# small pure helpers
# ---------------------------------------------------------------------------

def test_fmt_four_significant_digits():
    assert _fmt(0.123456) == "0.1235"
    assert _fmt(12345.6) == "1.235e+04"
    assert _fmt(100.0) == "100"
    assert _fmt(7) == "7"
    assert _fmt("routed") == "routed"


def test_aggregate_worked_example():
    episodes = [
        {"success": True, "steps": 2, "step_rows": [
            {"flops_total": 100, "kept_tokens": 4, "executed_layers": [1, 1],
             "reuse_requested": True, "cache_hit": False},
            {"flops_total": 200, "kept_tokens": 6, "executed_layers": [1, 0],
             "reuse_requested": False, "cache_hit": False},
        ]},
        {"success": False, "steps": 1, "step_rows": [
            {"flops_total": 300, "kept_tokens": 8, "executed_layers": [0, 1],
             "reuse_requested": True, "cache_hit": True},
        ]},
    ]
    agg = aggregate(episodes)
    assert agg["episodes"] == 2
    assert agg["success_rate"] == 50.0
    assert agg["flops_per_step"] == 200.0
    assert agg["kept_tokens_mean"] == 6.0
    assert agg["layers_mean"] == pytest.approx(4 / 3)
    assert agg["reuse_request_rate"] == pytest.approx(200 / 3)
    assert agg["cache_hit_rate"] == pytest.approx(100 / 3)
    assert agg["steps_mean"] == 1.5


def test_pareto_front_removes_dominated():
    pts = [
        {"flops_pct": 40.0, "success_rate": 90.0},
        {"flops_pct": 50.0, "success_rate": 85.0},   # dominated by the first
        {"flops_pct": 30.0, "success_rate": 80.0},
        {"flops_pct": 60.0, "success_rate": 95.0},
    ]
    front = pareto_front(pts)
    assert pts[0] in front
    assert pts[1] not in front
    assert pts[2] in front
    assert pts[3] in front


def test_pareto_front_keeps_duplicates_of_best():
    pts = [
        {"flops_pct": 40.0, "success_rate": 90.0},
        {"flops_pct": 40.0, "success_rate": 90.0},
    ]
    assert len(pareto_front(pts)) == 2


def test_median_step_seconds_warmup():
    def fake(walls):
        stats = [types.SimpleNamespace(wall_time=w) for w in walls]
        return types.SimpleNamespace(stats=stats)

    # 12 steps: first 10 discarded as warmup
    walls = [9.0] * 10 + [1.0, 3.0]
    assert median_step_seconds([fake(walls)]) == 2.0
    # short runs keep everything
    assert median_step_seconds([fake([1.0, 2.0, 3.0])]) == 2.0


# ---------------------------------------------------------------------------
# train artifacts
# ---------------------------------------------------------------------------

def test_train_writes_artifacts(trained):
    out = trained.train_dir
    for name in ("checkpoint.npz", "checkpoint_bc.npz", "bc_loss.csv",
                 "distill_loss.csv", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("seed", "config_hash", "code_version", "command"):
        assert key in manifest
    with (out / "bc_loss.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss"]
    assert len(rows) == 7  # header + 6 steps


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def run_eval(trained, out_name, *extra):
    out = trained.root / out_name
    rc = main(["eval", "--config", str(trained.ini),
               "--checkpoint", str(trained.checkpoint),
               "--episodes", "3", "--seed", "0",
               "--out", str(out), *extra])
    assert rc == 0
    return out


def test_eval_writes_outputs(trained):
    out = run_eval(trained, "eval_routed", "--mode", "routed")
    assert (out / "results.csv").exists()
    assert (out / "timing.csv").exists()
    assert (out / "manifest.json").exists()
    traces = sorted((out / "traces").glob("ep*.jsonl"))
    assert [p.name for p in traces] == ["ep00000.jsonl", "ep00001.jsonl", "ep00002.jsonl"]
    maps = list((out / "token_maps").glob("ep*.csv"))
    assert len(maps) == 3

    with (out / "results.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(RESULT_COLUMNS)
    assert len(rows) == 2
    row = dict(zip(rows[0], rows[1]))
    assert row["mode"] == "routed"
    assert row["episodes"] == "3"
    assert float(row["flops_pct"]) < 100.0


def test_eval_trace_files_are_jsonl(trained):
    out = trained.root / "eval_routed"
    path = out / "traces" / "ep00000.jsonl"
    lines = path.read_text().strip().split("\n")
    header = json.loads(lines[0])
    assert set(header) == {"seed", "success", "steps"}
    first = json.loads(lines[1])
    assert "flops_total" in first and "kept_index" in first


def test_eval_dense_has_no_token_maps(trained):
    out = run_eval(trained, "eval_dense", "--mode", "dense")
    maps = list((out / "token_maps").glob("*.csv"))
    assert maps == []
    with (out / "results.csv").open() as fh:
        row = dict(zip(*list(csv.reader(fh))[:2]))
    assert row["kept_tokens_mean"] == "64"
    assert row["reuse_request_rate"] == "0"


def test_eval_deterministic_results(trained):
    out1 = run_eval(trained, "eval_det1", "--mode", "routed")
    out2 = run_eval(trained, "eval_det2", "--mode", "routed")
    assert (out1 / "results.csv").read_text() == (out2 / "results.csv").read_text()
    t1 = sorted((out1 / "traces").glob("*.jsonl"))
    t2 = sorted((out2 / "traces").glob("*.jsonl"))
    for a, b in zip(t1, t2):
        assert a.read_text() == b.read_text()


def test_eval_disable_flags(trained):
    out = run_eval(trained, "eval_disabled",
                   "--disable", "cache", "--disable", "tokens", "--disable", "layers")
    with (out / "results.csv").open() as fh:
        row = dict(zip(*list(csv.reader(fh))[:2]))
    assert row["disabled"] == "cache+layers+tokens"
    assert row["kept_tokens_mean"] == "64"
    assert row["reuse_request_rate"] == "0"
    assert row["layers_mean"] == "2"


def test_eval_timing_fields(trained):
    out = trained.root / "eval_routed"
    with (out / "timing.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["mode", "median_step_ms", "dense_median_step_ms", "speedup"]
    assert len(rows) == 2
    assert float(rows[1][3]) > 0.0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_matches_eval(trained, capsys):
    out = trained.root / "eval_routed"
    rc = main(["report", "--out", str(out)])
    assert rc == 0
    assert "re-aggregation matches" in capsys.readouterr().out


def test_report_detects_tampering(trained, tmp_path, capsys):
    import shutil
    src = trained.root / "eval_routed"
    tampered = tmp_path / "tampered"
    shutil.copytree(src, tampered)
    text = (tampered / "results.csv").read_text()
    lines = text.strip().split("\n")
    cols = lines[0].split(",")
    vals = lines[1].split(",")
    vals[cols.index("success_rate")] = "12.34"
    (tampered / "results.csv").write_text(lines[0] + "\n" + ",".join(vals) + "\n")
    rc = main(["report", "--out", str(tampered)])
    assert rc == 1
    assert "MISMATCH" in capsys.readouterr().out


def test_report_without_traces_fails(tmp_path):
    (tmp_path / "traces").mkdir()
    rc = main(["report", "--out", str(tmp_path)])
    assert rc == 2


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_keep_ratio(trained):
    out = trained.root / "sweep_tokens"
    rc = main(["sweep", "--config", str(trained.ini),
               "--checkpoint", str(trained.checkpoint),
               "--axis", "keep-ratio", "--values", "0.25,1.0",
               "--episodes", "2", "--seed", "0", "--out", str(out)])
    assert rc == 0
    with (out / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["keep_ratio"] == "0.25"
    assert rows[1]["keep_ratio"] == "1"
    assert all(r["disabled"] == "cache+layers" for r in rows)
    assert float(rows[0]["flops_pct"]) < float(rows[1]["flops_pct"])
    assert (out / "pareto.csv").exists()
    with (out / "pareto.csv").open() as fh:
        front = list(csv.DictReader(fh))
    assert 1 <= len(front) <= 2


def test_sweep_n_lay_uses_fixed_mode(trained):
    out = trained.root / "sweep_layers"
    rc = main(["sweep", "--config", str(trained.ini),
               "--checkpoint", str(trained.checkpoint),
               "--axis", "n-lay", "--values", "1,2",
               "--episodes", "2", "--seed", "0", "--out", str(out)])
    assert rc == 0
    with (out / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["mode"] == "fixed"
    assert rows[0]["layers_mean"] == "1"
    assert rows[1]["layers_mean"] == "2"
    assert all(r["disabled"] == "cache+tokens" for r in rows)


# ---------------------------------------------------------------------------
# usage errors
# ---------------------------------------------------------------------------

def test_missing_checkpoint_is_usage_error(trained, tmp_path):
    rc = main(["eval", "--config", str(trained.ini),
               "--checkpoint", str(tmp_path / "absent.npz"),
               "--episodes", "1", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_zero_episodes_is_usage_error(trained, tmp_path):
    rc = main(["eval", "--config", str(trained.ini),
               "--checkpoint", str(trained.checkpoint),
               "--episodes", "0", "--out", str(tmp_path / "o")])
    assert rc == 2


def test_bad_axis_rejected_by_parser(trained, tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", "--config", str(trained.ini),
              "--checkpoint", str(trained.checkpoint),
              "--axis", "warp", "--values", "1", "--out", str(tmp_path / "o")])


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        main(["juggle"])
