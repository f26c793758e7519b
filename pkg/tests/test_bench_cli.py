import filecmp
import os

import numpy as np
import pytest

from deepfeedback import bench, store
from deepfeedback.cli import main
from deepfeedback.nn import save_weights
from deepfeedback.tasks import IKTask, LightTask, PoseTask, generate_dataset
from deepfeedback.training import StagePlan, train_stagewise


def _r(index, **metrics):
    return bench.InstanceResult(index, metrics, 1, 1.0, 2.0, 0.5)


def test_aggregate_examples():
    rep = bench.aggregate("x", [_r(i, rot=v) for i, v in enumerate([1.0, 2.0, 3.0])], ("rot",))
    assert rep.means["rot"] == 2.0 and rep.medians["rot"] == 2.0
    rep = bench.aggregate("x", [_r(i, rot=v) for i, v in enumerate([4.0, 1.0, 3.0, 2.0])], ("rot",))
    assert rep.medians["rot"] == 2.0
    flags = [True, False, False, False]
    rep = bench.aggregate("x", [_r(i, rot=0.0, outlier=f) for i, f in enumerate(flags)], ("rot",))
    assert rep.outlier_pct == 25.0
    assert rep.time_ms == rep.forward_ms + rep.update_ms == 3.0
    with pytest.raises(ValueError):
        bench.aggregate("x", [], ("rot",))


def test_g6_and_lower_median():
    assert bench.g6(1 / 3) == "0.333333"
    assert bench.g6(123456789.0) == "1.23457e+08"
    assert bench.g6(float("nan")) == "nan"
    assert bench.g6(-0.0) == "0"
    assert bench.lower_median([5]) == 5.0
    with pytest.raises(ValueError):
        bench.lower_median([])


def test_report_headers_per_task():
    pose = bench.aggregate("feedback", [_r(0, trans=0.1, rot=2.0, outlier=False)], PoseTask.metric_names)
    assert ",".join(pose.header()) == (
        "method,steps,time_ms,trans_m_mean,trans_m_median,rot_deg_mean,rot_deg_median,outlier_pct,"
        "forward_ms,update_ms,energy_violations,data_energy_mean"
    )
    light = bench.aggregate("feedback", [_r(0, mse=0.1, outlier=False)], LightTask.metric_names)
    assert light.header()[3:6] == ["mse_mean", "mse_median", "outlier_pct"]
    ik = bench.aggregate("feedback", [_r(0, pos=1.0, rot=2.0)], IKTask.metric_names)
    assert "outlier_pct" not in ik.header()
    assert ik.row(timing=False)[2] == "nan" and ik.row(timing=False)[-3] == "nan"


@pytest.fixture(scope="module")
def ik_run():
    task = IKTask(n_joints=4, seed=0, hidden=32)
    ds = generate_dataset(task, 60, 3)
    nets, _ = train_stagewise(task, ds, StagePlan(stages=3, epochs=5))
    return task, ds, nets


def test_bench_modes(ik_run):
    task, ds, nets = ik_run
    cfg = bench.BenchConfig(max_iter=50)
    reg, _ = bench.run_bench(task, ds, "regression", nets, cfg)
    assert reg.steps == 1.0
    damp, _ = bench.run_bench(task, ds, "feedback+damping", nets, cfg)
    assert damp.violations == 0
    fb, fb_res = bench.run_bench(task, ds, "feedback", nets, cfg)
    assert fb.steps == 3.0 and len(fb.stage_means) == 4
    combo, combo_res = bench.run_bench(task, ds, "feedback-then-lbfgs", nets, cfg)
    for a, b in zip(fb_res, combo_res):
        assert b.data_energy <= a.data_energy
    adam, _ = bench.run_bench(task, ds, "adam", None, cfg)
    assert 1 <= adam.steps <= 50
    with pytest.raises(ValueError, match="needs trained networks"):
        bench.run_bench(task, ds, "feedback", None, cfg)
    with pytest.raises(ValueError, match="unknown mode"):
        bench.run_instance(task, ds.split("test")[0], "newton", nets, cfg)


def test_timing_columns_add_up(ik_run):
    task, ds, nets = ik_run
    _, results = bench.run_bench(task, ds, "feedback", nets)
    for r in results:
        t = r.trajectory
        assert abs(sum(t.forward_ms) + sum(t.update_ms) - (r.forward_ms + r.update_ms)) < 1.0 * t.n_stages


def test_bench_report_is_deterministic(ik_run):
    task, ds, nets = ik_run
    a, _ = bench.run_bench(task, ds, "feedback", nets)
    b, _ = bench.run_bench(task, ds, "feedback", nets)
    assert a.to_csv(timing=False) == b.to_csv(timing=False)
    assert a.stages_csv() == b.stages_csv()


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "task",
    [IKTask(n_joints=4, seed=1), PoseTask(resolution=16), LightTask("point", resolution=16)],
    ids=["ik", "pose", "light"],
)
def test_dataset_round_trip(task, tmp_path):
    ds = generate_dataset(task, 12, 0)
    store.write_dataset(ds, tmp_path)
    back_task, back = store.read_dataset(str(tmp_path))
    assert store.task_config(back_task) == store.task_config(task)
    for s, t in zip(ds.samples, back.samples):
        assert np.array_equal(s.x_gt, t.x_gt) and s.split == t.split and s.scene == t.scene
        tol = 0.5 / 65535 + 1e-7 if isinstance(task, LightTask) else 0.0
        assert np.max(np.abs(np.asarray(s.y, dtype=float) - t.y)) <= tol


def test_config_parsing_errors():
    assert store.parse_config("a = 1  # c\n\n# x\nb=two\n") == {"a": "1", "b": "two"}
    with pytest.raises(store.ConfigError, match="<config>:2"):
        store.parse_config("a = 1\nnonsense\n")
    with pytest.raises(store.ConfigError):
        store.parse_config(" = 3\n")


def test_positions_parse_errors(tmp_path):
    p = tmp_path / "obs.txt"
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(store.ObservationParseError) as ei:
        store.read_observation(str(p))
    assert ei.value.lineno == 2 and str(p) in str(ei.value)
    p.write_text("0 0 0\n1 2 x\n")
    with pytest.raises(store.ObservationParseError, match=":2:"):
        store.read_observation(str(p))


def test_weights_directory(tmp_path, ik_run):
    task, _, nets = ik_run
    store.write_weights(nets, tmp_path)
    back = store.read_weights(task, str(tmp_path))
    assert [n.checksum() for n in back] == [n.checksum() for n in nets]
    assert len(store.read_weights(task, str(tmp_path), 2)) == 2
    with pytest.raises(FileNotFoundError):
        store.read_weights(task, str(tmp_path), 4)
    with pytest.raises(FileNotFoundError):
        store.read_weights(task, str(tmp_path / "none"))


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def _dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_dirs_equal(os.path.join(a, d), os.path.join(b, d))
                                               for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def cli_ik(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert main(["generate-data", "--task", "ik", "--count", "100", "--joints", "4", "--seed", "1",
                 "--out", data]) == 0
    w = str(root / "w")
    assert main(["train", "--data", data, "--stages", "3", "--epochs", "3", "--out", w]) == 0
    return root, data, w


def test_generate_prints_split_sizes(tmp_path, capsys):
    assert main(["generate-data", "--task", "ik", "--count", "100", "--joints", "3", "--out",
                 str(tmp_path / "d")]) == 0
    assert capsys.readouterr().out.strip() == "train=70 val=10 test=20"


def test_generate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["generate-data", "--task", "pose", "--count", "10", "--resolution", "16", "--seed", "4",
                     "--out", str(tmp_path / name)]) == 0
    assert _dirs_equal(str(tmp_path / "a"), str(tmp_path / "b"))


def test_usage_errors_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["generate-data", "--task", "depth", "--out", str(tmp_path)])
    assert ei.value.code == 2
    assert main(["generate-data", "--task", "ik"]) == 2
    assert main(["generate-data", "--task", "ik", "--count", "5", "--out", str(tmp_path)]) == 2
    assert "missing --out" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "w")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_train_emits_one_file_per_stage(cli_ik):
    _, _, w = cli_ik
    names = sorted(os.listdir(w))
    assert [n for n in names if n.endswith(".dfnw")] == ["stage0.dfnw", "stage1.dfnw", "stage2.dfnw"]
    assert "train_log.csv" in names and "task.cfg" in names


def test_train_task_mismatch(cli_ik, tmp_path):
    _, data, _ = cli_ik
    assert main(["train", "--task", "pose", "--data", data, "--out", str(tmp_path)]) == 2


def test_bench_cli_outputs(cli_ik, tmp_path):
    _, data, w = cli_ik
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / f"{name}.csv")
        assert main(["bench", "--data", data, "--mode", "feedback", "--weights", w, "--no-timing",
                     "--out", out]) == 0
        outs.append(out)
    assert filecmp.cmp(outs[0], outs[1], shallow=False)
    assert filecmp.cmp(str(tmp_path / "a.stages.csv"), str(tmp_path / "b.stages.csv"), shallow=False)
    lines = open(outs[0]).read().splitlines()
    assert lines[0].startswith("method,steps,time_ms,pos_cm_mean,pos_cm_median,rot_deg_mean")
    assert lines[1].split(",")[:3] == ["feedback", "3", "nan"]
    reg = str(tmp_path / "reg.csv")
    assert main(["bench", "--data", data, "--mode", "regression", "--weights", w, "--out", reg]) == 0
    assert open(reg).read().splitlines()[1].split(",")[1] == "1"


def test_bench_learned_mode_needs_weights(cli_ik, tmp_path):
    _, data, _ = cli_ik
    out = str(tmp_path / "r.csv")
    assert main(["bench", "--data", data, "--mode", "feedback", "--out", out]) == 2
    assert main(["bench", "--data", data, "--mode", "feedback", "--weights", str(tmp_path), "--out", out]) == 1


def test_bench_config_file_and_override(cli_ik, tmp_path, capsys):
    _, data, _ = cli_ik
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {data}\nmode = adam\nmax-iter = 3\nlimit = 2\nno_timing = true\n"
                   f"out = {tmp_path / 'x.csv'}\n")
    assert main(["bench", "--config", str(cfg)]) == 0
    row = open(tmp_path / "x.csv").read().splitlines()[1].split(",")
    assert row[0] == "adam" and float(row[1]) <= 3 and row[2] == "nan"
    assert main(["bench", "--config", str(cfg), "--mode", "lbfgs", "--out", str(tmp_path / "y.csv")]) == 0
    assert open(tmp_path / "y.csv").read().splitlines()[1].startswith("lbfgs,")
    cfg.write_text("bogus = 1\n")
    assert main(["bench", "--config", str(cfg)]) == 2


def _pose_setup(tmp_path, seed=0):
    task = PoseTask(resolution=16)
    store.write_task(task, tmp_path)
    x_gt = np.array([0.9, 0.1, -0.2, 0.3, 0.05, -0.05, 0.1])
    x_gt[:4] /= np.linalg.norm(x_gt[:4])
    obs = str(tmp_path / "obs.pgm")
    store.write_observation(obs, task, task.model(0).simulate(x_gt))
    return task, x_gt, obs


def test_solve_with_oracle_reaches_zero_energy(tmp_path, capsys):
    task, x_gt, obs = _pose_setup(tmp_path)
    dump = tmp_path / "traj"
    oracle = ",".join(repr(float(v)) for v in x_gt)
    assert main(["solve", "--obs", obs, "--weights", str(tmp_path), "--oracle", oracle, "--stages", "2",
                 "--dump-trajectory", str(dump)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[1] == "stage 1: E_data 0"
    assert sorted(os.listdir(dump)) == ["stage0.pgm", "stage1.pgm", "stage2.pgm"]


def test_solve_zero_nets_returns_initial_estimate(tmp_path, capsys):
    task, _, obs = _pose_setup(tmp_path)
    for t in range(5):
        (tmp_path / f"stage{t}.dfnw").write_bytes(save_weights(task.build_network(seed=t)))
    dump = tmp_path / "traj"
    assert main(["solve", "--obs", obs, "--weights", str(tmp_path), "--dump-trajectory", str(dump)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "x = 1.0 0.0 0.0 0.0 0.0 0.0 0.0"
    assert len(os.listdir(dump)) == 6


def test_solve_reports_parse_location(tmp_path, capsys):
    task, _, _ = _pose_setup(tmp_path)
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n16 16\n255\n" + b"\0" * 10)
    assert main(["solve", "--obs", str(bad), "--weights", str(tmp_path), "--oracle", "1,0,0,0,0,0,0"]) == 1
    assert "bad.pgm:1: truncated" in capsys.readouterr().err
    assert main(["solve", "--obs", str(bad), "--weights", str(tmp_path), "--oracle", "1,0"]) == 2
