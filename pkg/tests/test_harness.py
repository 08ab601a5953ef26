import json

import numpy as np
import pytest

from restune import harness as H
from restune.backbone import BackboneConfig, BackboneModel

SMALL = {
    "seed": 1,
    "backbone": {"depth": 2, "model_dim": 16, "num_heads": 2, "ffn_hidden": 32},
    "task": {"seq_len": 8, "train_size": 32, "test_size": 32},
    "optimizer": {"steps": 20, "batch_size": 8, "eval_every": 10},
}


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(H.OUTPUT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def _config(tmp_path, **overrides):
    data = json.loads(json.dumps(SMALL))
    for key, value in overrides.items():
        data[key] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def _body(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# generated ")
    return lines[1:]


class TestVerify:
    def test_defaults_pass(self, out_dir, capsys):
        assert H.main(["verify"]) == 0
        assert "FAIL" not in capsys.readouterr().out
        assert (out_dir / "verify.csv").exists()

    def test_impossible_tolerance_fails(self, tmp_path):
        assert H.main(["verify", "--trials", "2", "--tolerance", "1e-30", "--agreement-inputs", "5",
                       "--out", str(tmp_path / "v.csv")]) == 1

    def test_deterministic_output(self, tmp_path):
        paths = [tmp_path / f"v{i}.csv" for i in range(2)]
        for p in paths:
            assert H.main(["verify", "--trials", "1", "--seed", "7", "--agreement-inputs", "10",
                           "--out", str(p)]) == 0
        assert _body(paths[0]) == _body(paths[1])

    def test_usage_error(self):
        assert H.main(["verify", "--trials", "many"]) == 2
        assert H.main([]) == 2


class TestTrain:
    @pytest.mark.parametrize("mode", H.MODES)
    def test_modes_run(self, tmp_path, out_dir, mode):
        assert H.main(["train", "--config", str(_config(tmp_path)), "--mode", mode]) == 0
        rows = H.read_metrics(out_dir / f"train-{mode}-1.csv")
        assert rows[-1]["step"] == "final"
        assert 0.0 <= float(rows[-1]["accuracy"]) <= 1.0

    def test_tuning_modes_leave_backbone_untouched(self, tmp_path, out_dir):
        for mode in ("linear", "plan", "bypass"):
            run = H.parse_config(SMALL, mode)
            res = H.train(run)
            assert res.backbone_hash_before == res.backbone_hash_after
            assert res.backbone_grads == 0
        res = H.train(H.parse_config(SMALL, "full"))
        assert res.backbone_hash_before != res.backbone_hash_after

    def test_checkpoint_bytes_unchanged(self, tmp_path, out_dir):
        ckpt = tmp_path / "bb.npz"
        BackboneModel.init(BackboneConfig(depth=2, model_dim=16, num_heads=2, ffn_hidden=32), 5).save(ckpt)
        before = ckpt.read_bytes()
        cfg = dict(SMALL, backbone=dict(SMALL["backbone"], checkpoint=str(ckpt)))
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        for mode in ("linear", "plan", "bypass"):
            assert H.main(["train", "--config", str(path), "--mode", mode]) == 0
        assert ckpt.read_bytes() == before

    def test_rerun_is_byte_identical_after_stamp(self, tmp_path, out_dir):
        cfg = _config(tmp_path, output=str(tmp_path / "m.csv"))
        H.main(["train", "--config", str(cfg), "--mode", "bypass"])
        first = _body(tmp_path / "m.csv")
        H.main(["train", "--config", str(cfg), "--mode", "bypass"])
        assert _body(tmp_path / "m.csv") == first

    @pytest.mark.parametrize("patch,field", [
        ({"optimizer": {"lr": "fast"}}, "optimizer.lr"),
        ({"task": {"num_classes": 1}}, "task.num_classes"),
        ({"backbone": {"model_dim": 15}}, "backbone"),
        ({"bogus": 1}, "bogus"),
        ({"mode": "nope"}, "mode"),
    ])
    def test_bad_config_names_field(self, tmp_path, capsys, patch, field):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(patch))
        assert H.main(["train", "--config", str(path)]) == 2
        assert field in capsys.readouterr().err

    def test_malformed_json_reports_position(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "seed": 1,\n  oops\n}')
        assert H.main(["train", "--config", str(path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert H.main(["train", "--config", str(tmp_path / "none.json")]) == 2


class TestMultitask:
    def test_nineteen_tasks(self, tmp_path, out_dir, capsys):
        assert H.main(["multitask", "--config", str(_config(tmp_path)), "--tasks", "19"]) == 0
        out = capsys.readouterr().out
        assert "bypass forwards=1 " in out and "baseline forwards=19 " in out

    def test_single_task(self, tmp_path, out_dir):
        rep = H.multitask(H.parse_config(SMALL), 1)
        assert rep.bypass_forwards == rep.baseline_forwards == 1

    def test_attention_ops_scale_linearly_for_baseline(self):
        run = H.parse_config(SMALL)
        reps = {t: H.multitask(run, t) for t in (1, 2, 4, 8)}
        slope = np.polyfit(list(reps), [r.baseline_attention_ops for r in reps.values()], 1)[0]
        per_pass = reps[1].baseline_attention_ops
        assert slope == pytest.approx(per_pass)
        assert len({r.bypass_attention_ops for r in reps.values()}) == 1
        assert all(r.bypass_forwards == 1 and r.isolated_match for r in reps.values())

    def test_zero_tasks_is_usage_error(self, tmp_path):
        assert H.main(["multitask", "--config", str(_config(tmp_path)), "--tasks", "0"]) == 2


class TestReport:
    def _write(self, path, mode, seeds):
        rows = [{"task_id": "t", "mode": mode, "seed": s, "step": 1, "accuracy": 0.5} for s in seeds]
        H.write_metrics(path, rows)

    def test_single_file_passes_through(self, tmp_path):
        self._write(tmp_path / "a.csv", "bypass", [0, 1])
        rows = H.consolidate([tmp_path / "a.csv"])
        assert rows == H.read_metrics(tmp_path / "a.csv")

    def test_sorted_by_mode_then_seed(self, tmp_path, capsys):
        self._write(tmp_path / "a.csv", "linear", [10, 2])
        self._write(tmp_path / "b.csv", "bypass", [3])
        assert H.main(["report", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                       "--out", str(tmp_path / "all.csv")]) == 0
        rows = H.read_metrics(tmp_path / "all.csv")
        assert [(r["mode"], r["seed"]) for r in rows] == [("bypass", "3"), ("linear", "2"), ("linear", "10")]
        assert "linear" in capsys.readouterr().out

    def test_missing_file(self, tmp_path):
        assert H.main(["report", str(tmp_path / "nope.csv")]) == 2


def test_synthetic_splits_are_disjoint_and_balanced():
    task = H.SyntheticTask(seed=3, train_size=10, test_size=10, model_dim=4, seq_len=2, kind="scale")
    (xs, ys), (xt, yt) = task.train(), task.test()
    assert np.bincount(ys).tolist() == [5, 5]
    assert not np.array_equal(xs[0], xt[0])
    assert np.array_equal(task.train()[0][0], xs[0])
