import csv
import hashlib
import json

import numpy as np
import pytest

from abstop.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, RunConfig, InputError, main

from conftest import small_context

BASE = {
    "seed": 4,
    "dgp": {"n_experiments": 20},
    "training": {"episodes": 60, "norm_samples": 200, "hidden": [8], "batch_size": 16},
    "methods": [{"id": "ffht"}, {"id": "bf", "params": {"threshold": 3}}],
    "n_reps": 2,
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture
def cfg(tmp_path):
    return write(tmp_path / "cfg.json", BASE)


@pytest.fixture
def cohort(tmp_path, cfg):
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == EXIT_OK
    return str(tmp_path / "sim" / "cohort.json")


@pytest.fixture(scope="module")
def policy(tmp_path_factory):
    d = tmp_path_factory.mktemp("pol")
    cfg = write(d / "cfg.json", BASE)
    assert main(["simulate", "--config", cfg, "--out", str(d)]) == EXIT_OK
    assert main(["train", "--config", cfg, "--cohort", str(d / "cohort.json"), "--out", str(d)]) == EXIT_OK
    return str(d / "policy.json")


@pytest.fixture
def context(tmp_path):
    return write(tmp_path / "ctx.json", small_context().to_dict())


class TestConfig:
    def test_seed_required(self):
        with pytest.raises(InputError, match="seed"):
            RunConfig.from_dict({"dgp": {}})

    def test_unknown_field_named(self):
        with pytest.raises(InputError, match="n_experimentz"):
            RunConfig.from_dict({"seed": 1, "dgp": {"n_experimentz": 3}})

    def test_unknown_method(self):
        with pytest.raises(InputError, match="methods\\[0\\]"):
            RunConfig.from_dict({"seed": 1, "methods": [{"id": "oracle"}]})

    def test_seed_flows_everywhere(self):
        cfg = RunConfig.from_dict({"seed": 9}).with_seed(12)
        assert cfg.dgp.seed == cfg.training.seed == cfg.seed == 12


class TestSimulate:
    def test_byte_identical(self, tmp_path, cfg):
        for d in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
        assert digest(tmp_path / "a" / "cohort.json") == digest(tmp_path / "b" / "cohort.json")

    def test_seed_override_changes_cohort(self, tmp_path, cfg):
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
        assert digest(tmp_path / "a" / "cohort.json") != digest(tmp_path / "b" / "cohort.json")

    def test_zero_experiments(self, tmp_path, capsys):
        cfg = write(tmp_path / "bad.json", {**BASE, "dgp": {"n_experiments": 0}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_INVALID
        assert "n_experiments" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_malformed_config(self, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        assert main(["simulate", "--config", str(p)]) == EXIT_INVALID
        assert "malformed config" in capsys.readouterr().err


class TestTrain:
    def test_reproducible_checkpoint_and_curve(self, tmp_path, cfg, cohort, policy):
        out = tmp_path / "t"
        assert main(["train", "--config", cfg, "--cohort", cohort, "--out", str(out)]) == EXIT_OK
        assert digest(out / "policy.json") == digest(policy)
        rows = list(csv.DictReader(open(out / "training_curve.csv")))
        assert len(rows) == BASE["training"]["episodes"]
        assert [int(r["episode"]) for r in rows] == list(range(len(rows)))

    def test_divergence_exits_nonzero(self, tmp_path, cohort, capsys):
        cfg = write(tmp_path / "d.json", {**BASE, "training": {"episodes": 200, "learning_rate": 10.0,
                                                                "norm_samples": 200, "hidden": [8]}})
        out = tmp_path / "d"
        assert main(["train", "--config", cfg, "--cohort", cohort, "--out", str(out)]) == EXIT_RUNTIME
        assert "exceeded" in capsys.readouterr().err
        assert not (out / "policy.json").exists()

    def test_missing_cohort(self, tmp_path, cfg):
        assert main(["train", "--config", cfg, "--cohort", str(tmp_path / "nope.json")]) == EXIT_INVALID


class TestEvaluate:
    def test_report(self, tmp_path, cfg, cohort, capsys):
        out = tmp_path / "e"
        assert main(["evaluate", "--config", cfg, "--cohort", cohort, "--out", str(out), "--json"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert [r["method"] for r in doc["rows"]] == ["ffht", "bf3"]
        rows = list(csv.DictReader(open(out / "report.csv")))
        assert float(rows[0]["avg_weeks"]) == 4.0

    def test_rl_requires_policy(self, tmp_path, cohort, capsys):
        cfg = write(tmp_path / "rl.json", {**BASE, "methods": [{"id": "rl"}]})
        assert main(["evaluate", "--config", cfg, "--cohort", cohort, "--out", str(tmp_path / "e")]) == EXIT_INVALID
        assert "--policy" in capsys.readouterr().err
        assert not (tmp_path / "e").exists()

    def test_rl_with_policy(self, tmp_path, cohort, policy):
        cfg = write(tmp_path / "rl.json", {**BASE, "methods": [{"id": "rl"}, {"id": "ffht"}]})
        out = tmp_path / "e"
        assert main(["evaluate", "--config", cfg, "--cohort", cohort, "--policy", policy, "--out", str(out)]) == EXIT_OK
        first = digest(out / "report.csv")
        main(["evaluate", "--config", cfg, "--cohort", cohort, "--policy", policy, "--out", str(out)])
        assert digest(out / "report.csv") == first


class TestSlice:
    def axes(self, tmp_path, field="delta_mean"):
        return write(tmp_path / "axes.json", {"axis1": {"field": field, "values": [-1, 0, 1]},
                                              "axis2": {"field": "weekly_cost", "values": [0, 50, 100]},
                                              "state": {"week": 2, "w_bar_tr": 0.1, "w_bar_c": 0.0}})

    def test_deterministic(self, tmp_path, policy, context):
        axes = self.axes(tmp_path)
        digests = []
        for d in ("a", "b"):
            assert main(["slice", "--policy", policy, "--context", context, "--axes", axes,
                         "--out", str(tmp_path / d)]) == EXIT_OK
            digests.append(digest(tmp_path / d / "slice.csv"))
        assert digests[0] == digests[1]
        lines = open(tmp_path / "a" / "slice.csv").read().splitlines()
        assert len(lines) == 4 and lines[0].startswith("delta_mean\\weekly_cost")

    def test_unknown_field(self, tmp_path, policy, context, capsys):
        axes = self.axes(tmp_path, field="colour")
        assert main(["slice", "--policy", policy, "--context", context, "--axes", axes,
                     "--out", str(tmp_path / "s")]) == EXIT_INVALID
        err = capsys.readouterr().err
        assert "colour" in err and "valid fields" in err and "weekly_cost" in err
        assert not (tmp_path / "s").exists()


class TestRecommend:
    def run(self, tmp_path, policy, context, obs, *extra):
        path = tmp_path / "obs.json"
        path.write_text(obs if isinstance(obs, str) else json.dumps(obs))
        return main(["recommend", "--policy", policy, "--context", context, "--observations", str(path), *extra])

    def test_json_output(self, tmp_path, policy, context, capsys):
        assert self.run(tmp_path, policy, context, {"week": 1, "w_bar_tr": 0.3, "w_bar_c": 0.0}, "--json") == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert set(doc["q_values"]) == {"CONTINUE", "STOP_LAUNCH", "STOP_NO_LAUNCH"}
        assert doc["delta_variance"] > 0
        assert doc["action"] == max(doc["q_values"], key=doc["q_values"].get)

    def test_terminated_note(self, tmp_path, policy, context, capsys):
        obs = {"week": 2, "w_bar_tr": 0.3, "w_bar_c": 0.0, "terminated": True}
        assert self.run(tmp_path, policy, context, obs) == EXIT_OK
        assert "terminated" in capsys.readouterr().out

    @pytest.mark.parametrize("obs", ["{", {"week": 1}, {"week": 9, "w_bar_tr": 0, "w_bar_c": 0},
                                     {"week": 1, "w_bar_tr": "x", "w_bar_c": 0}, [1, 2]])
    def test_malformed(self, tmp_path, policy, context, obs):
        assert self.run(tmp_path, policy, context, obs) == EXIT_INVALID

    @pytest.mark.parametrize("w", np.linspace(-20, 20, 9))
    def test_final_week_never_continues(self, tmp_path, policy, context, capsys, w):
        assert self.run(tmp_path, policy, context, {"week": 4, "w_bar_tr": float(w), "w_bar_c": 0.0}, "--json") == 0
        assert json.loads(capsys.readouterr().out)["action"] != "CONTINUE"
