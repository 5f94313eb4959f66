import csv
import json

import pytest

from fedpull.cli import main
from fedpull.config import ConfigError, config_from_dict, load_config

TINY_DOMAINS = [
    {"kind": "copy", "size": 80, "seed": 101},
    {"kind": "reverse", "size": 60, "seed": 102},
    {"kind": "sort", "size": 50, "seed": 103},
    {"kind": "shift3", "size": 40, "seed": 104},
    {"kind": "swap_pairs", "size": 40, "seed": 105},
]


def write_config(tmp_path, **overrides):
    payload = {
        "experiment": "fl",
        "domains": TINY_DOMAINS,
        "pretrain_steps": 10,
        "steps_per_round": 5,
        "rounds": 2,
        "seeds": [1],
        "batch_size": 8,
        "test_n": 8,
        "dev_n": 4,
        "output_dir": str(tmp_path / "out"),
    }
    payload.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return path


class TestConfigParsing:
    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="unknown experiment 'foo'"):
            config_from_dict({"experiment": "foo"})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown keys \\['typo'\\]"):
            config_from_dict({"experiment": "fl", "typo": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="policy: unknown keys"):
            config_from_dict({"experiment": "fl", "policy": {"mode": "full", "bogus": 2}})

    def test_defaults_round_trip(self):
        cfg = config_from_dict({"experiment": "fl"})
        assert cfg.rounds == 5 and cfg.steps_per_round == 200 and cfg.pretrain_steps == 2000
        assert [d.kind for d in cfg.domains] == ["copy", "reverse", "sort", "shift3", "swap_pairs"]
        assert cfg.policy.mode == "full"

    def test_split_feasibility_checked(self):
        with pytest.raises(ConfigError, match="cannot hold"):
            config_from_dict(
                {
                    "experiment": "fl",
                    "domains": [{"kind": "copy", "size": 50, "seed": 1}],
                    "test_n": 40,
                    "dev_n": 20,
                }
            )

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config(path)

    def test_fl_requires_rounds(self):
        with pytest.raises(ConfigError, match="requires rounds"):
            config_from_dict({"experiment": "fl", "rounds": 0})


class TestCliExitCodes:
    def test_unknown_experiment_exits_2(self, tmp_path, capsys):
        path = write_config(tmp_path, experiment="foo")
        assert main(["run", str(path)]) == 2
        assert "unknown experiment" in capsys.readouterr().err

    def test_validate_never_trains(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["run", str(path), "--validate"]) == 0
        assert "config ok" in capsys.readouterr().out
        assert not (tmp_path / "out").exists()

    def test_validate_bad_config_exits_2(self, tmp_path):
        path = write_config(tmp_path, rounds=-1)
        assert main(["run", str(path), "--validate"]) == 2

    def test_run_writes_reports(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert main(["run", str(path)]) == 0
        report = tmp_path / "out" / "fl" / "1" / "report.json"
        assert report.exists()
        payload = json.loads(report.read_text())
        assert payload["experiment"] == "fl"
        assert len(payload["rounds"]) == 2
        assert str(report) in capsys.readouterr().out

    def test_out_override(self, tmp_path):
        path = write_config(tmp_path)
        assert main(["run", str(path), "--out", str(tmp_path / "elsewhere")]) == 0
        assert (tmp_path / "elsewhere" / "fl" / "1" / "report.json").exists()


class TestExperimentFamilies:
    def test_baseline_matrix_rows(self, tmp_path):
        path = write_config(tmp_path, experiment="baseline_matrix", baseline_steps=5)
        assert main(["run", str(path)]) == 0
        metrics = tmp_path / "out" / "baseline_matrix" / "1" / "metrics.csv"
        with open(metrics, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) - 1 == 5 * 5  # one evaluation row per (model, domain)

    def test_dp_compare_shares_pretrained_checkpoint(self, tmp_path):
        path = write_config(tmp_path, experiment="dp_compare", seeds=[3])
        assert main(["run", str(path)]) == 0
        keys = set()
        for mode in ("full", "dp_less", "dp_greater", "random"):
            report = tmp_path / "out" / "dp_compare" / "3" / mode / "report.json"
            payload = json.loads(report.read_text())
            keys.add(payload["pretrain"]["cache_key"])
        assert len(keys) == 1
        cache_file = tmp_path / "out" / "_pretrain" / f"{keys.pop()}.ckpt"
        assert cache_file.exists()

    def test_central_families_run(self, tmp_path):
        for experiment in ("central_combination", "central_chained"):
            path = write_config(tmp_path, experiment=experiment)
            assert main(["run", str(path)]) == 0
            report = tmp_path / "out" / experiment / "1" / "report.json"
            payload = json.loads(report.read_text())
            assert payload["final_eval"]["server"]

    def test_rounds_ablation_variants(self, tmp_path):
        path = write_config(tmp_path, experiment="fl_rounds_ablation",
                            ablation_rounds=[2, 5], rounds=5, steps_per_round=4)
        assert main(["run", str(path)]) == 0
        for variant in ("rounds_2", "rounds_5"):
            report = tmp_path / "out" / "fl_rounds_ablation" / "1" / variant / "report.json"
            assert report.exists()

    def test_controllers_parity_runs_both_modes(self, tmp_path):
        path = write_config(tmp_path, experiment="controllers_parity")
        assert main(["run", str(path)]) == 0
        for mode in ("dp_less", "dp_greater"):
            report = tmp_path / "out" / "controllers_parity" / "1" / mode / "report.json"
            payload = json.loads(report.read_text())
            assert payload["config"]["policy"]["scope"] == "push_and_pull"

    def test_seed_parallel_matches_sequential(self, tmp_path):
        path_a = write_config(tmp_path, seeds=[1, 2], output_dir=str(tmp_path / "seq"))
        assert main(["run", str(path_a)]) == 0
        path_b = write_config(tmp_path, seeds=[1, 2], output_dir=str(tmp_path / "par"))
        assert main(["run", str(path_b), "--seed-parallel", "2"]) == 0
        for seed in ("1", "2"):
            a = json.loads((tmp_path / "seq" / "fl" / seed / "report.json").read_text())
            b = json.loads((tmp_path / "par" / "fl" / seed / "report.json").read_text())
            a.pop("timestamp"), b.pop("timestamp")
            assert a == b
