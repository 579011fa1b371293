import json
import subprocess
import sys

import pytest

from mabe.cli import COMMANDS, build_parser, main

TINY = {
    "data": {"size": 600},
    "dynamics": {"n_members": 2, "n_elites": 1, "hidden": [16], "max_epochs": 3},
    "prior": {"q_fit": {"hidden": [16], "max_steps": 200, "min_steps": 100},
              "fit": {"hidden": [16], "max_epochs": 3}},
    "agent": {"epochs": 2, "grad_steps": 3, "branches": 8, "horizon": 2, "hidden": [16], "batch_size": 32,
              "eval_last": 1},
    "eval": {"episodes": 2},
    "refs": {"episodes": 5},
    "transfer": {"source": {"size": 600}, "target": {"size": 400}},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


class TestParser:
    def test_subcommands(self):
        p = build_parser()
        for cmd in COMMANDS:
            args = p.parse_args([cmd, "--seed", "1", "--seed", "2", "--out", "x", "--force"])
            assert args.command == cmd and args.seed == [1, 2] and args.force

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["fly"])


class TestMain:
    def test_stages_then_pipeline(self, config, tmp_path, capsys):
        out = tmp_path / "run"
        base = ["--config", str(config), "--out", str(out)]
        assert main(["gen-data", *base]) == 0
        assert main(["train-dynamics", *base]) == 0
        assert main(["train-prior", *base]) == 0
        assert main(["pipeline", *base, "--seed", "0"]) == 0
        text = capsys.readouterr().out
        assert "full" in text and (out / "results.csv").exists()
        assert json.loads((out / "config.json").read_text())["agent"]["epochs"] == 2

    def test_eval_checkpoint(self, config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config), "--out", str(out)]) == 0
        pol = next((out / "artifacts").glob("policy-*.mabm"))
        assert main(["eval", "--config", str(config), "--out", str(tmp_path / "ev"),
                     "--policy", str(pol), "--episodes", "1"]) == 0
        assert "normalized" in capsys.readouterr().out
        lines = (tmp_path / "ev" / "results.csv").read_text().splitlines()
        assert lines[1].startswith("eval,policy-")

    def test_set_override(self, config, tmp_path):
        out = tmp_path / "run"
        assert main(["gen-data", "--config", str(config), "--out", str(out), "--set", "data.size=300"]) == 0
        assert json.loads((out / "config.json").read_text())["data"]["size"] == 300

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--set", "agent.nope=1"]) == 2
        assert "config" in capsys.readouterr().err

    def test_stage_failure_named(self, config, tmp_path, capsys):
        code = main(["pipeline", "--config", str(config), "--out", str(tmp_path), "--set", "data.recipe=replay"])
        assert code == 2
        assert "gen-data" in capsys.readouterr().err

    def test_module_entry(self, config, tmp_path):
        r = subprocess.run([sys.executable, "-m", "mabe.cli", "gen-data", "--config", str(config),
                            "--out", str(tmp_path)], capture_output=True, text=True)
        assert r.returncode == 0 and "dataset" in r.stdout
