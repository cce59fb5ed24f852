import hashlib
import json

import pytest

from adexpo.cli import main
from adexpo.env import load_day_log

TINY_INI = """
[generator]
requests_per_hour = 6
hours = 4
peak_hours = 1, 2

[lower]
train_steps = 150
warmup = 40
eval_interval = 75
eval_requests = 24
batch_size = 8
noise_decay_steps = 120

[higher]
train_days = 3
warmup = 4
batch_size = 4
buffer_capacity = 64

[run]
seeds = 0, 1
n_train_days = 3
n_eval_days = 2
"""


@pytest.fixture(scope="module")
def ini(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "exp.ini"
    p.write_text(TINY_INI)
    return str(p)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestGen:
    def test_writes_day_log(self, ini, tmp_path, capsys):
        out = tmp_path / "day.jsonl"
        assert main(["gen", "--config", ini, "--seed", "9",
                     "--out", str(out)]) == 0
        day = load_day_log(out)
        assert len(day) == 24
        summary = json.loads(capsys.readouterr().out.strip())
        assert summary["requests"] == 24

    def test_rerun_is_bit_identical(self, ini, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        main(["gen", "--config", ini, "--seed", "3", "--out", str(a)])
        main(["gen", "--config", ini, "--seed", "3", "--out", str(b)])
        assert sha(a) == sha(b)


class TestUsageErrors:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) != 0

    def test_unknown_flag(self):
        assert main(["gen", "--seed", "1", "--out", "x", "--bogus"]) != 0

    def test_eval_requires_exactly_one_mode(self, ini, tmp_path):
        assert main(["eval", "--config", ini, "--out", str(tmp_path)]) == 2
        assert main(["eval", "--config", ini, "--out", str(tmp_path),
                     "--fixed-k", "2", "--manual-target", "0.3"]) == 2


@pytest.fixture(scope="module")
def run_dir(ini, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["train-lower", "--config", ini, "--seed", "0",
                 "--out", str(d)]) == 0
    ps = d / "policy_set_seed0"
    assert main(["train-ccp", "--config", ini, "--seed", "0",
                 "--policy-set", str(ps), "--out", str(d)]) == 0
    return d


class TestPipeline:
    def test_training_outputs(self, run_dir):
        assert (run_dir / "policy_set_seed0" / "manifest.json").exists()
        curves = (run_dir / "lower_curves_seed0.csv").read_text().splitlines()
        assert curves[0] == "step,target,mean_abs_deviation,revenue"
        assert len(curves) == 1 + 3 * 5  # steps {0,75,150} x 5 targets
        ccp_curves = (run_dir / "ccp_curves_seed0.csv").read_text()
        assert ccp_curves.startswith("episode,day_pvr,revenue")
        manifest = json.loads((run_dir / "manifest_train-lower.json")
                              .read_text())
        assert manifest["seed"] == 0 and "config_hash" in manifest

    def test_eval_and_report(self, ini, run_dir, capsys):
        ps = run_dir / "policy_set_seed0"
        assert main(["eval", "--config", ini, "--manual-target", "0.35",
                     "--out", str(run_dir)]) == 0
        assert main(["eval", "--config", ini, "--fixed-k", "3",
                     "--out", str(run_dir)]) == 0
        assert main(["eval", "--config", ini, "--policy-set", str(ps),
                     "--target", "0.40", "--out", str(run_dir)]) == 0
        assert main(["eval", "--config", ini, "--policy-set", str(ps),
                     "--ccp", str(run_dir / "ccp_seed0.json"),
                     "--out", str(run_dir)]) == 0
        choices = (run_dir / "choices_ccp.csv").read_text().splitlines()
        assert choices[0] == "day,hour,target,revenue,pvr"
        assert len(choices) == 1 + 2 * 4  # 2 eval days x 4 hours
        assert main(["oracle", "--config", ini,
                     "--out", str(run_dir)]) == 0
        capsys.readouterr()
        assert main(["report", "--run-dir", str(run_dir)]) == 0
        out = capsys.readouterr().out
        comparison = (run_dir / "comparison.csv").read_text().splitlines()
        assert comparison[0] == "policy,pvr,revenue,rel_revenue_pct"
        rows = {line.split(",")[0]: line.split(",")
                for line in comparison[1:]}
        assert float(rows["manual"][3]) == pytest.approx(100.0)
        assert {"manual", "fixed-3", "pi-0.40", "ccp", "oracle"} <= set(rows)
        assert "oracle" in out

    def test_fixed_baseline_pvr_column(self, run_dir):
        doc = json.loads((run_dir / "report_fixed-3.json").read_text())
        assert doc["pvr"] == pytest.approx(0.3)

    def test_eval_rerun_is_bit_identical(self, ini, run_dir, tmp_path):
        d1, d2 = tmp_path / "r1", tmp_path / "r2"
        for d in (d1, d2):
            assert main(["eval", "--config", ini, "--manual-target", "0.35",
                         "--out", str(d)]) == 0
        assert sha(d1 / "report_manual.json") == sha(d2 / "report_manual.json")
        assert sha(d1 / "metrics_manual.csv") == sha(d2 / "metrics_manual.csv")

    def test_train_rerun_is_bit_identical(self, ini, run_dir, tmp_path):
        d = tmp_path / "retrain"
        assert main(["train-lower", "--config", ini, "--seed", "0",
                     "--out", str(d)]) == 0
        assert sha(d / "lower_curves_seed0.csv") == \
               sha(run_dir / "lower_curves_seed0.csv")
        for f in sorted((d / "policy_set_seed0").iterdir()):
            assert sha(f) == sha(run_dir / "policy_set_seed0" / f.name)
