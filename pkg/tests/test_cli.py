import csv
import json

import pytest

from dfpl.cli import EXIT_CHECK, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dfpl.model import VARIANTS
from dfpl.verify import SUITES

SMALL = {
    "cohort": {"n_subjects": 60, "obs_dim": 5, "t_max": 4},
    "net": {"obs_dim": 5, "feat_dim": 3, "hidden_dim": 4, "noise_dim": 2, "gen_width": 4,
            "critic_width": 4, "pred_width": 4, "enc_width": 4},
    "train": {"epochs": 1, "pretrain_epochs": 1},
}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


@pytest.fixture(scope="module")
def data(tmp_path_factory, config):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--config", config, "--seed", "3", "--out", str(out)]) == EXIT_OK
    return out


def test_gen_data_outputs(data):
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "config.resolved.json"):
        assert (data / name).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["spec"]["seed"] == 3
    assert sum(manifest["counts"].values()) == 60


def test_gen_data_is_deterministic(tmp_path, config, data):
    assert main(["gen-data", "--config", config, "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_flags_override_config(tmp_path, config):
    assert main(["gen-data", "--config", config, "--n-subjects", "20", "--out", str(tmp_path)]) == EXIT_OK
    resolved = json.loads((tmp_path / "config.resolved.json").read_text())
    assert resolved["cohort"]["n_subjects"] == 20 and resolved["cohort"]["obs_dim"] == 5


@pytest.mark.parametrize("ratios", ["0.5,0.5", "0.7,0.2,0.2", "0.6,-0.2,0.6", "a,b,c"])
def test_gen_data_rejects_bad_ratios(tmp_path, ratios):
    assert main(["gen-data", "--ratios", ratios, "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_config_is_a_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"no_such_key": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["verify", "--suite", "nonsense"]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


def test_train_missing_data_is_an_io_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_IO


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config, data):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--config", config, "--data", str(data), "--seed", "0,1", "--order", "2",
                 "--baseline", "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_train_outputs(trained):
    for seed in (0, 1):
        assert (trained / f"model_combined+MA_k2_seed{seed}.json").exists()
        assert (trained / f"baseline_seed{seed}.json").exists()
        log = (trained / f"train_log_combined+MA_k2_seed{seed}.jsonl").read_text().splitlines()
        assert len(log) == 1 and set(json.loads(log[0])) >= {"epoch", "gen", "cur", "ce", "fut", "total"}
    resolved = json.loads((trained / "config.resolved.json").read_text())
    assert resolved["train"]["order_k"] == 2 and resolved["seeds"] == [0, 1]


def test_train_ablate_no_lstm(tmp_path, config, data):
    code = main(["train", "--config", config, "--data", str(data), "--ablate", "no-lstm", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "model_combined-no-lstm_k1_seed0.json").exists()


def test_eval_multi_seed_report(tmp_path, data, trained):
    ckpts = sorted(str(p) for p in trained.glob("model_*.json"))
    assert main(["eval", "--data", str(data), "--checkpoint", *ckpts, "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    avg = [r for r in summary if r["delta_t"] is None]
    assert len(avg) == 1 and avg[0]["n_seeds"] == 2
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["seed"] for r in rows} == {"0", "1"}


def test_eval_all_times_shares_subjects(tmp_path, config, data, trained):
    assert main(["train", "--config", config, "--data", str(data), "--order", "1", "--out", str(tmp_path)]) == EXIT_OK
    ckpts = [str(tmp_path / "model_combined+MA_k1_seed0.json"), str(trained / "model_combined+MA_k2_seed0.json")]
    out = tmp_path / "eval"
    assert main(["eval", "--data", str(data), "--checkpoint", *ckpts, "--all-times", "--out", str(out)]) == EXIT_OK
    rows = json.loads((out / "report.json").read_text())
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], {})[r["delta_t"]] = r["n"]
    assert set(by_method) == {"combined+MA_k1", "combined+MA_k2"}
    k1, k2 = by_method.values()
    assert k1 == k2 and set(k1) >= {1, 2}


def test_eval_errors(tmp_path, data, trained):
    assert main(["eval", "--data", str(data), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", "--data", str(data), "--checkpoint", str(trained / "config.resolved.json"),
                 "--out", str(tmp_path)]) == EXIT_IO
    assert main(["eval", "--data", str(data), "--checkpoint", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == EXIT_IO


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, config, data):
    cfg = json.loads(json.dumps(SMALL))
    cfg["train"]["cls_lr"] = 1e300
    path = tmp_path / "huge.json"
    path.write_text(json.dumps(cfg))
    code = main(["train", "--config", str(path), "--data", str(data), "--out", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC


def test_verify_all_suites_pass(capsys):
    assert main(["verify"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(SUITES) and all(line.startswith("PASS") for line in lines)


def test_verify_suite_filter(capsys):
    assert main(["verify", "--suite", "calculus"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 1 and "calculus" in out[0]


@pytest.mark.parametrize("suite", [s for s in SUITES if s != "gradcheck"])
def test_verify_injected_fault_fails(suite, capsys):
    assert main(["verify", "--suite", suite, "--inject-fault", suite]) == EXIT_CHECK
    assert capsys.readouterr().out.startswith("FAIL")


def test_ablate_table_shape(tmp_path, config, data):
    assert main(["ablate", "--config", config, "--data", str(data), "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    gaps = {r["delta_t"] for r in rows}
    assert {r["method"] for r in rows} == set(VARIANTS)
    assert set(VARIANTS) == {"cur-only", "prog-only", "combined", "combined-no-lstm", "combined+MA"}
    assert len(rows) == 5 * len(gaps)
    with open(tmp_path / "ablation_average.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5
