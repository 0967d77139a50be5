import csv
import hashlib
import json

import pytest

from deepempc.cli import main
from deepempc.config import build_architecture, load_config
from deepempc.dataset import Dataset, load_dataset, save_dataset
from deepempc.nn import MlpParams, forward, init_params, load_model, save_model
from deepempc.sim import parse_comparison_table

SMALL_CONFIG = """
[generation]
n_train = 24
n_test = 8
max_length = 4

[architecture]
hidden_layers = 2
hidden_width = 6

[training]
epochs = 20

[certification]
n_lipschitz_samples = 100
n_value_samples = 100
n_boundary_samples = 8

[simulation]
duration = 0.05
repetitions = 2
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.toml").write_text(SMALL_CONFIG)
    assert main(["--config", str(d / "c.toml"), "--seed", "7", "--out-dir", str(d / "a"), "gen"]) == 0
    return d


def run(work, *args, out="a"):
    return main(["--config", str(work / "c.toml"), "--out-dir", str(work / out), *args])


def test_gen_is_deterministic(work):
    assert main(["gen", "--config", str(work / "c.toml"), "--seed", "7", "--out-dir", str(work / "b")]) == 0
    for name in ("train.csv", "test.csv"):
        assert sha(work / "a" / name) == sha(work / "b" / name)


def test_gen_manifest_counts_rows(work):
    man = json.loads((work / "a" / "gen_manifest.json").read_text())
    assert man["seed"] == 7 and len(man["config_hash"]) == 64
    for name in ("train", "test"):
        with open(work / "a" / f"{name}.csv") as fh:
            rows = sum(1 for _ in csv.reader(fh)) - 1
        assert man["files"][name]["rows"] == rows
        assert man["files"][name]["sha256"] == sha(work / "a" / f"{name}.csv")
    assert man["files"]["train"]["rows"] == 24


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "nope.toml"), "gen"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_model_is_usage_error(work):
    assert run(work, "validate", "--model", str(work / "none.bin")) == 2


def test_bad_arguments_exit_two():
    with pytest.raises(SystemExit) as err:
        main(["train", "--mode", "sideways"])
    assert err.value.code == 2


@pytest.fixture(scope="module")
def trained(work):
    assert run(work, "train", "--mode", "normal") == 0
    assert run(work, "train", "--mode", "constrained", "--alpha-lambda-0", "50") == 0
    return work / "a"


def test_both_modes_write_distinct_models(trained):
    a, b = trained / "model_normal.bin", trained / "model_constrained.bin"
    assert sha(a) != sha(b)
    ma = json.loads(a.with_suffix(".json").read_text())
    mb = json.loads(b.with_suffix(".json").read_text())
    assert ma["mode"] == "normal" and mb["mode"] == "constrained"
    assert ma["model_sha256"] == sha(a)


def test_constrained_manifest_has_multiplier_history(trained):
    man = json.loads((trained / "model_constrained.json").read_text())
    lag = man["lagrange"]
    assert len(lag["history"]) == lag["t_outer"] + 1
    assert len(lag["lambda"]) == len(man["row_names"])
    assert man["train_config"]["alpha_lambda_0"] == 50.0
    assert len(man["losses"]["loss"]) == 20


def test_retrain_reproduces_model_hash(work, trained):
    out = work / "retrain.bin"
    assert run(work, "train", "--mode", "constrained", "--alpha-lambda-0", "50", "--model-out", str(out)) == 0
    assert load_model(out).theta.tobytes() == load_model(trained / "model_constrained.bin").theta.tobytes()


@pytest.fixture(scope="module")
def oracle(work):
    """A network and a test file labelled by that very network, so e_hat = 0."""
    cfg = load_config(work / "c.toml")
    arch = build_architecture(cfg)
    params = MlpParams(arch, init_params(arch, 1) * 0.2)
    ds = load_dataset(work / "a" / "test.csv")
    labelled = Dataset(ds.X, forward(arch, params.theta, ds.X), ds.v_star)
    save_dataset(labelled, work / "oracle.csv")
    save_model(work / "oracle.bin", params)
    return work / "oracle.bin", work / "oracle.csv"


def test_validate_on_oracle_labels(work, oracle):
    model, data = oracle
    assert run(work, "validate", "--model", str(model), "--data", str(data)) == 0
    rep = json.loads((work / "a" / "validation_oracle.json").read_text())
    assert rep["i_opt"] == 1.0
    assert (work / "a" / "validation_oracle.txt").read_text().startswith(" ")


def test_certify_oracle_exits_zero(work, oracle):
    model, data = oracle
    assert run(work, "certify", "--model", str(model), "--data", str(data)) == 0
    rep = json.loads((work / "a" / "certificate_oracle.json").read_text())
    assert rep["inputs"]["e"] == 0.0 and rep["rigor"] == "sampled-estimate"


def test_certify_failure_exits_three(work, trained):
    assert run(work, "certify", "--model", str(trained / "model_normal.bin")) == 3


def test_simulate_writes_logs(work, trained):
    assert run(work, "simulate", "--policy", "clamped", "--model", str(trained / "model_normal.bin")) == 0
    assert (trained / "sim_clamped_00.csv").is_file() and (trained / "sim_clamped_01.csv").is_file()
    man = json.loads((trained / "sim_clamped.json").read_text())
    assert len(man["violations"]["counts"]) == 2


def test_simulate_network_needs_model(work):
    with pytest.raises(SystemExit) as err:
        run(work, "simulate", "--policy", "network")
    assert err.value.code == 2


def test_compare_table_round_trip(work, trained):
    assert run(work, "compare", f"normal={trained / 'model_normal.bin'}",
               f"constrained={trained / 'model_constrained.bin'}") == 0
    data = json.loads((trained / "compare.json").read_text())
    parsed = parse_comparison_table((trained / "compare.txt").read_text())
    assert set(parsed) == {"exact", "normal", "constrained"}
    for name, row in parsed.items():
        ref = data["policies"][name]
        assert row["mean_count"] == pytest.approx(ref["violations"]["mean_count"], abs=5e-3)
        assert row["mean_step_ms"] == pytest.approx(ref["mean_step_ms"], abs=5e-5)
        assert row["speedup"] == pytest.approx(ref["speedup"], abs=5e-3)


def test_compare_rejects_bad_spec(work):
    assert run(work, "compare", "justapath.bin") == 2
