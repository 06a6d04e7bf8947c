import numpy as np
import pytest

from virtualfl import cli
from virtualfl.harness import (
    ConfigError,
    compare_methods,
    config_from_dict,
    epoch_parity_gap,
    load_config,
    repetition_seed,
    run_experiment,
    summarize,
)
from virtualfl.metrics import CSV_HEADER, MetricsRecord, accuracy, emit_metrics, format_metrics, parse_metrics

TINY = """
method = "{method}"
seed = 3
reps = {reps}
widths = [6]
epochs = 2

[dataset]
source = "synthetic"
num_clients = 2
[dataset.synthetic]
dim = 4
num_classes = 3
n_per_client = 24

[virtual]
refinements_per_client = 2
mc_samples = 2
batch_size = 8
"""


def _write(tmp_path, method="virtual", reps=1, extra=""):
    p = tmp_path / "exp.toml"
    p.write_text(TINY.format(method=method, reps=reps) + extra)
    return p


def test_accuracy():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 2, 0], [0, 1, 2, 1]) == 0.75
    logits = np.array([[1.0, 2.0], [3.0, 0.0]])
    assert accuracy(logits, [1, 0]) == accuracy(logits + np.array([[5.0], [-2.0]]), [1, 0])
    assert accuracy(np.array([[1.0, 1.0]]), [0]) == 1.0  # ties go to the lowest index
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_csv_schema_and_round_trip(tmp_path):
    rec = MetricsRecord("virtual", "mnist", 7, ["0", "1"], [0.5, 0.75], 1.25, 60.0)
    text = format_metrics([rec])
    lines = text.splitlines()
    assert lines[0] == CSV_HEADER == "method,dataset,seed,client_id,accuracy,average,seconds,epochs"
    assert len(lines) == 4
    assert lines[1] == "virtual,mnist,7,0,0.500000,0.625000,1.250000,60.000000"
    assert lines[3].split(",")[3] == "ALL"
    path = emit_metrics([rec, rec], tmp_path / "m.csv")
    back = parse_metrics(path)
    assert len(back) == 2 and back[0].accuracies == [0.5, 0.75] and back[0].seed == 7
    with pytest.raises(OSError):
        emit_metrics([rec], tmp_path / "missing" / "m.csv")


def test_record_validation():
    with pytest.raises(ValueError):
        MetricsRecord("m", "d", 0, ["0"], [1.5], 0.0, 1.0)
    with pytest.raises(ValueError):
        MetricsRecord("m", "d", 0, ["0", "1"], [0.5], 0.0, 1.0)


def test_summary_conventions():
    recs = [MetricsRecord("m", "d", s, ["0"], [a], 0.0, 1.0) for s, a in enumerate([0.5, 0.7, 0.9])]
    s = summarize(recs)
    assert s.mean == pytest.approx(0.7) and s.std == pytest.approx(0.2)  # sample std
    assert summarize(recs[:1]).std == 0.0


def test_repetition_seeds_are_distinct_and_stable():
    seeds = [repetition_seed(0, r) for r in range(20)]
    assert len(set(seeds)) == 20
    assert seeds == [repetition_seed(0, r) for r in range(20)]
    assert repetition_seed(1, 0) != repetition_seed(0, 0)


def test_config_loading_and_overrides(tmp_path):
    p = _write(tmp_path)
    cfg = load_config(p, {"method": "fedavg", "seed": 9, "reps": 2, "epochs": 4})
    assert cfg.method == "fedavg" and cfg.seed == 9 and cfg.reps == 2
    assert cfg.epochs == 4 and cfg.virtual.refinement.epochs == 2
    assert cfg.dataset.seed == 9  # dataset seed follows the master seed unless set


@pytest.mark.parametrize(
    "raw",
    [
        {"method": "sgd", "dataset": {"source": "synthetic"}},
        {"method": "virtual", "dataset": {"source": "synthetic"}, "reps": 0},
        {"method": "virtual", "dataset": {}},
        {"method": "virtual", "dataset": {"source": "synthetic"}, "bogus": 1},
        {"method": "virtual", "dataset": {"source": "synthetic", "colour": 1}},
        {"method": "virtual", "dataset": {"source": "synthetic"}, "virtual": {"lr": -1.0}},
        {"method": "virtual", "dataset": {"source": "synthetic"}, "epochs": 5},  # not a multiple of 3
        {"method": "virtual", "dataset": {"source": "idx"}},
    ],
)
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_dataset_override(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("client_id,label,f_0\na,0,1\na,1,2\n")
    cfg = load_config(_write(tmp_path), {"dataset": str(csv)})
    assert cfg.dataset.source == "csv" and cfg.dataset.path == str(csv)
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path), {"dataset": str(tmp_path / "nothing.bin")})


def test_relative_paths_resolve_against_config(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text('method = "local"\n[dataset]\nsource = "csv"\npath = "data.csv"\n')
    assert load_config(p).dataset.path == str(tmp_path / "data.csv")


@pytest.mark.parametrize("method", ["virtual", "fedavg", "local", "global"])
def test_run_experiment_each_method(tmp_path, method):
    res = run_experiment(load_config(_write(tmp_path, method, reps=2)))
    assert len(res.records) == 2 and not res.failures
    rec = res.records[0]
    assert rec.method == method and len(rec.accuracies) == 2 and rec.epochs == 2.0
    assert rec.seconds == 0.0


def test_identical_seed_gives_identical_csv(tmp_path):
    cfg = load_config(_write(tmp_path, reps=2))
    assert format_metrics(run_experiment(cfg).records) == format_metrics(run_experiment(cfg).records)


def test_epoch_parity_across_methods(tmp_path):
    results = compare_methods(load_config(_write(tmp_path)))
    assert epoch_parity_gap(results) <= 1.0


def test_failed_repetition_is_recorded(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text('method = "local"\nreps = 2\n[dataset]\nsource = "csv"\npath = "missing.csv"\n')
    with pytest.warns(RuntimeWarning):
        res = run_experiment(load_config(p))
    assert len(res.failures) == 2 and res.summary.completed == 0


def test_cli_run_and_validate(tmp_path, capsys):
    p = _write(tmp_path)
    out = tmp_path / "m.csv"
    ckpt = tmp_path / "post.json"
    assert cli.main(["validate", "--config", str(p)]) == 0
    assert "ok:" in capsys.readouterr().out
    assert cli.main(["run", "--config", str(p), "--out", str(out), "--checkpoint", str(ckpt)]) == 0
    assert out.read_text().startswith(CSV_HEADER + "\n") and len(out.read_text().splitlines()) == 4
    assert ckpt.exists()
    assert cli.main(["run", "--config", str(p), "--method", "global"]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("global,")


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("method = [")
    assert cli.main(["validate", "--config", str(bad)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "absent.toml")]) == 2
    missing = tmp_path / "missing.toml"
    missing.write_text('method = "local"\n[dataset]\nsource = "csv"\npath = "nope.csv"\n')
    assert cli.main(["validate", "--config", str(missing)]) == 2
    corrupt = tmp_path / "corrupt.csv"
    corrupt.write_text("client_id,label,f_0\na,0,x\n")
    runtime = tmp_path / "runtime.toml"
    runtime.write_text(f'method = "local"\nreps = 1\n[dataset]\nsource = "csv"\npath = "{corrupt}"\n')
    assert cli.main(["run", "--config", str(runtime)]) == 1
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(runtime), "--method", "sgd"])
