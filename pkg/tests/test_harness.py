import csv
import json
import statistics
import time

import numpy as np
import pytest

from advtransfer.attack import AttackConfig
from advtransfer.classifiers import DenseNetwork, save_model
from advtransfer.core import PerturbationRecord, Purpose, RngStream, load_perturbations
from advtransfer.errors import (
    AttackQualityError,
    ConfigError,
    InsufficientSources,
    InvalidArguments,
)
from advtransfer.harness import (
    ExperimentConfig,
    emit_boxplot_data,
    emit_heatmap,
    evaluate_grid,
    generate_perturbation_set,
    load_experiment_data,
    run_experiment,
    select_sources,
    spot_check,
    train_ensemble,
    verify_manifest,
)
from advtransfer.harness.cli import main, template
from advtransfer.harness.figures import boxplot_rows, read_pgm
from advtransfer.harness.pipeline import run_phases
from advtransfer.metrics import dispersion_stats

SMALL_MLP = {"kind": "mlp", "hidden_layers": [12], "epochs": 15, "learning_rate": 0.2}


def tiny_config(out, **changes):
    data = {
        "root_seed": 7,
        "epsilon": 1.0,
        "surrogates": [SMALL_MLP],
        "targets": [{"name": "mlp", "count": 2, "training": SMALL_MLP}],
        "source_count": 2,
        "perturbations_per_source": 2,
        "dataset": {"format": "blobs",
                    "blobs": {"class_count": 3, "feature_dim": 6, "samples_per_class": 40, "spread": 0.1}},
        "attack": {"max_iterations": 8},
        "output_dir": str(out),
    }
    data.update(changes)
    return ExperimentConfig.from_dict(data)


def constant_model(label, class_count, dim):
    bias = np.zeros(class_count)
    bias[label] = 1.0
    return DenseNetwork.linear(np.zeros((class_count, dim)), bias)


# -- configuration -------------------------------------------------------------------


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        tiny_config(tmp_path, colour="blue")
    with pytest.raises(ConfigError, match="unknown"):
        tiny_config(tmp_path, attack={"max_iterations": 3, "iters": 2})


@pytest.mark.parametrize("changes", [
    {"targets": [{"name": "mlp", "count": 0, "training": SMALL_MLP}]},
    {"targets": []},
    {"epsilon": 0},
    {"source_count": 0},
    {"perturbations_per_source": 0},
    {"surrogates": [SMALL_MLP] * 3},
    {"surrogates": [{"kind": "forest"}]},
    {"attack": {"epsilon": 2.0}},
    {"dataset": {"format": "csv"}},
])
def test_config_rejects_invalid(tmp_path, changes):
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, **changes)


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path)
    assert cfg.attack.epsilon == 1.0
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.with_overrides(seed=3).root_seed == 3
    blackbox_forest = tiny_config(tmp_path, surrogates=[{"kind": "forest"}], attack={"mode": "blackbox"})
    assert blackbox_forest.surrogates[0].kind == "forest"


def test_templates_are_valid_configs():
    for name in ("locality", "two-surrogate", "cross-family"):
        cfg = ExperimentConfig.from_dict(template(name))
        assert cfg.source_count == 50 and cfg.perturbations_per_source == 20
        assert all(t.count == 20 for t in cfg.targets)


# -- training -----------------------------------------------------------------------


def test_train_ensemble_deterministic_and_distinct(tmp_path):
    cfg = tiny_config(tmp_path, targets=[{"name": "mlp", "count": 3, "training": SMALL_MLP}])
    train_ds, _ = load_experiment_data(cfg)
    _, first = train_ensemble(cfg, train_ds)
    _, second = train_ensemble(cfg, train_ds)
    models = first["mlp"]
    assert len(models) == 3
    for a, b in zip(models, second["mlp"]):
        assert a.parameters_equal(b)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not models[i].parameters_equal(models[j])


def test_train_ensemble_mixed_families(tmp_path):
    cfg = tiny_config(tmp_path, targets=[
        {"name": "mlp", "count": 1, "training": SMALL_MLP},
        {"name": "rf", "count": 2, "training": {"kind": "forest", "tree_count": 3, "max_depth": 4}},
    ])
    train_ds, _ = load_experiment_data(cfg)
    surrogates, targets = train_ensemble(cfg, train_ds, jobs=2)
    assert [m.kind for m in targets["rf"]] == ["forest", "forest"]
    assert surrogates[0].kind == "mlp" and targets["mlp"][0].kind == "mlp"


# -- sources -----------------------------------------------------------------------


def test_select_sources(blobs, mlp):
    ok = np.flatnonzero(mlp.predict_label(blobs.features) == blobs.labels)
    idx, samples = select_sources(blobs, mlp, ok.size, RngStream(1))
    assert sorted(idx.tolist()) == ok.tolist()
    assert idx.tolist() != ok.tolist()
    assert all(s.label == blobs.labels[i] for i, s in zip(idx, samples))
    again, _ = select_sources(blobs, mlp, 10, RngStream(1))
    assert again.tolist() == select_sources(blobs, mlp, 10, RngStream(1))[0].tolist()


def test_select_sources_insufficient(blobs):
    never = blobs.subset(np.flatnonzero(blobs.labels != 0))
    with pytest.raises(InsufficientSources):
        select_sources(never, constant_model(0, 4, blobs.feature_dim), 1, RngStream(0))


# -- perturbation sets ---------------------------------------------------------------


def _sources(blobs, model, P):
    return select_sources(blobs, model, P, RngStream(0, (Purpose.SOURCES,)))[1]


def test_generate_small_set(blobs, mlp):
    sources = _sources(blobs, mlp, 2)
    records, failures = generate_perturbation_set(mlp, sources, AttackConfig(max_iterations=8), blobs, 5, 3)
    assert len(records) + len(failures) == 6
    for r in records:
        assert mlp.predict_label(r.x_prime) != sources[r.source_index].label
        assert r.violations(sources[r.source_index].features) == []


def test_two_surrogates_share_attack_parameters(blobs, mlp):
    other = DenseNetwork([w * 1.01 for w in mlp.weights], mlp.biases)
    sources = _sources(blobs, [mlp, other], 3)
    cfg = AttackConfig(max_iterations=4)
    a, _ = generate_perturbation_set(mlp, sources, cfg, blobs, 99, 2)
    b, _ = generate_perturbation_set(other, sources, cfg, blobs, 99, 2)
    pairs = {(r.source_index, r.perturbation_index): r for r in b}
    assert len(pairs) == len(a) == 6
    for r in a:
        twin = pairs[(r.source_index, r.perturbation_index)]
        assert (twin.target_class, twin.seed) == (r.target_class, r.seed)
    assert len({r.seed for r in a}) == 6


def test_unattackable_surrogate(blobs):
    flat = constant_model(0, 4, blobs.feature_dim)
    sources = [s for s in blobs if s.label == 0][:2]
    with pytest.raises(AttackQualityError):
        generate_perturbation_set(flat, sources, AttackConfig(), blobs, 0, 2)


def test_trace_file(tmp_path, blobs, mlp):
    sources = _sources(blobs, mlp, 1)
    path = tmp_path / "t.jsonl"
    generate_perturbation_set(mlp, sources, AttackConfig(max_iterations=3), blobs, 1, 2, trace_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert {(r["p"], r["d"]) for r in rows} == {(0, 0), (0, 1)}


# -- grids -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def attacked(blobs, mlp):
    sources = _sources(blobs, mlp, 3)
    records, _ = generate_perturbation_set(mlp, sources, AttackConfig(max_iterations=6), blobs, 3, 4)
    return records, np.stack([s.features for s in sources])


def test_self_transfer(attacked, mlp):
    records, sources = attacked
    grid = evaluate_grid(records, sources, mlp, [mlp], shape=(3, 4))
    assert grid.present.sum() == len(records)
    assert np.all(grid.nontargeted[grid.present] == 1)
    assert np.all(grid.targeted[grid.present] == 1)
    assert np.all(grid.nontargeted[~grid.present] == 0)


def test_grid_matches_hand_enumeration(attacked, mlp, blobs, forest):
    records, sources = attacked
    flat = constant_model(2, 4, blobs.feature_dim)
    targets = [flat, forest]
    grid = evaluate_grid(records, sources, mlp, targets, shape=(3, 4))
    assert not grid.nontargeted[:, :, 0].any() and not grid.targeted[:, :, 0].any()
    for r in records:
        x = sources[r.source_index]
        for j, t in enumerate(targets):
            fooled = t.predict_label(r.x_prime) != t.predict_label(x)
            agrees = t.predict_label(r.x_prime) == mlp.predict_label(r.x_prime)
            assert grid.targeted[r.source_index, r.perturbation_index, j] == int(fooled and agrees)
            assert grid.nontargeted[r.source_index, r.perturbation_index, j] == int(fooled)


def test_empty_record_set(mlp):
    grid = evaluate_grid([], np.zeros((0, mlp.feature_dim)), mlp, [mlp])
    assert grid.dims == (0, 0, 1)
    with pytest.raises(InvalidArguments):
        dispersion_stats(grid.expectation("targeted"))


# -- figures ------------------------------------------------------------------------


def test_heatmap_all_zero_is_black(tmp_path):
    paths = emit_heatmap(np.zeros((4, 5)), tmp_path / "z")
    assert [p.suffix for p in paths] == [".pgm", ".svg", ".csv"]
    img = read_pgm(tmp_path / "z.pgm")
    assert img.shape == (4, 5) and not img.any()
    assert (tmp_path / "z.svg").read_text().count("<rect") == 1


def test_heatmap_identity(tmp_path):
    emit_heatmap(np.eye(6), tmp_path / "i")
    np.testing.assert_array_equal(read_pgm(tmp_path / "i.pgm"), np.eye(6, dtype=np.uint8) * 255)
    with open(tmp_path / "i.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["source"] + [str(j) for j in range(6)]
    np.testing.assert_array_equal(np.array(rows[1:], dtype=float)[:, 1:], np.eye(6))


def test_heatmap_speed(tmp_path):
    E = np.random.default_rng(0).random((100, 100))
    t0 = time.perf_counter()
    emit_heatmap(E, tmp_path / "big")
    assert time.perf_counter() - t0 < 1.0
    with open(tmp_path / "big.csv") as fh:
        back = np.array(list(csv.reader(fh))[1:], dtype=float)[:, 1:]
    np.testing.assert_array_equal(back, E)


def test_boxplot_rows(tmp_path):
    rows = boxplot_rows([[0, 0, 1, 1], [0.3, 0.3, 0.3, 0.3]])
    assert rows[0][3] == 0.5
    assert len(set(rows[1][1:])) == 1
    gen = np.random.default_rng(1)
    E = gen.random((20, 9))
    emit_boxplot_data(E, tmp_path / "b.csv")
    with open(tmp_path / "b.csv") as fh:
        got = np.array(list(csv.reader(fh))[1:], dtype=float)
    for p, row in enumerate(E.tolist()):
        q = statistics.quantiles(row, n=4, method="inclusive")
        want = [min(row), q[0], statistics.median(row), q[2], max(row)]
        assert np.max(np.abs(got[p, 1:] - want)) <= 1e-12


# -- end to end ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out, targets=[
        {"name": "mlp", "count": 2, "training": SMALL_MLP},
        {"name": "rf", "count": 2, "training": {"kind": "forest", "tree_count": 3, "max_depth": 4}},
    ], surrogates=[SMALL_MLP, SMALL_MLP])
    report = run_experiment(cfg)
    return cfg, out, report


def test_run_emits_artifacts(tiny_run):
    cfg, out, report = tiny_run
    for rel in ("models/s0.model", "models/s1.model", "models/mlp_000.model", "models/rf_001.model",
                "perturbations/s0/metadata.json", "perturbations/s1/x_prime.f64",
                "grids/targeted.csv", "grids/nontargeted.csv", "report.json", "manifest.json"):
        assert (out / rel).is_file(), rel
    assert list((out / "figures").glob("*.pgm")) and list((out / "figures").glob("*.svg"))
    assert set(report["grids"]) == {"s0_mlp", "s0_rf", "s1_mlp", "s1_rf"}
    assert set(report["agreement"]) == {"mlp", "rf"}
    assert set(report["cross_family"]) == {"s0", "s1"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["complete"] and manifest["phases"] == ["train", "attack", "evaluate", "report"]
    assert "report.json" in manifest["files"]


def test_run_is_byte_identical(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    run_experiment(cfg.with_overrides(out=tmp_path), jobs=2)
    first = json.loads((out / "manifest.json").read_text())["files"]
    second = json.loads((tmp_path / "manifest.json").read_text())["files"]
    assert first == second


def test_verify_and_spot_check(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    assert verify_manifest(out) == []
    assert spot_check(cfg, out, cells=100) == []


def test_verify_detects_tampering(tiny_run, tmp_path):
    cfg, _, _ = tiny_run
    copy = tmp_path / "copy"
    run_experiment(cfg.with_overrides(out=copy))
    (copy / "grids" / "targeted.csv").write_text("surrogate,targets,p,d,j,indicator\n")
    (copy / "extra.txt").write_text("x")
    (copy / "report.json").unlink()
    problems = verify_manifest(copy)
    assert "hash mismatch: grids/targeted.csv" in problems
    assert "unlisted: extra.txt" in problems
    assert "missing: report.json" in problems


def test_failed_phase_marks_manifest_incomplete(tmp_path):
    cfg = tiny_config(tmp_path)
    run_phases(cfg, ("train",))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["phases"] == ["train"] and not manifest["complete"]
    # an unattackable surrogate in place of the trained one
    save_model(constant_model(0, 3, 6), tmp_path / "models" / "s0.model")
    with pytest.raises((AttackQualityError, InsufficientSources)):
        run_phases(cfg, ("attack",))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert not manifest["complete"] and manifest["error"].startswith("attack:")


def test_phases_one_at_a_time_match_full_run(tiny_run, tmp_path):
    cfg, out, _ = tiny_run
    staged = cfg.with_overrides(out=tmp_path)
    for phase in ("train", "attack", "evaluate", "report"):
        run_phases(staged, (phase,))
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    records, _, _ = load_perturbations(tmp_path / "perturbations" / "s0")
    assert all(isinstance(r, PerturbationRecord) for r in records)


# -- CLI ---------------------------------------------------------------------------------


def test_cli_template_and_run(tmp_path, capsys):
    assert main(["template", "locality", "--seed", "3"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["root_seed"] == 3 and printed["epsilon"] == 0.8

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config(tmp_path / "unused").to_dict()))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--out", str(out), "--trace"]) == 0
    assert "s0_mlp: mean E[T_T]=" in capsys.readouterr().out
    assert (out / "perturbations" / "s0" / "traces.jsonl").is_file()
    assert main(["verify", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip().endswith("ok")


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"root_seed": 1}))
    assert main(["run", "--config", str(bad)]) == 2
    assert capsys.readouterr().err.startswith("error:")
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
