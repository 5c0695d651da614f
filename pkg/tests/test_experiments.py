import json

import numpy as np
import pytest

import database as db
import experiments
from config import DEFAULTS, MetropolisSettings, config_hash, validate_config
from energy_models import DoubleWell, relabeler_for
from errors import ConfigError, StageAbort
from estimators import load_weighted_samples
from flow_layers import build_flow, load_flow, save_flow

STARTS = [[-2.55, 0.0], [2.38, 0.0]]


def tiny_config(tmp_path, **sections):
    data = {
        **DEFAULTS,
        "name": "tiny",
        "output_dir": str(tmp_path / "out"),
        "system": {"name": "double_well"},
        "flow": {"architecture": "R2", "l_hidden": 1, "n_hidden": 8},
        "data": {"metropolis": {"starts": STARTS, "step": 0.1, "steps": 50}},
        "training": {
            "stages": [
                {"iter": 5, "batch": 32, "lr": 0.01, "w_ML": 1.0},
                {"iter": 3, "batch": 32, "lr": 0.001, "w_ML": 1.0, "w_KL": 1.0},
            ],
            "log_every": 0,
        },
        "sampling": {"n": 200},
        **sections,
    }
    return validate_config(data)


def _manifest_file(config) -> dict:
    with open(f"{config.output_dir}/manifest.json") as f:
        return json.load(f)


def test_train_writes_checkpoint_history_and_manifest(tmp_path, registry):
    config = tiny_config(tmp_path)
    manifest = experiments.cmd_train(config)

    assert manifest.status == "ok"
    assert manifest.artifacts == ["flow.npz", "history.csv"]
    # 2 chain starts + 50 steps x 2 chains, the data-energy quantile, then 3 KL batches of 32
    assert manifest.energy_calls == 102 + 100 + 96
    history = np.loadtxt(tmp_path / "out" / "history.csv", delimiter=",")
    assert history.shape == (8, 11)
    assert np.array_equal(history[:, 0], [0, 0, 0, 0, 0, 1, 1, 1])

    flow, header = load_flow(tmp_path / "out" / "flow.npz")
    assert header["system"]["name"] == "double_well"
    assert header["temperatures"] == [1.0]
    assert flow.architecture == "R2"

    on_disk = _manifest_file(config)
    assert on_disk["energy_calls"] == manifest.energy_calls
    row = db.get_run(manifest.run_id)
    assert row["status"] == "ok" and row["energy_calls"] == manifest.energy_calls
    events = [e["event_type"] for e in db.get_recent_events(manifest.run_id)]
    assert events[0] == "run_end" and events[-1] == "run_start"
    assert events.count("stage_end") == 2


def test_training_is_reproducible_from_the_seed(tmp_path, registry):
    first = experiments.cmd_train(tiny_config(tmp_path / "a"))
    second = experiments.cmd_train(tiny_config(tmp_path / "b"))
    a = np.loadtxt(tmp_path / "a" / "out" / "history.csv", delimiter=",")
    b = np.loadtxt(tmp_path / "b" / "out" / "history.csv", delimiter=",")
    assert np.array_equal(a, b, equal_nan=True)
    assert first.energy_calls == second.energy_calls


def test_aborted_training_keeps_a_checkpoint(tmp_path, registry, monkeypatch):
    def abort(flow, *args, **kwargs):
        raise StageAbort("stage 1 aborted at iteration 0", params=flow.parameters(), stage=1)

    monkeypatch.setattr(experiments, "run_schedule", abort)
    config = tiny_config(tmp_path)
    with pytest.raises(StageAbort):
        experiments.cmd_train(config)
    assert (tmp_path / "out" / "flow_aborted.npz").exists()
    _, header = load_flow(tmp_path / "out" / "flow_aborted.npz")
    assert header["aborted_stage"] == 1
    assert _manifest_file(config)["status"] == "aborted"
    run_id = _manifest_file(config)["run_id"]
    assert db.get_run(run_id)["status"] == "aborted"
    assert any(e["event_type"] == "stage_abort" for e in db.get_recent_events(run_id))


def _trained(tmp_path):
    config = tiny_config(tmp_path)
    experiments.cmd_train(config)
    return config, tmp_path / "out" / "flow.npz"


def test_sample_writes_weighted_samples(tmp_path, registry):
    config, checkpoint = _trained(tmp_path)
    manifest = experiments.cmd_sample(config, checkpoint, n=150, tau=2.0)
    assert manifest.artifacts == ["samples_tau2.csv"]
    assert manifest.energy_calls == 150
    samples = load_weighted_samples(tmp_path / "out" / "samples_tau2.csv")
    assert len(samples) == 150 and samples.tau == 2.0
    summary = manifest.summary["tau=2"]
    assert 0 < summary["n_eff"] <= 150
    assert np.isclose(summary["efficiency"], summary["n_eff"] / 150)
    assert any("outside the trained temperatures" in w for w in manifest.warnings)


def test_sampling_does_not_depend_on_the_thread_count(tmp_path, registry):
    _, checkpoint = _trained(tmp_path)
    tables = []
    for threads in (1, 2):
        config = tiny_config(tmp_path / f"t{threads}", threads=threads, sampling={"n": 100, "temperatures": [1.0, 2.0]})
        manifest = experiments.cmd_sample(config, checkpoint)
        assert manifest.energy_calls == 200
        assert manifest.artifacts == ["samples_tau1.csv", "samples_tau2.csv"]
        tables.append([np.loadtxt(tmp_path / f"t{threads}" / "out" / name, delimiter=",") for name in manifest.artifacts])
    for serial, threaded in zip(*tables):
        assert np.array_equal(serial, threaded, equal_nan=True)


def test_dimer_runs_relabel_against_the_first_training_frame(tmp_path, registry):
    model = experiments.make_system("dimer", {"n_solvent": 4})
    rng = np.random.default_rng(5)
    frames = model.random_points(rng, 40).reshape(40, -1, 2)
    for row in frames[1:]:
        row[model.solvent] = row[rng.permutation(model.solvent)]
    frames = frames.reshape(40, -1)
    np.save(tmp_path / "frames.npy", frames)
    config = tiny_config(
        tmp_path, system={"name": "dimer", "params": {"n_solvent": 4}}, data={"file": str(tmp_path / "frames.npy")},
        training={"stages": [{"iter": 2, "batch": 8, "lr": 0.001, "w_ML": 1.0}], "log_every": 0},
        sampling={"n": 20, "temperatures": [1.0]},
    )
    relabel = relabeler_for(model, frames[0])

    data = experiments.load_training_data(config, experiments.build_model(config), 0)
    assert np.array_equal(data[0], frames[0])
    assert np.array_equal(relabel(data), data)
    assert not np.array_equal(data, frames)

    experiments.cmd_train(config)
    _, header = load_flow(tmp_path / "out" / "flow.npz")
    assert np.array_equal(header["relabel_reference"], frames[0])
    experiments.cmd_sample(config, tmp_path / "out" / "flow.npz")
    samples = load_weighted_samples(tmp_path / "out" / "samples_tau1.csv")
    x = samples.x[samples.valid]
    assert len(x) > 0
    assert np.array_equal(relabel(x), x)


FREE_ENERGY = {
    "profiles": [{"coordinate": {"kind": "coordinate", "index": 0}, "bins": 10, "range": [-3.5, 3.5],
                  "reference": True}],
    "basins": {"reference": True},
    "expectations": [{"kind": "coordinate", "index": 0}],
}


def test_free_energy_from_sample_files(tmp_path, registry):
    config, checkpoint = _trained(tmp_path)
    experiments.cmd_sample(config, checkpoint, n=400, tau=1.0)
    config = tiny_config(tmp_path, estimators=FREE_ENERGY)
    manifest = experiments.cmd_free_energy(config, samples_files=[tmp_path / "out" / "samples_tau1.csv"])

    assert manifest.status == "ok"
    assert set(manifest.artifacts) == {
        "profile0_tau1.csv", "profile0_tau1_error.csv", "profile0_tau1_reference.csv", "basins.csv",
        "expectations.csv",
    }
    assert manifest.energy_calls == 0
    basins = np.loadtxt(tmp_path / "out" / "basins.csv", delimiter=",")
    assert basins[0] == 1.0
    assert basins[2] > 3.0 and basins[3] < 1e-6
    assert "profile0_tau1_max_deviation" in manifest.summary
    assert manifest.summary["estimator_error"] >= 0.0
    lines = (tmp_path / "out" / "expectations.csv").read_text().splitlines()
    assert lines[1] == "# tau,observable,value"
    assert lines[2].startswith("1,x0,")


def test_free_energy_from_a_checkpoint(tmp_path, registry):
    config, checkpoint = _trained(tmp_path)
    config = tiny_config(tmp_path, estimators={"profiles": FREE_ENERGY["profiles"]})
    manifest = experiments.cmd_free_energy(config, checkpoints=[checkpoint])
    assert manifest.energy_calls == 200
    assert "profile0_tau1.csv" in manifest.artifacts


def test_two_generator_delta_a(tmp_path, registry):
    paths = []
    for name, restraint in (("left", {"index": 0, "upper": 0.17}), ("right", {"index": 0, "lower": 0.17})):
        config = tiny_config(tmp_path / name, system={"name": "double_well", "restraint": restraint})
        flow = build_flow("R2", 2, np.random.default_rng(0), l_hidden=1, n_hidden=8)
        paths.append(tmp_path / f"{name}.npz")
        save_flow(paths[-1], flow, experiments.checkpoint_header(config))

    config = tiny_config(tmp_path, estimators={
        "delta_a": {"temperatures": [1.0, 2.0], "n": 1000, "batch": 100, "reference": True}})
    manifest = experiments.cmd_free_energy(config, checkpoints=paths)

    assert manifest.artifacts == ["delta_a.csv", "delta_a_reference.csv"]
    assert manifest.energy_calls == 2 * 2 * 1000
    table = np.loadtxt(tmp_path / "out" / "delta_a.csv", delimiter=",")
    assert table.shape == (2, 3)
    reference = np.loadtxt(tmp_path / "out" / "delta_a_reference.csv", delimiter=",")
    assert np.array_equal(reference[:, 0], [1.0, 2.0])
    assert set(manifest.summary["delta_a"]) == {"1", "2"}


def test_free_energy_argument_errors(tmp_path, registry):
    config = tiny_config(tmp_path)
    with pytest.raises(ConfigError):
        experiments.cmd_free_energy(config)
    with pytest.raises(ConfigError):
        experiments.cmd_free_energy(config, checkpoints=["a", "b", "c"])


def test_explore_writes_buffers_and_diagnostics(tmp_path, registry):
    config = tiny_config(tmp_path, explore={
        "iterations": 5, "batch": 16, "capacity": 32, "pretrain_iterations": 2, "pretrain_batch": 16,
        "initial": [-2.55, 0.0], "noise": 0.1, "snapshot_every": 5,
    })
    manifest = experiments.cmd_explore(config)
    assert manifest.artifacts == ["buffer_initial.csv", "buffer_iter5.csv", "diagnostics.csv", "buffer_final.csv",
                                  "flow.npz"]
    # buffer seed, then one KL batch and one proposal batch per iteration
    assert manifest.energy_calls == 32 + 5 * (16 + 16)
    diagnostics = np.loadtxt(tmp_path / "out" / "diagnostics.csv", delimiter=",")
    assert diagnostics.shape == (5, 8)
    assert manifest.summary["iterations"] == 5


def test_explore_needs_its_section(tmp_path):
    with pytest.raises(ConfigError):
        experiments.cmd_explore(tiny_config(tmp_path))


def test_baseline_runs_temperatures_in_parallel(tmp_path, registry):
    config = tiny_config(tmp_path, threads=2, baseline={
        "temperatures": [1.0, 2.0],
        "metropolis": {"starts": [[-2.55, 0.0]], "step": 0.2, "steps": 40, "stride": 4},
        "umbrella": {"coordinate": {"kind": "coordinate", "index": 0}, "low": -2.0, "high": 2.0, "windows": 5,
                     "k": 5.0, "steps_per_window": 80, "step": 0.2, "stride": 2, "bins": 5},
    })
    manifest = experiments.cmd_baseline(config)
    assert manifest.status == "ok"
    for t in ("1", "2"):
        assert {f"metropolis_tau{t}.csv", f"umbrella_tau{t}.csv", f"umbrella_tau{t}_hysteresis.csv"} \
            <= set(manifest.artifacts)
        table = np.loadtxt(tmp_path / "out" / f"metropolis_tau{t}.csv", delimiter=",")
        assert table.shape == (10, 5)
        assert np.allclose(table[:, 4], experiments.build_model(config).energy(table[:, 2:4]))
        assert isinstance(manifest.summary[f"tau={t}"]["hysteresis_consistent"], bool)
    assert manifest.energy_calls > 2 * 41


def test_baseline_estimates_the_return_trip_time(tmp_path, registry):
    config = tiny_config(tmp_path, baseline={"temperatures": [1.0], "return_trip": {"step": 0.3, "steps": 50000}})
    manifest = experiments.cmd_baseline(config)
    assert manifest.status == "ok"
    assert manifest.energy_calls == 50001
    rt = manifest.summary["tau=1"]["return_trip"]
    model, flat = DoubleWell(), DoubleWell(a=0.25, b=1.5)
    assert rt["return_trips_flat"] > 0
    assert np.isclose(rt["barrier"], model.barrier_height("left"))
    assert np.isclose(rt["barrier_flat"], flat.barrier_height("left"))
    assert np.isclose(rt["t_flat"], 50000 / rt["return_trips_flat"])
    assert np.isclose(rt["t_return_trip"], rt["t_flat"] * np.exp(rt["barrier"] - rt["barrier_flat"]))
    assert rt["t_return_trip"] > 50000


def test_runs_write_the_resolved_config(tmp_path, registry):
    config = tiny_config(tmp_path, baseline={"temperatures": [1.0], "return_trip": {"steps": 10}})
    experiments.cmd_baseline(config)
    with open(tmp_path / "out" / "config.json") as f:
        saved = json.load(f)
    assert config_hash(validate_config(saved)) == config_hash(config)
    assert saved["baseline"]["return_trip"]["flat"] == {"a": 0.25, "b": 1.5, "c": None, "d": None}


def test_baseline_needs_a_method(tmp_path):
    with pytest.raises(ConfigError):
        experiments.cmd_baseline(tiny_config(tmp_path, baseline={"temperatures": [1.0]}))


def test_starting_points():
    dimer = experiments.make_system("dimer")
    starts = experiments.starting_points(dimer, MetropolisSettings(dimer_distances=[1.2]))
    assert starts.shape == (1, 76)
    chain = experiments.make_system("toy_chain")
    assert experiments.starting_points(chain, MetropolisSettings()).shape == (1, 15)
    with pytest.raises(ConfigError):
        experiments.starting_points(experiments.make_system("double_well"), MetropolisSettings())
