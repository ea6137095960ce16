import json

import numpy as np
import pytest

from hamdesign import persist
from hamdesign.config import ConfigError, ExperimentConfig
from hamdesign.experiments import (RecoveryReport, build_loss_spec, build_problem, planted_reduced, replay_loss,
                                   run_bench, run_extrapolate, run_recover, run_scan, scan_landscape)
from hamdesign.hilbert import enumerate_basis
from hamdesign.loss import LossObjective, box_penalty
from hamdesign.optimizer import CgdConfig
from hamdesign.references import make_reference_state, write_amplitudes

from conftest import small_planted_dict


def _cfg(**overrides):
    return ExperimentConfig.from_dict(small_planted_dict(**overrides))


@pytest.fixture(scope="module")
def recovered(tmp_path_factory):
    out = tmp_path_factory.mktemp("recover")
    cfg = _cfg()
    return cfg, out, run_recover(cfg, out, timing=False)


def test_small_planted_recovery(recovered):
    cfg, out, rep = recovered
    assert rep.train[6]["overlap"] > 0.9999
    assert rep.off_support_l1 < 1e-2
    assert rep.representable and rep.flags == []
    assert rep.final_loss <= rep.loss_at_planted + 1e-8
    assert 0 <= rep.train[6]["overlap"] <= 1


def test_outputs_written(recovered):
    cfg, out, rep = recovered
    for name in ("config.yaml", "report.json", "trace.csv", "traces/start_0.csv"):
        assert (out / name).exists()
    assert ExperimentConfig.load(out / "config.yaml") == cfg
    assert RecoveryReport.load(out / "report.json") == rep


def test_trace_has_one_row_per_step(recovered):
    cfg, out, rep = recovered
    lines = (out / "trace.csv").read_text().splitlines()
    n_records = len(rep.trace.main.steps) + (len(rep.trace.warmup.steps) if rep.trace.warmup else 0)
    assert len(lines) == n_records + 1
    header = lines[0].split(",")
    assert header[:4] == ["step", "stage", "event", "loss"] and "seconds" not in header
    assert header[-1] == f"gamma_{build_loss_spec(build_problem(cfg)).n_reduced - 1}"


def test_report_total_recomputable_from_trace(recovered):
    cfg, out, rep = recovered
    rows = [r for r in persist.read_csv(out / "trace.csv") if r["stage"] == "main"]
    best = min(rows, key=lambda r: r["loss"])
    assert abs(replay_loss(cfg, best) - rep.final_loss) <= 1e-12
    for row in rows[:: max(1, len(rows) // 5)]:
        assert abs(replay_loss(cfg, row) - row["loss"]) <= 1e-12


def test_report_schema_version_mismatch(recovered, tmp_path):
    _, out, _ = recovered
    doc = json.loads((out / "report.json").read_text())
    doc["schema_version"] = 0
    (tmp_path / "old.json").write_text(json.dumps(doc))
    with pytest.raises(persist.SchemaVersionError, match="migrate"):
        RecoveryReport.load(tmp_path / "old.json")


def test_end_to_end_determinism(recovered, tmp_path):
    cfg, out, rep = recovered
    again = run_recover(cfg, tmp_path, timing=False)
    assert again == rep
    assert (tmp_path / "trace.csv").read_bytes() == (out / "trace.csv").read_bytes()
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_planted_soundness_across_seeds(seed):
    rep = run_recover(_cfg(seed=seed))
    assert rep.final_loss <= rep.loss_at_planted + 1e-8


def test_multistart_records_dispersion():
    rep = run_recover(_cfg(optimizer={"n_starts": 3, "restart_period": 1000, "max_iters": 30}))
    ms = rep.multistart
    assert ms["n_starts"] == 3 and len(ms["final_losses"]) == 3
    assert rep.final_loss == pytest.approx(min(ms["final_losses"]), abs=1e-15)


def test_regularization_dominant_returns_reference_point():
    d = {
        "name": "mg-reg", "model": {"name": "j1_j2", "params": {}, "sector": 0},
        "sizes": {"train": [6]}, "reference": {"source": "named", "name": "majumdar_ghosh_dimer"},
        "loss": {"terms": [{"kind": "energy_variance", "weight": 1.0},
                           {"kind": "regularization_l1", "weight": 10.0, "gamma_ref": [1.0, 0.5]}]},
        "optimizer": {"start": [1.3, 0.2], "max_iters": 200, "warmup_iters": 0},
    }
    rep = run_recover(ExperimentConfig.from_dict(d))
    assert np.allclose(rep.parameters, [1.0, 0.5], atol=1e-3)


def test_file_reference_source(tmp_path):
    b = enumerate_basis(6, 2, 0, "periodic")
    write_amplitudes(tmp_path / "mg6.amp", make_reference_state("majumdar_ghosh_dimer", 6, b))
    d = {
        "name": "mg-file", "model": {"name": "j1_j2", "params": {}, "sector": 0},
        "sizes": {"train": [6]}, "reference": {"source": "file", "files": {6: str(tmp_path / "mg6.amp")}},
        "loss": {"gauge": {"kind": "freeze_one", "index": "J1"}},
    }
    rep = run_recover(ExperimentConfig.from_dict(d))
    assert rep.parameters[1] == pytest.approx(0.5, abs=1e-3)


def test_planted_reference_from_other_family_is_rewrapped():
    d = small_planted_dict(model={"params": {"k": 2, "max_range": 1, "real_only": True, "labels": ["XX", "Z"]}},
                           reference={"source": "planted", "support": ["XX", "Z", "ZZ"],
                                      "model": {"name": "pauli_strings_k_local",
                                                "params": {"k": 2, "max_range": 1, "real_only": True}}})
    problem = build_problem(ExperimentConfig.from_dict(d))
    assert problem.ansatz.labels == ("XX", "Z")
    assert problem.references[6].basis == problem.bases[6]
    assert planted_reduced(problem, build_loss_spec(problem)) is None


def test_extrapolate_representable_and_underspanned():
    base = dict(sizes={"train": [4, 6], "test": [8, 10]})
    good = run_extrapolate(_cfg(**base))
    assert good.mode == "extrapolate" and good.importance == {6: 1000}
    assert all(m["overlap"] >= 0.999 for m in good.test.values())
    d = small_planted_dict(**base)
    d["model"]["params"] = {**d["model"]["params"], "labels": ["XX", "Z"]}
    d["reference"]["model"] = {"name": "pauli_strings_k_local", "params": {"k": 2, "max_range": 1, "real_only": True}}
    d["loss"]["gauge"] = {"kind": "freeze_one", "index": "XX"}
    bad = run_extrapolate(ExperimentConfig.from_dict(d))
    assert not bad.representable
    assert any("lacks planted operators" in f for f in bad.flags)
    for n in (8, 10):
        assert bad.test[n]["overlap"] < good.test[n]["overlap"]


def test_extrapolate_requires_larger_test_sizes():
    with pytest.raises(ConfigError):
        run_extrapolate(_cfg(sizes={"train": [6], "test": [4]}))
    with pytest.raises(ConfigError):
        run_extrapolate(_cfg())


# -- scan --------------------------------------------------------------------


BOX = [(0.0, 2.0), (0.0, 2.0)]


def test_scan_on_grid_quadratic():
    a, b = 0.8, 1.4  # on the 11 x 11 grid over [0, 2]^2
    f = lambda p: float((p[0] - a) ** 2 + (p[1] - b) ** 2)  # noqa: E731
    res = scan_landscape(f, BOX, (11, 11), start=[0.3, 0.2])
    assert res.grid_min["p"] == pytest.approx([a, b], abs=1e-12)
    assert np.linalg.norm(np.array(res.cgd["endpoint"]) - [a, b]) < 1e-6
    assert res.cgd["loss"] <= res.grid_min["loss"] + 1e-9 and len(res.rows) == 121


def test_scan_narrow_valley_steepest_vs_cgd():
    f = lambda p: float((p[0] - 1) ** 2 + 100 * (p[1] - 1) ** 2)  # noqa: E731
    res = scan_landscape(f, BOX, (10, 11), start=[0.0, 1.1], cgd_cfg=CgdConfig(max_iters=10))
    assert res.cgd["n_steps"] <= 10
    d_cgd = np.linalg.norm(np.array(res.cgd["endpoint"]) - 1)
    d_sd = np.linalg.norm(np.array(res.steepest["endpoint"]) - 1)
    assert res.steepest["n_steps"] == 24 and d_sd > d_cgd


def test_scan_start_outside_box_is_pulled_in():
    f = lambda p: float((p[0] - 1) ** 2 + (p[1] - 1) ** 2 + box_penalty(p, BOX))  # noqa: E731
    res = scan_landscape(f, BOX, (5, 5), start=[3.0, 1.0])
    first = res.traces["cgd"].steps[1].gamma
    assert BOX[0][0] <= first[0] <= BOX[0][1] + 1e-3


def test_run_scan_from_config(tmp_path):
    cfg = ExperimentConfig.load("configs/scan_ising.yaml")
    cfg.scan.shape = [3, 4]
    res = run_scan(cfg, tmp_path, timing=False)
    rows = persist.read_csv(tmp_path / "grid.csv")
    assert len(rows) == 12 and list(rows[0])[:3] == ["p1", "p2", "total"]
    for r in rows:
        assert r["total"] == pytest.approx(sum(r[c] for c in build_loss_spec(build_problem(cfg)).columns()),
                                           abs=1e-12)
    assert res.beats_grid
    doc = persist.load_document((tmp_path / "scan.json").read_text(), "scan_summary")
    assert doc["grid_points"] == 12
    assert (tmp_path / "trace_steepest.csv").exists()


def test_scan_rejects_non_2d():
    with pytest.raises(ConfigError):
        run_scan(_cfg())


def test_bench(tmp_path):
    doc = run_bench(_cfg(), tmp_path, repeats=1)
    assert doc["sizes"][6]["dim"] == 64 and doc["loss_eval_seconds"] > 0
    assert persist.load_document((tmp_path / "bench.json").read_text(), "bench")["kind"] == "bench"


def test_objective_from_problem_is_zero_at_planted():
    problem = build_problem(_cfg())
    spec = build_loss_spec(problem)
    assert LossObjective(spec)(planted_reduced(problem, spec)) < 1e-10
