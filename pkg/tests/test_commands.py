import json

import numpy as np
import pytest

from parareal_lab.commands.outputs import MANIFEST_NAME, config_hash, file_sha256, write_log10_grid
from parareal_lab.main import COMMANDS, main
from parareal_lab.models.database import get_session
from parareal_lab.models.run_record import RunRecord

SIM = """
[system]
omega = 50.0

[simulate]
dt = 0.25
steps = 3
solver = { scheme = "css4", h = "2^-8" }
reference = { scheme = "kl8", h = "2^-9", precision = "dd" }
compare_reference = true
compare_precision = true
"""

PARAREAL = """
workers = 1

[system]
omega = 50.0

[parareal]
N = 4
K = 2
dt = 0.125
mode = "procrustes"
coarse = { scheme = "vv", h = "2^-6" }
fine = { scheme = "css4", h = "2^-9" }
reference = { scheme = "kl8", h = "2^-9", precision = "dd" }
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(tmp_path, text, command, out="out", extra=()):
    cfg = write(tmp_path, f"{command}.toml", text)
    out_dir = tmp_path / out
    code = main([command, cfg, "--out", str(out_dir), "--no-registry", *extra])
    return code, out_dir


def manifest(out_dir):
    return json.loads((out_dir / MANIFEST_NAME).read_text())


def test_sim_writes_every_file_into_the_manifest(tmp_path):
    code, out = run(tmp_path, SIM, "sim")
    assert code == 0
    listed = {f["name"]: f for f in manifest(out)["files"]}
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()} - {MANIFEST_NAME}
    assert set(listed) == on_disk
    assert {"trajectory.csv", "energy_error.csv", "stiff_energies.csv", "reference_error.csv",
            "precision_comparison.csv"} <= on_disk
    for name, entry in listed.items():
        assert entry["sha256"] == file_sha256(out / name)
        assert entry["size"] == (out / name).stat().st_size


def test_sim_with_no_steps_writes_only_the_initial_state(tmp_path):
    code, out = run(tmp_path, SIM.replace("steps = 3", "steps = 0"), "sim")
    assert code == 0
    rows = (out / "trajectory.csv").read_text().strip().splitlines()
    assert len(rows) == 2
    assert rows[1].startswith("0,0,")


def test_sim_is_reproducible(tmp_path):
    _, first = run(tmp_path, SIM, "sim", out="a")
    _, second = run(tmp_path, SIM, "sim", out="b")
    a, b = manifest(first), manifest(second)
    assert a["files"] == b["files"]
    assert a["config_hash"] == b["config_hash"] == config_hash(a["config"])


def test_stiff_energy_column_at_start(tmp_path):
    _, out = run(tmp_path, SIM, "sim")
    header, first = (out / "stiff_energies.csv").read_text().splitlines()[:2]
    assert header == "n,t,I1,I2,I3,I_total"
    assert float(first.split(",")[2]) == pytest.approx(1.0, rel=1e-14)


def test_parareal_outputs(tmp_path):
    code, out = run(tmp_path, PARAREAL, "parareal")
    assert code == 0
    names = {f["name"] for f in manifest(out)["files"]}
    assert {"tableau_traj_err.csv", "tableau_energy_err.csv", "iteration_stats.csv", "trajectory_k2.csv",
            "correctors/omega_k1.csv", "correctors/omega_k2.csv"} <= names
    assert {f"stiff_energies_k{k}.csv" for k in range(3)} <= names
    lines = [l for l in (out / "tableau_traj_err.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "k,0,1,2,3,4"
    grid = np.array([[float(x) for x in l.split(",")[1:]] for l in lines[1:]])
    assert grid.shape == (3, 5)
    assert np.all(grid[:, 0] == -16.0)
    #default trust horizon is N // 2
    assert np.all(np.isnan(grid[:, 3:]))
    omega = np.loadtxt(out / "correctors" / "omega_k1.csv", delimiter=",")
    np.testing.assert_allclose(omega.T @ omega, np.eye(13), atol=1e-12)


def test_seed_override_changes_snapshot(tmp_path):
    _, out = run(tmp_path, SIM, "sim", extra=("--seed", "42"))
    snapshot = manifest(out)["config"]
    assert snapshot["seed"] == 42
    assert snapshot["sampler"]["seed"] == 42 and snapshot["train"]["seed"] == 42


def test_config_error_exit_code(tmp_path):
    code, _ = run(tmp_path, "[parareal]\nN = -1\n", "parareal")
    assert code == 2
    assert main(["sim", str(tmp_path / "missing.toml"), "--no-registry"]) == 2


def test_procrustes_without_transform_is_a_config_error(tmp_path):
    text = PARAREAL.replace("omega = 50.0", 'system = "free"\nd = 1').replace(
        "[parareal]", '[parareal]\ninitial = { kind = "explicit", u = [1.0, 0.0] }\ncompare_reference = false')
    code, _ = run(tmp_path, text, "parareal")
    assert code == 2


def test_numerical_failure_exit_code(tmp_path):
    text = """
[system]
system = "harmonic"
stiffness = 1e300

[simulate]
dt = 1.0
steps = 3
solver = { scheme = "vv", h = "0.5" }
initial = { kind = "explicit", u = [0.0, 1.0] }
"""
    code, _ = run(tmp_path, text, "sim")
    assert code == 3


def test_runs_are_recorded_in_the_registry(tmp_path, monkeypatch):
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    monkeypatch.setenv("RUNS_DATABASE_URL", url)
    cfg = write(tmp_path, "sim.toml", SIM)
    assert main(["sim", cfg, "--out", str(tmp_path / "out")]) == 0
    db = get_session(url)
    try:
        records = db.query(RunRecord).all()
        assert len(records) == 1
        record = records[0].to_dict()
        assert record["command"] == "sim"
        assert {f["name"] for f in record["files"]} == {f["name"] for f in manifest(tmp_path / "out")["files"]}
    finally:
        db.close()


def test_log10_grid_file_documents_sentinel(tmp_path):
    path = write_log10_grid(tmp_path / "grid.csv", np.array([[-16.0, np.nan], [-3.5, -2.0]]), "error")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# log10 error")
    assert "-16 marks exact zeros" in lines[1]
    assert lines[2] == "k,0,1"
    assert lines[3] == "0,-16,nan"


def test_corrector_files_are_numbered_by_the_row_they_build(tmp_path):
    code, out = run(tmp_path, PARAREAL, "parareal")
    assert code == 0
    names = {f["name"] for f in manifest(out)["files"]}
    assert "correctors/omega_k0.csv" not in names and "correctors/omega_k3.csv" not in names
    header = [l for l in (out / "correctors" / "omega_k2.csv").read_text().splitlines() if l.startswith("#")]
    assert header == ["# orthogonal corrector of iteration 2", "# fitted on tableau row 1, applied to build row 2"]
    stats = [l.split(",") for l in (out / "iteration_stats.csv").read_text().splitlines() if not l.startswith("#")]
    assert stats[0][0] == "iteration"
    assert [float(row[0]) for row in stats[1:]] == [1.0, 2.0]


def test_unexpected_failure_maps_to_numerical_exit_code(tmp_path, monkeypatch):
    def boom(config, output_dir, registry=True):
        raise RuntimeError("unexpected")

    monkeypatch.setitem(COMMANDS, "sim", boom)
    code, _ = run(tmp_path, SIM, "sim")
    assert code == 3


TRAIN = """
seed = 5

[system]
omega = 50.0

[sampler]
n_chains = 3
n_trans = 2
S = 2
target_dt = 0.1
target_solver = { scheme = "css4", h = "2^-8" }

[train]
arch = "custom"
L = 2
n = 8
S = 2
epochs = 3
batch_size = 4
"""


def test_datasets_and_checkpoints_do_not_depend_on_worker_count(tmp_path):
    outputs = {}
    for workers in ("1", "3"):
        code, sampled = run(tmp_path, TRAIN, "sample", out=f"sample{workers}", extra=("--workers", workers))
        assert code == 0
        code, trained = run(tmp_path, TRAIN, "train", out=f"train{workers}", extra=("--workers", workers))
        assert code == 0
        #the header line carries the config snapshot, worker count included
        rows = [l for l in (sampled / "dataset.csv").read_text().splitlines() if not l.startswith("#")]
        outputs[workers] = (rows, (trained / "model.ckpt").read_bytes())
    assert outputs["1"][0] == outputs["3"][0]
    assert outputs["1"][1] == outputs["3"][1]
