"""End-to-end behaviour of the flashsim command line."""

import json
import subprocess

import numpy as np
import pytest

from flashsim.cli import main, parse_config, read_density_csv, read_flash_log

GRW_RUN = """
schema = 1

[model]
builder = "grw"
n_particles = 1
lattice_shape = [4]
profile = "delta"
strength = 0.8
hopping = 1.0

[initial_state]
kind = "site"
sites = [1]

[run]
t_max = 3.0
seed = 5
n_traj = 20
snapshot_times = [1.5, 3.0]
"""


def write_cfg(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_parse_rejects_bad_toml(tmp_path, capsys):
    path = write_cfg(tmp_path, "schema = [unclosed")
    assert main(["describe", path]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_parse_rejects_unknown_keys(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN + "\n[extra]\nx = 1\n")
    assert main(["describe", path]) == 2
    path = write_cfg(tmp_path, GRW_RUN.replace("seed = 5", "seed = 5\nseeed = 7"))
    assert main(["run", path, "-o", str(tmp_path / "out")]) == 2


def test_parse_requires_matching_schema(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN.replace("schema = 1", "schema = 99"))
    assert main(["describe", path]) == 2
    path = write_cfg(tmp_path, GRW_RUN.replace("schema = 1\n", ""))
    assert main(["describe", path]) == 2


def test_run_outputs_roundtrip(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN)
    out = tmp_path / "out"
    assert main(["run", path, "-o", str(out)]) == 0

    flashes = read_flash_log(out / "flashes.jsonl")
    assert flashes
    by_traj = {}
    for rec in flashes:
        assert set(rec) == {"trajectory_id", "k", "t", "site", "x", "label"}
        assert 0 <= rec["trajectory_id"] < 20
        assert 0 <= rec["site"] < 4
        assert rec["label"] == "p0"
        assert rec["x"] == [float(rec["site"])]
        assert 0.0 < rec["t"] < 3.0
        by_traj.setdefault(rec["trajectory_id"], []).append(rec)
    for recs in by_traj.values():
        ts = [r["t"] for r in recs]
        assert ts == sorted(ts)
        assert [r["k"] for r in recs] == list(range(len(recs)))

    header, values = read_density_csv(out / "density.csv")
    assert header == ["site", "x0", "t=1.5", "t=3"]
    assert values.shape == (4, 4)
    assert np.all(values[:, 2:] >= 0)
    # a rate operator proportional to the identity fixes the total density
    for col in (2, 3):
        assert values[:, col].sum() == pytest.approx(0.8, abs=1e-9)

    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_trajectories"] == 20
    assert summary["seed"] == 5
    assert summary["t_max"] == 3.0
    assert summary["total_flashes"] == len(flashes)
    assert summary["flashes_per_label"] == {"p0": len(flashes)}
    assert 0.0 <= summary["survival_fraction"] <= 1.0
    assert summary["backend"] in ("pure", "compiled")


def test_rerun_is_byte_identical(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", path, "-o", str(a)]) == 0
    assert main(["run", path, "-o", str(b)]) == 0
    for name in ("flashes.jsonl", "density.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    sa = json.loads((a / "summary.json").read_text())
    sb = json.loads((b / "summary.json").read_text())
    sa.pop("wall_time_s"), sb.pop("wall_time_s")
    assert sa == sb


def test_thread_count_does_not_change_bytes(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", path, "-o", str(a), "--threads", "1"]) == 0
    assert main(["run", path, "-o", str(b), "--threads", "4"]) == 0
    for name in ("flashes.jsonl", "density.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_override_changes_output(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", path, "-o", str(a)]) == 0
    assert main(["run", path, "-o", str(b), "--seed", "123"]) == 0
    assert (a / "flashes.jsonl").read_bytes() != (b / "flashes.jsonl").read_bytes()
    assert json.loads((b / "summary.json").read_text())["seed"] == 123


def test_vacuum_run_writes_empty_log(tmp_path):
    cfg = """
schema = 1

[model]
builder = "fock"
lattice_shape = [3]
profile = "delta"
strength = 1.0
parity = "boson"
n_max = 0

[run]
t_max = 2.0
n_traj = 5
"""
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["run", path, "-o", str(out)]) == 0
    assert (out / "flashes.jsonl").read_bytes() == b""
    summary = json.loads((out / "summary.json").read_text())
    assert summary["total_flashes"] == 0
    assert summary["survival_fraction"] == 1.0


VERIFY_BASE = """
schema = 1

[model]
builder = "grw"
n_particles = 1
lattice_shape = [4]
profile = "gaussian"
strength = 0.6
width = 1.3
hopping = 0.8

[run]
t_max = 4.0
"""


def test_verify_pass_exit_zero_and_report(tmp_path, capsys):
    cfg = VERIFY_BASE + """
[verify]
checks = ["normalization", "consistency", "constants"]
n_steps = 256
"""
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["verify", path, "-o", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert "all checks matched expectations" in text
    assert text.count("pass=true") == 3
    assert capsys.readouterr().out.count("pass=true") == 3


def test_verify_failing_check_exits_one(tmp_path, capsys):
    cfg = VERIFY_BASE + """
[verify]
checks = ["constants"]
strength_si = 1.0
"""
    path = write_cfg(tmp_path, cfg)
    assert main(["verify", path]) == 1
    assert "pass=false" in capsys.readouterr().out


def test_verify_expected_fail_that_fails_exits_zero(tmp_path, capsys):
    cfg = VERIFY_BASE + """
[verify]
checks = ["constants"]
strength_si = 1.0
expected_fail = ["constants"]
"""
    path = write_cfg(tmp_path, cfg)
    assert main(["verify", path]) == 0
    assert "expected_fail=true" in capsys.readouterr().out


def test_verify_expected_fail_that_passes_exits_one(tmp_path):
    cfg = VERIFY_BASE + """
[verify]
checks = ["constants"]
expected_fail = ["constants"]
"""
    path = write_cfg(tmp_path, cfg)
    assert main(["verify", path]) == 1


def test_verify_rejects_unknown_check(tmp_path):
    cfg = VERIFY_BASE + """
[verify]
checks = ["normalisation"]
"""
    path = write_cfg(tmp_path, cfg)
    assert main(["verify", path]) == 2


def test_describe_prints_model_facts(tmp_path, capsys):
    cfg = """
schema = 1

[model]
builder = "fock"
lattice_shape = [3]
profile = "gaussian"
strength = 0.5
width = 1.0
parity = "boson"
n_max = 2
hopping = 0.9
"""
    path = write_cfg(tmp_path, cfg)
    assert main(["describe", path]) == 0
    out = capsys.readouterr().out
    assert "builder: fock" in out
    assert "dimension: 10" in out
    assert "graded dimensions: n=0:1, n=1:3, n=2:6" in out
    assert "backend:" in out


def test_initial_state_site_maps_to_row_major_index(tmp_path, capsys):
    cfg = """
schema = 1

[model]
builder = "grw"
n_particles = 2
lattice_shape = [3]
profile = "delta"
strength = 0.5

[initial_state]
kind = "site"
sites = [2, 1]
"""
    path = write_cfg(tmp_path, cfg)
    parsed = parse_config(path)
    from flashsim.cli import build_initial_state, build_model

    model = build_model(parsed)
    psi = build_initial_state(parse_config(path), model)
    assert psi[2 * 3 + 1] == 1.0
    assert np.count_nonzero(psi) == 1


def test_initial_state_errors_exit_two(tmp_path):
    bad_index = GRW_RUN.replace('kind = "site"\nsites = [1]', 'kind = "index"\nindex = 9')
    path = write_cfg(tmp_path, bad_index)
    assert main(["run", path, "-o", str(tmp_path / "o1")]) == 2
    bad_occ = GRW_RUN.replace(
        'kind = "site"\nsites = [1]', 'kind = "occupation"\noccupation = [1, 0, 0, 0]'
    )
    path = write_cfg(tmp_path, bad_occ)
    assert main(["run", path, "-o", str(tmp_path / "o2")]) == 2
    bad_norm = GRW_RUN.replace(
        'kind = "site"\nsites = [1]',
        'kind = "amplitudes"\namplitudes = [[0.5, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]',
    )
    path = write_cfg(tmp_path, bad_norm)
    assert main(["run", path, "-o", str(tmp_path / "o3")]) == 2


def test_amplitude_initial_state_accepted(tmp_path):
    s = 1.0 / np.sqrt(2.0)
    cfg = GRW_RUN.replace(
        'kind = "site"\nsites = [1]',
        f'kind = "amplitudes"\namplitudes = [[{s}, 0.0], [0.0, {s}], [0.0, 0.0], [0.0, 0.0]]',
    )
    path = write_cfg(tmp_path, cfg)
    out = tmp_path / "out"
    assert main(["run", path, "-o", str(out)]) == 0


def test_console_script_entry_point(tmp_path):
    path = write_cfg(tmp_path, GRW_RUN)
    proc = subprocess.run(["flashsim", "describe", path], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "builder: grw" in proc.stdout
