import json
import os

import pytest

from cplab.cli import main
from cplab.experiments import (ConfigError, config_hash, load_config,
                               replay, resolve_config, run)


def write_config(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


CROSSING_CFG = """
experiment = "crossing"
seed = 11
replicas = 40

[geometry]
n = 4

[params]
q = 0.9
"""


def test_resolve_config_defaults_and_errors():
    cfg = resolve_config({"experiment": "crossing", "geometry": {"n": 4},
                          "params": {"q": 0.5}})
    assert cfg["replicas"] == 200
    assert cfg["confidence"] == 0.95
    assert cfg["discretization"]["alpha"] == 0.25
    with pytest.raises(ConfigError):
        resolve_config({"experiment": "bogus"})
    with pytest.raises(ConfigError):
        resolve_config({"experiment": "crossing", "params": {"q": 0.5}})
    with pytest.raises(ConfigError):
        resolve_config({"experiment": "crossing", "geometry": {"n": 4}})
    with pytest.raises(ConfigError):
        # eps_hat has no silent default
        resolve_config({"experiment": "finite_size", "geometry": {"n": 4},
                        "params": {"q": 0.5}})


def test_run_crossing_and_replay(tmp_path):
    cfg = load_config(write_config(tmp_path, CROSSING_CFG))
    out = str(tmp_path / "results")
    path = run(cfg, out)
    record = json.loads(open(path).read())
    assert record["experiment"] == "crossing"
    assert 0.0 <= record["metrics"]["crossing"]["estimate"] <= 1.0
    assert record["config_hash"] == config_hash(cfg)
    verdict = replay(path)
    assert verdict["match"]


def test_replay_detects_tampering(tmp_path):
    cfg = load_config(write_config(tmp_path, CROSSING_CFG))
    path = run(cfg, str(tmp_path / "results"))
    record = json.loads(open(path).read())
    record["metrics"]["crossing"]["estimate"] = 0.123456
    tampered = tmp_path / "tampered.json"
    tampered.write_text(json.dumps(record))
    verdict = replay(str(tampered))
    assert not verdict["match"]
    assert verdict["divergences"]


def test_same_seed_byte_identical_results(tmp_path):
    cfg = load_config(write_config(tmp_path, CROSSING_CFG))
    p1 = run(cfg, str(tmp_path / "r1"))
    p2 = run(cfg, str(tmp_path / "r2"))
    r1 = json.loads(open(p1).read())
    r2 = json.loads(open(p2).read())
    r1.pop("wall_clock_s")
    r2.pop("wall_clock_s")
    assert r1 == r2


def test_worker_count_invariance(tmp_path):
    cfg = load_config(write_config(tmp_path, CROSSING_CFG))
    cfg["replicas"] = 12
    m1, _, _ = __import__("cplab.experiments", fromlist=["x"]) \
        ._DRIVERS["crossing"](cfg, 1)
    m2, _, _ = __import__("cplab.experiments", fromlist=["x"]) \
        ._DRIVERS["crossing"](cfg, 2)
    assert m1 == m2


def test_cli_run_and_exit_codes(tmp_path, capsys):
    cfg_path = write_config(tmp_path, CROSSING_CFG)
    rc = main(["run", cfg_path, "--out", str(tmp_path / "o"),
               "--replicas", "30"])
    assert rc == 0
    out = capsys.readouterr().out.strip()
    assert out.endswith("crossing_result.json")
    assert os.path.exists(out)
    # usage error: missing config file
    rc = main(["run", str(tmp_path / "nope.toml")])
    assert rc == 2
    # usage error: sweep command on a non-sweep config
    rc = main(["sweep", cfg_path])
    assert rc == 2


def test_cli_replay_roundtrip(tmp_path, capsys):
    cfg_path = write_config(tmp_path, CROSSING_CFG)
    assert main(["run", cfg_path, "--out", str(tmp_path / "o")]) == 0
    result = capsys.readouterr().out.strip()
    assert main(["replay", result]) == 0
    record = json.loads(open(result).read())
    record["metrics"]["crossing"]["successes"] += 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(record))
    assert main(["replay", str(bad)]) == 3


def test_sweep_experiment_csv(tmp_path):
    text = """
experiment = "sweep"
seed = 5
replicas = 30

[geometry]
n_list = [2, 4]

[params]
q_grid = [0.5, 0.9]
"""
    cfg = load_config(write_config(tmp_path, text))
    out = str(tmp_path / "results")
    path = run(cfg, out)
    rows = open(os.path.join(out, "sweep.csv")).read().strip().splitlines()
    assert rows[0] == "q,n,estimate,ci_lo,ci_hi,replicas,seed"
    assert len(rows) == 5
    record = json.loads(open(path).read())
    # crossing probability is higher at larger q for both n
    for n in (2, 4):
        lo = record["metrics"][f"n{n}_q0.5"]["estimate"]
        hi = record["metrics"][f"n{n}_q0.9"]["estimate"]
        assert hi >= lo - 0.3


def test_tail_experiment_outputs(tmp_path):
    text = """
experiment = "tail"
seed = 2
replicas = 60

[geometry]
n = 4

[params]
q = 0.9

[tail]
tail_floor = 1
"""
    cfg = load_config(write_config(tmp_path, text))
    out = str(tmp_path / "results")
    path = run(cfg, out, trace=True)
    record = json.loads(open(path).read())
    assert "exponential" in record["metrics"]["fit"]
    assert "power_law" in record["metrics"]["fit"]
    assert os.path.exists(os.path.join(out, "cluster_hist.csv"))
    assert os.path.exists(os.path.join(out, "tail_trace.ndjson"))


def test_sandwich_experiment(tmp_path):
    text = """
experiment = "sandwich"
seed = 3
replicas = 50

[geometry]
n = 9

[params]
q = 0.8
"""
    cfg = load_config(write_config(tmp_path, text))
    path = run(cfg, str(tmp_path / "results"))
    record = json.loads(open(path).read())
    assert record["metrics"]["upper_violations"] == 0
    assert record["metrics"]["lower_bound_rate"] >= 0.9


def test_mixing_experiment(tmp_path):
    text = """
experiment = "mixing"
seed = 4
replicas = 60

[geometry]
n = 9

[params]
q = 0.85
"""
    cfg = load_config(write_config(tmp_path, text))
    path = run(cfg, str(tmp_path / "results"))
    record = json.loads(open(path).read())
    m = record["metrics"]
    assert m["factorization_exact"]
    assert m["positive_association_ok"]


def test_coupling_audit_experiment(tmp_path):
    text = """
experiment = "coupling_audit"
seed = 6
replicas = 10

[geometry]
n_list = [4, 8]

[params]
q = 0.5

[coupling_audit]
q2 = 0.9
pairs = 10
"""
    cfg = load_config(write_config(tmp_path, text))
    out = str(tmp_path / "results")
    path = run(cfg, out)
    record = json.loads(open(path).read())
    per_n = record["metrics"]["per_n"]
    assert set(per_n) == {"4", "8"}
    for stats in per_n.values():
        assert stats["implication_violations"] == 0
    assert os.path.exists(os.path.join(out, "coupling_audit.csv"))


def test_finite_size_experiment_branches(tmp_path):
    base = """
experiment = "finite_size"
seed = 7
replicas = 40

[geometry]
n = 9

[params]
q = %s

[finite_size]
eps_hat = 0.05
"""
    for q, branch in (("0.97", "b"), ("0.3", "a")):
        cfg = load_config(write_config(tmp_path, base % q, name=f"fs{q}.toml"))
        path = run(cfg, str(tmp_path / f"res{q}"))
        record = json.loads(open(path).read())
        assert record["metrics"]["branch"] == branch


def test_atomic_writes_leave_no_partials(tmp_path, monkeypatch):
    from cplab import experiments as ex

    # a crash inside the temp-file write must not leave the target or tmp
    target = tmp_path / "out" / "x.json"

    class Boom(RuntimeError):
        pass

    def bad_fdopen(*a, **k):
        raise Boom()

    monkeypatch.setattr(ex.os, "fdopen", bad_fdopen)
    with pytest.raises(Boom):
        ex._atomic_write(str(target), "data")
    monkeypatch.undo()
    assert not target.exists()
    leftovers = [p for p in (tmp_path / "out").iterdir()]
    assert leftovers == []
    ex._atomic_write(str(target), "data")
    assert target.read_text() == "data"
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["x.json"]


def test_certificate_witness_dump(tmp_path):
    from cplab.spacetime import Box, make_geometry, q_params, sample_diagram
    from cplab.discretization import certified_occupancy, discretize

    g = make_geometry(9)
    foot = Box(-3, -3, 3, 3)
    for seed in range(50):
        d = sample_diagram(g, q_params(0.9), seed, box=foot, depth=3.0)
        cert = certified_occupancy(discretize(d, 0.5), (0, 0), 9)
        if cert.verdict:
            p = tmp_path / "witness.json"
            cert.dump(p)
            payload = json.loads(p.read_text())
            assert payload["verdict"] == 1
            assert payload["witness"]
            break
    else:
        raise AssertionError("no certificate found at q=0.9")


def test_invariant_violation_writes_forensics(tmp_path, monkeypatch):
    from cplab import cli as climod
    from cplab import experiments as ex
    from cplab.spacetime import InvariantViolation

    def bomb(cfg, threads):
        raise InvariantViolation("synthetic violation for the exit path")

    monkeypatch.setitem(ex._DRIVERS, "crossing", bomb)
    cfg_path = write_config(tmp_path, CROSSING_CFG)
    rc = climod.main(["run", cfg_path, "--out", str(tmp_path / "o")])
    assert rc == 3
    forensics = json.loads((tmp_path / "o" / "forensics.json").read_text())
    assert forensics["error_type"] == "InvariantViolation"
    assert forensics["config"]["experiment"] == "crossing"
