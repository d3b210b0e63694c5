"""Shared trajectories and recovery fixtures (built once per session)."""

import json
import time

import numpy as np
import pytest

from opmicro import chsim, cli
from opmicro.fieldstore import save_stack
from opmicro.recover import select_snapshots

# 64x64 desk-scale trajectory: 501 frames, 3 steps apart (T = 0.15)
FIXTURE_GRID = 64
FIXTURE_STRIDE = 3
FIXTURE_SEED = 0
FIXTURE_RECOVER = {
    "degree": 7,
    "n_snapshots": 5,
    "max_iter": 60,
    "ftol": 1e-4,
}


def fixture_params(n=FIXTURE_GRID, stride=FIXTURE_STRIDE):
    return chsim.ChParams(grid=(n, n), frame_stride=stride)


def write_toml(path, section, values):
    lines = [f"[{section}]"]
    for k, v in values.items():
        lines.append(f"{k} = {json.dumps(v)}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="session")
def ch_fixture():
    p = fixture_params()
    c0 = chsim.initial_condition(p, FIXTURE_SEED)
    return p, chsim.simulate(p, chsim.ground_truth_law(), c0, FIXTURE_SEED)


@pytest.fixture(scope="session")
def fixture_indices():
    return select_snapshots(501, 5)


@pytest.fixture(scope="session")
def clean_recovery(ch_fixture, tmp_path_factory):
    """End-to-end CLI recovery on the clean 64x64 fixture; returns the result payload."""
    d = tmp_path_factory.mktemp("clean_fit")
    _, st = ch_fixture
    data = save_stack(st, d / "clean.npy", "float64")
    cfg = write_toml(d / "rec.toml", "recover", FIXTURE_RECOVER)
    t0 = time.perf_counter()
    rc = cli.main(["recover", "--data", str(data), "--config", str(cfg), "--out", str(d / "result.json")])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    payload = json.loads((d / "result.json").read_text())["payload"]
    payload["elapsed_s"] = elapsed
    return payload


@pytest.fixture(scope="session")
def mini_fixture():
    """32x32 trajectory for fast recovery and Jacobian checks."""
    p = fixture_params(32)
    c0 = chsim.initial_condition(p, 1)
    return p, chsim.simulate(p, chsim.ground_truth_law(), c0, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CLI_MINI_SIM = {"grid": [32, 32], "n_frames": 31, "frame_stride": 10, "precision": "float64"}
CLI_MINI_RECOVER = {"degree": 3, "n_snapshots": 3, "max_iter": 200, "ftol": 1e-4}


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="session")
def cli_mini(tmp_path_factory):
    """A 32x32, 31-frame trajectory written by the CLI, plus the recover config for it."""
    d = tmp_path_factory.mktemp("cli_mini")
    sim_cfg = write_toml(d / "sim.toml", "simulate", CLI_MINI_SIM)
    rec_cfg = write_toml(d / "rec.toml", "recover", CLI_MINI_RECOVER)
    assert run_cli("simulate", "--config", sim_cfg, "--out", d / "sim", "--seed", 3) == 0
    return {"dir": d, "stack": d / "sim" / "stack_000.npy", "sim_cfg": sim_cfg, "rec_cfg": rec_cfg}


# --- acceptance summary -------------------------------------------------------

ACCEPTANCE = {}


class AcceptanceLog:
    """Collects pass/fail per acceptance criterion (a criterion may have several checks)."""

    def check(self, criterion, ok, detail):
        ACCEPTANCE.setdefault(int(criterion), []).append((bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(f"{'ok' if ok else 'MISS'} {d}" for ok, d in checks)
        terminalreporter.write_line(f"criterion {n:2d}: {status} | {details}")
