"""Build genuine run directories once per session with the verifier CLI.

The configs are deliberately tiny (11^3 nodes, short horizons) so the whole
fixture costs seconds; figures only need geometry, not resolution.  JSON is
valid YAML, so configs are written with json.dump and no yaml dependency.
"""

import copy
import json
import subprocess
import sys

import pytest

BASE = {
    "grid": {"lo": [-11.0, 100.0, -0.49], "hi": [11.0, 250.0, 0.49],
             "shape": [31, 11, 11], "periodic": [False, False, False]},
    "model": {
        "dynamics": {"name": "dubins3d", "v": 5.0},
        "controller": {"kind": "tan_proportional", "a": -0.013, "b": -0.44},
        "error": {"mode": "static", "bound": [0.0, 0.0, 0.0]},
    },
    "failure": {"kind": "slab", "dim": 0, "magnitude": 10.0},
    "solve": {"horizon": 2.0},
    "start": [0.0, 150.0, 0.0],
}

# static error boxes, narrow to wide; the jumps are several cells so the
# tubes nest with room to spare
LADDER = ([0.0, 0.0, 0.0], [4.0, 0.0, 0.2], [10.0, 0.0, 0.49])


def rvc(*argv, cwd):
    proc = subprocess.run([sys.executable, "-m", "rvc", *argv],
                          capture_output=True, text=True, cwd=cwd)
    assert proc.returncode == 0, \
        f"rvc {' '.join(argv)} failed:\n{proc.stdout}\n{proc.stderr}"
    return proc


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")

    rung_cfgs = []
    for k, bound in enumerate(LADDER):
        cfg = copy.deepcopy(BASE)
        cfg["model"]["error"]["bound"] = list(bound)
        path = root / f"rung{k}.yaml"
        path.write_text(json.dumps(cfg))
        rung_cfgs.append(path)
        rvc("solve", "--config", str(path), "--out", str(root / f"rung{k}"),
            cwd=root)

    rvc("rollout", "--config", str(rung_cfgs[2]),
        "--field", str(root / "rung2"), "--out", str(root / "attack"),
        cwd=root)
    rvc("rollout", "--config", str(rung_cfgs[0]), "--nominal",
        "--field", str(root / "rung0"), "--out", str(root / "nominal"),
        cwd=root)

    dark = copy.deepcopy(BASE)
    dark["model"]["error"] = {"mode": "linear_growth",
                              "rates": [0.3, 0.0, 0.02]}
    dark["solve"] = {"horizon": 1.0, "dark_time_samples": 6}
    dark_path = root / "dark.yaml"
    dark_path.write_text(json.dumps(dark))
    rvc("budget", "--config", str(dark_path), "--out", str(root / "budget"),
        cwd=root)
    rvc("policy-check", "--config", str(dark_path),
        "--budget", str(root / "budget"), "--dt", "0.05", "--margin", "0.3",
        "--out", str(root / "policy"), cwd=root)

    rvc("sweep", "--config", str(rung_cfgs[0]),
        "--a-gains=-0.02:-0.01:2", "--b-gains=-0.5:-0.4:2",
        "--out", str(root / "sweep"), cwd=root)
    return root
