"""Readers and the figure spec: happy paths against hand-built artifacts,
diagnostics on malformed ones."""

import json

import numpy as np
import pytest

import fmtbytes
from rvcplots import runio


class TestPlotSpec:
    def test_missing_input_is_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no such input"):
            runio.PlotSpec(inputs=(str(tmp_path / "absent"),), out="x.png")
        with pytest.raises(ValueError, match="no inputs"):
            runio.PlotSpec(inputs=(), out="x.png")

    def test_format_overrides_suffix(self, tmp_path):
        p = tmp_path / "in.csv"
        p.write_text("a,b,value\n")
        spec = runio.PlotSpec(inputs=(str(p),), out="fig.png", fmt="pdf")
        assert spec.out_path == "fig.pdf"
        assert runio.PlotSpec(inputs=(str(p),), out="fig.png").out_path \
            == "fig.png"


class TestResolve:
    def test_directory_picks_default_artifact(self, tmp_path):
        (tmp_path / "value.rvvf").write_bytes(b"1234")
        assert runio.resolve(tmp_path, "value.rvvf") \
            == str(tmp_path / "value.rvvf")
        with pytest.raises(ValueError, match="no such artifact"):
            runio.resolve(tmp_path, "sweep.csv")

    def test_labels(self, tmp_path):
        d = tmp_path / "rung3"
        d.mkdir()
        assert runio.label_for(d) == "rung3"
        assert runio.label_for(tmp_path / "worst.csv") == "worst"


class TestBinaryReaders:
    def test_field_roundtrip(self, tmp_path):
        vals = np.linspace(-1, 1, 15).reshape(3, 5)
        path = tmp_path / "f.rvcf"
        fmtbytes.write_rvcf(path, [0, -1], [1, 1], (3, 5), [0, 1], vals)
        grid, got = runio.read_field(path)
        assert grid.shape == (3, 5) and grid.periodic == (False, True)
        assert np.array_equal(got, vals)
        # periodic axis excludes the seam
        assert grid.spacing[1] == pytest.approx(2.0 / 5)
        assert grid.axis(0)[-1] == pytest.approx(1.0)

    def test_value_stack_roundtrip(self, tmp_path):
        x = np.linspace(0, 1, 5)
        slices = [x - 0.2, x - 0.1]
        path = tmp_path / "v.rvvf"
        fmtbytes.write_rvvf(path, [0.0], [1.0], (5,), [0],
                            times=[0.5, 0.0], slices=slices, failure=x)
        stack = runio.read_value_stack(path)
        assert np.array_equal(stack.times, [0.5, 0.0])
        assert np.array_equal(stack.slices[1], x - 0.1)
        t, s = stack.slice_nearest(None)
        assert t == 0.0 and np.array_equal(s, x - 0.1)
        t, s = stack.slice_nearest(0.4)
        assert t == 0.5 and np.array_equal(s, x - 0.2)

    def test_bad_magic_is_rejected(self, tmp_path):
        path = tmp_path / "junk.rvcf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            runio.read_field(path)
        with pytest.raises(ValueError, match="bad magic"):
            runio.read_value_stack(path)

    def test_truncated_file_is_rejected(self, tmp_path):
        vals = np.zeros((3, 3))
        blob = fmtbytes.pack_field([0, 0], [1, 1], (3, 3), [0, 0], vals)
        path = tmp_path / "cut.rvcf"
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            runio.read_field(path)


class TestProvenance:
    def test_prefers_the_run_manifest(self, tmp_path):
        art = tmp_path / "sweep.csv"
        art.write_text("a,b,value\n")
        bare = runio.provenance(str(art))
        assert bare.startswith("file ")
        (tmp_path / "manifest.json").write_text(json.dumps({"command": "x"}))
        with_manifest = runio.provenance(str(art))
        assert with_manifest.startswith("manifest ")
        assert with_manifest != bare


class TestTrajectoryParser:
    def test_parses_blocks_and_empty_final_row(self, tmp_path):
        path = tmp_path / "trajectory.csv"
        path.write_text(
            "t,x0,x1,xhat0,xhat1,u0,e0,e1,l,lights\n"
            "0.0,1.0,2.0,1.1,2.2,0.3,0.1,0.2,5.0,0\n"
            "0.5,1.5,2.5,1.6,2.4,0.4,0.1,-0.1,4.0,1\n"
            "1.0,2.0,3.0,,,,,,3.0,\n")
        tr = runio.read_trajectory_csv(path)
        assert tr.n_steps == 2
        assert tr.states.shape == (3, 2)
        assert tr.perceived.shape == (2, 2)
        assert np.array_equal(tr.lights, [0, 1])
        assert tr.l[-1] == 3.0

    def test_header_diagnostic_names_columns(self, tmp_path):
        path = tmp_path / "trajectory.csv"
        path.write_text("time,pos,l\n0,1,2\n")
        with pytest.raises(ValueError, match="do not parse as a trajectory"):
            runio.read_trajectory_csv(path)


class TestSweepParser:
    def test_nan_cells_survive(self, tmp_path):
        path = tmp_path / "sweep.csv"
        path.write_text("a,b,value\n-0.2,-0.5,1.0\n-0.2,-0.4,nan\n"
                        "-0.1,-0.5,2.0\n-0.1,-0.4,3.0\n")
        a, b, grid = runio.read_sweep_csv(path)
        assert np.array_equal(a, [-0.2, -0.1])
        assert np.isnan(grid[0, 1]) and grid[1, 1] == 3.0
