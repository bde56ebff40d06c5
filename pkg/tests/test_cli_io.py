import numpy as np
import pytest

from msto import cli_io, field_net as fn
from msto.cli import EXIT_CONFIG, EXIT_IO, main
from msto.driver import CellEvaluation, ConvergenceLog
from msto.objectives import LossBreakdown

TINY = """
mode = "inverse_homog_field"
epochs = 4
checkpoint_every = 2

[grid]
n_cells_x = 2
n_cells_y = 2
micro_res = 8

[network]
n_kernels = 300

[export]
upsample = 2
"""


def test_pgm_header_and_checkerboard(tmp_path):
    path = tmp_path / "c.pgm"
    cli_io.export_density_image(np.array([[0.0, 1.0], [1.0, 0.0]]), (2, 2), path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[len(b"P5\n2 2\n255\n"):]) == [255, 0, 0, 255]
    np.testing.assert_array_equal(cli_io.read_pgm(path), [[255, 0], [0, 255]])


def test_half_density_rounds_to_127():
    assert set(cli_io.density_pixels(np.full((3, 5), 0.5)).ravel()) == {127}


def test_image_shape_not_resampled(tmp_path):
    path = tmp_path / "r.pgm"
    cli_io.export_density_image(np.linspace(0, 1, 35), (5, 7), path)
    assert cli_io.read_pgm(path).shape == (5, 7)


def test_densities_out_of_range_rejected(tmp_path):
    with pytest.raises(ValueError):
        cli_io.export_density_image(np.array([1.2]), (1, 1), tmp_path / "x.pgm")


def _evaluation():
    rng = np.random.default_rng(0)
    out = []
    for i in range(2):
        for j in range(3):
            t = rng.normal(size=(3, 3))
            t = t @ t.T
            bulk, hs = rng.uniform(0.05, 0.1), rng.uniform(0.1, 0.2)
            out.append(CellEvaluation((i, j), np.ones((2, 2)), 0.5, rng.uniform(), t, bulk, hs, bulk / hs))
    return out


def test_csv_round_trip(tmp_path):
    log = ConvergenceLog()
    for e in range(1, 4):
        log.append(e, LossBreakdown(-0.1 * e, 0.01 / 3, 0.0, 0.0, -0.1 * e + 0.01 / 3), e * 1.5, 0.0, [], 0.2)
    ev = _evaluation()
    paths = cli_io.export_reports(log, ev, tmp_path)
    conv = cli_io.read_csv(paths["convergence"])
    assert [r["total"] for r in conv] == [r["total"] for r in log.records]
    assert conv[1] == log.records[1]
    cells = cli_io.read_csv(paths["cells"])
    assert len(cells) == 6
    for row, e in zip(cells, ev):
        assert (row["i"], row["j"]) == e.index
        assert row["E23"] == e.tensor[1, 2]
        assert row["ratio"] == pytest.approx(row["bulk"] / row["hs_bound"], abs=1e-12)
    assert "seconds" in paths["timing"].read_text()


def test_checkpoint_round_trip(tmp_path):
    p = fn.init_params(n_kernels=7, seed=5)
    m = fn.init_params(n_kernels=3, input_dim=2, seed=6)
    cli_io.save_checkpoint(tmp_path / "c.npz", p, 12, {"mode": "x"}, m)
    ck = cli_io.load_checkpoint(tmp_path / "c.npz")
    assert ck.epoch == 12 and ck.seed == 5 and ck.config == {"mode": "x"}
    np.testing.assert_array_equal(ck.params.K, p.K)
    np.testing.assert_array_equal(ck.macro_params.W, m.W)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    out = root / "out"
    assert main(["optimize", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_optimize_writes_bundle(tiny_run):
    for name in ("checkpoint.npz", "convergence.csv", "timing.csv", "cells.csv", "run.json",
                 "density_x1.pgm", "density_x2.pgm", "density.png", "convergence.png", "hs_ratio.png"):
        assert (tiny_run / name).exists(), name
    assert cli_io.read_pgm(tiny_run / "density_x1.pgm").shape == (16, 16)
    assert cli_io.read_pgm(tiny_run / "density_x2.pgm").shape == (32, 32)
    assert sorted(p.name for p in (tiny_run / "checkpoints").iterdir()) == ["epoch_0002.npz", "epoch_0004.npz"]
    assert len(cli_io.read_csv(tiny_run / "convergence.csv")) == 4


def test_evaluate_and_render_reproduce_exports(tiny_run, tmp_path):
    ck = str(tiny_run / "checkpoint.npz")
    assert main(["evaluate", "--checkpoint", ck, "--threshold", "0.4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "eval_cells.csv").read_bytes() == (tiny_run / "cells.csv").read_bytes()
    assert main(["render", "--checkpoint", ck, "--factor", "2", "--out", str(tmp_path / "r.pgm")]) == 0
    assert (tmp_path / "r.pgm").read_bytes() == (tiny_run / "density_x2.pgm").read_bytes()
    assert main(["render", "--checkpoint", ck, "--factor", "2", "--out", str(tmp_path / "r2.pgm")]) == 0
    assert (tmp_path / "r2.pgm").read_bytes() == (tmp_path / "r.pgm").read_bytes()


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(TINY + "\nbogus = 1\n")
    assert main(["optimize", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["optimize", "--config", str(tmp_path / "missing.toml")]) == EXIT_CONFIG
    assert main(["render", "--checkpoint", str(tmp_path / "missing.npz")]) == EXIT_IO
