import csv

import pytest
import torch

from odmrsim.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main
from odmrsim.config import load_config
from odmrsim.core.fitting import SpectrumFitter, selectivity
from odmrsim.core.hamiltonian import Branch, DefectParams
from odmrsim.core.spectrum import Spectrum
from odmrsim.data_handling.data_handler import read_spectrum_csv

SMALL_PHASE_GRID = """
[field]
b0 = 2.3

[sweep]
f_start = 3290
f_stop = 3690
n_freq = 41
delta_list = 0:360:60
"""


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def write_config(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestSpectrumCommand:
    def test_default_grid(self, tmp_path):
        out = tmp_path / "out"
        assert main(["spectrum", "--b0", "2.3", "--delta", "120", "--out", str(out)]) == EXIT_OK
        rows = read_rows(out / "spectrum.csv")
        assert len(rows) == 201
        assert list(rows[0]) == ["frequency_mhz", "contrast"]
        assert all(float(row["contrast"]) <= 1e-12 for row in rows)
        assert not (out / "results.h5").exists()

    def test_two_point_grid(self, tmp_path):
        config = write_config(tmp_path, "[sweep]\nn_freq = 2\n")
        out = tmp_path / "out"
        assert main(["spectrum", "--config", config, "--out", str(out)]) == EXIT_OK
        assert len(read_rows(out / "spectrum.csv")) == 2

    def test_run_config_echoed(self, tmp_path):
        out = tmp_path / "out"
        assert main(["spectrum", "--b0", "4.5", "--delta", "30", "--out", str(out)]) == EXIT_OK
        cfg = load_config(str(out / "run_config.ini"))
        assert cfg.static.b0 == 4.5
        assert cfg.drive.delta_deg == 30.0
        assert cfg.output.out == str(out)

    def test_plot_and_hdf5(self, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path, "[sweep]\nn_freq = 21\n")
        assert main(["spectrum", "--config", config, "--out", str(out), "--plot", "--hdf5"]) == EXIT_OK
        assert (out / "spectrum.svg").exists()
        assert (out / "results.h5").exists()

    def test_invalid_field(self, tmp_path, capsys):
        code = main(["spectrum", "--b0", "500", "--out", str(tmp_path / "out")])
        assert code == EXIT_INPUT
        captured = capsys.readouterr()
        assert "b0" in captured.err
        assert captured.out == ""

    def test_invalid_config(self, tmp_path):
        config = write_config(tmp_path, "[defect]\nd_gs = -5\n")
        assert main(["spectrum", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_INPUT


class TestPhaseSweepCommand:
    def test_outputs(self, tmp_path):
        config = write_config(tmp_path, SMALL_PHASE_GRID)
        out = tmp_path / "out"
        assert main(["phase-sweep", "--config", config, "--out", str(out)]) == EXIT_OK
        assert len(read_rows(out / "phase_map.csv")) == 6 * 41
        summary = read_rows(out / "integrated_contrast.csv")
        assert [float(row["delta_deg"]) for row in summary] == [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
        assert max(float(row["below_norm"]) for row in summary) == 1.0

    def test_threads_byte_identical(self, tmp_path):
        config = write_config(tmp_path, SMALL_PHASE_GRID)
        serial, threaded = tmp_path / "serial", tmp_path / "threaded"
        assert main(["phase-sweep", "--config", config, "--out", str(serial), "--threads", "1"]) == EXIT_OK
        assert main(["phase-sweep", "--config", config, "--out", str(threaded), "--threads", "8"]) == EXIT_OK
        for name in ("phase_map.csv", "integrated_contrast.csv"):
            assert (serial / name).read_bytes() == (threaded / name).read_bytes()


class TestFieldSweepCommand:
    def test_rows(self, tmp_path):
        config = write_config(tmp_path, "[sweep]\nn_freq = 101\ndelta_list = 0:360:30\nb_list = 0, 2.3\n")
        out = tmp_path / "out"
        assert main(["field-sweep", "--config", config, "--out", str(out), "--threads", "2"]) == EXIT_OK
        rows = read_rows(out / "field_sweep.csv")
        assert [float(row["b0_mt"]) for row in rows] == [0.0, 2.3]
        assert [row["status"] for row in rows] == ["ok", "ok"]
        assert rows[0]["degenerate"] == "1"
        assert rows[1]["degenerate"] == "0"
        assert float(rows[1]["sel_minus"]) > 0.7
        assert float(rows[1]["peak_sep_mhz"]) == pytest.approx(183.1, abs=1.0)


class TestFitCommand:
    @pytest.fixture
    def spectrum_csv(self, tmp_path):
        out = tmp_path / "sim"
        assert main(["spectrum", "--b0", "2.3", "--delta", "120", "--out", str(out)]) == EXIT_OK
        return str(out / "spectrum.csv")

    def test_matches_direct_pipeline(self, tmp_path, spectrum_csv):
        out = tmp_path / "fit"
        args = ["fit", spectrum_csv, "--b0", "2.3", "--delta", "120", "--out", str(out)]
        assert main(args) == EXIT_OK
        values = {row["quantity"]: row for row in read_rows(out / "fit.csv")}

        freqs, contrasts = read_spectrum_csv(spectrum_csv)
        fit = SpectrumFitter(DefectParams())(Spectrum(freqs, contrasts, delta_deg=120.0, b0=2.3))
        expected = selectivity(fit, Branch.MINUS)
        assert float(values["sel_minus"]["value"]) == pytest.approx(expected.value, rel=1e-6)
        assert float(values["sel_minus"]["sigma"]) == pytest.approx(expected.sigma, rel=1e-6)
        assert float(values["sel_minus"]["value"]) + float(values["sel_plus"]["value"]) == pytest.approx(1.0)
        assert float(values["b0_estimate_mt"]["value"]) == pytest.approx(2.3, abs=0.1)
        assert values["poorly_separated"]["value"] == "0"
        assert len(values) == 14

    def test_mask(self, tmp_path, spectrum_csv):
        out = tmp_path / "fit"
        args = ["fit", spectrum_csv, "--mask", "3700:3710", "--mask", "3260:3270", "--out", str(out)]
        assert main(args) == EXIT_OK
        cfg = load_config(str(out / "run_config.ini"))
        assert cfg.fit.mask == ((3700.0, 3710.0), (3260.0, 3270.0))

    def test_malformed_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("frequency_mhz,contrast\n3400,-0.01\n3401,oops\n")
        assert main(["fit", str(path), "--out", str(tmp_path / "out")]) == EXIT_INPUT

    def test_flat_spectrum_is_numerical_failure(self, tmp_path):
        freqs = torch.linspace(3300.0, 3700.0, 50).tolist()
        path = tmp_path / "flat.csv"
        path.write_text("frequency_mhz,contrast\n" + "".join(f"{f},0\n" for f in freqs))
        assert main(["fit", str(path), "--out", str(tmp_path / "out")]) == EXIT_NUMERICAL


class TestStickSpectrumCommand:
    def test_default_lines(self, tmp_path):
        out = tmp_path / "out"
        assert main(["stick-spectrum", "--b0", "2.3", "--out", str(out)]) == EXIT_OK
        rows = read_rows(out / "stick_spectrum.csv")
        assert len(rows) == 14
        assert {row["branch"] for row in rows} == {"minus", "plus"}
        assert sum(float(row["weight"]) for row in rows) == 54.0

    def test_no_coupling(self, tmp_path):
        config = write_config(tmp_path, "[hyperfine]\na_zz = 0\n")
        out = tmp_path / "out"
        assert main(["stick-spectrum", "--config", config, "--b0", "2.3", "--out", str(out)]) == EXIT_OK
        assert len(read_rows(out / "stick_spectrum.csv")) == 2
