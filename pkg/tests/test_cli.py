import csv
import textwrap

import numpy as np
import pytest

from anisoavg.cli import ReportRow, main
from anisoavg.config import ConfigError, parse_config
from anisoavg.io import read_columns


def write(tmp_path, text, name="study.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding="utf-8")
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def metrics(out):
    return {r["metric"]: float(r["value"]) for r in rows(out / "report.csv")}


SMALL_REF = """
    [study]
    kind = rotation-reference
    radii = 8
    relax_nodes = 64
    orbit_nodes = 64
    [D]
    D11 = {d11}
    D12 = 0
    D22 = {d22}
"""

SMALL_CONV = """
    [study]
    kind = convergence
    epsilon = 0.1, 0.01, 0.001
    T = 0.1
    dt = 0.01
    orbit_nodes = 64
    [grid]
    n = 32
    L = 8
    [D]
    D11 = {d11}
    D12 = 0
    D22 = {d22}
    [initial]
    u_in = {u}
"""

SMALL_CORR = """
    [study]
    kind = corrector-check
    epsilon = 0, 0.01
    orbit_nodes = 64
    seed = 7
    [grid]
    n = 48
    [D]
    D11 = {d11}
    D12 = 0
    D22 = {d22}
"""


class TestParseConfig:
    def test_minimal_defaults(self, tmp_path):
        cfg = parse_config(write(tmp_path, "[study]\nkind = rotation-reference\n"))
        assert (cfg.n, cfg.L, cfg.T) == (128, 4.0, 0.5)
        assert cfg.dt == 0.01 and cfg.tol == 1e-10 and cfg.scheme == "backward-euler"
        assert cfg.b.kind == "rotation" and cfg.period == pytest.approx(2 * np.pi)
        assert cfg.weight.name == "rotation-frame" and cfg.frame is not None

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.ini")

    def test_not_utf8(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_bytes(b"[study]\nkind = cfl-demo\n; \xff\xfe\n")
        with pytest.raises(ConfigError, match="UTF-8"):
            parse_config(path)

    def test_parse_error_has_line(self, tmp_path):
        path = write(tmp_path, "[study]\nkind = cfl-demo\nthis line is not a key\n")
        with pytest.raises(ConfigError, match=r"study.ini:3:"):
            parse_config(path)

    def test_key_outside_section(self, tmp_path):
        with pytest.raises(ConfigError, match=r":1:"):
            parse_config(write(tmp_path, "kind = cfl-demo\n"))

    def test_unknown_key_strict(self, tmp_path):
        path = write(tmp_path, "[study]\nkind = cfl-demo\n\n[grid]\nn = 32\nspacing = 0.1\n")
        with pytest.raises(ConfigError, match=r":6: spacing: unknown key"):
            parse_config(path)

    def test_unknown_section(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config(write(tmp_path, "[study]\nkind = cfl-demo\n[mesh]\nn = 3\n"))

    def test_epsilon_out_of_range_names_key(self, tmp_path):
        path = write(tmp_path, "[study]\nkind = cfl-demo\nepsilon = 2\n")
        with pytest.raises(ConfigError, match=r":3: epsilon:"):
            parse_config(path)

    def test_single_epsilon_convergence(self, tmp_path):
        with pytest.raises(ConfigError, match="epsilon.*at least 3"):
            parse_config(write(tmp_path, "[study]\nkind = convergence\nepsilon = 0.1\n"))

    def test_increasing_epsilon_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="decreasing"):
            parse_config(write(tmp_path, "[study]\nkind = convergence\nepsilon = 0.01, 0.1, 0.5\n"))

    def test_zero_epsilon_only_for_corrector(self, tmp_path):
        with pytest.raises(ConfigError, match="epsilon"):
            parse_config(write(tmp_path, "[study]\nkind = cfl-demo\nepsilon = 0\n"))
        cfg = parse_config(write(tmp_path, "[study]\nkind = corrector-check\nepsilon = 0\n", "c.ini"))
        assert cfg.epsilons == [0.0]

    @pytest.mark.parametrize("line, key", [
        ("dt = 1.0", "dt"),
        ("tol = 1e-3", "tol"),
        ("scheme = explicit", "scheme"),
        ("dt_factors = 0.5, 2", "dt_factors"),
        ("kind = heat", "kind"),
        ("T = abc", "T"),
    ])
    def test_semantic_errors(self, tmp_path, line, key):
        text = "[study]\nkind = cfl-demo\n" + line + "\n"
        if line.startswith("kind"):
            text = "[study]\n" + line + "\n"
        with pytest.raises(ConfigError, match=rf"\b{key}:"):
            parse_config(write(tmp_path, text))

    def test_bad_expression(self, tmp_path):
        with pytest.raises(ConfigError, match=r":4: D11:"):
            parse_config(write(tmp_path, "[study]\nkind = cfl-demo\n[D]\nD11 = import os\n"))

    def test_grid_too_small(self, tmp_path):
        with pytest.raises(ConfigError, match=r"\bn:"):
            parse_config(write(tmp_path, "[study]\nkind = cfl-demo\n[grid]\nn = 8\n"))

    def test_corrector_needs_periodic_flow(self, tmp_path):
        with pytest.raises(ConfigError, match="periodic"):
            parse_config(write(tmp_path, "[study]\nkind = corrector-check\n[b]\nkind = shear\n"))


class TestReportRow:
    def test_pass_flag(self):
        assert ReportRow("x", "", "m", -1e-7, 1e-6).passed
        assert not ReportRow("x", "", "m", 2e-6, 1e-6).passed
        assert ReportRow("x", "", "m", 0, 0).as_list()[-1] == "true"

    def test_finite(self):
        with pytest.raises(ValueError):
            ReportRow("x", "", "m", float("nan"), 1.0)


class TestMain:
    def test_missing_config_exit_code(self, tmp_path, capsys):
        assert main([str(tmp_path / "missing.ini")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_unsupported_flow_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, "[study]\nkind = rotation-reference\n[b]\nkind = shear\n")
        assert main([str(path), "--out", str(tmp_path / "o")]) == 2
        assert "periodic" in capsys.readouterr().err

    def test_exit_code_counts_failures(self, tmp_path, capsys):
        # a single explicit step cannot show the blow-up
        path = write(tmp_path, """
            [study]
            kind = cfl-demo
            dt_factors = 0.5, 4
            cfl_steps = 1
            [grid]
            n = 24
        """)
        out = tmp_path / "o"
        code = main([str(path), "--out", str(out)])
        report = rows(out / "report.csv")
        failed = [r for r in report if r["pass"] == "false"]
        assert code == len(failed) == 1
        assert failed[0]["metric"] == "explicit_inverse_growth"
        assert "FAIL cfl-demo" in capsys.readouterr().err

    def test_cfl_demo_passes(self, tmp_path):
        path = write(tmp_path, "[study]\nkind = cfl-demo\nepsilon = 0.01\ndt_factors = 0.5, 1, 4\n[grid]\nn = 32\n")
        out = tmp_path / "o"
        assert main([str(path), "--out", str(out)]) == 0
        assert len(rows(out / "report.csv")) == 4

    def test_env_overrides_out(self, tmp_path, monkeypatch):
        path = write(tmp_path, "[study]\nkind = cfl-demo\ndt_factors = 0.5\n[grid]\nn = 16\n")
        monkeypatch.setenv("ANISOAVG_OUT", str(tmp_path / "env"))
        assert main([str(path), "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "env" / "report.csv").exists()
        assert not (tmp_path / "flag").exists()

    def test_unwritable_out(self, tmp_path):
        path = write(tmp_path, "[study]\nkind = cfl-demo\n[grid]\nn = 16\n")
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main([str(path), "--out", str(blocker / "sub")]) == 2

    def test_pass_flags_recomputable(self, tmp_path):
        path = write(tmp_path, SMALL_REF.format(d11="2 + cos(|y|)", d22="1"))
        out = tmp_path / "o"
        assert main([str(path), "--out", str(out)]) == 0
        for r in rows(out / "report.csv"):
            assert (abs(float(r["value"])) <= float(r["tolerance"])) == (r["pass"] == "true")


class TestRotationReference:
    def run(self, tmp_path, d11, d22):
        out = tmp_path / "o"
        code = main([str(write(tmp_path, SMALL_REF.format(d11=d11, d22=d22))), "--out", str(out)])
        return code, metrics(out), out

    def test_reference_tensor(self, tmp_path):
        code, m, out = self.run(tmp_path, "2 + cos(|y|)", "1")
        assert code == 0 and m["closed_form_max_error"] <= 1e-10
        meta, cols = read_columns(out / "averaged_field.csv")
        r = np.hypot(cols["y1"], cols["y2"])
        assert np.allclose(cols["A11"], (3 + np.cos(r)) / 2, atol=1e-10)
        assert np.allclose(cols["A12"], 0.0, atol=1e-10)

    def test_identity(self, tmp_path):
        code, m, out = self.run(tmp_path, "1", "1")
        assert code == 0 and m["closed_form_max_error"] <= 1e-12
        _, cols = read_columns(out / "averaged_field.csv")
        assert np.allclose(cols["A11"], 1.0, atol=1e-12) and np.allclose(cols["A22"], 1.0, atol=1e-12)

    def test_non_radial_routes_agree(self, tmp_path):
        code, m, _ = self.run(tmp_path, "1 + y1^2", "1")
        assert code == 0
        assert "closed_form_max_error" not in m
        assert m["route_agreement_Q"] <= 1e-6 and m["relaxation_norm_increases"] == 0


class TestConvergence:
    def run(self, tmp_path, jobs=1, name="o", **kw):
        out = tmp_path / name
        path = write(tmp_path, SMALL_CONV.format(**kw))
        code = main([str(path), "--out", str(out), "--jobs", str(jobs)])
        return code, out

    def test_radial_data_error_decreases(self, tmp_path):
        code, out = self.run(tmp_path, d11="2 + cos(|y|)", d22="1", u="exp(-|y|^2/0.72)")
        err = [float(r["value"]) for r in rows(out / "report.csv") if r["metric"] == "err_L2"]
        assert code == 0 and len(err) == 3
        assert err[0] > err[1] > err[2]

    def test_models_coincide(self, tmp_path):
        # D in ker L and b . grad u_in = 0: the models differ only through the
        # discrete transport form, an eps independent second-order floor
        floors = []
        for n in (32, 64):
            text = SMALL_CONV.format(d11="1 + |y|^2/4", d22="1 + |y|^2/4", u="exp(-|y|^2/0.72)")
            path = write(tmp_path, text.replace("n = 32", f"n = {n}"), f"c{n}.ini")
            main([str(path), "--out", str(tmp_path / f"o{n}")])
            err = [float(r["value"]) for r in rows(tmp_path / f"o{n}" / "report.csv") if r["metric"] == "err_L2"]
            assert max(err) <= 1.05 * min(err)
            floors.append(max(err))
        assert floors[0] / floors[1] >= 3.5

    def test_parallel_runs_are_bit_identical(self, tmp_path):
        kw = dict(d11="2 + cos(|y|)", d22="1", u="exp(-((y1 - 1)^2 + y2^2)/0.72)")
        self.run(tmp_path, 1, "serial", **kw)
        self.run(tmp_path, 2, "parallel", **kw)
        serial = (tmp_path / "serial" / "report.csv").read_bytes()
        assert serial == (tmp_path / "parallel" / "report.csv").read_bytes()


class TestCorrectorCheck:
    def run(self, tmp_path, d11, d22, name="o", extra=()):
        out = tmp_path / name
        path = write(tmp_path, SMALL_CORR.format(d11=d11, d22=d22))
        return main([str(path), "--out", str(out), *extra]), out

    def test_reference(self, tmp_path):
        code, out = self.run(tmp_path, "2 + cos(|y|)", "1")
        report = rows(out / "report.csv")
        assert code == 0
        res = [float(r["value"]) for r in report if r["metric"] == "decomposition_residual"]
        assert len(res) == 5 and max(res) <= 1e-6

    def test_zero_epsilon_keeps_initial_data(self, tmp_path):
        _, out = self.run(tmp_path, "2 + cos(|y|)", "1")
        _, cols = read_columns(out / "corrected_initial_eps0.csv")
        u_in = np.exp(-((cols["y1"] - 1) ** 2 + cols["y2"] ** 2) / 0.72)
        # same expression evaluated independently; exp amplifies argument ulps
        assert np.allclose(cols["u"], u_in, rtol=1e-12, atol=0.0)
        _, cols = read_columns(out / "corrected_initial_eps0.01.csv")
        assert not np.array_equal(cols["u"], u_in)

    def test_kernel_field_gives_zero_corrector(self, tmp_path):
        code, out = self.run(tmp_path, "1 + |y|^2", "1 + |y|^2")
        assert code == 0
        _, cols = read_columns(out / "corrector_fields.csv")
        assert set(cols["field"]) == {"E", "F"}
        for k in ("A11", "A12", "A22"):
            assert np.max(np.abs(cols[k])) <= 1e-10
        assert all(r["pass"] == "true" for r in rows(out / "report.csv"))

    def test_deterministic(self, tmp_path):
        self.run(tmp_path, "2 + cos(|y|)", "1", "a")
        self.run(tmp_path, "2 + cos(|y|)", "1", "b")
        for name in ("report.csv", "corrector_fields.csv", "corrected_initial_eps0.01.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_override(self, tmp_path):
        self.run(tmp_path, "2 + cos(|y|)", "1", "a")
        self.run(tmp_path, "2 + cos(|y|)", "1", "b", ("--seed", "11"))
        params = [r["params"] for r in rows(tmp_path / "b" / "report.csv") if r["metric"] == "decomposition_residual"]
        assert all("seed=11" in p for p in params)
        assert (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "b" / "report.csv").read_bytes()
