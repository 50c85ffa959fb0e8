import json
import math
import subprocess
import sys

import numpy as np
import pytest

from ptdfcont import cli, pipeline
from ptdfcont.config import ConfigError, RunConfig, parse_config, parse_text


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory, oracle):
    """Output directory preloaded with the session oracle branch."""
    branch, p0, fold = oracle
    out = tmp_path_factory.mktemp("cache")
    pipeline.save_oracle(pipeline.OracleRun(branch, p0, fold), RunConfig.defaults(), out)
    return out


def _copy_cache(src, dst):
    for name in (pipeline.BVP_BRANCH, pipeline.BVP_FOLD):
        (dst / name).write_bytes((src / name).read_bytes())


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = parse_config(path, env={})
    assert cfg.render() == RunConfig.defaults().render()
    assert cfg.params().l == pytest.approx(0.3)


def test_relaxation_out_of_range_cites_line():
    with pytest.raises(ConfigError) as exc:
        parse_text("# comment\ncontrol.gain = 2\ncontrol.relaxation = 1.5\n", "run.cfg", env={})
    assert exc.value.line == 3
    assert "relaxation" in str(exc.value) and "0 < R <= 1" in str(exc.value)
    assert str(exc.value).startswith("run.cfg:3:")


def test_unknown_key_and_bad_type():
    with pytest.raises(ConfigError) as exc:
        parse_text("control.gain = 2\ncontrol.gian = 3\n", env={})
    assert exc.value.line == 2 and "control.gian" in str(exc.value)
    with pytest.raises(ConfigError) as exc:
        parse_text("\nsim.steps_per_period = lots\n", env={})
    assert exc.value.line == 2 and "expected int" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_text("charts.tangent = sideways\n", env={})
    with pytest.raises(ConfigError):
        parse_text("no equals sign\n", env={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.cfg", env={})


def test_render_round_trip():
    cfg = parse_text("control.gain = 2.5\ncharts.g_cells = 7\nsimulate.orbit_phase = -3.0\n", env={})
    again = parse_text(cfg.render(), env={})
    assert again.render() == cfg.render()  # nan fields defeat == on the dataclass
    assert again.control == cfg.control and again.charts == cfg.charts
    assert again.digest() == cfg.digest()
    assert parse_text("output_dir = elsewhere\n", env={}).digest() == RunConfig.defaults().digest()
    assert math.isnan(again.simulate.phi0)


def test_env_override():
    cfg = parse_text("control.gain = 2.5\n", env={"PTDFCONT_CONTROL__GAIN": "7", "PTDFCONT_SEED": "3",
                                                    "OTHER": "x"})
    assert cfg.control.gain == 7.0
    assert cfg.seed == 3
    with pytest.raises(ConfigError) as exc:
        parse_text("", env={"PTDFCONT_CONTROL__RELAXATION": "0"})
    assert "$PTDFCONT_CONTROL__RELAXATION" in str(exc.value)


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("control.relaxation = 1.5\n")
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: config: ") and ":1:" in err[0]


def test_cli_simulate_loss_of_control(tmp_path, cache_dir, capsys):
    """Zero gain started on an unstable oracle orbit leaves it: exit code for loss of control."""
    _copy_cache(cache_dir, tmp_path)
    path = tmp_path / "run.cfg"
    path.write_text("control.gain = 0\nsimulate.orbit_phase = -3.4\nsimulate.periods = 150\n")
    code = cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)])
    assert code == cli.EXIT_LOST
    assert "loss-of-control" in capsys.readouterr().out
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert "# status loss-of-control" in lines[:6]


def test_cli_simulate_with_control_ok(tmp_path, cache_dir):
    _copy_cache(cache_dir, tmp_path)
    path = tmp_path / "run.cfg"
    path.write_text("control.gain = 4\nsimulate.orbit_phase = -3.4\nsimulate.periods = 60\n")
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_OK


def _tiny_chart_cfg(tmp_path):
    path = tmp_path / "chart.cfg"
    path.write_text("charts.g_min = 4\ncharts.g_max = 4\ncharts.g_cells = 1\ncharts.phase_cells = 1\n"
                    "charts.phase_halfwidth = 0\ncharts.mesh = 32\n")
    return path


def test_cli_stability_chart_single_cell_and_header(tmp_path, cache_dir):
    _copy_cache(cache_dir, tmp_path)
    path = _tiny_chart_cfg(tmp_path)
    assert cli.main(["stability-chart", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_OK
    axes = json.loads((tmp_path / "stability_chart.json").read_text())
    lines = (tmp_path / "stability_chart.csv").read_text().splitlines()
    digest = parse_config(path, env={}).digest()
    assert lines[1] == f"# config-sha256 {digest}"
    value = float(lines[-1].split(",")[-1])
    assert value < 1.0
    assert len(axes["g_values"]) == 1
    resolved = parse_config(tmp_path / "resolved.cfg", env={})
    assert resolved.output_dir == str(tmp_path)
    assert resolved.digest() == digest


def test_cli_chart_deterministic(tmp_path, cache_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        d.mkdir()
        _copy_cache(cache_dir, d)
        path = _tiny_chart_cfg(d)
        assert cli.main(["condition-chart", "--config", str(path), "--out", str(d), "--format", "long"]) == 0
    assert (a / "condition_chart.csv").read_bytes() == (b / "condition_chart.csv").read_bytes()


def test_cli_module_error_single_line(tmp_path):
    """A failing module is reported as one stderr line with the exception kind."""
    path = tmp_path / "run.cfg"
    path.write_text("oracle.p_start = 0.0001\n")  # too weak to sustain a rotation
    proc = subprocess.run([sys.executable, "-m", "ptdfcont.cli", "continue-bvp", "--config", str(path),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_FAIL
    err = proc.stderr.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: NoConvergence: no periodic rotation")


def test_cli_rejects_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        cli.main(["dance"])
    assert exc.value.code == 2


def test_settings_builders_follow_config():
    cfg = parse_text("continuation.newton_tol = 1e-3\ncharts.g_cells = 5\ntransient.eps = 1e-8\n", env={})
    s = pipeline.continuation_settings(cfg)
    assert s.newton_tol == 1e-3
    assert s.transient_eps == pytest.approx(0.2 * 1e-3 * s.sigma_phi)
    assert pipeline.chart_settings(cfg).g_values().size == 5
    assert pipeline.transient_policy(cfg).eps == 1e-8
    assert np.isclose(pipeline.sim_settings(cfg).steps_per_period, 512)
