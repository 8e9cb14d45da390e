import json
import subprocess
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from thinlayer import cli, pipeline
from thinlayer.config import config_from_dict, load_config, validate, RunConfig
from thinlayer.errors import ConfigParseError, ConfigValidationError, ThinLayerError
from thinlayer.pipeline import read_field, resolve_stages, run_pipeline, sha256_file, write_field

PRESET = Path(__file__).resolve().parents[1] / "presets" / "tiny.toml"

SMALL = {"geometry": {"m": 16, "m_c": 8}, "physics": {"T": 0.1, "dt": 0.05},
         "scales": {"eps": ["1/4", "1/16", "1/36"]}}


def _write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.alpha == Fraction(1, 2)
    assert cfg.eps == [Fraction(1, 4), Fraction(1, 16), Fraction(1, 64)]
    assert cfg.lateral == "neumann" and cfg.geometry.m == 64
    assert config_from_dict({"physics": {"case": "D2"}}).lateral == "periodic"
    assert validate(RunConfig()) == []


def test_errors_aggregated():
    with pytest.raises(ConfigValidationError) as ei:
        config_from_dict({"geometry": {"n": 5, "colour": "red"}, "physics": {"D": -1.0},
                          "solver": {"advection": "weno"}, "extra": {}})
    v = "\n".join(ei.value.violations)
    for frag in ("exceeds 4", "colour", "physics.D", "advection", "unknown section [extra]"):
        assert frag in v
    assert len(ei.value.violations) >= 5


def test_inadmissible_eps():
    with pytest.raises(ConfigValidationError) as ei:
        config_from_dict({"scales": {"eps": ["1/3", "1/16", "1/64"]}})
    assert any("1/3" in v for v in ei.value.violations)


def test_d2_neumann_rejected():
    with pytest.raises(ConfigValidationError) as ei:
        config_from_dict({"physics": {"case": "D2", "lateral": "neumann"}})
    assert any("periodic" in v for v in ei.value.violations)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigParseError):
        load_config(_write(tmp_path, "[geometry\nm = 3"))
    with pytest.raises(ConfigParseError):
        load_config(tmp_path / "missing.toml")


def test_checksum_ignores_output():
    a = config_from_dict({"output": {"dir": "x"}})
    b = config_from_dict({"output": {"dir": "y"}})
    c = config_from_dict({"geometry": {"m": 32}})
    assert a.checksum() == b.checksum() != c.checksum()
    assert a.checksum("physics") == c.checksum("physics")


def test_resolve_stages():
    assert resolve_stages(["transport"]) == ["cell", "effective", "darcy", "transport"]
    assert resolve_stages("all") == list(pipeline.STAGES)
    with pytest.raises(ValueError):
        resolve_stages(["bogus"])


def test_field_round_trip(tmp_path):
    vals = np.random.default_rng(1).normal(size=(3, 5))
    axes = (np.arange(3) / 3, np.linspace(-1, 1, 5))
    write_field(tmp_path / "f", vals, axes, fmt="raw", name="p0", meta={"t": 0.5})
    back, bax, meta = read_field(tmp_path / "f")
    assert np.array_equal(back, vals) and meta == {"t": 0.5}
    assert all(np.array_equal(a, b) for a, b in zip(axes, bax))
    (path,) = write_field(tmp_path / "g", vals, axes, fmt="csv", name="p0")
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert path.read_text().splitlines()[0] == "x1,x2,p0"
    assert np.array_equal(table[:, -1].reshape(3, 5), vals)
    with pytest.raises(ValueError):
        write_field(tmp_path / "h", vals, axes[:1])


def test_pipeline_partial_and_cache(tmp_path):
    cfg = config_from_dict(SMALL)
    out, cache = tmp_path / "out", tmp_path / "cache"
    man = run_pipeline(cfg, ["cell", "effective"], out_dir=out, cache_dir=cache)
    assert set(man.stages) == {"cell", "effective"}
    assert sorted(p.name for p in out.iterdir()) == ["cell", "effective", "manifest.json"]
    for f in man.files:
        assert f["sha256"] == sha256_file(out / f["path"])
    first = {f["path"]: f["sha256"] for f in man.files}
    again = run_pipeline(cfg, ["cell", "effective"], out_dir=out, cache_dir=cache)
    assert all(r["cache_hit"] for r in again.stages.values())
    assert {f["path"]: f["sha256"] for f in again.files} == first
    # a solver change invalidates cell but not the physics-only stages' inputs
    cfg2 = config_from_dict({**SMALL, "geometry": {"m": 16, "m_c": 8, "inclusion": "box",
                                                   "size": [0.3, 0.2]}})
    third = run_pipeline(cfg2, ["cell"], out_dir=out, cache_dir=cache)
    assert not third.stages["cell"]["cache_hit"]


def test_failed_stage_skips_dependents(tmp_path, monkeypatch):
    def boom(ctx, d):
        raise ThinLayerError("forced")
    monkeypatch.setitem(pipeline.RUNNERS, "cell", boom)
    man = run_pipeline(config_from_dict(SMALL), ["darcy"], out_dir=tmp_path, use_cache=False)
    assert man.stages["cell"]["status"] == "failed"
    assert man.stages["darcy"]["status"] == "skipped"
    assert man.failed == ["cell"]


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    good = _write(tmp_path, '[geometry]\nm = 16\nm_c = 8\n[output]\ndir = "%s"\n'
                  % (tmp_path / "o").as_posix())
    assert cli.main(["cell", "--config", str(good), "--cache-dir", str(tmp_path / "c")]) == 0
    assert "cell" in capsys.readouterr().out
    bad = tmp_path / "bad.toml"
    bad.write_text('[scales]\neps = ["1/3", "1/9", "1/27"]\n')
    assert cli.main(["all", "--config", str(bad)]) == 1
    assert "invalid configuration" in capsys.readouterr().err
    assert cli.main(["cell", "--config", str(good), "--stages", "nope"]) == 1

    monkeypatch.setitem(pipeline.RUNNERS, "cell", lambda ctx, d: {"checks": {"forced": False}})
    assert cli.main(["cell", "--config", str(good), "--no-cache"]) == 3
    monkeypatch.setitem(pipeline.RUNNERS, "cell",
                        lambda ctx, d: (_ for _ in ()).throw(ThinLayerError("x")))
    assert cli.main(["cell", "--config", str(good), "--no-cache"]) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "thinlayer", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "converge" in r.stdout


def test_preset_loads():
    cfg = load_config(PRESET)
    assert cfg.output.field_format == "raw" and len(cfg.eps) == 3
    json.dumps(cfg.resolved())
