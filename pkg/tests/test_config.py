import pytest
import yaml

from nvpulse.config import CONFIG_ENV, PROFILES, RunConfig, parse_override
from nvpulse.optimizer import OptimizerOptions
from nvpulse.pulse import TWO_PI
from nvpulse.spin_model import ConfigError, system_to_dict

ELECTRON = {
    "zero_field": 2.87,
    "static_field_gauss": 850.0,
    "sites": [{"label": "e", "species": "electron", "spin": 1, "gamma": 2.8024e-3}],
    "hyperfine": [],
}


def test_defaults_load():
    cfg = RunConfig.load()
    assert cfg.profile == "default" and cfg.propagation_tol == PROFILES["default"]
    assert cfg.system().dimension == 36
    opts = cfg.optimizer_options()
    assert isinstance(opts, OptimizerOptions)
    assert opts.frequency_bounds == (0.0, pytest.approx(TWO_PI * 20))
    assert opts.amplitude_bound == 2000.0


def test_override_parsing():
    assert parse_override("optimizer.max_iterations=50") == (["optimizer", "max_iterations"], 50)
    assert parse_override("scan.durations_ns=[0.1, 0.2]") == (["scan", "durations_ns"], [0.1, 0.2])
    with pytest.raises(ConfigError):
        parse_override("no_equals")


def test_overrides_apply():
    cfg = RunConfig.load(overrides=["optimize.duration_ns=1.5", "seed=7"])
    assert cfg.section("optimize")["duration_ns"] == 1.5 and cfg.seed == 7
    assert cfg.optimizer_options().seed == 7


@pytest.mark.parametrize("override", ["optimizer.max_iteration=5", "bogus=1", "pulse.ramp=0.1"])
def test_unknown_key_names_path(override):
    with pytest.raises(ConfigError, match="unknown configuration key"):
        RunConfig.load(overrides=[override])


@pytest.mark.parametrize(
    "override,path",
    [
        ("pulse.ramp_fraction=0.9", "pulse.ramp_fraction"),
        ("optimize.n_basis=0", "optimize.n_basis"),
        ("scan.durations_ns=[1.0, -2]", r"scan.durations_ns\[1\]"),
        ("scan.basis_counts=[]", "scan.basis_counts"),
        ("analysis.zero_padding=half", "analysis.zero_padding"),
        ("jobs=0", "jobs"),
        ("profile=slow", "profile"),
    ],
)
def test_validation_names_field(override, path):
    with pytest.raises(ConfigError, match=path):
        RunConfig.load(overrides=[override])


def test_file_layering_and_relative_system(tmp_path):
    (tmp_path / "sys.yaml").write_text(yaml.safe_dump(ELECTRON))
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"system": "sys.yaml", "optimize": {"restarts": 3}}))
    cfg = RunConfig.load(path)
    assert cfg.system().dimension == 3
    assert cfg.section("optimize")["restarts"] == 3
    assert cfg.section("optimize")["n_basis"] == 10  # untouched default


def test_inline_system():
    cfg = RunConfig.load(overrides=[f"system={yaml.safe_dump(ELECTRON, default_flow_style=True).strip()}"])
    assert cfg.system().dimension == 3


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.load(bad)
    bad.write_text("system: nowhere.yaml\n")
    with pytest.raises(ConfigError, match="system"):
        RunConfig.load(bad)


def test_profiles():
    fast = RunConfig.load(profile="fast")
    assert fast.propagation_tol == 1e-8
    assert fast.optimizer_options().verify_tol == 1e-8
    assert RunConfig.load(profile="verify").propagation_tol == 1e-12
    with pytest.raises(ConfigError):
        RunConfig.load(profile="sloppy")


def test_hash_tracks_physics_not_parallelism():
    base = RunConfig.load()
    assert base.config_hash() == RunConfig.load(overrides=["jobs=4"]).config_hash()
    assert base.config_hash() != RunConfig.load(overrides=["seed=1"]).config_hash()
    assert base.resolved()["system"] == system_to_dict(base.system())


def test_hash_sees_system_contents(tmp_path):
    a = dict(ELECTRON)
    b = dict(ELECTRON, static_field_gauss=900.0)
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(a))
    (tmp_path / "b.yaml").write_text(yaml.safe_dump(b))
    ha = RunConfig.load(overrides=[f"system={tmp_path / 'a.yaml'}"]).config_hash()
    hb = RunConfig.load(overrides=[f"system={tmp_path / 'b.yaml'}"]).config_hash()
    assert ha != hb


def test_provenance_lines():
    lines = RunConfig.load().provenance(command="x")
    assert lines[0].startswith("nvpulse ") and lines[1].startswith("config_hash ")
    assert lines[2] == "seed 0" and lines[3] == "command x"


def test_env_name():
    assert CONFIG_ENV == "NVPULSE_CONFIG"
