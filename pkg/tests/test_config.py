import functools
import inspect
import json
from pathlib import Path

import pytest

from app import schemas
from app.core.errors import ConfigurationError
from app.schemas import LossMode, Method, RunConfig, StrictModel, VSDConfig
from app.services.pipeline import apply_overrides, config_hash, config_json, load_run_config, read_config_file


def test_defaults_are_valid():
    config = RunConfig()
    assert config.method == Method.vsd_lora_spaced
    assert config.i3ds.vsd.lora_interval == 3
    assert config.i3ds.vsd.loss_mode == LossMode.score_shortcut
    assert config.lora.layers[0] == "time_mlp.0"
    assert config.scene.hr_size % 4 == 0


def test_apply_overrides_parses_json_values():
    data = apply_overrides({}, ["scene.n_views=12", "lora.layers=[\"mid.conv1\"]", "scene.prompt=a fern", "i3ds.vsd.sds=true"])
    assert data == {"scene": {"n_views": 12, "prompt": "a fern"}, "lora": {"layers": ["mid.conv1"]}, "i3ds": {"vsd": {"sds": True}}}
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["scene.n_views"])
    with pytest.raises(ConfigurationError):
        apply_overrides({"scene": 3}, ["scene.seed=1"])


def test_load_toml_with_overrides_and_flags(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('method = "sds"\nseed = 1\n\n[scene]\nn_views = 10\n\n[i3ds]\nrounds = 2\n')
    config = load_run_config(path, ["i3ds.rounds=3"], seed=9, output_dir="runs/x")
    assert config.method == Method.sds
    assert config.scene.n_views == 10
    assert config.i3ds.rounds == 3, "--set wins over the file"
    assert config.seed == 9, "dedicated flags win over --set"
    assert config.output_dir == "runs/x"


def test_json_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"method": "identity"}))
    assert read_config_file(path) == {"method": "identity"}
    assert load_run_config(path).method == Method.identity


@pytest.mark.parametrize(
    "overrides",
    [
        ["scene.bogus=1"],
        ["scene.hr_size=130"],
        ["scene.near=6"],
        ["i3ds.vsd.t_min=500", "i3ds.vsd.t_max=400"],
        ["schedule.T=100"],
        ["field.sr_grid_res=16", "field.lr_grid_res=32"],
        ["method=bilinear"],
    ],
)
def test_invalid_configs_raise_configuration_error(overrides):
    with pytest.raises(ConfigurationError):
        load_run_config(None, overrides)


def test_unreadable_config_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("method = ")
    with pytest.raises(ConfigurationError):
        load_run_config(bad)


def test_method_presets():
    base = RunConfig(i3ds={"vsd": {"lora_interval": 5, "max_steps": 40}})
    spaced = base.model_copy(update={"method": Method.vsd_lora_spaced}).vsd_for_method()
    assert spaced.lora_interval == 3 and spaced.use_lora and not spaced.sds
    every = base.model_copy(update={"method": Method.vsd_lora}).vsd_for_method()
    assert every.lora_interval == 1
    sds = base.model_copy(update={"method": Method.sds}).vsd_for_method()
    assert sds.sds and not sds.use_lora and sds.max_steps == 40
    identity = base.model_copy(update={"method": Method.identity}).vsd_for_method()
    assert identity.max_steps == 0
    assert base.i3ds.vsd.lora_interval == 5, "presets must not mutate the stored config"


def test_vsd_config_bounds():
    with pytest.raises(ValueError):
        VSDConfig(lora_interval=0)
    with pytest.raises(ValueError):
        VSDConfig(t_min=10, t_max=10)


def test_config_hash_is_stable():
    a = load_run_config(None, ["scene.n_views=8"])
    b = load_run_config(None, ["scene.n_views=8"])
    assert config_json(a) == config_json(b)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_run_config(None, ["scene.n_views=9"]))


@pytest.mark.parametrize("name", ["run.toml", "llff_fern.toml"])
def test_shipped_configs_load(name):
    config = load_run_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert config.method == Method.vsd_lora_spaced
    assert config.field.sr_grid_res == 128


def _sections(model):
    for name, info in model.model_fields.items():
        if isinstance(info.annotation, type) and issubclass(info.annotation, StrictModel):
            yield name, info.annotation


def _leaf_paths(model, prefix=""):
    nested = dict(_sections(model))
    for name in model.model_fields:
        if name in nested:
            yield from _leaf_paths(nested[name], f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}"


def test_every_config_section_hangs_off_run_config():
    reachable, todo = set(), [RunConfig]
    while todo:
        for _, section in _sections(todo.pop()):
            reachable.add(section)
            todo.append(section)
    declared = {
        cls for _, cls in inspect.getmembers(schemas, inspect.isclass)
        if issubclass(cls, StrictModel) and cls not in (StrictModel, RunConfig)
    }
    assert declared == reachable


def test_every_tunable_is_settable_by_override():
    defaults = json.loads(config_json(RunConfig()))
    paths = list(_leaf_paths(RunConfig))
    assert "i3ds.vsd.lora_interval" in paths and "field.sr_grid_res" in paths
    for path in paths:
        value = functools.reduce(lambda node, key: node[key], path.split("."), defaults)
        assert load_run_config(overrides=[f"{path}={json.dumps(value)}"]) == RunConfig(), path
