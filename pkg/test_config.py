from pathlib import Path

import pytest
import yaml

from compatlab.compat_losses import LossKind
from compatlab.config import (OUTPUT_ROOT_ENV, ExperimentConfig, GridSpec, list_presets, load_preset,
                              load_yaml, resolve_config)
from compatlab.embedding_model import ArcFaceParams
from compatlab.errors import ConfigurationError
from compatlab.prototype_engine import PrototypeVariant
from compatlab.synthetic_data import Scenario


class TestPresets:
    def test_every_scenario_has_a_preset(self):
        presets = list_presets()
        for scenario in Scenario:
            assert f"{scenario.value}-unibct" in presets
        assert {"paper", "grid", "refinement-ablation"} <= set(presets)

    @pytest.mark.parametrize("name", list_presets())
    def test_preset_resolves(self, name):
        config, _ = resolve_config(preset=name)
        assert config.name == name

    def test_paper_schedule_values(self):
        config, grid = resolve_config(preset="paper")
        assert grid is None
        assert config.train.epochs == 35
        assert config.train.prototype_regen_epochs == [10, 20]
        assert config.eval.reference_far == pytest.approx(1e-4)
        assert (config.loss.arcface.scale, config.loss.arcface.margin) == (64.0, 0.5)
        assert (config.train.arcface.scale, config.train.arcface.margin) == (64.0, 0.5)

    def test_bct_comparison_grid(self):
        base, grid = resolve_config(preset="bct-comparison")
        members = list(grid.expand(base))
        assert [m.loss.kind for m in members] == (
            [LossKind.BCT] * 3 + [LossKind.UNIBCT_VANILLA] * 3 + [LossKind.UNIBCT] * 3)
        assert {m.scenario for m in members} == {Scenario.EXTENDED_DATA}
        assert [m.variant_label for m in members[::3]] == ["none", "vanilla", "refined"]
        assert [m.seed for m in members[:3]] == [0, 1, 2]

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            load_preset("does-not-exist")


class TestExperimentConfig:
    def test_round_trip_through_yaml(self, tmp_path):
        config, _ = resolve_config(preset="open-class-unibct")
        path = config.dump_yaml(tmp_path / "config.yaml")
        echoed = ExperimentConfig.from_dict(load_yaml(path))
        assert echoed.to_dict() == config.to_dict()

    def test_model_input_dim_follows_dataset(self):
        config = ExperimentConfig.from_dict({"dataset": {"input_dim": 20, "latent_dim": 5}})
        assert config.model_old.input_dim == config.model_new.input_dim == 20
        assert config.model_new.hidden_dims == [64, 64]

    def test_arcface_section_feeds_both_losses(self):
        config = ExperimentConfig.from_dict({"loss": {"arcface": {"scale": 30.0, "margin": 0.2}}})
        assert config.loss.arcface.scale == config.train.arcface.scale == 30.0
        assert config.train.arcface is not config.loss.arcface

    def test_desk_arcface_defaults(self):
        for config in (ExperimentConfig(), ExperimentConfig.from_dict({})):
            assert (config.loss.arcface.scale, config.loss.arcface.margin) == (16.0, 0.2)
            assert (config.train.arcface.scale, config.train.arcface.margin) == (16.0, 0.2)
        assert (ArcFaceParams().scale, ArcFaceParams().margin) == (64.0, 0.5)

    def test_partial_arcface_override_keeps_desk_margin(self):
        config = ExperimentConfig.from_dict({"loss": {"arcface": {"scale": 30.0}}})
        assert (config.train.arcface.scale, config.train.arcface.margin) == (30.0, 0.2)

    def test_bct_rejected_on_open_set(self):
        with pytest.raises(ConfigurationError) as info:
            ExperimentConfig.from_dict({"split": {"scenario": "open-class"}, "loss": {"kind": "bct"}})
        assert info.value.field == "loss.kind"

    def test_bct_accepted_on_close_set(self):
        config = ExperimentConfig.from_dict({"split": {"scenario": "extended-data"}, "loss": {"kind": "bct"}})
        assert config.variant_label == "none"

    @pytest.mark.parametrize("data,field", [
        ({"train": {"epoch": 3}}, "train.epoch"),
        ({"trainer": {}}, "trainer"),
        ({"split": {"fraction": 0.5}}, "split.fraction"),
        ({"model_new": {"embed_dim": 16}}, "model_new.embed_dim"),
        ({"model_old": {"activation": "gelu"}}, "model_old.activation"),
    ])
    def test_invalid_fields_are_named(self, data, field):
        with pytest.raises(ConfigurationError) as info:
            ExperimentConfig.from_dict(data)
        assert info.value.field == field

    def test_with_seed(self):
        config = ExperimentConfig().with_seed(7)
        assert (config.dataset.seed, config.train.seed, config.eval.seed) == (7, 7, 7)
        assert (config.model_old.init_seed, config.model_new.init_seed) == (7, 8)
        assert config.split_seed == 666
        assert config.run_label == "extended-data/unibct-refined/seed-7"

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert ExperimentConfig(output_dir="runs/a").resolved_output_dir() == tmp_path / "runs" / "a"
        absolute = tmp_path / "elsewhere"
        assert ExperimentConfig(output_dir=str(absolute)).resolved_output_dir() == absolute

    def test_output_root_unset(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert ExperimentConfig(output_dir="runs/a").resolved_output_dir() == Path("runs/a")


class TestResolveConfig:
    def test_file_overrides_preset_and_flags_override_file(self, tmp_path):
        path = tmp_path / "override.yaml"
        schedule = {"epochs": 12, "warmup_epochs": 4, "prototype_regen_epochs": [4, 8], "lr_decay_epochs": [9]}
        path.write_text(yaml.safe_dump({"train": schedule, "output_dir": "runs/file"}))
        config, _ = resolve_config(preset="open-data-unibct", config_path=path, seed=3,
                                   output_dir=str(tmp_path / "flag"))
        assert config.scenario is Scenario.OPEN_DATA
        assert config.train.epochs == 12
        assert config.train.prototype_regen_epochs == [4, 8]
        assert config.seed == 3
        assert config.output_dir == str(tmp_path / "flag")

    def test_shortened_schedule_keeps_regen_epochs_in_range(self, tmp_path):
        path = tmp_path / "short.yaml"
        path.write_text(yaml.safe_dump({"train": {"epochs": 12}}))
        with pytest.raises(ConfigurationError) as info:
            resolve_config(config_path=path)
        assert info.value.field == "train.prototype_regen_epochs"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            resolve_config(config_path=tmp_path / "missing.yaml")

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            resolve_config(config_path=path)


class TestGrid:
    def test_full_grid(self):
        base, grid = resolve_config(preset="grid")
        members = list(grid.expand(base))
        assert len(members) == 5 * 4
        assert len({m.output_dir for m in members}) == len(members)
        assert all(m.output_dir.startswith("runs/grid") for m in members)

    def test_refinement_ablation(self):
        base, grid = resolve_config(preset="refinement-ablation")
        members = list(grid.expand(base))
        assert len(members) == 3 * 5
        assert {m.refinement.variant for m in members} == set(PrototypeVariant)
        assert {m.seed for m in members} == {0, 1, 2, 3, 4}

    def test_bct_skipped_on_open_set(self):
        grid = GridSpec(scenarios=["open-class", "extended-data"], losses=["bct"], seeds=[0, 1])
        members = list(grid.expand(ExperimentConfig()))
        assert [m.scenario for m in members] == [Scenario.EXTENDED_DATA] * 2
        assert all(m.loss.kind is LossKind.BCT for m in members)

    def test_members_do_not_share_state(self):
        grid = GridSpec(scenarios=["open-data"], losses=["unibct", "regress"], seeds=[0])
        first, second = grid.expand(ExperimentConfig())
        assert first.loss.kind is LossKind.UNIBCT
        assert second.loss.kind is LossKind.REGRESS
