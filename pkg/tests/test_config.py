from __future__ import annotations

from importlib import resources

import numpy as np
import pytest

from shortmr.config import SCHEMA, ConfigError, RunConfig
from shortmr.volume import SpatialTransform


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


MINIMAL = "seed = 4\noutput_dir = out\n"


def packaged(name):
    return resources.files("shortmr") / "configs" / name


class TestLoad:
    def test_defaults(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path, MINIMAL))
        assert cfg["seed"] == 4 and cfg["output_dir"] == "out"
        assert cfg["analysis.n_permutations"] == 999 and cfg["model.norm"] == "batch"
        exp = cfg.experiment()
        assert exp.seed == 4 and exp.phantom.seed == 4 and exp.train.seed == 4

    def test_comments_and_json_values(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path, MINIMAL + "# note\nphantom.shape = [16, 16, 16]  # small\n"))
        assert tuple(cfg["phantom.shape"]) == (16, 16, 16)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="'phantom.colour'"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "phantom.colour = 3\n"))

    def test_missing_required(self, tmp_path):
        with pytest.raises(ConfigError, match="'output_dir'.*required"):
            RunConfig.load(write_cfg(tmp_path, "seed = 1\n"))

    def test_bad_type_names_key(self, tmp_path):
        with pytest.raises(ConfigError, match="'train.max_epochs'.*integer"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "train.max_epochs = many\n"))

    def test_bad_choice(self, tmp_path):
        with pytest.raises(ConfigError, match="'analysis.null'"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "analysis.null = bootstrap\n"))

    def test_range_error_names_key(self, tmp_path):
        with pytest.raises(ConfigError, match="'bias.p_train'"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "bias.p_train = 0.2\n"))
        with pytest.raises(ConfigError, match="'analysis.n_permutations'"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "analysis.n_permutations = 10\n"))

    def test_duplicate_key(self, tmp_path):
        with pytest.raises(ConfigError, match="duplicate"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "seed = 5\n"))

    def test_malformed_line(self, tmp_path):
        with pytest.raises(ConfigError, match=":3:"):
            RunConfig.load(write_cfg(tmp_path, MINIMAL + "just words\n"))

    def test_overrides(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path, MINIMAL), {"seed": 9, "output_dir": "elsewhere"})
        assert cfg["seed"] == 9 and cfg.experiment().phantom.seed == 9
        assert cfg["output_dir"] == "elsewhere"

    def test_dump_round_trip(self, tmp_path):
        cfg = RunConfig.load(packaged("smoke.cfg"))
        again = RunConfig.load(write_cfg(tmp_path, cfg.dump()))
        assert again.values == cfg.values
        assert set(again.values) == set(SCHEMA)

    @pytest.mark.parametrize("name", ["smoke.cfg", "desk.cfg"])
    def test_packaged_configs_load(self, name):
        exp = RunConfig.load(packaged(name)).experiment()
        assert exp.model.input_shape == exp.phantom.shape


class TestTransform:
    def test_identity(self, tmp_path):
        t = RunConfig.load(write_cfg(tmp_path, MINIMAL)).transform()
        assert t == SpatialTransform.identity()

    def test_affine_file_relative_to_config(self, tmp_path):
        m = np.eye(4)
        m[:3, 3] = [1.0, 0.0, -1.0]
        np.save(tmp_path / "shift.npy", m)
        t = RunConfig.load(write_cfg(tmp_path, MINIMAL + "attribution.transform = shift.npy\n")).transform()
        assert np.array_equal(t.matrix, m)

    def test_missing_file(self, tmp_path):
        cfg = RunConfig.load(write_cfg(tmp_path, MINIMAL + "attribution.transform = nowhere.npy\n"))
        with pytest.raises(ConfigError, match="'attribution.transform'.*not found"):
            cfg.transform()
