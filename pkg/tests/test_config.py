import pytest

from krfws.exceptions import UsageError
from krfws.config_tools import (DEFAULTS, apr_params, coerce, lbf_params, make_config, read_config,
                                train_config)


class TestCoerce:

    @pytest.mark.parametrize("key,value,expected", [("seed", "12", 12),
                                                    ("forest.weighted", "no", False),
                                                    ("forest.weighted", "True", True),
                                                    ("svm.cost", "0.5", 0.5),
                                                    ("apr.levels", "32, 16", (32, 16)),
                                                    ("lbf.lambdas", "1,10", (1.0, 10.0)),
                                                    ("scheme", " face5 ", "face5"),
                                                    ("seed", 3, 3)])
    def test_values(self, key, value, expected):
        assert coerce(key, value) == expected

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            coerce("forest.width", "3")

    def test_bad_value(self):
        with pytest.raises(UsageError):
            coerce("forest.k", "two")
        with pytest.raises(UsageError):
            coerce("forest.weighted", "maybe")


class TestReadConfig:

    def test_file(self, tmp_path):
        fname = tmp_path / "run.cfg"
        fname.write_text("# small run\nseed = 4\n\nlbf.levels = 16,8  # two levels\n")
        assert read_config(str(fname)) == {"seed": 4, "lbf.levels": (16, 8)}

    def test_missing_equals(self, tmp_path):
        fname = tmp_path / "run.cfg"
        fname.write_text("seed = 1\nseed 2\n")
        with pytest.raises(UsageError, match=":2:"):
            read_config(str(fname))

    def test_bad_key_line(self, tmp_path):
        fname = tmp_path / "run.cfg"
        fname.write_text("colour = blue\n")
        with pytest.raises(UsageError, match=":1:"):
            read_config(str(fname))

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            read_config(str(tmp_path / "none.cfg"))


class TestMakeConfig:

    def test_defaults(self):
        assert make_config() == DEFAULTS

    def test_precedence(self, tmp_path):
        fname = tmp_path / "run.cfg"
        fname.write_text("seed = 4\napr.trees = 3\n")
        cfg = make_config(str(fname), {"seed": "9", "lbf.trees": None})
        assert cfg["seed"] == 9
        assert cfg["apr.trees"] == 3
        assert cfg["lbf.trees"] == DEFAULTS["lbf.trees"]

    def test_unweighted_forests_are_krf(self):
        cfg = make_config(overrides={"forest.weighted": "false"})
        assert apr_params(cfg).regressor == "krf"
        assert not lbf_params(cfg).forest.weighted

    def test_derived_params(self):
        cfg = make_config(overrides={"lbf.trees": 2, "lbf.depth": 3, "seed": 11})
        params = lbf_params(cfg)
        assert (params.forest.n_trees, params.forest.max_depth) == (2, 3)
        assert params.lambdas == (0.1, 1.0, 10.0)
        assert train_config(cfg).seed == 11

    def test_unknown_apr_features(self):
        cfg = make_config(overrides={"apr.features": "corners"})
        with pytest.raises(UsageError):
            apr_params(cfg)
