"""
Tests for experiment configuration: defaults, config files, flag precedence and validation.
"""
import pytest

from lowprec_mlmc.config import (
    ConfigError,
    build_config,
    load_config_file,
    load_cost_model,
    merged_settings,
    parse_bool,
    parse_levels,
    parse_paths,
)
from lowprec_mlmc.mlmc import CostModel


class TestParsers:
    """Value parsers"""

    def test_levels(self):
        assert parse_levels("0..3") == [0, 1, 2, 3]
        assert parse_levels("8") == [8]
        assert parse_levels(" 4..4 ") == [4]

    @pytest.mark.parametrize("text", ["3..1", "-1..2", "a..b", "1..", ""])
    def test_bad_levels(self, text):
        with pytest.raises(ConfigError):
            parse_levels(text)

    def test_paths(self):
        assert parse_paths("10000") == (10000,)
        assert parse_paths("100,50,20") == (100, 50, 20)

    @pytest.mark.parametrize("text", ["1", "100,x", "100,0"])
    def test_bad_paths(self, text):
        with pytest.raises(ConfigError):
            parse_paths(text)

    def test_bool(self):
        assert parse_bool("Yes") is True
        assert parse_bool("off") is False
        assert parse_bool(True) is True
        with pytest.raises(ConfigError):
            parse_bool("maybe")


class TestDefaults:
    """Packaged defaults per subcommand"""

    def test_four_way_defaults(self):
        config = build_config("four-way")
        assert config.precision.name == "fp16"
        assert config.approx_name == "linear:1024"
        assert config.approx.interval_count == 1024
        assert config.kahan is False
        assert config.levels == list(range(13))
        assert config.seed == 1729
        assert config.concurrency == 1
        assert config.progress_style == "compact"
        assert config.out is None

    def test_paths_schedule(self):
        """A single count is halved per level above 9"""
        config = build_config("four-way")
        assert config.paths_for_level(0) == 10000
        assert config.paths_for_level(9) == 10000
        assert config.paths_for_level(10) == 5000
        assert config.paths_for_level(12) == 1250

    def test_paths_schedule_never_below_two(self):
        config = build_config("four-way", {"paths": "8", "levels": "0..20"})
        assert config.paths_for_level(20) == 2

    def test_explicit_path_list(self):
        config = build_config("four-way", {"paths": "400,200", "levels": "3..6"})
        assert [config.paths_for_level(l) for l in config.levels] == [400, 200, 200, 200]

    def test_two_way_defaults(self):
        config = build_config("two-way")
        assert [p.name for p in config.precisions] == ["bf16", "fp16", "fp22", "fp32"]
        assert config.approx_name == "cubic:64"
        assert config.levels == list(range(4, 13))

    def test_density_and_step_errors_defaults(self):
        assert build_config("density").approx_name == "linear:8"
        assert build_config("step-errors").levels == [8]

    def test_exact_approx(self):
        config = build_config("four-way", {"approx": "exact"})
        assert config.approx is None
        assert config.approx_name == "exact"

    def test_model(self):
        config = build_config("estimate", {"mu": 0.1, "sigma": 0.3})
        assert config.model.mu == 0.1
        assert config.model.sigma == 0.3
        assert config.model.x0 == 1.0

    def test_default_cost_model(self):
        assert build_config("speedup").cost_model == CostModel()


class TestPrecedence:
    """defaults < config file < flags"""

    def test_config_file_overrides_defaults(self, write_lines):
        path = write_lines("run.conf", "# desk settings", "", "precision = bf16", "batch_size=128", "kahan=yes")
        config = build_config("four-way", config_file=path)
        assert config.precision.name == "bf16"
        assert config.batch_size == 128
        assert config.kahan is True

    def test_flags_override_config_file(self, write_lines):
        path = write_lines("run.conf", "precision=bf16", "seed=7")
        config = build_config("four-way", {"precision": "fp32", "seed": None}, config_file=path)
        assert config.precision.name == "fp32"
        assert config.seed == 7

    def test_config_file_overrides_subcommand_defaults(self, write_lines):
        path = write_lines("run.conf", "levels=5..6")
        assert build_config("two-way", config_file=path).levels == [5, 6]

    def test_unknown_key_in_file(self, write_lines):
        with pytest.raises(ConfigError):
            load_config_file(write_lines("run.conf", "colour=blue"))

    def test_malformed_line(self, write_lines):
        with pytest.raises(ConfigError):
            load_config_file(write_lines("run.conf", "precision fp16"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(str(tmp_path / "absent.conf"))

    def test_unknown_override(self):
        with pytest.raises(ConfigError):
            merged_settings("four-way", {"colour": "blue"})

    def test_unknown_subcommand(self):
        with pytest.raises(ConfigError):
            merged_settings("sideways")


class TestValidation:
    """build_config rejects bad settings"""

    @pytest.mark.parametrize("overrides", [
        {"precision": "fp8"},
        {"precision": "custom:40"},
        {"approx": "linear:12"},
        {"levels": "5..2"},
        {"concurrency": 0},
        {"batch_size": 0},
        {"eps": 0.0},
        {"pilot_paths": 1},
        {"bins": 0},
        {"progress_style": "verbose"},
        {"horizon": -1.0},
        {"x0": float("inf")},
        {"paths": "1"},
        {"seed": "abc"},
    ])
    def test_rejected(self, overrides):
        with pytest.raises(ConfigError):
            build_config("four-way", overrides)

    def test_step_errors_needs_enough_samples(self):
        with pytest.raises(ConfigError):
            build_config("step-errors", {"samples": 9999})
        assert build_config("step-errors", {"samples": 10000}).samples == 10000

    def test_estimate_levels_start_at_zero(self):
        with pytest.raises(ConfigError):
            build_config("estimate", {"levels": "2..5"})

    def test_max_level(self):
        config = build_config("estimate", {"max_level": 3})
        assert config.levels == [0, 1, 2, 3]
        assert config.max_level == 3
        with pytest.raises(ConfigError):
            build_config("estimate", {"max_level": -1})

    def test_missing_stats_file(self, tmp_path):
        with pytest.raises(ConfigError):
            build_config("speedup", {"stats": str(tmp_path / "none.csv")})


class TestCostModelFile:
    """load_cost_model"""

    def test_defaults(self):
        assert load_cost_model() == CostModel()

    def test_overrides(self, write_lines):
        path = write_lines("costs.conf", "cycles-exact-rng = 7", "kahan_overhead_factor=2")
        cm = load_cost_model(path)
        assert cm.cycles_exact_rng == 7.0
        assert cm.kahan_overhead_factor == 2.0
        assert cm.cycles_approx_rng_half == 0.25

    def test_used_by_build_config(self, write_lines):
        path = write_lines("costs.conf", "cycles_exact_rng=7")
        assert build_config("speedup", {"cost_model": path}).cost_model.cycles_exact_rng == 7.0

    @pytest.mark.parametrize("line", ["cycles_exact_rng=fast", "cycles_exact_rng=0", "per_step_arithmetic=-1",
                                      "cycles_everything=1"])
    def test_rejected(self, write_lines, line):
        with pytest.raises(ConfigError):
            load_cost_model(write_lines("costs.conf", line))
