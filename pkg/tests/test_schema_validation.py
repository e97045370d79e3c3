"""Unit tests for schema validation."""

import pytest

from src.errors import ConfigError
from src.io_schemas import NetworkConfig, OptimizerConfig, SearchSpace, SplitSpec
from src.schema_validator import (
    validate_network_config,
    validate_optimizer_config,
    validate_search_space,
    validate_split_spec,
)
from src.utils import load_config


def test_validate_network_config_valid():
    """Test validating a network section with unknown keys mixed in."""
    config = validate_network_config({"num_convs": 2, "hidden_units": 200, "comment": "ignored", "dropout_p": None})
    assert isinstance(config, NetworkConfig)
    assert config.num_convs == 2
    assert config.hidden_units == 200
    assert config.dropout_p == 0.5


def test_validate_network_config_strict_rejects():
    """Test strict mode raises on an out-of-range value."""
    with pytest.raises(ConfigError):
        validate_network_config({"num_convs": 7})


def test_validate_network_config_lenient_falls_back():
    """Test lenient mode drops invalid fields and keeps the rest."""
    config = validate_network_config({"num_convs": 7, "hidden_units": 300}, strict=False)
    assert config.num_convs == 1
    assert config.hidden_units == 300


def test_validate_optimizer_config():
    """Test optimizer bounds."""
    assert validate_optimizer_config({"alpha": 0.1, "batch_size": 50}) == OptimizerConfig(alpha=0.1, batch_size=50)
    with pytest.raises(ConfigError):
        validate_optimizer_config({"mu": 1.0})
    with pytest.raises(ConfigError):
        validate_optimizer_config({"alpha": 0.0})


def test_validate_split_spec_sum():
    """Test split fractions must sum to one."""
    assert validate_split_spec({"train_frac": 0.5, "val_frac": 0.25, "test_frac": 0.25}).train_frac == 0.5
    with pytest.raises(ConfigError):
        validate_split_spec({"train_frac": 0.7, "val_frac": 0.2, "test_frac": 0.2})
    assert validate_split_spec({}) == SplitSpec()


def test_validate_search_space_empty_is_standard():
    """Test a missing section gives the standard four-parameter space."""
    assert validate_search_space({}) == SearchSpace.standard()


def test_validate_search_space_uses_table_order():
    """Test entries follow the table row order, not the mapping order."""
    space = validate_search_space({
        "hidden_units": {"values": [10, 20], "default": 10},
        "num_convs": {"values": [0, 1], "default": 1},
    })
    assert [p.name for p in space.parameters] == ["num_convs", "hidden_units"]
    assert space.defaults() == {"hidden_units": 10, "num_convs": 1}


def test_validate_search_space_default_not_in_values():
    """Test a default outside its value list is rejected in strict mode."""
    with pytest.raises(ConfigError):
        validate_search_space({"hidden_units": {"values": [10, 20], "default": 30}})


def test_validate_search_space_lenient_falls_back():
    """Test lenient mode replaces a bad entry and drops an unknown one."""
    space = validate_search_space(
        {
            "hidden_units": {"values": [10, 20], "default": 30},
            "learning_rate": {"values": [0.1], "default": 0.1},
        },
        strict=False,
    )
    assert [p.name for p in space.parameters] == ["hidden_units"]
    assert space.get("hidden_units").values == [100, 200, 300, 400]


def test_shipped_config_validates():
    """Test the repository config parses into every schema."""
    cfg = load_config("config/config.yaml")
    assert validate_network_config(cfg["network"]) == NetworkConfig()
    assert validate_optimizer_config(cfg["optimizer"]) == OptimizerConfig()
    assert validate_split_spec(cfg["split"]) == SplitSpec()
    assert validate_search_space(cfg["search_space"]) == SearchSpace.standard()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
