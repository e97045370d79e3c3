"""Conversion of raw config/CLI dicts into the typed schemas."""

from __future__ import annotations

from typing import Any, Dict, Type, TypeVar

from pydantic import BaseModel, ValidationError

from src.errors import ConfigError
from src.io_schemas import NetworkConfig, OptimizerConfig, SearchParameter, SearchSpace, SplitSpec

ModelT = TypeVar("ModelT", bound=BaseModel)


def _validate(model: Type[ModelT], raw: Dict[str, Any], strict: bool) -> ModelT:
    """Build ``model`` from ``raw``.

    Args:
        model: Target schema class
        raw: Dictionary from YAML or CLI flags; unknown keys are ignored
        strict: If True, any invalid field raises ConfigError. If False,
            invalid fields fall back to the schema defaults.

    Returns:
        Validated model instance
    """
    known = {k: v for k, v in (raw or {}).items() if k in model.model_fields and v is not None}
    try:
        return model(**known)
    except ValidationError as e:
        if strict:
            raise ConfigError(f"invalid {model.__name__}: {e}") from e
        bad = {str(err["loc"][0]) for err in e.errors() if err["loc"]}
        try:
            return model(**{k: v for k, v in known.items() if k not in bad})
        except ValidationError as e2:
            raise ConfigError(f"invalid {model.__name__}: {e2}") from e2


def validate_network_config(raw: Dict[str, Any], strict: bool = True) -> NetworkConfig:
    return _validate(NetworkConfig, raw, strict)


def validate_optimizer_config(raw: Dict[str, Any], strict: bool = True) -> OptimizerConfig:
    return _validate(OptimizerConfig, raw, strict)


def validate_split_spec(raw: Dict[str, Any], strict: bool = True) -> SplitSpec:
    return _validate(SplitSpec, raw, strict)


def validate_search_space(raw: Dict[str, Any], strict: bool = True) -> SearchSpace:
    """Search space from the YAML mapping ``{name: {values: [...], default: x}}``.

    Entries are put in table row order whatever the mapping order. In lenient
    mode a malformed entry falls back to the corresponding row of the standard
    space.
    """
    if not raw:
        return SearchSpace.standard()
    standard = SearchSpace.standard()
    params = []
    for name, entry in raw.items():
        try:
            params.append(SearchParameter(name=name, **(entry or {})))
        except (ValidationError, TypeError) as e:
            if strict:
                raise ConfigError(f"invalid search parameter {name!r}: {e}") from e
            try:
                params.append(standard.get(name))
            except KeyError:
                continue
    try:
        return SearchSpace(parameters=params)
    except ValidationError as e:
        raise ConfigError(f"invalid search space: {e}") from e
