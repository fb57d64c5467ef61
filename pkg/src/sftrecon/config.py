"""Run configuration: schema, validation, presets.

Configs are JSON. Unknown keys are rejected with the full key path, wrong
types name the offending field, and credential material is refused
outright: a model entry carries only `credential_ref`, the NAME of an
environment variable, never a secret value.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .assembly import MIX_MODES, MixPlan, RECORD_FORMATS
from .backends import (
    ELICIT_SAMPLING,
    JUDGE_SAMPLING,
    RESPONSE_SAMPLING,
    ModelSpec,
    SamplingParams,
)
from .errors import ConfigError

CONFIG_VERSION = 1

CLASSIFY_METHODS = ("heuristic", "model")

PRESET_SINGLE_SINGLE = "single-single"
PRESET_SINGLE_MULTI = "single-multi-filtered"
PRESET_COMMITTEE_MULTI = "committee-multi-filtered"
PRESETS = (PRESET_SINGLE_SINGLE, PRESET_SINGLE_MULTI, PRESET_COMMITTEE_MULTI)

# Keys that smell like secret values. Secrets live in the environment and
# configs refer to them by variable name only.
_SECRET_KEYS = ("api_key", "apikey", "token", "secret", "password", "credentials")

_MODEL_KEYS = {
    "model_id",
    "endpoint_kind",
    "endpoint_address",
    "template_family",
    "credential_ref",
    "max_concurrent",
    "requests_per_minute",
}
_SAMPLING_KEYS = {"temperature", "top_p", "max_new_tokens", "stop_sequences"}
_MIX_KEYS = {"domain_fraction", "mode", "total_size"}
_TOP_KEYS = {
    "config_version",
    "seed",
    "run_dir",
    "n_instructions",
    "samples_per_model",
    "oversample",
    "judging_enabled",
    "base_model",
    "committee",
    "sampling",
    "mix",
    "domain_path",
    "domain_format",
    "export_format",
    "classify_method",
    "templates_path",
}


def _check_keys(data: dict, allowed: set, context: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key {context}{key!r}")


def _type_name(value) -> str:
    return type(value).__name__


def _get_int(data: dict, key: str, default: int, context: str, minimum: int | None = None) -> int:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{context}{key} must be an integer, got {_type_name(value)}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{context}{key} must be >= {minimum}, got {value}")
    return value


def _get_float(data: dict, key: str, default: float, context: str) -> float:
    value = data.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}{key} must be a number, got {_type_name(value)}")
    return float(value)


def _get_bool(data: dict, key: str, default: bool, context: str) -> bool:
    value = data.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{context}{key} must be a boolean, got {_type_name(value)}")
    return value


def _get_str(data: dict, key: str, default: str | None, context: str) -> str | None:
    value = data.get(key, default)
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{context}{key} must be a string, got {_type_name(value)}")
    return value


def parse_model_spec(data: dict, context: str) -> ModelSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be an object")
    context_dot = f"{context}."
    for key in data:
        if key.casefold() in _SECRET_KEYS:
            raise ConfigError(
                f"{context_dot}{key} looks like a secret; configs must reference "
                "credentials by environment variable name via credential_ref"
            )
    _check_keys(data, _MODEL_KEYS, context_dot)
    if "model_id" not in data or "endpoint_kind" not in data or "endpoint_address" not in data:
        raise ConfigError(
            f"{context} needs model_id, endpoint_kind, and endpoint_address"
        )
    spec = ModelSpec(
        model_id=_get_str(data, "model_id", None, context_dot) or "",
        endpoint_kind=_get_str(data, "endpoint_kind", None, context_dot) or "",
        endpoint_address=_get_str(data, "endpoint_address", None, context_dot) or "",
        template_family=_get_str(data, "template_family", "generic", context_dot) or "generic",
        credential_ref=_get_str(data, "credential_ref", None, context_dot),
        max_concurrent=_get_int(data, "max_concurrent", 4, context_dot, minimum=1),
        requests_per_minute=(
            _get_int(data, "requests_per_minute", 1, context_dot, minimum=1)
            if data.get("requests_per_minute") is not None
            else None
        ),
    )
    spec.validate()
    return spec


def _parse_sampling(data: dict, defaults: SamplingParams, context: str) -> SamplingParams:
    if not isinstance(data, dict):
        raise ConfigError(f"{context} must be an object")
    context_dot = f"{context}."
    _check_keys(data, _SAMPLING_KEYS, context_dot)
    stop = data.get("stop_sequences", list(defaults.stop_sequences))
    if not isinstance(stop, list) or not all(isinstance(s, str) for s in stop):
        raise ConfigError(f"{context_dot}stop_sequences must be a list of strings")
    params = SamplingParams(
        temperature=_get_float(data, "temperature", defaults.temperature, context_dot),
        top_p=_get_float(data, "top_p", defaults.top_p, context_dot),
        max_new_tokens=_get_int(data, "max_new_tokens", defaults.max_new_tokens, context_dot, minimum=1),
        stop_sequences=tuple(stop),
    )
    params.validate()
    return params


def _sampling_to_dict(params: SamplingParams) -> dict:
    return {
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_new_tokens": params.max_new_tokens,
        "stop_sequences": list(params.stop_sequences),
    }


def _model_to_dict(spec: ModelSpec) -> dict:
    return {
        "model_id": spec.model_id,
        "endpoint_kind": spec.endpoint_kind,
        "endpoint_address": spec.endpoint_address,
        "template_family": spec.template_family,
        "credential_ref": spec.credential_ref,
        "max_concurrent": spec.max_concurrent,
        "requests_per_minute": spec.requests_per_minute,
    }


@dataclass
class RunConfig:
    base_model: ModelSpec
    committee: list[ModelSpec] = field(default_factory=list)
    seed: int = 0
    run_dir: Path | None = None
    n_instructions: int = 100_000
    samples_per_model: int = 3
    oversample: float = 1.5
    judging_enabled: bool = True
    elicit_sampling: SamplingParams = ELICIT_SAMPLING
    response_sampling: SamplingParams = RESPONSE_SAMPLING
    judge_sampling: SamplingParams = JUDGE_SAMPLING
    mix_plan: MixPlan = field(default_factory=MixPlan)
    domain_path: Path | None = None
    domain_format: str = "pair"
    export_format: str = "pair"
    classify_method: str = "heuristic"
    templates_path: Path | None = None
    preset: str | None = None

    @property
    def full_committee(self) -> list[ModelSpec]:
        """All responder/judge models; the base model is always member 0."""
        return [self.base_model] + list(self.committee)

    def validate(self) -> None:
        self.base_model.validate()
        for spec in self.committee:
            spec.validate()
        seen = set()
        for spec in self.full_committee:
            if spec.model_id in seen:
                raise ConfigError(f"duplicate committee model_id {spec.model_id!r}")
            seen.add(spec.model_id)
        if self.n_instructions < 1:
            raise ConfigError("n_instructions must be >= 1")
        if self.samples_per_model < 1:
            raise ConfigError("samples_per_model must be >= 1")
        if self.oversample < 1.0:
            raise ConfigError("oversample must be >= 1.0")
        self.mix_plan.validate()
        if self.domain_format not in RECORD_FORMATS:
            raise ConfigError(f"domain_format must be one of {RECORD_FORMATS}")
        if self.export_format not in RECORD_FORMATS:
            raise ConfigError(f"export_format must be one of {RECORD_FORMATS}")
        if self.classify_method not in CLASSIFY_METHODS:
            raise ConfigError(f"classify_method must be one of {CLASSIFY_METHODS}")
        if self.domain_path is None and self.mix_plan.domain_fraction > 0:
            raise ConfigError(
                "domain_path is required when mix.domain_fraction > 0"
            )

    def to_dict(self) -> dict:
        return {
            "config_version": CONFIG_VERSION,
            "seed": self.seed,
            "run_dir": str(self.run_dir) if self.run_dir else None,
            "n_instructions": self.n_instructions,
            "samples_per_model": self.samples_per_model,
            "oversample": self.oversample,
            "judging_enabled": self.judging_enabled,
            "base_model": _model_to_dict(self.base_model),
            "committee": [_model_to_dict(spec) for spec in self.committee],
            "sampling": {
                "elicit": _sampling_to_dict(self.elicit_sampling),
                "response": _sampling_to_dict(self.response_sampling),
                "judge": _sampling_to_dict(self.judge_sampling),
            },
            "mix": {
                "domain_fraction": self.mix_plan.domain_fraction,
                "mode": self.mix_plan.mode,
                "total_size": self.mix_plan.total_size,
            },
            "domain_path": str(self.domain_path) if self.domain_path else None,
            "domain_format": self.domain_format,
            "export_format": self.export_format,
            "classify_method": self.classify_method,
            "templates_path": str(self.templates_path) if self.templates_path else None,
            "preset": self.preset,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a validated RunConfig from parsed JSON.

    Relative domain/template paths resolve against base_dir (the config
    file's directory); run_dir is taken as given.
    """
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(data, _TOP_KEYS | {"preset"}, "")
    version = _get_int(data, "config_version", CONFIG_VERSION, "")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config_version {version} is not supported (expected {CONFIG_VERSION})")
    if "base_model" not in data:
        raise ConfigError("base_model is required")

    committee_data = data.get("committee", [])
    if not isinstance(committee_data, list):
        raise ConfigError("committee must be a list of model objects")

    sampling_data = data.get("sampling", {})
    if not isinstance(sampling_data, dict):
        raise ConfigError("sampling must be an object")
    _check_keys(sampling_data, {"elicit", "response", "judge"}, "sampling.")

    mix_data = data.get("mix", {})
    if not isinstance(mix_data, dict):
        raise ConfigError("mix must be an object")
    _check_keys(mix_data, _MIX_KEYS, "mix.")
    total_size = mix_data.get("total_size")
    if total_size is not None:
        total_size = _get_int(mix_data, "total_size", 1, "mix.", minimum=1)

    def resolve(value: str | None) -> Path | None:
        if value is None:
            return None
        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return path

    run_dir = _get_str(data, "run_dir", None, "")
    preset = _get_str(data, "preset", None, "")
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")

    config = RunConfig(
        base_model=parse_model_spec(data["base_model"], "base_model"),
        committee=[
            parse_model_spec(entry, f"committee[{index}]")
            for index, entry in enumerate(committee_data)
        ],
        seed=_get_int(data, "seed", 0, ""),
        run_dir=Path(run_dir) if run_dir else None,
        n_instructions=_get_int(data, "n_instructions", 100_000, ""),
        samples_per_model=_get_int(data, "samples_per_model", 3, ""),
        oversample=_get_float(data, "oversample", 1.5, ""),
        judging_enabled=_get_bool(data, "judging_enabled", True, ""),
        elicit_sampling=_parse_sampling(
            sampling_data.get("elicit", {}), ELICIT_SAMPLING, "sampling.elicit"
        ),
        response_sampling=_parse_sampling(
            sampling_data.get("response", {}), RESPONSE_SAMPLING, "sampling.response"
        ),
        judge_sampling=_parse_sampling(
            sampling_data.get("judge", {}), JUDGE_SAMPLING, "sampling.judge"
        ),
        mix_plan=MixPlan(
            domain_fraction=_get_float(mix_data, "domain_fraction", 0.17, "mix."),
            mode=_get_str(mix_data, "mode", "ratio", "mix.") or "ratio",
            total_size=total_size,
        ),
        domain_path=resolve(_get_str(data, "domain_path", None, "")),
        domain_format=_get_str(data, "domain_format", "pair", "") or "pair",
        export_format=_get_str(data, "export_format", "pair", "") or "pair",
        classify_method=_get_str(data, "classify_method", "heuristic", "") or "heuristic",
        templates_path=resolve(_get_str(data, "templates_path", None, "")),
    )
    if preset is not None:
        config = apply_preset(config, preset)
    config.validate()
    return config


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return parse_config(data, base_dir=path.parent)


def apply_preset(config: RunConfig, preset: str) -> RunConfig:
    """Return a copy of `config` rewritten for an ablation arm.

    single-single: base model only, one sample, judging bypassed.
    single-multi-filtered: base model only, multiple samples, base judges.
    committee-multi-filtered: full committee, multiple samples, all judge.
    """
    if preset == PRESET_SINGLE_SINGLE:
        updated = dataclasses.replace(
            config, committee=[], samples_per_model=1, judging_enabled=False
        )
    elif preset == PRESET_SINGLE_MULTI:
        updated = dataclasses.replace(
            config,
            committee=[],
            samples_per_model=max(config.samples_per_model, 2),
            judging_enabled=True,
        )
    elif preset == PRESET_COMMITTEE_MULTI:
        if not config.committee:
            raise ConfigError(
                "committee-multi-filtered needs at least one committee model "
                "besides the base model"
            )
        updated = dataclasses.replace(
            config,
            samples_per_model=max(config.samples_per_model, 2),
            judging_enabled=True,
        )
    else:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    updated.preset = preset
    return updated
