"""Pipeline configuration, environment presets and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .descriptor import DescriptorConfig
from .instances import ClusterConfig
from .keypoints import KeypointConfig
from .retrieval import MatchConfig
from .verification import VerifyConfig

ENV_PRESETS = {
    "outdoor": {"z_a": 4.5, "gt_threshold": 20.0},
    "indoor": {"z_a": 3.5, "gt_threshold": 4.0},
}


@dataclass(frozen=True)
class PipelineConfig:
    env: str = "outdoor"
    keypoint: KeypointConfig = field(default_factory=KeypointConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    gt_threshold: float = 20.0

    @classmethod
    def preset(cls, env: str = "outdoor", **overrides) -> "PipelineConfig":
        if env not in ENV_PRESETS:
            raise ValueError(f"unknown environment {env!r}; expected indoor or outdoor")
        values = dict(ENV_PRESETS[env])
        values.update(overrides)
        return cls().replace(env=env, **values)

    def replace(self, **flat) -> "PipelineConfig":
        """Copy with fields overridden by their flat names (``z_a``, ``num_candidates``, ...)."""
        groups: dict[str, dict] = {}
        top = {}
        for key, value in flat.items():
            key = key.replace("-", "_")
            if key in ("env", "gt_threshold"):
                top[key] = value
                continue
            if key not in FIELD_GROUP:
                raise KeyError(f"unknown configuration key {key!r}")
            for g in _SHARED.get(key, (FIELD_GROUP[key],)):
                groups.setdefault(g, {})[key] = value
        changes = {g: dataclasses.replace(getattr(self, g), **kv) for g, kv in groups.items()}
        return dataclasses.replace(self, **changes, **top)

    def flat(self) -> dict[str, object]:
        out: dict[str, object] = {"env": self.env, "gt_threshold": self.gt_threshold}
        for group in GROUPS:
            for f in dataclasses.fields(getattr(self, group)):
                out[f.name] = getattr(getattr(self, group), f.name)
        return out


GROUPS = ("keypoint", "cluster", "descriptor", "match", "verify")
FIELD_GROUP = {
    f.name: g
    for g, cls in zip(GROUPS, (KeypointConfig, ClusterConfig, DescriptorConfig, MatchConfig, VerifyConfig))
    for f in dataclasses.fields(cls)
}
# sigma_floor exists in two groups; the flat key sets both
_SHARED = {"sigma_floor": ("keypoint", "verify")}
# command-line spellings accepted in config files
ALIASES = {"candidates": "num_candidates", "label_match": "require_label_match"}


def _parse_value(key: str, text: str):
    text = text.strip()
    default = PipelineConfig().flat().get(key.replace("-", "_"))
    low = text.lower()
    if low in ("none", "null", "off") and key.replace("-", "_") in ("exclusion", "consensus_tol"):
        return None
    if isinstance(default, bool):
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float) or default is None:
        return math.inf if low in ("inf", "infinity") else float(text)
    return text


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in cfg.flat().items():
        lines.append(f"{key.replace('_', '-')} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        norm = key.replace("-", "_")
        norm = ALIASES.get(norm, norm)
        if norm not in FIELD_GROUP and norm not in ("env", "gt_threshold"):
            raise ValueError(f"config line {n}: unknown key {key!r}")
        out[norm] = _parse_value(norm, value)
    return out
