"""Pipeline configuration: TOML file, dotted-key overrides and stage hashes."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import tomli
import tomli_w

from .errors import ConfigError
from .evaluator import EvalProtocol
from .occlusion import OcclusionSpec
from .ranker import DEFAULT_EMI_COST_BOUND, DEFAULT_MAX_BINS, DEFAULT_MIN_ENTROPY, DEFAULT_MIN_VALID_FRACTION
from .tree import TreeParams
from .validators import MIN_CLASS_SAMPLES, TRANSFORMS

# keys that never change results and are left out of every hash
RUNTIME_KEYS = ("output_dir", "workers")


@dataclass
class InputSpec:
    path: str
    label: str | None = None
    dataset_tag: str = "default"
    name: str | None = None
    format: str = "pcap"
    flow_labels: str | None = None

    @property
    def source(self) -> str:
        return self.name or self.path


@dataclass
class DissectorConfig:
    mode: str = "builtin"
    binary: str = "tshark"
    fields: list[str] = field(default_factory=list)
    extra_args: list[str] = field(default_factory=list)


@dataclass
class EncodeConfig:
    min_valid_fraction: float = 0.05


@dataclass
class RankerConfig:
    k: int = 10
    min_entropy: float = DEFAULT_MIN_ENTROPY
    min_valid_fraction: float = DEFAULT_MIN_VALID_FRACTION
    max_bins: int = DEFAULT_MAX_BINS
    cost_bound: int = DEFAULT_EMI_COST_BOUND
    denylist: str | None = None


@dataclass
class TaxonomyConfig:
    assignment: str | None = None


@dataclass
class ValidatorConfig:
    kind: str = "adjacent_diff"
    dataset_pair: list[str] | None = None
    min_samples: int = MIN_CLASS_SAMPLES
    symmetric: bool = False


@dataclass
class OcclusionEntry:
    name: str
    strategy: str
    targets: list[str]

    def spec(self, seed: int) -> OcclusionSpec:
        return OcclusionSpec(self.strategy, tuple(self.targets), seed)


@dataclass
class EvaluatorConfig:
    max_flows_per_class: int = 500
    per_dataset: bool = False
    repeats: int = 3
    min_flows_per_class: int = 10
    min_samples_leaf: int = 2
    dataset: str = "dataset"

    def protocol(self, seed: int) -> EvalProtocol:
        return EvalProtocol(self.max_flows_per_class, self.per_dataset, (8, 1, 1), self.repeats, seed,
                            self.min_flows_per_class)

    def tree_params(self) -> TreeParams:
        return TreeParams(None, self.min_samples_leaf)


DEFAULT_OCCLUSIONS = [
    {"name": "zero_SII", "strategy": "zero", "targets": ["SII"]},
    {"name": "random_SII", "strategy": "random", "targets": ["SII"]},
]


@dataclass
class PipelineConfig:
    inputs: list[InputSpec]
    seed: int = 0
    output_dir: str = "out"
    workers: int = 1
    dissector: DissectorConfig = field(default_factory=DissectorConfig)
    encode: EncodeConfig = field(default_factory=EncodeConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    taxonomy: TaxonomyConfig = field(default_factory=TaxonomyConfig)
    validator: ValidatorConfig = field(default_factory=ValidatorConfig)
    occlusion: list[OcclusionEntry] = field(
        default_factory=lambda: [OcclusionEntry(**d) for d in DEFAULT_OCCLUSIONS])
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)

    def to_dict(self) -> dict:
        return _drop_none(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = copy.deepcopy(d)
        try:
            inputs = [InputSpec(**i) for i in d.pop("inputs", [])]
            sections = {
                "dissector": DissectorConfig, "encode": EncodeConfig, "ranker": RankerConfig,
                "taxonomy": TaxonomyConfig, "validator": ValidatorConfig, "evaluator": EvaluatorConfig,
            }
            kwargs = {k: sections[k](**d.pop(k)) for k in list(sections) if k in d}
            if "occlusion" in d:
                kwargs["occlusion"] = [OcclusionEntry(**o) for o in d.pop("occlusion")]
            cfg = cls(inputs=inputs, **kwargs, **d)
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.inputs:
            raise ConfigError("at least one input is required")
        sources = [i.source for i in self.inputs]
        if len(set(sources)) != len(sources):
            raise ConfigError("input sources must be unique (set 'name' to disambiguate)")
        for i in self.inputs:
            if i.format not in ("pcap", "ndjson", "csv"):
                raise ConfigError(f"input {i.path}: unknown format {i.format!r}")
            if i.label is None and i.flow_labels is None:
                raise ConfigError(f"input {i.path}: needs a label or a flow_labels file")
        if self.dissector.mode not in ("builtin", "external"):
            raise ConfigError(f"dissector.mode must be 'builtin' or 'external', got {self.dissector.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.ranker.k < 1 or self.ranker.max_bins < 2:
            raise ConfigError("ranker.k must be >= 1 and ranker.max_bins >= 2")
        if self.validator.kind not in TRANSFORMS:
            raise ConfigError(f"validator.kind must be one of {TRANSFORMS}")
        if self.validator.dataset_pair is not None and len(self.validator.dataset_pair) != 2:
            raise ConfigError("validator.dataset_pair must name exactly two tags")
        names = [o.name for o in self.occlusion]
        if len(set(names)) != len(names) or "baseline" in names:
            raise ConfigError("occlusion names must be unique and not 'baseline'")
        try:
            for o in self.occlusion:
                o.spec(self.seed)
            self.evaluator.protocol(self.seed)
            self.evaluator.tree_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self, sections: tuple[str, ...] | None = None) -> str:
        """sha256 over the canonical JSON of the config (or of some top-level keys)."""
        d = {k: v for k, v in self.to_dict().items() if k not in RUNTIME_KEYS}
        if sections is not None:
            d = {k: d.get(k) for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _drop_none(obj):
    # TOML has no null; absent keys fall back to defaults on reload
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` with ``value`` read as a TOML value, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = copy.deepcopy(d)
    for text in overrides:
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a table")
            node = nxt
        node[path[-1]] = value
    return d


def load_config(path: str | Path | None, overrides: Sequence[str] = (),
                inputs: Sequence[dict] = ()) -> PipelineConfig:
    """Read a TOML config, add extra inputs, apply overrides and resolve paths.

    Paths inside the file are relative to the file; extra inputs are relative
    to the working directory.
    """
    d: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            d = tomli.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = path.resolve().parent
    d = apply_overrides(d, list(overrides))
    if "output_dir" in d and not Path(d["output_dir"]).is_absolute():
        d["output_dir"] = str(base / d["output_dir"])
    for i in d.get("inputs", []):
        for k in ("path", "flow_labels"):
            if k in i and not Path(i[k]).is_absolute():
                i[k] = str(base / i[k])
    for section, key in (("taxonomy", "assignment"), ("ranker", "denylist")):
        v = d.get(section, {}).get(key)
        if v and not Path(v).is_absolute():
            d[section][key] = str(base / v)
    for i in inputs:
        i = dict(i)
        i["path"] = str(Path(i["path"]).resolve())
        d.setdefault("inputs", []).append(i)
    return PipelineConfig.from_dict(d)


def write_config(cfg: PipelineConfig | dict, path: str | Path) -> None:
    d = cfg.to_dict() if isinstance(cfg, PipelineConfig) else _drop_none(cfg)
    Path(path).write_text(tomli_w.dumps(d))
