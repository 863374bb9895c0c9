"""
Experiment configuration: one INI file per experiment.

Sections mirror the module configs (``experiment``, ``network``, ``data``,
``train``, ``retrain``, ``prune``, ``eval``). Unknown sections or keys are
rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import net as netlib
from .errors import PruneError
from .prune import STRATEGIES, PrunePlan
from .train import TrainConfig


class ConfigError(PruneError, ValueError):
    """The experiment file is malformed."""


@dataclass(frozen=True)
class DataSettings:
    source: str = "synthetic"
    manifest: str = ""
    width: int = 128
    height: int = 128
    curve_count: int = 8
    thickness_min: float = 2.0
    thickness_max: float = 6.0
    noise_sigma: float = 0.05
    train_images: int = 8
    val_images: int = 3
    train_per_class: int = 400
    val_per_class: int = 300


@dataclass(frozen=True)
class RetrainSettings:
    lr_factor: float = 0.1
    budget_fraction: float = 0.25


@dataclass(frozen=True)
class PruneSettings:
    strategies: tuple = ("loss-greedy", "sparsity")
    plans: tuple = ("N6", "N7")
    batch_count: int = 8
    batch_size: int = 256
    seed: int = 0
    include_l2: bool = False
    random_seeds: int = 10


@dataclass(frozen=True)
class EvalSettings:
    threshold: float = 0.5
    repetitions: int = 3
    image_size: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: Path = Path("out")
    network: netlib.NetworkConfig = field(default_factory=lambda: netlib.NetworkConfig.named("N"))
    data: DataSettings = DataSettings()
    train: TrainConfig = TrainConfig()
    retrain: RetrainSettings = RetrainSettings()
    prune: PruneSettings = PruneSettings()
    eval: EvalSettings = EvalSettings()
    source_text: str = ""

    def plan(self, plan_name, strategy):
        return PrunePlan(
            parse_keep(plan_name), strategy, self.prune.batch_count, self.prune.batch_size,
            self.prune.seed, self.prune.include_l2, self.train.lam,
        )

    def section_hashes(self):
        sections = {
            "network": self.network.to_dict(),
            "data": asdict(self.data),
            "train": asdict(self.train),
            "retrain": asdict(self.retrain),
            "prune": asdict(self.prune),
            "eval": asdict(self.eval),
        }
        hashes = {k: _sha(json.dumps(v, sort_keys=True)) for k, v in sections.items()}
        hashes["experiment"] = _sha(json.dumps(hashes, sort_keys=True) + f"|{self.name}|{self.seed}")
        return hashes

    def provenance(self):
        """``key -> value`` lines recorded at the top of every output CSV."""
        return {"experiment": self.name, "seed": self.seed,
                "config_sha256": self.section_hashes()["experiment"]}


def _sha(text):
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_keep(text):
    """A named network (``N6``) or explicit counts ``65/60/30/110``."""
    text = text.strip()
    if text in netlib.NAMED_CONFIGS:
        return netlib.NAMED_CONFIGS[text]
    try:
        counts = tuple(int(v) for v in text.replace(",", "/").split("/"))
    except ValueError:
        raise ConfigError(f"bad plan {text!r}: use a network name or c1/c2/c3/fc4 counts") from None
    if len(counts) != len(netlib.PRUNABLE):
        raise ConfigError(f"plan {text!r} needs {len(netlib.PRUNABLE)} counts")
    return counts


def plan_label(text):
    return text.strip().replace("/", "-").replace(",", "-")


_SCHEMA = {
    "experiment": {"name": str, "seed": int, "output_dir": str},
    "network": {"name": str, "map_counts": str, "patch_size": int},
    "data": {f: type(getattr(DataSettings(), f)) for f in DataSettings.__dataclass_fields__},
    "train": {f: type(getattr(TrainConfig(), f)) for f in TrainConfig.__dataclass_fields__},
    "retrain": {f: float for f in RetrainSettings.__dataclass_fields__},
    "prune": {"strategies": tuple, "plans": tuple, "batch_count": int, "batch_size": int,
              "seed": int, "include_l2": bool, "random_seeds": int},
    "eval": {"threshold": float, "repetitions": int, "image_size": int},
}


def _convert(parser, section, key, kind):
    raw = parser.get(section, key)
    try:
        if kind is bool:
            return parser.getboolean(section, key)
        if kind is tuple:
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from None


def parse_config(text, base_dir="."):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _convert(parser, section, key, _SCHEMA[section][key])

    exp = values.get("experiment", {})
    net_v = values.get("network", {})
    try:
        patch = net_v.get("patch_size", 32)
        if "map_counts" in net_v:
            if "name" in net_v:
                raise ConfigError("[network] takes either name or map_counts, not both")
            network = netlib.NetworkConfig(parse_keep(net_v["map_counts"]), patch_size=patch)
        else:
            network = netlib.NetworkConfig.named(net_v.get("name", "N"), patch_size=patch)
        data = DataSettings(**values.get("data", {}))
        train = TrainConfig(**values.get("train", {}))
        retrain = RetrainSettings(**values.get("retrain", {}))
        prune = PruneSettings(**values.get("prune", {}))
        evals = EvalSettings(**values.get("eval", {}))
    except PruneError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if data.source not in ("synthetic", "manifest"):
        raise ConfigError("[data] source must be 'synthetic' or 'manifest'")
    if data.source == "manifest" and not data.manifest:
        raise ConfigError("[data] source = manifest requires a manifest path")
    for s in prune.strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    for p in prune.plans:
        keep = parse_keep(p)
        if any(k > n for k, n in zip(keep, network.map_counts)):
            raise ConfigError(f"plan {p} keeps more maps than the network has")
    if evals.repetitions < 3:
        raise ConfigError("[eval] repetitions must be >= 3")
    if evals.image_size < network.patch_size:
        raise ConfigError("[eval] image_size must be at least the patch size")
    if data.source == "synthetic" and evals.image_size > min(data.width, data.height):
        raise ConfigError("[eval] image_size exceeds the synthetic image extents")

    out = Path(exp.get("output_dir", "out"))
    if not out.is_absolute():
        out = Path(base_dir) / out
    return ExperimentConfig(
        name=exp.get("name", "experiment"), seed=exp.get("seed", 0), output_dir=out,
        network=network, data=data, train=train, retrain=retrain, prune=prune, eval=evals,
        source_text=text,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)
