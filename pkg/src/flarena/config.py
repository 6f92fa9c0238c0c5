"""Experiment configuration: INI files with one section per concern.

Unknown sections or keys are rejected with the line they appear on. Every
run writes ``config.resolved`` holding all effective values, defaults included.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "mnist"  # mnist | fmnist | synthetic
    train_size: int = 6000
    test_size: int = 1000
    root_size: int = 1000  # feature-extractor split
    trust_size: int = 100  # FLTrust root data
    val_size: int = 1000  # reward / validation split
    q: float = 0.1
    data_seed: int = 0
    blob_sigma: float = 0.1


@dataclass
class FLConfig:
    model: str = "small-cnn"
    clients: int = 30
    malicious: int = 6
    fraction: float = 1 / 3
    rounds: int = 150
    local_steps: int | None = None  # None: one local epoch
    batch_size: int = 32
    lr: float = 0.05


@dataclass
class AttackConfig:
    name: str = "none"  # none | ipm | lmp | eb | rl
    ipm_eps: float = 1.0
    lmp_lambda0: float = 10.0
    lmp_halvings: int = 10
    rl_pretrain: bool = True
    rl_train: bool = True


@dataclass
class DefenseConfig:
    name: str = "fedavg"  # fedavg | krum | median | cmedian | clipping | fltrust | adaagg
    krum_f: int | None = None  # None: true sampled malicious count
    clip_tau: float | None = None  # None: median delta norm of the round


@dataclass
class AdaAggSection:
    max_iters: int = 30
    num_images: int = 16
    inv_lr: float = 0.05
    beta: float = 1e-4
    lam: float = 2.0
    kappa: float = 0.05
    cue_mask: str = "R,cl,cg,lg"  # cues the policy may use
    train_policy: bool = True
    extractor_epochs: int = 5
    extractor_lr: float = 0.1


@dataclass
class TD3Section:
    hidden: str = "256,256"
    lr: float = 1e-5
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    explore_noise: float = 0.1
    warmup: int = 20
    capacity: int = 100_000
    raw_bound: float = 3.0


@dataclass
class RunConfig:
    name: str = "experiment"
    seeds: str = "0"
    output: str = "runs"
    log_cues: bool = False
    timing: bool = True  # False writes zero stage times (byte-stable CSVs)
    threads: int = 1


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    adaagg: AdaAggSection = field(default_factory=AdaAggSection)
    td3: TD3Section = field(default_factory=TD3Section)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def seed_list(self) -> list[int]:
        return [int(s) for s in re.split(r"[,\s]+", self.run.seeds.strip()) if s]

    @property
    def n_sampled(self) -> int:
        import math

        return max(1, math.ceil(self.fl.fraction * self.fl.clients - 1e-9))


CUE_KEYS = ("R", "cl", "cg", "lg")
ATTACKS = ("none", "ipm", "lmp", "eb", "rl")
DEFENSES = ("fedavg", "krum", "median", "cmedian", "clipping", "fltrust", "adaagg")
DATASETS = ("mnist", "fmnist", "synthetic")


def _coerce(value: str, typ, where: str):
    text = value.strip()
    optional = typ in (int | None, float | None)
    if optional and text.lower() in ("", "none", "auto"):
        return None
    base = {int | None: int, float | None: float}.get(typ, typ)
    try:
        if base is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {base.__name__}") from None


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    index, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


def _apply(cfg: ExperimentConfig, section: str, key: str, value: str, where: str) -> None:
    if not hasattr(cfg, section) or section.startswith("_"):
        raise ConfigError(f"{where}: unknown section [{section}]")
    sub = getattr(cfg, section)
    hints = get_type_hints(type(sub))
    if key not in hints:
        valid = ", ".join(f.name for f in fields(sub))
        raise ConfigError(f"{where}: unknown key {key!r} in [{section}] (valid: {valid})")
    setattr(sub, key, _coerce(value, hints[key], where))


def validate(cfg: ExperimentConfig) -> None:
    d, fl = cfg.data, cfg.fl
    if d.dataset not in DATASETS:
        raise ConfigError(f"[data] dataset must be one of {DATASETS}")
    if cfg.attack.name not in ATTACKS:
        raise ConfigError(f"[attack] name must be one of {ATTACKS}")
    if cfg.defense.name not in DEFENSES:
        raise ConfigError(f"[defense] name must be one of {DEFENSES}")
    if fl.model not in ("small-cnn", "logreg"):
        raise ConfigError("[fl] model must be small-cnn or logreg")
    if not 0 <= fl.malicious <= fl.clients:
        raise ConfigError("[fl] malicious must lie in [0, clients]")
    if not 0 < fl.fraction <= 1:
        raise ConfigError("[fl] fraction must lie in (0, 1]")
    if fl.rounds < 1 or fl.lr <= 0:
        raise ConfigError("[fl] rounds must be >= 1 and lr > 0")
    if cfg.adaagg.lam < 1:
        raise ConfigError("[adaagg] lam must be >= 1")
    mask = [m.strip() for m in cfg.adaagg.cue_mask.split(",") if m.strip()]
    if not mask or any(m not in CUE_KEYS for m in mask):
        raise ConfigError(f"[adaagg] cue_mask must list a non-empty subset of {CUE_KEYS}")
    if not cfg.seed_list:
        raise ConfigError("[run] seeds is empty")


def load_config(path=None, overrides=(), text: str | None = None) -> ExperimentConfig:
    """Read an INI file (or ``text``) and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        text = Path(path).read_text()
    source = str(path) if path is not None else "<config>"
    if text:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        lines = _line_index(text)
        for section in parser.sections():
            sec_line = lines.get((section, None), "?")
            for key, value in parser.items(section):
                line = lines.get((section, key), sec_line)
                _apply(cfg, section, key, value, f"{source}:{line}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set {item!r}: expected section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(cfg, section, key.strip().lower(), value, f"--set {item}")
    validate(cfg)
    return cfg


def resolved_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for f in fields(cfg):
        sub = getattr(cfg, f.name)
        parser[f.name] = {k: "none" if v is None else str(v) for k, v in dataclasses.asdict(sub).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
