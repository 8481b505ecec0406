"""Run configuration: flat ``section.key = value`` files over two profiles.

``run.profile`` (``desk`` or ``paper``) picks the starting values; every
other key overrides one field.  Unknown keys are errors.  ``KEYS`` documents
every key with its paper-profile default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .archspace import SearchSpace, make_space
from .data import SynthSpec
from .network import NetConfig


@dataclass
class RunSection:
    profile: str = "paper"
    seed: int = 0
    threads: int = 1


@dataclass
class SpaceSection:
    variant: str = "space3"
    num_layers: int = 18
    branch_options: Tuple[int, ...] = ()
    cdim_options: Tuple[int, ...] = ()
    sdim_options: Tuple[int, ...] = ()


@dataclass
class NetSection:
    stem_channels: int = 128
    stem_kernel: int = 5
    kernel_size: int = 3
    embedding_dim: int = 128
    bottleneck_mult: float = 2.0
    growth: Optional[int] = 64
    transitions: Tuple[int, ...] = (6, 18)
    compression: float = 0.5
    head_moments: int = 2


@dataclass
class DataSection:
    dir: str = ""
    num_speakers: int = 32
    utts_per_speaker: int = 20
    feat_dim: int = 30
    t_min: int = 300
    t_max: int = 600
    scale: float = 1.0
    rho: float = 0.5
    noise: float = 1.0
    session: float = 0.0
    session_rank: int = 10
    val_fraction: float = 0.3
    seed: int = 0


@dataclass
class TrainSection:
    lr: float = 0.01
    momentum: float = 0.95
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 26
    milestones: Tuple[int, ...] = (14, 20)
    lr_factor: float = 0.1
    crop_min: int = 200
    crop_max: int = 400
    supernet_loss: str = "ce"


@dataclass
class LossSection:
    s_scale: float = 30.0
    margin: float = 0.2
    mhe_lambda: float = 0.01


@dataclass
class SearchSection:
    init_count: int = 1200
    n1: int = 100
    n2: int = 64
    pool_size: int = 10000
    parents: int = 10
    mutation_rate: float = 0.1
    bn_batches: int = 4
    top_k: int = 5


@dataclass
class RetrainSection:
    lr: float = 0.01
    epochs: int = 26
    milestones: Tuple[int, ...] = (14, 20)
    warm_start: bool = False


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    space: SpaceSection = field(default_factory=SpaceSection)
    net: NetSection = field(default_factory=NetSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    search: SearchSection = field(default_factory=SearchSection)
    retrain: RetrainSection = field(default_factory=RetrainSection)

    def search_space(self) -> SearchSpace:
        s = self.space
        base = make_space(s.variant, s.num_layers) if s.variant != "custom" else SearchSpace(s.num_layers)
        return SearchSpace(
            s.num_layers,
            s.branch_options or base.branch_options,
            s.cdim_options or base.cdim_options,
            s.sdim_options or base.sdim_options,
            name=s.variant,
        )

    def net_config(self, num_speakers: int, input_dim: Optional[int] = None) -> NetConfig:
        n = self.net
        return NetConfig(input_dim=input_dim or self.data.feat_dim, stem_channels=n.stem_channels,
                         stem_kernel=n.stem_kernel, kernel_size=n.kernel_size, embedding_dim=n.embedding_dim,
                         num_speakers=num_speakers, bottleneck_mult=n.bottleneck_mult, growth=n.growth,
                         transitions=n.transitions, compression=n.compression,
                         head_moments=n.head_moments)

    def synth_spec(self) -> SynthSpec:
        d = self.data
        return SynthSpec(d.num_speakers, d.utts_per_speaker, d.feat_dim, d.t_min, d.t_max, d.scale, d.rho,
                         d.noise, d.session, d.session_rank, d.val_fraction, d.seed)

    def threads(self) -> int:
        """Worker cap: ``run.threads``, further capped by ``SPEECHNAS_THREADS``."""
        n = self.run.threads
        env = os.environ.get("SPEECHNAS_THREADS")
        if env:
            n = min(n, max(1, int(env))) if n > 0 else max(1, int(env))
        return max(1, n)

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            for f in fields(getattr(self, sec.name)):
                lines.append(f"{sec.name}.{f.name} = {_format(getattr(getattr(self, sec.name), f.name))}")
        return "\n".join(lines) + "\n"


def paper_profile() -> RunConfig:
    return RunConfig()


def desk_profile() -> RunConfig:
    """Small enough to run end to end on one CPU core in minutes."""
    return RunConfig(
        run=RunSection(profile="desk"),
        space=SpaceSection(variant="custom", num_layers=4, branch_options=(2, 3), cdim_options=(16, 32),
                           sdim_options=(8, 16)),
        net=NetSection(stem_channels=32, embedding_dim=32, growth=None, transitions=(), bottleneck_mult=2.0),
        data=DataSection(num_speakers=32, utts_per_speaker=100, feat_dim=30, t_min=60, t_max=120, scale=1.0,
                         rho=0.5, noise=0.5, session=1.0, session_rank=10, val_fraction=0.15),
        train=TrainSection(lr=0.03, momentum=0.95, weight_decay=5e-4, batch_size=32, epochs=5, milestones=(3, 4),
                           crop_min=40, crop_max=80),
        search=SearchSection(init_count=40, n1=10, n2=8, pool_size=2000, bn_batches=4, top_k=3),
        retrain=RetrainSection(lr=0.05, epochs=12, milestones=(8, 11)),
    )


PROFILES = {"paper": paper_profile, "desk": desk_profile}

KEYS: Dict[str, str] = {
    "run.profile": "starting values: 'paper' (full-scale recipe) or 'desk' (CPU-sized); default paper",
    "run.seed": "master seed for sampling, initialisation and batching; default 0",
    "run.threads": "candidate-evaluation workers, capped by SPEECHNAS_THREADS; default 1",
    "space.variant": "space1 | space2 | space3 | full | custom; default space3",
    "space.num_layers": "blocks in the network; default 18",
    "space.branch_options": "override of branch counts, comma list; default from variant",
    "space.cdim_options": "override of D-TDNN widths c, comma list; default from variant",
    "space.sdim_options": "override of selection widths d, comma list; default from variant",
    "net.stem_channels": "channels out of the K=5 stem TDNN; default 128",
    "net.stem_kernel": "stem kernel size; default 5",
    "net.kernel_size": "branch TDNN kernel size; default 3",
    "net.embedding_dim": "speaker embedding size; default 128",
    "net.bottleneck_mult": "bottleneck width / c when growth is none; default 2.0",
    "net.growth": "channels appended per block ('none' = c); default 64",
    "net.transitions": "layers followed by a channel-halving transit layer; default 6,18",
    "net.compression": "transit layer output ratio; default 0.5",
    "net.head_moments": "pooled moments feeding the embedding layer, 2 (mean, std) or 4; default 2",
    "data.dir": "dataset directory produced by gen-data",
    "data.num_speakers": "synthetic speakers; default 32",
    "data.utts_per_speaker": "utterances per speaker; default 20",
    "data.feat_dim": "feature dimension (MFCC stand-in); default 30",
    "data.t_min": "shortest utterance in frames; default 300",
    "data.t_max": "longest utterance in frames; default 600",
    "data.scale": "norm of the speaker prototype; default 1.0",
    "data.rho": "AR(1) coefficient of the frame noise; default 0.5",
    "data.noise": "frame noise standard deviation; default 1.0",
    "data.session": "per-utterance channel offset scale; default 0.0",
    "data.session_rank": "dimension of the channel-offset subspace; default 10",
    "data.val_fraction": "share of each speaker's utterances held out; default 0.3",
    "data.seed": "generator seed; default 0",
    "train.lr": "initial SGD learning rate; default 0.01",
    "train.momentum": "SGD momentum; default 0.95",
    "train.weight_decay": "L2 weight decay; default 5e-4",
    "train.batch_size": "utterances per mini-batch; default 128",
    "train.epochs": "supernet epochs; default 26",
    "train.milestones": "epochs at which the learning rate is multiplied by lr_factor; default 14,20",
    "train.lr_factor": "learning-rate decay factor; default 0.1",
    "train.crop_min": "shortest training crop in frames; default 200",
    "train.crop_max": "longest training crop in frames; default 400",
    "train.supernet_loss": "ce | aam_mhe; default ce",
    "loss.s_scale": "AAM scale; default 30",
    "loss.margin": "AAM additive angular margin; default 0.2",
    "loss.mhe_lambda": "MHE strength; default 0.01",
    "search.init_count": "random architectures evaluated before the first GP fit; default 1200",
    "search.n1": "BO iterations; default 100",
    "search.n2": "architectures proposed per iteration; default 64",
    "search.pool_size": "uniform samples in the acquisition pool; default 10000",
    "search.parents": "best architectures mutated into the pool; default 10",
    "search.mutation_rate": "per-slot mutation probability; default 0.1",
    "search.bn_batches": "training batches used to recalibrate BN statistics per path; default 4",
    "search.top_k": "architectures listed in the search report; default 5",
    "retrain.lr": "initial learning rate for candidate retraining; default 0.01",
    "retrain.epochs": "candidate retraining epochs; default 26",
    "retrain.milestones": "retraining learning-rate milestones; default 14,20",
    "retrain.warm_start": "start from supernet slices instead of fresh weights; default false",
}


class ConfigError(ValueError):
    pass


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(value: str, current, key: str, ftype):
    try:
        if "Tuple" in str(ftype):
            return tuple(int(x) for x in value.split(",") if x.strip())
        if "Optional[int]" in str(ftype):
            return None if value.lower() in ("none", "") else int(value)
        if isinstance(current, bool) or "bool" in str(ftype):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(current, int) or str(ftype) == "int":
            return int(value)
        if isinstance(current, float) or str(ftype) == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def parse_pairs(text: str, source: str = "<config>") -> Dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {k!r}")
        pairs[k] = v
    return pairs


def from_pairs(pairs: Dict[str, str]) -> RunConfig:
    profile = pairs.get("run.profile", "paper")
    if profile not in PROFILES:
        raise ConfigError(f"run.profile: unknown profile {profile!r}")
    cfg = PROFILES[profile]()
    if "space.variant" in pairs:
        # a chosen variant brings its own option sets unless they are overridden too
        cfg.space = replace(cfg.space, **{k: () for k in ("branch_options", "cdim_options", "sdim_options")
                                          if f"space.{k}" not in pairs})
    for key, value in pairs.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        sec_name, attr = key.split(".", 1)
        section = getattr(cfg, sec_name)
        ftype = {f.name: f.type for f in fields(section)}[attr]
        setattr(cfg, sec_name, replace(section, **{attr: _convert(value, getattr(section, attr), key, ftype)}))
    _validate(cfg)
    return cfg


def load_config(path=None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    pairs = parse_pairs(Path(path).read_text(), str(path)) if path else {}
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        pairs[k] = v
    return from_pairs(pairs)


def _validate(cfg: RunConfig) -> None:
    for name in ("train", "retrain"):
        ms = getattr(cfg, name).milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"{name}.milestones must be strictly increasing: {ms}")
    if cfg.train.supernet_loss not in ("ce", "aam_mhe"):
        raise ConfigError(f"train.supernet_loss must be ce or aam_mhe, got {cfg.train.supernet_loss!r}")
    if not 0 <= cfg.train.momentum < 1:
        raise ConfigError("train.momentum must lie in [0, 1)")
    cfg.search_space()  # raises on a bad variant


def lr_at(epoch: int, base_lr: float, milestones, factor: float) -> float:
    """Learning rate for 0-based ``epoch``: one ``factor`` per milestone already reached."""
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)

