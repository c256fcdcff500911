"""Training configuration files and run manifests (INI text)."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import config_from_section, config_to_section
from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, OptimizerConfig, make_schedule

MANIFEST_NAME = "manifest.ini"


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    time_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    shape: str = "linear"

    def build(self) -> NoiseSchedule:
        return make_schedule(self.time_steps, self.beta_start, self.beta_end, self.shape)


@dataclass
class DataConfig:
    clips: int = 2000
    seed: int = 0


@dataclass
class TrainSettings:
    steps: int = 6000
    seed: int = 0
    log_every: int = 50


@dataclass
class TrainConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def sections(self) -> dict[str, dict[str, str]]:
        return {
            "data": _stringify(asdict(self.data)),
            "denoiser": config_to_section(self.denoiser),
            "schedule": _stringify(asdict(self.schedule)),
            "optimizer": _stringify(asdict(self.optimizer)),
            "train": _stringify(asdict(self.train)),
        }

    def to_text(self) -> str:
        cp = _parser()
        for name, sec in self.sections().items():
            cp[name] = sec
        buf = io.StringIO()
        buf.write("# xattn training configuration\n")
        cp.write(buf)
        return buf.getvalue()


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    return cp


def _stringify(d: dict) -> dict[str, str]:
    return {k: str(v) for k, v in d.items()}


def typed_section(cls, section, where: str):
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in kinds:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        kind = kinds[key]
        try:
            if kind in (int, "int"):
                out[key] = int(raw)
            elif kind in (float, "float"):
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError:
            raise ConfigError(f"[{where}] {key} = {raw!r} is not a valid {kind}") from None
    return cls(**out)


def parse_train_config(text: str) -> TrainConfig:
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    known = {"data", "denoiser", "schedule", "optimizer", "train"}
    extra = set(cp.sections()) - known
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")
    cfg = TrainConfig()
    try:
        if cp.has_section("denoiser"):
            base = config_to_section(cfg.denoiser)
            base.update(cp["denoiser"])
            cfg.denoiser = config_from_section(base)
        cfg.denoiser.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[denoiser] {exc}") from None
    for name, cls in (("schedule", ScheduleConfig), ("optimizer", OptimizerConfig),
                      ("data", DataConfig), ("train", TrainSettings)):
        if cp.has_section(name):
            setattr(cfg, name, typed_section(cls, cp[name], name))
    if cfg.train.steps < 0 or cfg.data.clips < 1:
        raise ConfigError("steps must be >= 0 and clips >= 1")
    return cfg


def load_train_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_train_config(p.read_text())


# ---------------------------------------------------------------- manifests
def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to rerun a command and check its outputs.

    ``args`` are the command's option values as strings; ``config`` holds
    named snapshot sections (denoiser, schedule, guidance, ...); ``outputs``
    maps paths relative to the output directory to SHA-256 digests.
    """

    command: str
    args: dict[str, str] = field(default_factory=dict)
    config: dict[str, dict[str, str]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    checkpoint: str = ""
    checkpoint_digest: str = ""
    out_dir: str = ""
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)

    def record_outputs(self, out_dir) -> None:
        root = Path(out_dir)
        self.outputs = {
            p.relative_to(root).as_posix(): sha256_file(p)
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST_NAME
        }
        self.finished = _now()

    def to_text(self) -> str:
        cp = _parser()
        cp["run"] = {
            "command": self.command,
            "seeds": " ".join(str(s) for s in self.seeds),
            "checkpoint": self.checkpoint,
            "checkpoint_digest": self.checkpoint_digest,
            "out_dir": self.out_dir,
            "started": self.started,
            "finished": self.finished,
        }
        cp["args"] = self.args
        for name, sec in self.config.items():
            cp[f"config:{name}"] = sec
        cp["outputs"] = self.outputs
        buf = io.StringIO()
        buf.write("# xattn run manifest\n")
        cp.write(buf)
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        cp = _parser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        if not cp.has_section("run"):
            raise ConfigError("manifest has no [run] section")
        run = cp["run"]
        return cls(
            command=run.get("command", ""),
            args=dict(cp["args"]) if cp.has_section("args") else {},
            config={s.split(":", 1)[1]: dict(cp[s]) for s in cp.sections() if s.startswith("config:")},
            seeds=[int(s) for s in run.get("seeds", "").split()],
            checkpoint=run.get("checkpoint", ""),
            checkpoint_digest=run.get("checkpoint_digest", ""),
            out_dir=run.get("out_dir", ""),
            started=run.get("started", ""),
            finished=run.get("finished", ""),
            outputs=dict(cp["outputs"]) if cp.has_section("outputs") else {},
        )

    @classmethod
    def load(cls, path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / MANIFEST_NAME
        if not p.is_file():
            raise ConfigError(f"manifest {p} not found")
        return cls.from_text(p.read_text())
