"""Run configuration: ``key = value`` files merged with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .evalkit import DcfParams
from .network import NetworkSpec, system_spec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic data
    speakers: int = 20
    utts: int = 30
    frames: str = "200"
    dim: int = 39
    spread: float = 1.0
    noise: float = 1.0
    correlation: float = 0.5
    holdout: int = 0
    enroll: int = 5
    # network
    system: str = "x_gcnn_gatt"
    frame_width: int = 0  # 0 keeps the reference width of layers 1-4
    last_width: int = 1500
    segment_width: int = 512
    attention_dim: int = 256
    kernel_widths: str = "5,3,3,1,1"
    dilations: str = "1,2,4,1,1"
    dropout: float = 0.0
    embedding_tap: str = "affine"
    cmvn: bool = False
    # training
    lr: float = 0.00015
    epochs: int = 20
    batch_size: int = 32
    chunk_frames: int = 1000
    chunks_per_epoch: int = 0
    weight_decay: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    valid_per_speaker: int = 2
    seed: int = 0
    # evaluation
    p_target: str = "0.01,0.005"
    c_miss: float = 1.0
    c_fa: float = 1.0
    backend: str = "cosine"
    lda_dim: int = 0
    # paths
    data: str = ""
    valid: str = ""
    features: str = ""
    checkpoint: str = ""
    embeddings: str = ""
    train_embeddings: str = ""
    trials: str = ""
    scores: str = ""
    out: str = ""
    eval_out: str = ""
    trials_out: str = ""
    report_dir: str = ""

    # -- derived objects ---------------------------------------------------

    def frame_range(self) -> tuple[int, int]:
        try:
            parts = [int(p) for p in self.frames.split(":")]
        except ValueError:
            raise ConfigError(f"frames must be N or MIN:MAX, got {self.frames!r}") from None
        if len(parts) == 1:
            parts *= 2
        if len(parts) != 2:
            raise ConfigError(f"frames must be N or MIN:MAX, got {self.frames!r}")
        return parts[0], parts[1]

    def synth_spec(self) -> SynthSpec:
        try:
            return SynthSpec(self.speakers, self.utts, self.frame_range(), self.dim, self.spread,
                             self.noise, self.correlation, self.seed).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def network_spec(self, num_speakers: int, feat_dim: int) -> NetworkSpec:
        kernels = _int_list(self.kernel_widths, "kernel_widths")
        dilations = _int_list(self.dilations, "dilations")
        n = len(kernels)
        reference = system_spec(self.system).layer_widths[0]
        width = self.frame_width or reference
        try:
            return system_spec(
                self.system,
                layer_widths=(width,) * (n - 1) + (self.last_width,),
                kernel_widths=kernels, dilations=dilations,
                attention_dim=self.attention_dim,
                segment_widths=(self.segment_width, self.segment_width),
                num_speakers=num_speakers, feat_dim=feat_dim, dropout=self.dropout,
                weight_decay=self.weight_decay, embedding_tap=self.embedding_tap)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(initial_lr=self.lr, chunk_frames=self.chunk_frames, batch_size=self.batch_size,
                           max_epochs=self.epochs, chunks_per_epoch=self.chunks_per_epoch,
                           weight_decay=self.weight_decay, lr_decay=self.lr_decay, patience=self.patience,
                           min_lr=self.min_lr, seed=self.seed)

    def dcf_points(self) -> list[DcfParams]:
        try:
            return [DcfParams(float(p), self.c_miss, self.c_fa) for p in self.p_target.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad DCF parameters: {exc}") from None

    def validate(self) -> "RunConfig":
        self.frame_range()
        _int_list(self.kernel_widths, "kernel_widths")
        _int_list(self.dilations, "dilations")
        if len(_int_list(self.kernel_widths, "kernel_widths")) != len(_int_list(self.dilations, "dilations")):
            raise ConfigError("kernel_widths and dilations differ in length")
        self.dcf_points()
        if self.backend not in ("cosine", "lda"):
            raise ConfigError(f"backend must be cosine or lda, got {self.backend!r}")
        for name in ("epochs", "batch_size", "chunk_frames", "patience", "last_width", "segment_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.valid_per_speaker < 0 or self.holdout < 0 or self.frame_width < 0 or self.lda_dim < 0:
            raise ConfigError("valid_per_speaker, holdout, frame_width and lda_dim must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        return self


def _int_list(text: str, name: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"{name} must be positive integers")
    return values


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce(name: str, raw):
    if name not in FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = FIELDS[name].type
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_config_file(path) -> dict:
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            values[key] = coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides (flags win)."""
    values = parse_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = coerce(key, value)
    return RunConfig(**values).validate()
