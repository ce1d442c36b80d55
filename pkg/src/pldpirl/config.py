"""Flat ``key=value`` run configuration with typed defaults."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .data import SynthConfig
from .encoder import EncoderConfig
from .losses import LAMBDA_GRID, NOISE_MODES, TAU_GRID, LossConfig
from .trainer import TrainConfig, finetune_defaults, pretext_defaults


class ConfigError(ValueError):
    pass


def _ints(v: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in v.split(",") if x.strip())


def _floats(v: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _noise(v: str) -> str:
    v = v.strip()
    if v not in NOISE_MODES:
        raise ValueError(f"expected one of {', '.join(NOISE_MODES)}")
    return v


# key -> (parser, default as written in a config file)
SCHEMA: Dict[str, Tuple[object, str]] = {
    "seed": (int, "0"),
    # synthetic data
    "synth.counts": (_ints, "250,250,250"),
    "synth.image_size": (int, "96"),
    "synth.line_density": (_floats, "5.0,8.0,11.0"),
    "synth.blob_intensity": (_floats, "0.10,0.16,0.22"),
    "synth.blob_rate": (float, "3.0"),
    "synth.noise_std": (float, "0.04"),
    "synth.tint_std": (float, "0.03"),
    # encoder
    "encoder.channels": (_ints, "16,32,64"),
    "encoder.blocks_per_stage": (int, "1"),
    "encoder.cbam": (_bool, "false"),
    "encoder.embed_dim": (int, "128"),
    "encoder.grid": (int, "3"),
    "encoder.input_size": (int, "96"),
    "encoder.stem_kernel": (int, "8"),
    "encoder.stem_stride": (int, "8"),
    # objective
    "loss.tau": (float, "0.4"),
    "loss.lambda": (float, "0.5"),
    "loss.negatives": (int, "64"),
    "loss.noise": (_noise, "fixed"),
    # pretext stage
    "pretrain.lr": (float, "1e-3"),
    "pretrain.batch_size": (int, "32"),
    "pretrain.epochs": (int, "200"),
    "pretrain.momentum": (float, "0.0"),
    "pretrain.bank_momentum": (float, "0.5"),
    "pretrain.clusters": (int, "3"),
    "pretrain.cluster_restarts": (int, "20"),
    "pretrain.hflip": (_bool, "false"),
    # fine-tuning / baseline
    "finetune.lr": (float, "1e-4"),
    "finetune.batch_size": (int, "32"),
    "finetune.epochs": (int, "200"),
    "finetune.lr_decay_factor": (float, "0.9"),
    "finetune.lr_decay_every": (int, "30"),
    "finetune.stop_min_delta": (float, "1e-6"),
    "finetune.stop_patience": (int, "20"),
    "finetune.momentum": (float, "0.0"),
    "finetune.freeze_backbone": (_bool, "false"),
    # ablation grid
    "sweep.taus": (_floats, ",".join(str(t) for t in TAU_GRID)),
    "sweep.lambdas": (_floats, ",".join(str(v) for v in LAMBDA_GRID)),
    "sweep.seeds": (_ints, "0"),
}


def parse_kv_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


class Settings:
    """Resolved configuration: defaults <- config file <- ``--set`` overrides."""

    def __init__(self, raw: Optional[Mapping[str, str]] = None):
        self.raw: Dict[str, str] = {k: d for k, (_, d) in SCHEMA.items()}
        self.values: Dict[str, object] = {}
        self.update(raw or {})

    def update(self, raw: Mapping[str, str]) -> None:
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            self.raw[key] = str(value)
        self.values = {}
        for key, text in self.raw.items():
            try:
                self.values[key] = SCHEMA[key][0](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc

    @classmethod
    def load(cls, path: Optional[Union[str, os.PathLike]] = None, overrides: Iterable[str] = ()) -> "Settings":
        raw: Dict[str, str] = {}
        if path:
            with open(path) as fh:
                raw.update(parse_kv_lines(fh, str(path)))
        raw.update(parse_kv_lines(overrides, "--set"))
        return cls(raw)

    def __getitem__(self, key: str):
        return self.values[key]

    def dumps(self) -> str:
        return "".join(f"{k}={self.raw[k]}\n" for k in sorted(self.raw))

    def write(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_text(self.dumps())

    # -- builders -------------------------------------------------------------
    def synth(self) -> SynthConfig:
        return SynthConfig(
            counts=self["synth.counts"],
            image_size=self["synth.image_size"],
            line_density=self["synth.line_density"],
            blob_intensity=self["synth.blob_intensity"],
            blob_rate=self["synth.blob_rate"],
            noise_std=self["synth.noise_std"],
            tint_std=self["synth.tint_std"],
            seed=self["seed"],
        )

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            channels=self["encoder.channels"],
            blocks_per_stage=self["encoder.blocks_per_stage"],
            cbam=self["encoder.cbam"],
            embed_dim=self["encoder.embed_dim"],
            grid=self["encoder.grid"],
            input_size=self["encoder.input_size"],
            stem_kernel=self["encoder.stem_kernel"],
            stem_stride=self["encoder.stem_stride"],
        )

    def loss(self, tau: Optional[float] = None, lam: Optional[float] = None) -> LossConfig:
        return LossConfig(
            tau=self["loss.tau"] if tau is None else tau,
            lam=self["loss.lambda"] if lam is None else lam,
            negatives=self["loss.negatives"],
            noise=self["loss.noise"],
        )

    def pretext(self, tau: Optional[float] = None, lam: Optional[float] = None, seed: Optional[int] = None) -> TrainConfig:
        return pretext_defaults(
            lr=self["pretrain.lr"],
            batch_size=self["pretrain.batch_size"],
            max_epochs=self["pretrain.epochs"],
            momentum=self["pretrain.momentum"],
            bank_momentum=self["pretrain.bank_momentum"],
            clusters=self["pretrain.clusters"],
            cluster_restarts=self["pretrain.cluster_restarts"],
            hflip=self["pretrain.hflip"],
            seed=self["seed"] if seed is None else seed,
            loss=self.loss(tau, lam),
            encoder=self.encoder(),
        )

    def finetune(self, stage: str = "finetune", seed: Optional[int] = None) -> TrainConfig:
        return finetune_defaults(
            stage=stage,
            lr=self["finetune.lr"],
            batch_size=self["finetune.batch_size"],
            max_epochs=self["finetune.epochs"],
            lr_decay_factor=self["finetune.lr_decay_factor"],
            lr_decay_every=self["finetune.lr_decay_every"],
            stop_min_delta=self["finetune.stop_min_delta"],
            stop_patience=self["finetune.stop_patience"],
            momentum=self["finetune.momentum"],
            freeze_backbone=self["finetune.freeze_backbone"],
            seed=self["seed"] if seed is None else seed,
            encoder=self.encoder(),
        )
