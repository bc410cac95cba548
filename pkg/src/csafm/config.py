"""Run configuration: JSON schema, validation, and dataset resolution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import SynthSpec, ingest_dir, synth_generate
from .errors import ConfigError
from .fusion import FusionVariant
from .tensor import Rng, derive_seed

_MODALITIES = ("fused", "fp", "fv")


@dataclass
class RunConfig:
    """Everything one training or evaluation run depends on.

    dataset is either a directory of PGM pairs (dataset_path) or a
    synthesis spec (synth); exactly one must be set. modality "fused"
    trains the two-branch model; "fp"/"fv" train a single-branch
    classifier on that modality alone.
    """

    seed: int = 0
    dataset_path: Optional[str] = None
    synth: Optional[SynthSpec] = None
    variant: FusionVariant = FusionVariant.CSAFM
    modality: str = "fused"
    r1: int = 16
    r2: int = 16
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 100
    split: tuple[float, float, float] = (0.3, 0.4, 0.3)
    width_multiplier: float = 1.0
    literal_double_mul: bool = False
    out_dir: str = "runs"

    def __post_init__(self):
        if (self.dataset_path is None) == (self.synth is None):
            raise ConfigError("config needs exactly one of dataset path or synth spec")
        if self.modality not in _MODALITIES:
            raise ConfigError(f"modality must be one of {_MODALITIES}, got {self.modality!r}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.r1 < 1 or self.r2 < 1:
            raise ConfigError(f"reduction ratios must be >= 1, got r1={self.r1} r2={self.r2}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if len(self.split) != 3:
            raise ConfigError(f"split needs three fractions, got {self.split}")
        if any(f <= 0 for f in self.split):
            raise ConfigError(f"split fractions must be positive, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions sum to {sum(self.split)}, need 1.0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"config must be a JSON object, got {type(d).__name__}")
        known = {
            "seed", "dataset", "variant", "modality", "r1", "r2", "lr", "batch",
            "epochs", "split", "width_multiplier", "literal_double_mul", "out_dir",
        }
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw: dict = {}
        ds = d.get("dataset")
        if ds is not None:
            if isinstance(ds, str):
                kw["dataset_path"] = ds
            elif isinstance(ds, dict) and set(ds) == {"path"}:
                kw["dataset_path"] = ds["path"]
            elif isinstance(ds, dict) and set(ds) == {"synth"}:
                kw["synth"] = SynthSpec.from_dict(ds["synth"])
            else:
                raise ConfigError(
                    'dataset must be a path string, {"path": ...}, or {"synth": {...}}'
                )
        else:
            kw["synth"] = SynthSpec()
        if "variant" in d:
            kw["variant"] = FusionVariant.from_tag(str(d["variant"]))
        for name, conv in (
            ("seed", int), ("modality", str), ("r1", int), ("r2", int),
            ("lr", float), ("batch", int), ("epochs", int),
            ("width_multiplier", float), ("literal_double_mul", bool),
            ("out_dir", str),
        ):
            if name in d:
                v = d[name]
                if conv is bool and not isinstance(v, bool):
                    raise ConfigError(f"{name} must be true or false, got {v!r}")
                try:
                    kw[name] = conv(v)
                except (TypeError, ValueError):
                    raise ConfigError(f"{name} has invalid value {v!r}") from None
        if "split" in d:
            s = d["split"]
            if not (isinstance(s, (list, tuple)) and len(s) == 3):
                raise ConfigError(f"split must be a list of three fractions, got {s!r}")
            kw["split"] = tuple(float(x) for x in s)
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "variant": self.variant.name,
            "modality": self.modality,
            "r1": self.r1,
            "r2": self.r2,
            "lr": self.lr,
            "batch": self.batch,
            "epochs": self.epochs,
            "split": list(self.split),
            "width_multiplier": self.width_multiplier,
            "literal_double_mul": self.literal_double_mul,
            "out_dir": self.out_dir,
        }
        if self.dataset_path is not None:
            out["dataset"] = {"path": self.dataset_path}
        else:
            sp = self.synth
            out["dataset"] = {"synth": {
                "grid": list(sp.grid), "fp_size": list(sp.fp_size),
                "fv_size": list(sp.fv_size), "noise_sigma": sp.noise_sigma,
                "textures_seed": sp.textures_seed,
                "samples_per_class": sp.samples_per_class,
            }}
        return out


def load_json(path) -> dict:
    """Parse a JSON file, reporting the line/column on syntax errors."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(load_json(path))


def resolve_dataset(cfg: RunConfig):
    """Materialize the configured dataset as a list of paired samples.

    Synthetic noise derives from the run seed, so different seeds see
    different noise instances over the same fixed textures.
    """
    if cfg.dataset_path is not None:
        return ingest_dir(cfg.dataset_path)
    return synth_generate(cfg.synth, Rng(derive_seed(cfg.seed, "synthdata")))
