"""Experiment configuration: versioned JSON documents, strictly validated.

Unknown keys are rejected at every level so a typo'd field never silently
falls back to a default. `SCHEMA` documents the accepted structure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import ApnVariant, LossWeights
from .pipeline import StagePlan, TrainConfig
from .synthdata import ConfigError, DataConfig

CONFIG_VERSION = 1

SCHEMA: dict = {
    "version": "int, must equal 1",
    "data": {
        "seed": "int >= 0",
        "num_domains": "int >= 2",
        "heldout_domain": "int",
        "pids_per_domain": "int >= 2",
        "images_per_pid": "int >= 4",
        "latent_dim": "int >= 1",
        "height": "int", "width": "int", "channels": "int",
        "num_cameras": "int >= 2",
        "heldout_affine_shift": "float >= 0 (style extrapolation strength)",
        "heldout_background_scale": "float >= 0",
        "heldout_noise_scale": "float >= 0",
        "source_domains": "list[int] (optional; defaults to all but held-out)",
    },
    "train": {
        "plan": {"initial_epochs": "int", "id_token_epochs": "int",
                 "domain_token_epochs": "int", "finetune_epochs": "int"},
        "weights": {"alpha": "float >= 0", "beta": "float in [0,1]",
                    "margin_m": "float >= 0", "smoothing_eps": "float in [0,1)",
                    "apn_variant": "ED | CS | CONTRASTIVE | APNCE"},
        "P": "int", "K": "int >= 2",
        "lr_prompt": "float", "lr_encoder": "float", "cosine_decay": "bool",
        "seed": "int >= 0", "grl_lambda": "float >= 0",
        "embed_dim": "int", "token_dim": "int",
        "inv_temperature": "float > 0", "i2tce_eps": "float in [0,1)",
        "use_grl": "bool",
    },
    "protocol": "p1 | p2 | p3",
    "seeds": "list[int] (per-run seeds; overrides train.seed per run)",
    "out_dir": "str",
    "ablation": {
        "three_stage": "bool", "grl": "bool", "apn": "bool",
        "apn_variant": "ED | CS | CONTRASTIVE | APNCE",
        "beta": "float | list[float] (sweep)",
        "init_epochs": "int | list[int] (sweep)",
    },
}


@dataclass
class AblationToggles:
    three_stage: bool = True
    grl: bool = True
    apn: bool = True
    apn_variant: str = ApnVariant.ED
    beta: float | list = 0.3
    init_epochs: int | list = 3


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: str = "p1"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    ablation: AblationToggles = field(default_factory=AblationToggles)

    def canonical_json(self) -> str:
        doc = {
            "version": CONFIG_VERSION,
            "data": asdict(self.data),
            "train": asdict(self.train),
            "protocol": self.protocol,
            "seeds": self.seeds,
            "out_dir": self.out_dir,
            "ablation": asdict(self.ablation),
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _take(raw: dict, allowed: dict, where: str) -> dict:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return raw


def _build(cls, raw: dict, where: str, nested: dict | None = None):
    nested = nested or {}
    fields = {f: None for f in cls.__dataclass_fields__}
    _take(raw, fields, where)
    kwargs = {}
    for key, value in raw.items():
        if key in nested:
            kwargs[key] = _build(nested[key][0], value, f"{where}.{key}",
                                 nested[key][1] if len(nested[key]) > 1 else None)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    top = {"version", "data", "train", "protocol", "seeds", "out_dir", "ablation"}
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    cfg = ExperimentConfig()
    if "data" in doc:
        cfg.data = _build(DataConfig, doc["data"], "data")
    if "train" in doc:
        cfg.train = _build(
            TrainConfig, doc["train"], "train",
            nested={"plan": (StagePlan,), "weights": (LossWeights,)})
    if "protocol" in doc:
        if doc["protocol"] not in ("p1", "p2", "p3"):
            raise ConfigError(f"unknown protocol {doc['protocol']!r}")
        cfg.protocol = doc["protocol"]
    if "seeds" in doc:
        seeds = doc["seeds"]
        if not isinstance(seeds, list) or not seeds or \
                any(not isinstance(s, int) or s < 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of ints >= 0")
        cfg.seeds = seeds
    if "out_dir" in doc:
        cfg.out_dir = str(doc["out_dir"])
    if "ablation" in doc:
        cfg.ablation = _build(AblationToggles, doc["ablation"], "ablation")
    if cfg.train.seed < 0 or cfg.data.seed < 0:
        raise ConfigError("seeds must be >= 0")
    cfg.data.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return from_dict(doc)


def apply_toggles(cfg: ExperimentConfig, *, three_stage: bool, use_grl: bool,
                  apn: bool, beta: float | None = None,
                  init_epochs: int | None = None) -> TrainConfig:
    """Materialize one ablation row as a concrete TrainConfig."""
    base = cfg.train
    plan = StagePlan(
        initial_epochs=(init_epochs if init_epochs is not None
                        else base.plan.initial_epochs) if three_stage else 0,
        id_token_epochs=base.plan.id_token_epochs,
        domain_token_epochs=base.plan.domain_token_epochs if (apn or use_grl) else 0,
        finetune_epochs=base.plan.finetune_epochs,
    )
    weights = LossWeights(
        alpha=base.weights.alpha if use_grl else 0.0,
        beta=(beta if beta is not None else base.weights.beta) if apn else 0.0,
        margin_m=base.weights.margin_m,
        smoothing_eps=base.weights.smoothing_eps,
        apn_variant=cfg.ablation.apn_variant,
    )
    out = TrainConfig(
        plan=plan, weights=weights, P=base.P, K=base.K,
        lr_prompt=base.lr_prompt, lr_encoder=base.lr_encoder,
        cosine_decay=base.cosine_decay, seed=base.seed,
        grl_lambda=base.grl_lambda, embed_dim=base.embed_dim,
        token_dim=base.token_dim, inv_temperature=base.inv_temperature,
        i2tce_eps=base.i2tce_eps, use_grl=use_grl,
    )
    return out
