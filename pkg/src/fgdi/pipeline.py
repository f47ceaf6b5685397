"""Three-stage training orchestration with a strict parameter-freeze ledger.

Stage plan:

* initial    - warm up the image encoder (+ id head) with id + triplet losses.
* prompt     - phase A learns ID tokens with the pair losses plus a
               gradient-reversed domain CE; phase B learns domain tokens on
               full prompts with a non-reversed domain CE. Both encoders are
               frozen here, so image features are computed once and cached
               (numerically exact, the encoders cannot drift mid-stage).
* finetune   - re-train the image encoder (+ id head) guided by the frozen
               positive/negative prompt features.

Each stage builds its optimizer over exactly the parameters it may update;
everything else is verified bit-identical by the test suite.
"""

from __future__ import annotations

import io
import json
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .encoders import (
    DomainClassifier,
    ImageEncoder,
    PromptBank,
    TextEncoder,
    build_prompt_batch,
    domain_classify,
    encode_prompts,
    grl,
)
from .losses import ApnVariant, BatchLabels, LossWeights
from .synthdata import ConfigError, DatasetSplit, pk_sample, pixels_tensor

FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries stage/epoch/component context."""


@dataclass
class StagePlan:
    initial_epochs: int = 3
    id_token_epochs: int = 40
    domain_token_epochs: int = 10
    finetune_epochs: int = 20

    def __post_init__(self):
        for v in (self.initial_epochs, self.id_token_epochs,
                  self.domain_token_epochs, self.finetune_epochs):
            if v < 0:
                raise ConfigError("epoch counts must be >= 0")

    @classmethod
    def full_scale(cls) -> "StagePlan":
        """The full epoch budget; defaults above scale it down 3x for CI."""
        return cls(3, 120, 30, 60)


@dataclass
class TrainConfig:
    plan: StagePlan = field(default_factory=StagePlan)
    weights: LossWeights = field(default_factory=LossWeights)
    P: int = 8
    K: int = 4
    lr_prompt: float = 3e-4
    lr_encoder: float = 1e-3
    cosine_decay: bool = True
    seed: int = 0
    grl_lambda: float = 1.0
    embed_dim: int = 32
    token_dim: int = 32
    inv_temperature: float = 14.0
    i2tce_eps: float = 0.0
    use_grl: bool = True

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class TrainedModel:
    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    prompt_bank: PromptBank
    domain_classifier: DomainClassifier
    id_head: torch.nn.Linear
    inv_temperature: torch.Tensor
    num_pids: int
    num_domains: int
    stages_run: list[str] = field(default_factory=list)
    config_hash: str = ""

    def named_parameter_groups(self) -> dict[str, torch.nn.Module]:
        return {
            "image_encoder": self.image_encoder,
            "text_encoder": self.text_encoder,
            "prompt_bank": self.prompt_bank,
            "domain_classifier": self.domain_classifier,
            "id_head": self.id_head,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for group, module in self.named_parameter_groups().items():
            for name, p in module.state_dict().items():
                out[f"{group}.{name}"] = p.detach().numpy()
        out["inv_temperature"] = self.inv_temperature.detach().numpy()
        return out


def build_model(num_pids: int, num_domains: int, cfg: TrainConfig,
                height: int = 32, width: int = 16, channels: int = 3) -> TrainedModel:
    torch.manual_seed(cfg.seed)
    return TrainedModel(
        image_encoder=ImageEncoder(height, width, channels,
                                   embed_dim=cfg.embed_dim, seed=cfg.seed),
        text_encoder=TextEncoder(token_dim=cfg.token_dim, embed_dim=cfg.embed_dim,
                                 seed=cfg.seed, frozen=True),
        prompt_bank=PromptBank(num_pids, num_domains, token_dim=cfg.token_dim,
                               seed=cfg.seed),
        domain_classifier=DomainClassifier(cfg.embed_dim, num_domains, seed=cfg.seed),
        id_head=torch.nn.Linear(cfg.embed_dim, num_pids),
        inv_temperature=torch.tensor(float(cfg.inv_temperature)),
        num_pids=num_pids,
        num_domains=num_domains,
    )


# ---------------------------------------------------------------------------
# metric log
# ---------------------------------------------------------------------------

class MetricLog:
    """Per-epoch JSONL records: stage, phase, epoch, losses, lr, seed, wall_ms.

    wall_ms is written as 0 so two runs with the same config+seed serialize
    byte-identically; wall-clock timing lives in the run manifest instead.
    """

    def __init__(self):
        self.records: list[dict] = []

    def add(self, stage: str, phase: str, epoch: int, components: dict[str, float],
            lr: float, seed: int):
        total = float(sum(components.values()))
        self.records.append({
            "stage": stage,
            "phase": phase,
            "epoch": epoch,
            "loss_total": total,
            "loss_components": {k: float(v) for k, v in components.items()},
            "lr": lr,
            "seed": seed,
            "wall_ms": 0,
        })

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path):
        Path(path).write_text(self.to_jsonl())


def _check_finite(value: torch.Tensor, stage: str, epoch: int,
                  components: dict[str, float]):
    if not torch.isfinite(value):
        bad = [k for k, v in components.items() if not math.isfinite(v)]
        raise TrainingDiverged(
            f"non-finite loss in stage={stage} epoch={epoch} components={bad or 'total'}")


def _cosine_lr(base: float, epoch: int, total: int, enabled: bool) -> float:
    if not enabled or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(1, total)))


def _epoch_batches(split: DatasetSplit, cfg: TrainConfig,
                   rng: np.random.Generator) -> list[np.ndarray]:
    n = len(split.train_samples)
    per_epoch = max(1, n // cfg.batch_size)
    return [pk_sample(split, cfg.P, cfg.K, rng) for _ in range(per_epoch)]


def _deterministic_setup():
    if os.environ.get("FGDI_DETERMINISTIC", "1") != "0":
        torch.set_num_threads(1)


def _batch_labels(split: DatasetSplit, idx: np.ndarray,
                  label_map: dict[int, int]) -> BatchLabels:
    samples = split.train_samples
    pids = torch.tensor([label_map[samples[i].pid] for i in idx])
    doms = torch.tensor([samples[i].domain_id for i in idx])
    return BatchLabels(pids=pids, domain_ids=doms)


def _home_domains(split: DatasetSplit, label_map: dict[int, int]) -> torch.Tensor:
    """Label-indexed home domain of every training pid."""
    homes = torch.zeros(len(label_map), dtype=torch.long)
    for pid, lab in label_map.items():
        homes[lab] = split.identities[pid].home_domain
    return homes


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_stage_initial(cfg: TrainConfig, model: TrainedModel, split: DatasetSplit,
                      log: MetricLog | None = None) -> TrainedModel:
    """Warm-up: only the image encoder and id head update."""
    _deterministic_setup()
    epochs = cfg.plan.initial_epochs
    if epochs == 0:
        return model
    label_map = split.label_map()
    samples = split.train_samples
    pixels = torch.from_numpy(pixels_tensor(samples))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = list(model.image_encoder.parameters()) + list(model.id_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_encoder)
    for epoch in range(epochs):
        lr = _cosine_lr(cfg.lr_encoder, epoch, epochs, cfg.cosine_decay)
        for gparam in opt.param_groups:
            gparam["lr"] = lr
        comps = {"id": 0.0, "triplet": 0.0}
        batches = _epoch_batches(split, cfg, rng)
        for idx in batches:
            labels = _batch_labels(split, idx, label_map)
            V = model.image_encoder(pixels[idx])
            logits = model.id_head(V)
            l_id = losses.loss_id(logits, labels.pids, cfg.weights.smoothing_eps)
            l_tri = losses.loss_triplet(V, labels.pids, cfg.weights.margin_m)
            loss = l_id + l_tri
            comps["id"] += l_id.item() / len(batches)
            comps["triplet"] += l_tri.item() / len(batches)
            _check_finite(loss, "initial", epoch, comps)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if log is not None:
            log.add("initial", "", epoch, comps, lr, cfg.seed)
    model.stages_run.append("initial")
    return model


def _cached_image_features(model: TrainedModel, split: DatasetSplit) -> torch.Tensor:
    pixels = torch.from_numpy(pixels_tensor(split.train_samples))
    with torch.no_grad():
        feats = [model.image_encoder(pixels[i : i + 256])
                 for i in range(0, pixels.shape[0], 256)]
    return torch.cat(feats)


def run_stage_prompt(cfg: TrainConfig, model: TrainedModel, split: DatasetSplit,
                     log: MetricLog | None = None) -> TrainedModel:
    """Prompt learning. Phase A: ID tokens (+ domain classifier) against the
    adversarial domain CE; phase B: domain tokens (+ domain classifier) with
    the plain domain CE on full prompts. Encoders stay frozen throughout."""
    _deterministic_setup()
    if cfg.plan.id_token_epochs == 0 and cfg.plan.domain_token_epochs == 0:
        return model
    label_map = split.label_map()
    homes = _home_domains(split, label_map)
    V_cache = _cached_image_features(model, split)
    scale = model.inv_temperature

    def run_phase(phase: str, epochs: int, lr_params: list[torch.nn.Parameter],
                  with_domain_tokens: bool, reversed_grad: bool, seed_tag: int):
        if epochs == 0:
            return
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_tag]))
        opt = torch.optim.Adam(lr_params, lr=cfg.lr_prompt)
        for epoch in range(epochs):
            lr = _cosine_lr(cfg.lr_prompt, epoch, epochs, cfg.cosine_decay)
            for gparam in opt.param_groups:
                gparam["lr"] = lr
            comps = {"i2t": 0.0, "t2i": 0.0, "domain": 0.0}
            batches = _epoch_batches(split, cfg, rng)
            for idx in batches:
                labels = _batch_labels(split, idx, label_map)
                uniq = labels.unique_pids
                dom_ids = [int(homes[u]) for u in uniq] if with_domain_tokens else None
                seqs, mask = build_prompt_batch(
                    model.prompt_bank, model.text_encoder, uniq.tolist(), dom_ids)
                T_unique = encode_prompts(model.text_encoder, seqs, mask)
                row_of = {int(u): r for r, u in enumerate(uniq.tolist())}
                T_batch = T_unique[[row_of[int(p)] for p in labels.pids.tolist()]]
                V = V_cache[idx]
                l_i2t = losses.loss_i2t(V, T_batch, scale)
                l_t2i = losses.loss_t2i(V, T_unique, labels, scale, uniq)
                routed = grl(T_unique, cfg.grl_lambda) if reversed_grad else T_unique
                dom_logits = domain_classify(model.domain_classifier, routed)
                l_dom = losses.loss_domain(dom_logits, homes[uniq])
                loss = l_i2t + l_t2i + cfg.weights.alpha * l_dom
                comps["i2t"] += l_i2t.item() / len(batches)
                comps["t2i"] += l_t2i.item() / len(batches)
                comps["domain"] += cfg.weights.alpha * l_dom.item() / len(batches)
                _check_finite(loss, f"prompt/{phase}", epoch, comps)
                opt.zero_grad()
                loss.backward()
                opt.step()
            if log is not None:
                log.add("prompt", phase, epoch, comps, lr, cfg.seed)

    run_phase(
        "id_tokens", cfg.plan.id_token_epochs,
        [model.prompt_bank.id_tokens] + list(model.domain_classifier.parameters()),
        with_domain_tokens=False,
        reversed_grad=cfg.use_grl,
        seed_tag=2,
    )
    run_phase(
        "domain_tokens", cfg.plan.domain_token_epochs,
        [model.prompt_bank.domain_tokens] + list(model.domain_classifier.parameters()),
        with_domain_tokens=True,
        reversed_grad=False,
        seed_tag=3,
    )
    model.stages_run.append("prompt")
    return model


def _frozen_prompt_features(model: TrainedModel, split: DatasetSplit,
                            label_map: dict[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """(T_pos, T_neg): per-train-pid features of the domain-invariant and
    domain-relevant prompts, computed once per stage (prompt side frozen)."""
    homes = _home_domains(split, label_map)
    n = len(label_map)
    with torch.no_grad():
        seqs, mask = build_prompt_batch(
            model.prompt_bank, model.text_encoder, list(range(n)), None)
        T_pos = encode_prompts(model.text_encoder, seqs, mask)
        seqs, mask = build_prompt_batch(
            model.prompt_bank, model.text_encoder, list(range(n)),
            [int(homes[i]) for i in range(n)])
        T_neg = encode_prompts(model.text_encoder, seqs, mask)
    return T_pos, T_neg


def run_stage_finetune(cfg: TrainConfig, model: TrainedModel, split: DatasetSplit,
                       log: MetricLog | None = None) -> TrainedModel:
    """Final stage: image encoder + id head update, guided by frozen prompts."""
    _deterministic_setup()
    epochs = cfg.plan.finetune_epochs
    if epochs == 0:
        return model
    w = cfg.weights
    label_map = split.label_map()
    samples = split.train_samples
    pixels = torch.from_numpy(pixels_tensor(samples))
    T_pos, T_neg = _frozen_prompt_features(model, split, label_map)
    scale = model.inv_temperature
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    params = list(model.image_encoder.parameters()) + list(model.id_head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_encoder)
    for epoch in range(epochs):
        lr = _cosine_lr(cfg.lr_encoder, epoch, epochs, cfg.cosine_decay)
        for gparam in opt.param_groups:
            gparam["lr"] = lr
        comps = {"id": 0.0, "triplet": 0.0, "i2tce": 0.0, "apn": 0.0}
        batches = _epoch_batches(split, cfg, rng)
        for idx in batches:
            labels = _batch_labels(split, idx, label_map)
            V = model.image_encoder(pixels[idx])
            logits = model.id_head(V)
            l_id = losses.loss_id(logits, labels.pids, w.smoothing_eps)
            l_tri = losses.loss_triplet(V, labels.pids, w.margin_m)
            l_i2tce = torch.zeros(())
            apn = torch.zeros(())
            if w.apn_variant == ApnVariant.APNCE:
                apn = losses.loss_apnce(V, T_pos, T_neg, labels.pids, scale, cfg.i2tce_eps)
                loss = l_id + l_tri + apn
            else:
                if w.beta < 1.0:
                    l_i2tce = losses.loss_i2tce(V, T_pos, labels.pids, scale, cfg.i2tce_eps)
                if w.beta > 0.0:
                    if w.apn_variant == ApnVariant.CONTRASTIVE:
                        apn = losses.loss_apn_contrastive(
                            V, T_pos[labels.pids], T_neg, scale)
                    else:
                        apn = losses.loss_apn_triplet(
                            V, T_pos[labels.pids], T_neg[labels.pids],
                            w.margin_m, w.apn_variant)
                if w.beta == 0.0:
                    loss = l_id + l_tri + l_i2tce
                elif w.beta == 1.0:
                    loss = l_id + l_tri + apn
                else:
                    loss = l_id + l_tri + (1.0 - w.beta) * l_i2tce + w.beta * apn
            comps["id"] += l_id.item() / len(batches)
            comps["triplet"] += l_tri.item() / len(batches)
            comps["i2tce"] += l_i2tce.item() / len(batches)
            comps["apn"] += apn.item() / len(batches)
            _check_finite(loss, "finetune", epoch, comps)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if log is not None:
            log.add("finetune", "", epoch, comps, lr, cfg.seed)
    model.stages_run.append("finetune")
    return model


def train(cfg: TrainConfig, split: DatasetSplit,
          model: TrainedModel | None = None) -> tuple[TrainedModel, MetricLog]:
    """Run all three stages in order; deterministic for a fixed (cfg, seed)."""
    _deterministic_setup()
    torch.manual_seed(cfg.seed)
    if model is None:
        label_map = split.label_map()
        sample = split.train_samples[0]
        H, W, C = sample.pixels.shape
        num_domains = max(
            (s.domain_id for s in split.train_samples), default=0) + 1
        model = build_model(len(label_map), num_domains, cfg, H, W, C)
    log = MetricLog()
    model = run_stage_initial(cfg, model, split, log)
    model = run_stage_prompt(cfg, model, split, log)
    model = run_stage_finetune(cfg, model, split, log)
    return model, log


# ---------------------------------------------------------------------------
# checkpoints: zip of raw .npy arrays + JSON manifest, byte-reproducible
# ---------------------------------------------------------------------------

def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    arrays = model.state_arrays()
    manifest = {
        "format_version": FORMAT_VERSION,
        "embed_dim": model.image_encoder.embed_dim,
        "token_dim": model.text_encoder.token_dim,
        "id_tokens_per_pid": model.prompt_bank.M,
        "domain_tokens_per_domain": model.prompt_bank.N,
        "num_pids": model.num_pids,
        "num_domains": model.num_domains,
        "image_shape": [model.image_encoder.height, model.image_encoder.width,
                        model.image_encoder.channels],
        "stages_run": model.stages_run,
        "config_hash": model.config_hash,
        "arrays": sorted(arrays),
    }
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def writestr(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name])
            writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path, cfg: TrainConfig,
                    expected_num_pids: int | None = None,
                    expected_num_domains: int | None = None) -> TrainedModel:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["format_version"] != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {manifest['format_version']}")
        if expected_num_pids is not None and manifest["num_pids"] != expected_num_pids:
            raise ConfigError(
                f"checkpoint has {manifest['num_pids']} pids, expected {expected_num_pids}")
        if expected_num_domains is not None and manifest["num_domains"] != expected_num_domains:
            raise ConfigError(
                f"checkpoint has {manifest['num_domains']} domains, "
                f"expected {expected_num_domains}")
        if manifest["embed_dim"] != cfg.embed_dim or manifest["token_dim"] != cfg.token_dim:
            raise ConfigError("checkpoint dims do not match the configuration")
        H, W, C = manifest["image_shape"]
        model = build_model(manifest["num_pids"], manifest["num_domains"], cfg, H, W, C)
        model.stages_run = list(manifest["stages_run"])
        model.config_hash = manifest["config_hash"]
        for group, module in model.named_parameter_groups().items():
            state = {}
            for name in module.state_dict():
                arr = np.load(io.BytesIO(zf.read(f"arrays/{group}.{name}.npy")))
                state[name] = torch.from_numpy(arr.copy())
            module.load_state_dict(state)
        model.inv_temperature = torch.from_numpy(
            np.load(io.BytesIO(zf.read("arrays/inv_temperature.npy"))).copy())
    return model


def snapshot_state(module: torch.nn.Module) -> dict[str, bytes]:
    """Bit-exact snapshot used by the freeze-ledger checks."""
    return {k: v.detach().numpy().tobytes() for k, v in module.state_dict().items()}
