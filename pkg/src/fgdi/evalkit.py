"""Retrieval evaluation: camera-aware ranking, CMC/mAP, protocol runner.

`compute_map` is the production path; `oracle_ap` re-derives average
precision with a naive quadratic loop and shares no code with it, so the two
can cross-check each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .synthdata import DataConfig, DatasetSplit, ImageSample, build_dataset, pixels_tensor


class EvalError(ValueError):
    """Evaluation not possible for the given inputs."""


@dataclass
class RankingResult:
    """Per-query gallery orderings with camera filtering already applied."""

    orderings: list[np.ndarray]       # valid gallery indices, best first
    relevance: list[np.ndarray]       # bool per ordering entry
    skipped_queries: list[int]        # queries with no valid relevant entry


@dataclass
class EvalReport:
    map_score: float
    cmc: dict[int, float]             # k -> Rank-k accuracy
    num_queries: int
    num_skipped: int
    per_domain: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mAP": self.map_score,
            "cmc": {f"rank{k}": v for k, v in sorted(self.cmc.items())},
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
            "per_domain": self.per_domain,
        }


def extract_features(model, samples: list[ImageSample], batch_size: int = 256) -> np.ndarray:
    """Inference-mode image features, unit-norm rows, one per sample."""
    if not samples:
        return np.zeros((0, model.image_encoder.embed_dim), dtype=np.float32)
    pixels = torch.from_numpy(pixels_tensor(samples))
    feats = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            feats.append(model.image_encoder(pixels[i : i + batch_size]))
    return torch.cat(feats).numpy()


def rank(query_feats: np.ndarray, gallery_feats: np.ndarray,
         query_meta: list[ImageSample], gallery_meta: list[ImageSample]) -> RankingResult:
    """Sort gallery by descending similarity per query.

    Same-pid same-camera gallery entries are excluded from the ordering; ties
    break toward the lower gallery index. Queries left with zero valid
    relevant entries are dropped and counted.
    """
    g_pids = np.array([s.pid for s in gallery_meta])
    g_cams = np.array([s.camera_id for s in gallery_meta])
    sims = query_feats @ gallery_feats.T
    orderings, relevance, skipped = [], [], []
    for qi, q in enumerate(query_meta):
        valid = ~((g_pids == q.pid) & (g_cams == q.camera_id))
        idx = np.nonzero(valid)[0]
        rel = g_pids[idx] == q.pid
        if not rel.any():
            skipped.append(qi)
            continue
        # stable sort on negated scores keeps ascending-index tie order
        order = np.argsort(-sims[qi, idx], kind="stable")
        orderings.append(idx[order])
        relevance.append(rel[order])
    return RankingResult(orderings=orderings, relevance=relevance, skipped_queries=skipped)


def compute_map(ranking: RankingResult) -> float:
    """Mean over queries of average precision of the ranked gallery."""
    if not ranking.relevance:
        raise EvalError("no valid queries to evaluate")
    aps = []
    for rel in ranking.relevance:
        rel = rel.astype(np.float64)
        hits = np.cumsum(rel)
        prec_at_k = hits / np.arange(1, len(rel) + 1)
        aps.append(float((prec_at_k * rel).sum() / rel.sum()))
    return float(np.mean(aps))


def compute_cmc(ranking: RankingResult, ks: tuple[int, ...] = (1, 5, 10)) -> dict[int, float]:
    """Rank-k = fraction of queries whose first hit lands within the top k."""
    if not ranking.relevance:
        raise EvalError("no valid queries to evaluate")
    first_hits = np.array([int(np.argmax(rel)) + 1 for rel in ranking.relevance])
    return {k: float((first_hits <= k).mean()) for k in ks}


def oracle_ap(scores, relevance) -> float:
    """Average precision by exhaustive enumeration; independent of compute_map.

    Sorts by descending score (index breaks ties) with a selection loop, then
    recounts the relevant prefix from scratch at every relevant position.
    """
    scores = [float(s) for s in scores]
    rel = [bool(r) for r in relevance]
    if len(scores) != len(rel):
        raise EvalError("scores and relevance must align")
    if not any(rel):
        raise EvalError("no relevant item present")
    remaining = list(range(len(scores)))
    order = []
    while remaining:
        best = remaining[0]
        for j in remaining[1:]:
            if scores[j] > scores[best]:
                best = j
        order.append(best)
        remaining.remove(best)
    total_rel = sum(1 for r in rel if r)
    ap = 0.0
    for pos in range(len(order)):
        if not rel[order[pos]]:
            continue
        found = 0
        for before in range(pos + 1):
            if rel[order[before]]:
                found += 1
        ap += found / (pos + 1)
    return ap / total_rel


def evaluate_split(model, split: DatasetSplit, ks: tuple[int, ...] = (1, 5, 10)) -> EvalReport:
    """Feature extraction + ranking + metrics for one query/gallery split."""
    qf = extract_features(model, split.query)
    gf = extract_features(model, split.gallery)
    ranking = rank(qf, gf, split.query, split.gallery)
    return EvalReport(
        map_score=compute_map(ranking),
        cmc=compute_cmc(ranking, ks),
        num_queries=len(split.query),
        num_skipped=len(ranking.skipped_queries),
    )


def random_rank1_rate(split: DatasetSplit) -> float:
    """Expected Rank-1 under uniformly random ranking (chance floor)."""
    g_pids = np.array([s.pid for s in split.gallery])
    g_cams = np.array([s.camera_id for s in split.gallery])
    rates = []
    for q in split.query:
        valid = ~((g_pids == q.pid) & (g_cams == q.camera_id))
        rel = (g_pids == q.pid) & valid
        if valid.sum() and rel.sum():
            rates.append(rel.sum() / valid.sum())
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# leave-one-domain-out protocols
# ---------------------------------------------------------------------------

PROTOCOLS = ("p1", "p2", "p3")


def _round_config(cfg: DataConfig, heldout: int, sources: list[int]) -> DataConfig:
    return DataConfig(
        seed=cfg.seed,
        num_domains=cfg.num_domains,
        heldout_domain=heldout,
        pids_per_domain=cfg.pids_per_domain,
        images_per_pid=cfg.images_per_pid,
        latent_dim=cfg.latent_dim,
        height=cfg.height,
        width=cfg.width,
        channels=cfg.channels,
        num_cameras=cfg.num_cameras,
        heldout_affine_shift=cfg.heldout_affine_shift,
        heldout_background_scale=cfg.heldout_background_scale,
        heldout_noise_scale=cfg.heldout_noise_scale,
        source_domains=sources,
    )


def protocol_rounds(cfg: DataConfig, mode: str) -> list[DataConfig]:
    """Expand a protocol into per-round data configs.

    p1: train on the configured sources once, test every non-source domain
    (the config's held-out domain plus any other unused domains).
    p2: leave-one-domain-out over all domains (train splits of sources only).
    p3: as p2 but each source's would-be query/gallery pool joins training.
    """
    if mode not in PROTOCOLS:
        raise EvalError(f"unknown protocol {mode!r}")
    if cfg.num_domains < 2:
        raise EvalError("protocols need at least 2 domains")
    if mode == "p1":
        heldouts = [d for d in range(cfg.num_domains) if d not in cfg.source_domains]
        return [_round_config(cfg, h, list(cfg.source_domains)) for h in heldouts]
    rounds = []
    for held in range(cfg.num_domains):
        sources = [d for d in range(cfg.num_domains) if d != held]
        if len(sources) < 2:
            continue
        rounds.append(_round_config(cfg, held, sources))
    if not rounds:
        raise EvalError("protocols need at least 2 domains")
    return rounds


def build_protocol_split(round_cfg: DataConfig, mode: str) -> DatasetSplit:
    split = build_dataset(round_cfg)
    if mode == "p3":
        # enlarge source pools: extra identities per source domain stand in
        # for the merged train+test pools of the source datasets
        extra = DataConfig(
            seed=round_cfg.seed + 7919,
            num_domains=round_cfg.num_domains,
            heldout_domain=round_cfg.heldout_domain,
            pids_per_domain=max(1, round_cfg.pids_per_domain // 2),
            images_per_pid=round_cfg.images_per_pid,
            latent_dim=round_cfg.latent_dim,
            height=round_cfg.height,
            width=round_cfg.width,
            channels=round_cfg.channels,
            num_cameras=round_cfg.num_cameras,
            source_domains=list(round_cfg.source_domains),
        )
        offset = round_cfg.num_domains * round_cfg.pids_per_domain
        extra_split = build_dataset(extra)
        for dom, samples in extra_split.train.items():
            relabeled = [
                ImageSample(pixels=s.pixels, pid=s.pid + offset,
                            domain_id=s.domain_id, camera_id=s.camera_id)
                for s in samples
            ]
            split.train[dom].extend(relabeled)
            for s in relabeled:
                ident = extra_split.identities[s.pid - offset]
                split.identities[s.pid] = type(ident)(
                    pid=s.pid, latent=ident.latent, home_domain=ident.home_domain)
    return split


def run_protocol(train_fn, cfg: DataConfig, mode: str,
                 ks: tuple[int, ...] = (1, 5, 10)) -> EvalReport:
    """Train and evaluate every round of a protocol; averages the metrics.

    ``train_fn(split) -> model`` supplies the trained model for one round, so
    callers control the training recipe (or pass a closure returning a
    pre-trained model for feature-only evaluation). Rounds with identical
    source sets (p1's multiple held-out mini-domains) train once.
    """
    rounds = protocol_rounds(cfg, mode)
    per_domain: dict[str, dict] = {}
    maps, cmcs = [], []
    model_cache: dict[tuple, object] = {}
    for rc in rounds:
        split = build_protocol_split(rc, mode)
        key = tuple(sorted(rc.source_domains))
        if key not in model_cache:
            model_cache[key] = train_fn(split)
        model = model_cache[key]
        report = evaluate_split(model, split, ks)
        per_domain[f"domain{rc.heldout_domain}"] = report.to_dict()
        maps.append(report.map_score)
        cmcs.append(report.cmc)
    avg_cmc = {k: float(np.mean([c[k] for c in cmcs])) for k in ks}
    return EvalReport(
        map_score=float(np.mean(maps)),
        cmc=avg_cmc,
        num_queries=sum(d["num_queries"] for d in per_domain.values()),
        num_skipped=sum(d["num_skipped"] for d in per_domain.values()),
        per_domain=per_domain,
    )


# ---------------------------------------------------------------------------
# feature dump interop
# ---------------------------------------------------------------------------

def dump_features(path: str | Path, feats: np.ndarray, samples: list[ImageSample]) -> None:
    """Binary feature matrix + JSON sidecar with pids/cameras/domains."""
    path = Path(path)
    feats.astype(np.float32).tofile(path)
    sidecar = {
        "shape": list(feats.shape),
        "dtype": "float32",
        "pids": [s.pid for s in samples],
        "camera_ids": [s.camera_id for s in samples],
        "domain_ids": [s.domain_id for s in samples],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_features(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    feats = np.fromfile(path, dtype=np.float32).reshape(sidecar["shape"])
    return feats, sidecar
