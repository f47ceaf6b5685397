"""Training objectives as pure, differentiable functions of features/logits.

Conventions shared by every loss here:

* image/text features arrive L2-normalized; similarity is ``scale * (x . y)``
  with an explicit inverse-temperature ``scale`` argument,
* reduction over a batch is the arithmetic mean,
* Euclidean distances are taken on the unit sphere, so ``ed^2 = 2 - 2*cos``,
* all losses are finite and non-negative for finite inputs, and their
  autograd gradients are validated against central finite differences in the
  test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ApnVariant:
    ED = "ED"
    CS = "CS"
    CONTRASTIVE = "CONTRASTIVE"
    APNCE = "APNCE"

    ALL = (ED, CS, CONTRASTIVE, APNCE)


@dataclass
class LossWeights:
    alpha: float = 0.01        # domain-adversarial weight
    beta: float = 0.3          # prompt-guidance mix in the final stage
    margin_m: float = 0.3
    smoothing_eps: float = 0.1
    apn_variant: str = ApnVariant.ED

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if self.margin_m < 0:
            raise ValueError("margin must be >= 0")
        if not 0.0 <= self.smoothing_eps < 1.0:
            raise ValueError("smoothing_eps must be in [0, 1)")
        if self.apn_variant not in ApnVariant.ALL:
            raise ValueError(f"unknown apn variant {self.apn_variant!r}")


@dataclass
class BatchLabels:
    """Label index vectors for one batch plus the positive sets per pid."""

    pids: torch.Tensor          # length B, train-label indices
    domain_ids: torch.Tensor    # length B

    @property
    def unique_pids(self) -> torch.Tensor:
        seen: dict[int, None] = {}
        for p in self.pids.tolist():
            seen.setdefault(int(p), None)
        return torch.tensor(list(seen), dtype=torch.long)

    def positive_sets(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, p in enumerate(self.pids.tolist()):
            out.setdefault(int(p), []).append(i)
        return out


def _check_features(*mats: torch.Tensor):
    d = mats[0].shape[-1]
    for m in mats:
        if m.ndim != 2:
            raise ValueError("features must be 2-d (rows of vectors)")
        if m.shape[-1] != d:
            raise ValueError(f"feature dim mismatch: {m.shape[-1]} != {d}")


# ---------------------------------------------------------------------------
# contrastive pair losses
# ---------------------------------------------------------------------------

def loss_i2t(V: torch.Tensor, T_batch: torch.Tensor, scale: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Image-to-text contrastive loss with row-aligned single positives.

    Row i of ``T_batch`` is the prompt feature for sample i's pid; in-batch
    duplicate texts of a repeated pid act as ordinary denominators.
    """
    _check_features(V, T_batch)
    if V.shape[0] != T_batch.shape[0]:
        raise ValueError("V and T_batch must have the same number of rows")
    sims = scale * (V @ T_batch.t())
    return F.cross_entropy(sims, torch.arange(V.shape[0]))


def loss_t2i(V: torch.Tensor, T_unique: torch.Tensor, labels: BatchLabels,
             scale: float | torch.Tensor = 1.0,
             unique_pids: torch.Tensor | None = None) -> torch.Tensor:
    """Text-to-image loss over the multiple in-batch positives of each pid.

    For each represented pid y with text feature T_y and positive index set
    P(y): -(1/|P(y)|) * sum_{p in P(y)} log softmax_p(scale * V @ T_y),
    averaged over represented pids.
    """
    _check_features(V, T_unique)
    if unique_pids is None:
        unique_pids = labels.unique_pids
    if T_unique.shape[0] != unique_pids.shape[0]:
        raise ValueError("one text row per represented pid expected")
    pos_sets = labels.positive_sets()
    sims = scale * (V @ T_unique.t())          # B x U
    logp = F.log_softmax(sims, dim=0)          # softmax over images per text
    terms = []
    for col, y in enumerate(unique_pids.tolist()):
        pos = pos_sets.get(int(y), [])
        if not pos:
            raise ValueError(f"pid {y} has an empty positive set")
        terms.append(-logp[pos, col].mean())
    return torch.stack(terms).mean()


def loss_domain(logits: torch.Tensor, domain_ids: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy of the domain classifier."""
    n_dom = logits.shape[-1]
    if domain_ids.min() < 0 or domain_ids.max() >= n_dom:
        raise ValueError("domain id out of range of classifier outputs")
    return F.cross_entropy(logits, domain_ids.long())


def loss_i2tce(V: torch.Tensor, T_all: torch.Tensor, pids: torch.Tensor,
               scale: float | torch.Tensor = 1.0, eps: float = 0.0) -> torch.Tensor:
    """Image-to-text cross-entropy against one prompt feature per train pid."""
    _check_features(V, T_all)
    sims = scale * (V @ T_all.t())
    if eps == 0.0:
        return F.cross_entropy(sims, pids.long())
    return _smoothed_ce(sims, pids.long(), eps)


# ---------------------------------------------------------------------------
# classification / metric losses
# ---------------------------------------------------------------------------

def _smoothed_ce(logits: torch.Tensor, targets: torch.Tensor, eps: float) -> torch.Tensor:
    # (1 - eps) on the true class, eps / (num_classes - 1) spread elsewhere
    n = logits.shape[-1]
    logp = F.log_softmax(logits, dim=-1)
    q = torch.full_like(logp, eps / (n - 1))
    q.scatter_(1, targets[:, None], 1.0 - eps)
    return -(q * logp).sum(dim=-1).mean()


def loss_id(class_logits: torch.Tensor, pids: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Identity cross-entropy with label smoothing."""
    n = class_logits.shape[-1]
    pids = pids.long()
    if pids.min() < 0 or pids.max() >= n:
        raise ValueError("pid label out of range of the id head")
    if eps == 0.0:
        return F.cross_entropy(class_logits, pids)
    return _smoothed_ce(class_logits, pids, eps)


def loss_triplet(V: torch.Tensor, pids: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss with Euclidean distances on unit features."""
    _check_features(V)
    pids = pids.long()
    if torch.unique(pids).numel() < 2:
        raise ValueError("triplet loss needs at least 2 distinct pids in batch")
    same = pids[:, None] == pids[None, :]
    eye = torch.eye(len(pids), dtype=torch.bool)
    if not (same & ~eye).any(dim=1).all():
        raise ValueError("every anchor needs an in-batch positive")
    d2 = (2.0 - 2.0 * (V @ V.t())).clamp_min(0.0)
    dist = torch.sqrt(d2 + 1e-12)
    big = torch.finfo(dist.dtype).max
    hardest_pos = dist.masked_fill(~(same & ~eye), -big).max(dim=1).values
    hardest_neg = dist.masked_fill(same, big).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


# ---------------------------------------------------------------------------
# prompt-guidance (anchor / positive-prompt / negative-prompt) losses
# ---------------------------------------------------------------------------

def loss_apn_triplet(anchor: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor,
                     margin: float = 0.3, variant: str = ApnVariant.ED) -> torch.Tensor:
    """Row-wise hinge pulling anchors to positive prompts, pushing from negative.

    ED measures dissimilarity (hinge on ed(a,p) - ed(a,n) + m); CS measures
    similarity, so its hinge flips (cos(a,n) - cos(a,p) + m). Both decrease
    as anchors approach their positives.
    """
    _check_features(anchor, pos, neg)
    if not (anchor.shape == pos.shape == neg.shape):
        raise ValueError("anchor/positive/negative must be row-aligned")
    if variant == ApnVariant.ED:
        d_ap = torch.sqrt(((anchor - pos) ** 2).sum(dim=1) + 1e-12)
        d_an = torch.sqrt(((anchor - neg) ** 2).sum(dim=1) + 1e-12)
        per_row = F.relu(d_ap - d_an + margin)
    elif variant == ApnVariant.CS:
        cs_ap = (anchor * pos).sum(dim=1)
        cs_an = (anchor * neg).sum(dim=1)
        per_row = F.relu(cs_an - cs_ap + margin)
    else:
        raise ValueError(f"triplet form only supports ED/CS, got {variant!r}")
    return per_row.mean()


def loss_apn_contrastive(anchor: torch.Tensor, pos: torch.Tensor,
                         neg_all: torch.Tensor,
                         scale: float | torch.Tensor = 1.0) -> torch.Tensor:
    """Contrastive guidance: per-sample positives vs the pool of negatives.

    The candidate block stacks the B per-sample positive rows first, then the
    M_u negative prompt rows; row i's positive is candidate i.
    """
    _check_features(anchor, pos, neg_all)
    if anchor.shape[0] != pos.shape[0]:
        raise ValueError("one positive row per anchor expected")
    if neg_all.shape[0] == 0:
        raise ValueError("negative prompt set is empty")
    cand = torch.cat([pos, neg_all], dim=0)            # (B + M_u) x d
    sims = scale * (anchor @ cand.t())
    return F.cross_entropy(sims, torch.arange(anchor.shape[0]))


def loss_apnce(anchor: torch.Tensor, pos_star: torch.Tensor, neg_star: torch.Tensor,
               pid_rows: torch.Tensor, scale: float | torch.Tensor = 1.0,
               eps: float = 0.0) -> torch.Tensor:
    """Fused guidance CE: per-pid positives scored against a 2*M_u candidate set.

    ``pos_star``/``neg_star`` hold one row per unique pid (aligned); the
    candidate block is their concatenation and sample i's target is the
    positive row of its pid.
    """
    _check_features(anchor, pos_star, neg_star)
    if pos_star.shape != neg_star.shape:
        raise ValueError("positive/negative prompt tables must align per pid")
    pid_rows = pid_rows.long()
    if pid_rows.shape[0] != anchor.shape[0]:
        raise ValueError("need one positive-row index per anchor")
    if pid_rows.min() < 0 or pid_rows.max() >= pos_star.shape[0]:
        raise ValueError("pid row index out of range of the prompt tables")
    cand = torch.cat([pos_star, neg_star], dim=0)      # 2*M_u x d
    sims = scale * (anchor @ cand.t())
    if eps == 0.0:
        return F.cross_entropy(sims, pid_rows)
    return _smoothed_ce(sims, pid_rows, eps)


# ---------------------------------------------------------------------------
# stage compositions
# ---------------------------------------------------------------------------

def loss_stage_initial(class_logits: torch.Tensor, V: torch.Tensor,
                       pids: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Image-encoder warm-up objective: identity CE + batch-hard triplet."""
    return loss_id(class_logits, pids, w.smoothing_eps) + loss_triplet(V, pids, w.margin_m)


def loss_stage2(V: torch.Tensor, T_batch: torch.Tensor, T_unique: torch.Tensor,
                labels: BatchLabels, domain_logits_after_grl: torch.Tensor,
                w: LossWeights, scale: float | torch.Tensor = 1.0,
                unique_pids: torch.Tensor | None = None,
                domain_targets: torch.Tensor | None = None) -> torch.Tensor:
    """Prompt-learning objective: pair losses + weighted adversarial domain CE.

    The caller routes the text features through ``grl`` before the domain
    classifier; this function just composes the terms.
    """
    pair = loss_i2t(V, T_batch, scale) + loss_t2i(V, T_unique, labels, scale, unique_pids)
    if domain_targets is None:
        domain_targets = labels.domain_ids
    return pair + w.alpha * loss_domain(domain_logits_after_grl, domain_targets)


def loss_stage3(class_logits: torch.Tensor, V: torch.Tensor, pids: torch.Tensor,
                T_all: torch.Tensor, w: LossWeights,
                scale: float | torch.Tensor = 1.0,
                apn_term: torch.Tensor | None = None,
                i2tce_eps: float = 0.0) -> torch.Tensor:
    """Final fine-tuning objective.

    id + triplet + (1-beta)*i2tce + beta*apn for the triplet/contrastive
    guidance variants. beta=0 drops the guidance term (and is bitwise equal
    to the two-stage baseline composition); beta=1 drops the i2tce term.
    For the fused APNCE variant, pass the fused term via ``apn_term``; it
    replaces both weighted terms.
    """
    base = loss_id(class_logits, pids, w.smoothing_eps) + loss_triplet(V, pids, w.margin_m)
    if w.apn_variant == ApnVariant.APNCE:
        if apn_term is None:
            raise ValueError("APNCE variant requires the fused apn term")
        return base + apn_term
    if w.beta == 0.0:
        return base + loss_i2tce(V, T_all, pids, scale, i2tce_eps)
    if apn_term is None:
        raise ValueError("beta > 0 requires an apn term")
    if w.beta == 1.0:
        return base + apn_term
    return base + (1.0 - w.beta) * loss_i2tce(V, T_all, pids, scale, i2tce_eps) + w.beta * apn_term
