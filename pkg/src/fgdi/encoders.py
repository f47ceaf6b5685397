"""Miniature dual encoder: image tower, frozen text tower, prompt bank, GRL.

Both towers project into one shared d-dimensional space and L2-normalize
their outputs. The text tower is frozen after construction; the only
learnable text-side content is the prompt-token bank spliced into a fixed
word template. Towers are deliberately tiny (smooth activations, float64
capable) so every gradient can be checked against finite differences.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

# fixed template vocabulary; ids 0..2 are special
PAD, BOS, EOS = 0, 1, 2
_WORDS = ["a", "photo", "of", "person", "from", "dataset", "."]
VOCAB = {w: i + 3 for i, w in enumerate(_WORDS)}
VOCAB_SIZE = 64  # headroom beyond the template words

PREFIX = [BOS, VOCAB["a"], VOCAB["photo"], VOCAB["of"], VOCAB["a"]]
SUFFIX_PLAIN = [VOCAB["person"], VOCAB["."], EOS]
MID_DOMAIN = [VOCAB["person"], VOCAB["from"]]
SUFFIX_DOMAIN = [VOCAB["dataset"], VOCAB["."], EOS]


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


class ImageEncoder(nn.Module):
    """Patchify(4x4) -> per-patch embed -> 2 hidden layers -> project to d."""

    def __init__(self, height: int = 32, width: int = 16, channels: int = 3,
                 embed_dim: int = 32, patch: int = 4, patch_dim: int = 24,
                 hidden: int = 128, seed: int = 0):
        super().__init__()
        if height % patch or width % patch:
            raise ValueError("image size must be divisible by the patch size")
        self.height, self.width, self.channels = height, width, channels
        self.patch = patch
        self.embed_dim = embed_dim
        n_patches = (height // patch) * (width // patch)
        g = torch.Generator().manual_seed(seed)
        self.patch_embed = nn.Linear(patch * patch * channels, patch_dim)
        self.pos = nn.Parameter(torch.empty(n_patches, patch_dim).normal_(0, 0.02, generator=g))
        self.fc1 = nn.Linear(n_patches * patch_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.proj = nn.Linear(hidden, embed_dim)
        self._init(g)

    def _init(self, g: torch.Generator):
        # fan-in scaling keeps pre-normalization features O(1): the final
        # L2 normalize must never divide by a vanishing norm
        for lin in (self.patch_embed, self.fc1, self.fc2, self.proj):
            nn.init.trunc_normal_(lin.weight, std=lin.in_features ** -0.5, generator=g)
            nn.init.zeros_(lin.bias)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        """B x H x W x C in [0,1] -> B x d unit rows."""
        if not torch.isfinite(batch).all():
            raise ValueError("non-finite pixels in image batch")
        B = batch.shape[0]
        p = self.patch
        x = batch.reshape(B, self.height // p, p, self.width // p, p, self.channels)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, -1, p * p * self.channels)
        x = self.patch_embed(x) + self.pos
        x = F.gelu(x).reshape(B, -1)
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        return l2_normalize(self.proj(x))


class _SelfAttentionBlock(nn.Module):
    """Pre-LN single-head attention + MLP, explicit so float64 just works."""

    def __init__(self, dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp1 = nn.Linear(dim, 2 * dim)
        self.mlp2 = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # mask: B x L, 1 for real tokens
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        neg = torch.finfo(scores.dtype).min
        scores = scores.masked_fill(mask[:, None, :] == 0, neg)
        x = x + self.attn_out(torch.softmax(scores, dim=-1) @ v)
        x = x + self.mlp2(F.gelu(self.mlp1(self.ln2(x))))
        return x


class TextEncoder(nn.Module):
    """Token + positional embeddings, 2 attention blocks, projection to d.

    Frozen by default: the prompt bank is the only trainable text-side state.
    """

    def __init__(self, token_dim: int = 32, embed_dim: int = 32,
                 max_len: int = 24, seed: int = 0, frozen: bool = True):
        super().__init__()
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        g = torch.Generator().manual_seed(seed + 1)
        self.token_embed = nn.Parameter(
            torch.empty(VOCAB_SIZE, token_dim).normal_(0, 0.08, generator=g))
        self.pos_embed = nn.Parameter(
            torch.empty(max_len, token_dim).normal_(0, 0.08, generator=g))
        self.blocks = nn.ModuleList([_SelfAttentionBlock(token_dim) for _ in range(2)])
        for blk in self.blocks:
            for lin in (blk.qkv, blk.attn_out, blk.mlp1, blk.mlp2):
                nn.init.trunc_normal_(lin.weight, std=lin.in_features ** -0.5, generator=g)
                nn.init.zeros_(lin.bias)
        self.ln_final = nn.LayerNorm(token_dim)
        self.proj = nn.Linear(token_dim, embed_dim)
        nn.init.trunc_normal_(self.proj.weight, std=token_dim ** -0.5, generator=g)
        nn.init.zeros_(self.proj.bias)
        self.frozen = frozen
        if frozen:
            self.freeze()

    def freeze(self):
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, sequences: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """n x L x token_dim embedding sequences (padded) -> n x d unit rows.

        The pooled feature is taken at each sequence's last real token (EOS).
        """
        if sequences.ndim != 3 or sequences.shape[1] == 0:
            raise ValueError("expected non-empty n x L x token_dim sequences")
        if mask.shape != sequences.shape[:2]:
            raise ValueError("mask shape must match sequence layout")
        if (mask.sum(dim=1) == 0).any():
            raise ValueError("empty sequence in batch")
        x = sequences + self.pos_embed[: sequences.shape[1]]
        for blk in self.blocks:
            x = blk(x, mask)
        last = mask.sum(dim=1).long() - 1
        pooled = self.ln_final(x[torch.arange(x.shape[0]), last])
        return l2_normalize(self.proj(pooled))


class PromptBank(nn.Module):
    """Learnable ID-specific and domain-specific prompt tokens.

    Template: "A photo of a [X]*M person from [D]*N dataset."; building a
    prompt without a domain drops the whole "from ... dataset" clause.
    """

    def __init__(self, num_pids: int, num_domains: int, token_dim: int = 32,
                 id_tokens_per_pid: int = 4, domain_tokens_per_domain: int = 1,
                 seed: int = 0):
        super().__init__()
        self.num_pids = num_pids
        self.num_domains = num_domains
        self.M = id_tokens_per_pid
        self.N = domain_tokens_per_domain
        g = torch.Generator().manual_seed(seed + 2)
        self.id_tokens = nn.Parameter(
            torch.empty(num_pids, self.M, token_dim).normal_(0, 0.02, generator=g))
        self.domain_tokens = nn.Parameter(
            torch.empty(num_domains, self.N, token_dim).normal_(0, 0.02, generator=g))
        self.register_buffer(
            "template_token_ids",
            torch.tensor(PREFIX + MID_DOMAIN + SUFFIX_DOMAIN + SUFFIX_PLAIN),
        )

    def prompt_length(self, with_domain: bool) -> int:
        if with_domain:
            return len(PREFIX) + self.M + len(MID_DOMAIN) + self.N + len(SUFFIX_DOMAIN)
        return len(PREFIX) + self.M + len(SUFFIX_PLAIN)


def build_prompt(bank: PromptBank, text_encoder: TextEncoder, pid: int,
                 domain_id: int | None = None) -> torch.Tensor:
    """Token-embedding sequence for one pid, with or without domain tokens."""
    if pid < 0 or pid >= bank.num_pids:
        raise IndexError(f"pid {pid} out of range [0, {bank.num_pids})")
    if domain_id is not None and not (0 <= domain_id < bank.num_domains):
        raise IndexError(f"domain_id {domain_id} out of range [0, {bank.num_domains})")
    emb = text_encoder.token_embed
    parts = [emb[PREFIX], bank.id_tokens[pid]]
    if domain_id is None:
        parts.append(emb[SUFFIX_PLAIN])
    else:
        parts.extend([emb[MID_DOMAIN], bank.domain_tokens[domain_id], emb[SUFFIX_DOMAIN]])
    return torch.cat(parts, dim=0)


def build_prompt_batch(bank: PromptBank, text_encoder: TextEncoder,
                       pids: list[int] | torch.Tensor,
                       domain_ids: list[int | None] | None = None,
                       ) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack prompts into padded (n, L, token_dim) sequences + mask."""
    pids = [int(p) for p in pids]
    if domain_ids is None:
        domain_ids = [None] * len(pids)
    seqs = [build_prompt(bank, text_encoder, p, d) for p, d in zip(pids, domain_ids)]
    L = max(s.shape[0] for s in seqs)
    dtype = bank.id_tokens.dtype
    out = torch.zeros(len(seqs), L, seqs[0].shape[1], dtype=dtype)
    mask = torch.zeros(len(seqs), L, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = 1
    return out, mask


def encode_images(encoder: ImageEncoder, batch: torch.Tensor) -> torch.Tensor:
    return encoder(batch)


def encode_prompts(text_encoder: TextEncoder, sequences: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    return text_encoder(sequences, mask)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)  # aliases x: bitwise-identical forward

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    if lam < 0:
        raise ValueError("reversal strength must be >= 0")
    return _GradReverse.apply(x, lam)


class DomainClassifier(nn.Module):
    """Single affine map d -> num_domains; softmax lives in the loss."""

    def __init__(self, embed_dim: int, num_domains: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(embed_dim, num_domains)
        g = torch.Generator().manual_seed(seed + 3)
        nn.init.trunc_normal_(self.linear.weight, std=0.04, generator=g)
        nn.init.zeros_(self.linear.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"feature dim {feats.shape[-1]} != {self.linear.in_features}")
        return self.linear(feats)


def domain_classify(classifier: DomainClassifier, text_feat: torch.Tensor) -> torch.Tensor:
    return classifier(text_feat)
