"""Stage 3: prefix-guided caption generation.

A small autoregressive transformer decoder is pretrained on the caption
corpus (stage 0) and then frozen. Conditioning happens purely through
per-layer key/value prefixes produced from the pooled CSI embedding by a
trainable feed-forward map; prefix positions are attendable from every
token position and are never causally masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from wifi2cap.config import DecoderConfig, RunConfig, config_hash, substream_seed
from wifi2cap.objectives import lm_nll
from wifi2cap.synth.captions import Tokenizer
from wifi2cap.tensorio import load_checkpoint, save_checkpoint
from wifi2cap.trainutil import (
    StepLogger,
    batch_indices,
    cosine_lr,
    load_state_from_tensors,
    state_to_tensors,
)


def attend_with_prefix(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    prefix_k: torch.Tensor | None = None,
    prefix_v: torch.Tensor | None = None,
    causal: bool = True,
) -> torch.Tensor:
    """Softmax attention over [prefix keys; token keys].

    Shapes are head-partitioned: q/k/v are ... x T x d_k, prefixes are
    ... x L_p x d_k with matching leading dims. The causal mask applies
    only among token positions; every query may attend all prefix slots.
    With an empty prefix this is exactly standard causal self-attention.
    """
    if (prefix_k is None) != (prefix_v is None):
        raise ValueError("prefix_k and prefix_v must be given together")
    if prefix_k is not None and prefix_k.shape[:-2] + prefix_k.shape[-1:] != k.shape[:-2] + k.shape[-1:]:
        raise ValueError(
            f"prefix shape {tuple(prefix_k.shape)} incompatible with keys {tuple(k.shape)}"
        )
    if prefix_k is not None and prefix_k.shape[-2] > 0:
        full_k = torch.cat([prefix_k, k], dim=-2)
        full_v = torch.cat([prefix_v, v], dim=-2)
        lp = prefix_k.shape[-2]
    else:
        full_k, full_v = k, v
        lp = 0
    scores = q @ full_k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if causal:
        tq, tk = q.shape[-2], k.shape[-2]
        future = torch.triu(torch.ones(tq, tk, dtype=torch.bool, device=q.device), diagonal=1)
        scores[..., lp:] = scores[..., lp:].masked_fill(future, float("-inf"))
    return torch.softmax(scores, dim=-1) @ full_v


@dataclass
class PrefixBundle:
    """Per-layer key/value prefixes: each entry is ... x L_p x d_h."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ValueError("keys and values must cover the same layers")
        shapes = {tuple(t.shape) for t in self.keys + self.values}
        if len(shapes) > 1:
            raise ValueError(f"prefix shapes must be uniform across layers, got {shapes}")

    @property
    def num_layers(self) -> int:
        return len(self.keys)


class PrefixMap(nn.Module):
    """Feed-forward map from a CSI embedding to layer-wise K/V prefixes.

    The flat output reshapes to layers x L_p x 2 d_h; the factor-2 axis
    splits into keys and values.
    """

    def __init__(self, embed_dim: int, layers: int, prefix_len: int,
                 hidden_dim: int, mlp_hidden: int):
        super().__init__()
        self.arch = {
            "embed_dim": embed_dim, "layers": layers, "prefix_len": prefix_len,
            "hidden_dim": hidden_dim, "mlp_hidden": mlp_hidden,
        }
        self.layers = layers
        self.prefix_len = prefix_len
        self.hidden_dim = hidden_dim
        self.net = nn.Sequential(
            nn.Linear(embed_dim, mlp_hidden),
            nn.Tanh(),
            nn.Linear(mlp_hidden, layers * prefix_len * 2 * hidden_dim),
        )

    def forward(self, c: torch.Tensor) -> PrefixBundle:
        if c.shape[-1] != self.net[0].in_features:
            raise ValueError(f"embedding dim {c.shape[-1]} != expected {self.net[0].in_features}")
        single = c.ndim == 1
        if single:
            c = c.unsqueeze(0)
        flat = self.net(c)
        full = flat.view(c.shape[0], self.layers, self.prefix_len, 2, self.hidden_dim)
        if single:
            full = full.squeeze(0)
            return PrefixBundle(
                keys=[full[l, :, 0] for l in range(self.layers)],
                values=[full[l, :, 1] for l in range(self.layers)],
            )
        return PrefixBundle(
            keys=[full[:, l, :, 0] for l in range(self.layers)],
            values=[full[:, l, :, 1] for l in range(self.layers)],
        )


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, prefix_k=None, prefix_v=None) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        pk = pv = None
        if prefix_k is not None:
            # prefixes arrive as B x L_p x d_h and are shared across heads
            pk = self._split(prefix_k)
            pv = self._split(prefix_v)
        attended = attend_with_prefix(q, k, v, pk, pv, causal=True)
        return self.out(attended.transpose(1, 2).reshape(b, t, d))


class _DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, x, prefix_k=None, prefix_v=None):
        x = x + self.attn(self.ln1(x), prefix_k, prefix_v)
        return x + self.mlp(self.ln2(x))


class CaptionDecoder(nn.Module):
    """Tiny causal transformer LM; frozen after pretraining.

    Token positions are numbered from zero regardless of prefix length
    (prefix slots carry no positional embedding).
    """

    def __init__(self, vocab_size: int, layers: int, heads: int, hidden_dim: int,
                 ff_mult: int, max_len: int):
        super().__init__()
        self.arch = {
            "vocab_size": vocab_size, "layers": layers, "heads": heads,
            "hidden_dim": hidden_dim, "ff_mult": ff_mult, "max_len": max_len,
        }
        self.tok_emb = nn.Embedding(vocab_size, hidden_dim)
        self.pos_emb = nn.Embedding(max_len, hidden_dim)
        self.blocks = nn.ModuleList(
            [_DecoderBlock(hidden_dim, heads, ff_mult) for _ in range(layers)]
        )
        self.ln_f = nn.LayerNorm(hidden_dim)
        self.head = nn.Linear(hidden_dim, vocab_size, bias=False)

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def forward(self, tokens: torch.Tensor, prefixes: PrefixBundle | None = None) -> torch.Tensor:
        """B x T token ids -> B x T x V logits."""
        if tokens.ndim != 2:
            raise ValueError("expected a B x T token batch")
        t = tokens.shape[1]
        if t > self.arch["max_len"]:
            raise ValueError(f"sequence length {t} exceeds max_len {self.arch['max_len']}")
        if prefixes is not None and prefixes.num_layers != self.num_layers:
            raise ValueError(
                f"prefix bundle has {prefixes.num_layers} layers, decoder has {self.num_layers}"
            )
        pos = torch.arange(t, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)
        for i, block in enumerate(self.blocks):
            if prefixes is None:
                x = block(x)
            else:
                x = block(x, prefixes.keys[i], prefixes.values[i])
        return self.head(self.ln_f(x))


def make_prefix(c: torch.Tensor, prefix_map: PrefixMap) -> PrefixBundle:
    """Pooled CSI embedding -> per-layer key/value prefixes."""
    return prefix_map(c)


def _step_log_probs(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Log-probability of each target token under the per-step softmax."""
    logp = F.log_softmax(logits, dim=-1)
    return logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def sequence_nll(decoder: CaptionDecoder, tokens: torch.Tensor, lengths: torch.Tensor,
                 prefixes: PrefixBundle | None = None) -> torch.Tensor:
    """Teacher-forced autoregressive NLL (mean over batch, sum over tokens)."""
    logits = decoder(tokens[:, :-1], prefixes)
    lp = _step_log_probs(logits, tokens[:, 1:])
    return lm_nll(lp, lengths - 1)


def next_token_accuracy(decoder: CaptionDecoder, tokens: torch.Tensor,
                        lengths: torch.Tensor, prefixes: PrefixBundle | None = None) -> float:
    """Fraction of non-pad positions whose argmax prediction hits the target."""
    with torch.no_grad():
        logits = decoder(tokens[:, :-1], prefixes)
        pred = logits.argmax(dim=-1)
        steps = lengths - 1
        mask = torch.arange(tokens.shape[1] - 1).unsqueeze(0) < steps.unsqueeze(1)
        hits = ((pred == tokens[:, 1:]) & mask).sum()
        return float(hits) / float(mask.sum())


def corpus_perplexity(decoder: CaptionDecoder, tokens: torch.Tensor,
                      lengths: torch.Tensor) -> float:
    """exp of the mean per-token NLL over the corpus (no conditioning)."""
    with torch.no_grad():
        logits = decoder(tokens[:, :-1])
        lp = _step_log_probs(logits, tokens[:, 1:])
        steps = lengths - 1
        mask = torch.arange(tokens.shape[1] - 1).unsqueeze(0) < steps.unsqueeze(1)
        total = -(lp * mask).sum()
        return float(torch.exp(total / mask.sum()))


def save_decoder(decoder: CaptionDecoder, path: str | Path, cfg: RunConfig,
                 steps: int, vocab: list[str]) -> None:
    meta = {
        "kind": "decoder",
        "arch": decoder.arch,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "steps": steps,
        "vocab": vocab,
    }
    save_checkpoint(path, state_to_tensors(decoder), meta)


def load_decoder(path: str | Path) -> tuple[CaptionDecoder, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "decoder":
        raise ValueError(f"{path} is not a decoder checkpoint")
    model = CaptionDecoder(**meta["arch"])
    load_state_from_tensors(model, tensors)
    model.eval()
    return model, meta


def save_prefix_map(pm: PrefixMap, path: str | Path, cfg: RunConfig, steps: int) -> None:
    meta = {
        "kind": "prefix_map",
        "arch": pm.arch,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "steps": steps,
    }
    save_checkpoint(path, state_to_tensors(pm), meta)


def load_prefix_map(path: str | Path) -> tuple[PrefixMap, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "prefix_map":
        raise ValueError(f"{path} is not a prefix-map checkpoint")
    pm = PrefixMap(**meta["arch"])
    load_state_from_tensors(pm, tensors)
    pm.eval()
    return pm, meta


def pretrain_decoder(tokens: np.ndarray, lengths: np.ndarray, vocab_size: int,
                     dc: DecoderConfig, seed: int, log_path: str | Path | None = None
                     ) -> CaptionDecoder:
    """Stage 0: fit the unconditional caption LM, then hand it back frozen."""
    if len(tokens) == 0:
        raise ValueError("empty caption corpus")
    torch.manual_seed(seed)
    decoder = CaptionDecoder(
        vocab_size=vocab_size, layers=dc.layers, heads=dc.heads,
        hidden_dim=dc.hidden_dim, ff_mult=dc.ff_mult, max_len=dc.max_len,
    )
    decoder.train()
    tok = torch.from_numpy(tokens)
    lens = torch.from_numpy(lengths)
    opt = torch.optim.Adam(decoder.parameters(), lr=dc.pretrain_lr)
    sched = cosine_lr(opt, dc.pretrain_steps)
    rng = np.random.default_rng(seed)
    logger = StepLogger(log_path, ["loss"]) if log_path else None
    for step in range(dc.pretrain_steps):
        idx = batch_indices(rng, len(tok), dc.pretrain_batch)
        loss = sequence_nll(decoder, tok[idx], lens[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if logger:
            logger.log(step, {"loss": loss.item()}, sched.get_last_lr()[0])
    if logger:
        logger.close()
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    return decoder


def train_prefix(embeddings: np.ndarray, tokens: np.ndarray, lengths: np.ndarray,
                 decoder: CaptionDecoder, dc: DecoderConfig, seed: int,
                 log_path: str | Path | None = None) -> PrefixMap:
    """Fit the prefix map on (CSI embedding, caption) pairs; decoder stays frozen."""
    decoder.eval()
    for p in decoder.parameters():
        p.requires_grad_(False)
    torch.manual_seed(seed)
    pm = PrefixMap(
        embed_dim=embeddings.shape[1],
        layers=decoder.num_layers,
        prefix_len=dc.prefix_len,
        hidden_dim=dc.hidden_dim,
        mlp_hidden=dc.prefix_hidden,
    )
    pm.train()
    emb = torch.from_numpy(embeddings.astype(np.float32))
    tok = torch.from_numpy(tokens)
    lens = torch.from_numpy(lengths)
    opt = torch.optim.Adam(pm.parameters(), lr=dc.prefix_lr)
    sched = cosine_lr(opt, dc.prefix_steps)
    rng = np.random.default_rng(seed)
    logger = StepLogger(log_path, ["loss"]) if log_path else None
    for step in range(dc.prefix_steps):
        idx = batch_indices(rng, len(tok), dc.prefix_batch)
        loss = sequence_nll(decoder, tok[idx], lens[idx], pm(emb[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if logger:
            logger.log(step, {"loss": loss.item()}, sched.get_last_lr()[0])
    if logger:
        logger.close()
    pm.eval()
    return pm


@dataclass
class GeneratedCaption:
    tokens: list[int]
    text: str
    truncated: bool  # no end token within the length bound


def generate_caption(c: torch.Tensor, decoder: CaptionDecoder, prefix_map: PrefixMap,
                     tokenizer: Tokenizer, max_len: int | None = None,
                     beam_width: int = 1) -> GeneratedCaption:
    """Decode one caption from a pooled CSI embedding.

    Greedy by default (beam_width=1, deterministic); wider beams keep the
    highest total log-probability. Missing end token within the bound is
    flagged, not raised.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    limit = max_len or decoder.arch["max_len"]
    limit = min(limit, decoder.arch["max_len"])
    with torch.no_grad():
        prefixes = prefix_map(c.unsqueeze(0) if c.ndim == 1 else c)
        beams = [([tokenizer.bos_id], 0.0, False)]  # tokens, logp, done
        for _ in range(limit - 1):
            if all(done for _, _, done in beams):
                break
            candidates = []
            for seq, score, done in beams:
                if done:
                    candidates.append((seq, score, True))
                    continue
                logits = decoder(torch.tensor([seq]), prefixes)[0, -1]
                logp = F.log_softmax(logits, dim=-1)
                top = torch.topk(logp, beam_width)
                for tok_id, tok_lp in zip(top.indices.tolist(), top.values.tolist()):
                    candidates.append(
                        (seq + [tok_id], score + tok_lp, tok_id == tokenizer.eos_id)
                    )
            # stable sort keeps greedy deterministic under ties
            candidates.sort(key=lambda x: -x[1])
            beams = candidates[:beam_width]
        seq, _, done = beams[0]
    return GeneratedCaption(tokens=seq, text=tokenizer.decode(seq), truncated=not done)


def sample_unconditional(decoder: CaptionDecoder, tokenizer: Tokenizer, seed: int,
                         n: int, max_len: int | None = None) -> list[str]:
    """Ancestral samples from the unconditional LM (pretraining inspection)."""
    limit = max_len or decoder.arch["max_len"]
    gen = torch.Generator().manual_seed(seed)
    out = []
    with torch.no_grad():
        for _ in range(n):
            seq = [tokenizer.bos_id]
            for _ in range(limit - 1):
                logits = decoder(torch.tensor([seq]))[0, -1]
                probs = torch.softmax(logits, dim=-1)
                tok = int(torch.multinomial(probs, 1, generator=gen))
                seq.append(tok)
                if tok == tokenizer.eos_id:
                    break
            out.append(tokenizer.decode(seq))
    return out
