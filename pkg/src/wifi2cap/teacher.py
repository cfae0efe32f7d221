"""Stage 1: vision-language teacher.

Frame features are aggregated over time by a small transformer with
learnable positional embeddings, mean-pooled, and projected into the
shared alignment space; caption features take a separate projection into
the same space. Training combines symmetric InfoNCE over matched
(video, text) pairs with the bidirectional mirror hinge built from
direction-flipped twins.

The surrogate frame/text featurizers are inputs here, never updated.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from wifi2cap.config import RunConfig, config_hash, substream_seed
from wifi2cap.objectives import info_nce_symmetric, mirror_hinge_bidirectional, teacher_total
from wifi2cap.synth.dataset import Dataset, SplitArrays
from wifi2cap.tensorio import load_checkpoint, save_checkpoint
from wifi2cap.trainutil import (
    StepLogger,
    batch_indices,
    cosine_lr,
    load_state_from_tensors,
    safe_normalize,
    state_to_tensors,
)


class TemporalAggregator(nn.Module):
    """Adds learnable positional embeddings, then a transformer encoder.

    Sequence shape is preserved: L x D in, L x D out.
    """

    def __init__(self, seq_len: int, dim: int, layers: int, heads: int,
                 ff_mult: int, pos_init_std: float):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(seq_len, dim) * pos_init_std)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=ff_mult * dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-2] != self.pos.shape[0]:
            raise ValueError(
                f"sequence length {z.shape[-2]} does not match positional table {self.pos.shape[0]}"
            )
        return self.encoder(z + self.pos)


class ProjectionHead(nn.Module):
    """Linear map into the alignment space, always unit-normalized."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return safe_normalize(self.linear(x))


class TeacherModel(nn.Module):
    def __init__(self, seq_len: int, feature_dim: int, embed_dim: int,
                 layers: int = 2, heads: int = 4, ff_mult: int = 4,
                 pos_init_std: float = 0.02):
        super().__init__()
        self.arch = {
            "seq_len": seq_len, "feature_dim": feature_dim, "embed_dim": embed_dim,
            "layers": layers, "heads": heads, "ff_mult": ff_mult,
            "pos_init_std": pos_init_std,
        }
        self.aggregator = TemporalAggregator(seq_len, feature_dim, layers, heads, ff_mult, pos_init_std)
        self.video_proj = ProjectionHead(feature_dim, embed_dim)
        self.text_proj = ProjectionHead(feature_dim, embed_dim)

    def encode_video(self, frames: torch.Tensor) -> torch.Tensor:
        """B x L x D frame features -> B x d unit embeddings."""
        single = frames.ndim == 2
        if single:
            frames = frames.unsqueeze(0)
        pooled = self.aggregator(frames).mean(dim=1)
        out = self.video_proj(pooled)
        return out.squeeze(0) if single else out

    def encode_text(self, feats: torch.Tensor) -> torch.Tensor:
        """B x D caption features -> B x d unit embeddings."""
        if feats.shape[-1] != self.arch["feature_dim"]:
            raise ValueError(
                f"feature dim {feats.shape[-1]} != expected {self.arch['feature_dim']}"
            )
        return self.text_proj(feats)


def init_teacher(cfg: RunConfig, data_cfg=None) -> TeacherModel:
    """Seeded teacher at initialization (also the 'untrained teacher' arm)."""
    dc = data_cfg or cfg.data
    torch.manual_seed(substream_seed(cfg.seed, "s1"))
    return TeacherModel(
        seq_len=dc.frames_per_clip,
        feature_dim=dc.feature_dim,
        embed_dim=cfg.teacher.embed_dim,
        layers=cfg.teacher.layers,
        heads=cfg.teacher.heads,
        ff_mult=cfg.teacher.ff_mult,
        pos_init_std=cfg.teacher.pos_init_std,
    )


def save_teacher(model: TeacherModel, path: str | Path, cfg: RunConfig, steps: int) -> None:
    meta = {
        "kind": "teacher",
        "arch": model.arch,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "steps": steps,
    }
    save_checkpoint(path, state_to_tensors(model), meta)


def load_teacher(path: str | Path) -> tuple[TeacherModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise ValueError(f"{path} is not a teacher checkpoint")
    model = TeacherModel(**meta["arch"])
    load_state_from_tensors(model, tensors)
    model.eval()
    return model, meta


def train_teacher(dataset: Dataset, cfg: RunConfig, out_dir: str | Path,
                  log_dir: str | Path | None = None) -> Path:
    """Run stage 1 and write checkpoint + per-step CSV log.

    Directional batch elements contribute the mirror hinge via their
    on-the-fly flipped twins; lambda_mc = 0 skips that term (the
    no-mirror arm).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = Path(log_dir) if log_dir else out
    tc = cfg.teacher
    lam = cfg.teacher_lambda_mc()

    arrays = SplitArrays.from_dataset(dataset, "train", with_mirrors=lam > 0)
    frames = torch.from_numpy(arrays.frames)
    text = torch.from_numpy(arrays.text)
    directional = np.flatnonzero(arrays.is_directional)
    if lam > 0:
        if directional.size == 0:
            import warnings

            warnings.warn("no directional clips; mirror term skipped", stacklevel=2)
            lam = 0.0
        else:
            m_frames = torch.from_numpy(arrays.mirror_frames)
            m_text = torch.from_numpy(arrays.mirror_text)

    model = init_teacher(cfg, dataset.config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = cosine_lr(opt, tc.steps)
    rng = np.random.default_rng(substream_seed(cfg.seed, "s1"))
    dir_set = set(directional.tolist())

    with StepLogger(logs / "s1_steps.csv", ["loss", "con", "mc"]) as log:
        for step in range(tc.steps):
            idx = batch_indices(rng, len(arrays), tc.batch_size)
            v = model.encode_video(frames[idx])
            t = model.encode_text(text[idx])
            con = info_nce_symmetric(v, t, cfg.loss.tau)
            mc = torch.zeros(())
            if lam > 0:
                bmask = np.fromiter((i in dir_set for i in idx), bool, len(idx))
                if bmask.any():
                    rows = torch.from_numpy(np.flatnonzero(bmask))
                    sel = idx[bmask]
                    v_m = model.encode_video(m_frames[sel])
                    t_m = model.encode_text(m_text[sel])
                    mc = mirror_hinge_bidirectional(v[rows], t[rows], v_m, t_m, cfg.loss.margin)
            loss = teacher_total(con, mc, lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.log(step, {"loss": loss.item(), "con": con.item(), "mc": mc.item()},
                    sched.get_last_lr()[0])

    model.eval()
    ckpt = out / "teacher.w2c"
    save_teacher(model, ckpt, cfg, tc.steps)
    return ckpt
