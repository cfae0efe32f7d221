"""Stage 2: CSI student.

Amplitude and phase go through two independent convolutional backbones
(antennas as channels, images over time x subcarrier), are fused by a
learned sigmoid gate as a convex elementwise combination, projected into
the alignment space, and averaged over valid receiver views.

Stage 2-1 distills the frozen teacher's video embeddings into the CSI
encoder; stage 2-2 aligns the encoder to the frozen teacher's text
embeddings, with a one-sided mirror hinge on directional samples.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from wifi2cap.config import RunConfig, config_hash, substream_seed
from wifi2cap.objectives import info_nce_symmetric, mirror_hinge_text_only, teacher_total
from wifi2cap.synth.dataset import Dataset, SplitArrays
from wifi2cap.teacher import TeacherModel
from wifi2cap.tensorio import load_checkpoint, save_checkpoint
from wifi2cap.trainutil import (
    DegenerateEmbeddingError,
    StepLogger,
    batch_indices,
    cosine_lr,
    load_state_from_tensors,
    safe_normalize,
    state_to_tensors,
)


class CsiBackbone(nn.Module):
    """Stride-2 conv stack with global average pooling to a feature vector.

    GroupNorm keeps each sample's statistics independent of the rest of
    the batch, so masked receiver views can never leak into valid ones.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...], out_dim: int):
        super().__init__()
        if channels[-1] != out_dim:
            raise ValueError(f"last conv width {channels[-1]} must equal backbone dim {out_dim}")
        blocks = []
        prev = in_channels
        for ch in channels:
            blocks += [
                nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(4, ch),
                nn.ReLU(),
            ]
            prev = ch
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.blocks(x)).flatten(1)


class GatedFusion(nn.Module):
    """Elementwise convex mix of two feature vectors via a learned gate.

    gate = sigmoid(affine([a; p])), output = gate * a + (1 - gate) * p.
    Gate entries are strictly inside (0, 1) for finite inputs; a gate of
    exactly 1 passes amplitude only, 0 passes phase only.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.gate = nn.Linear(2 * dim, dim)

    def forward(self, a: torch.Tensor, p: torch.Tensor,
                gate_override: torch.Tensor | None = None) -> torch.Tensor:
        if gate_override is None:
            g = torch.sigmoid(self.gate(torch.cat([a, p], dim=-1)))
        else:
            g = gate_override
        return g * a + (1.0 - g) * p


def pool_receivers(views: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid receiver views, renormalized.

    views: B x R x d unit embeddings, mask: B x R booleans. Rows with no
    valid receiver are an error, as is a pooled vector with near-zero norm
    (antipodal views); both get explicit exceptions rather than NaN.
    """
    if views.ndim != 3 or mask.shape != views.shape[:2]:
        raise ValueError(f"views {tuple(views.shape)} and mask {tuple(mask.shape)} disagree")
    valid = mask.sum(dim=1)
    if bool((valid == 0).any()):
        raise ValueError("every clip needs at least one valid receiver view")
    w = mask.to(views.dtype).unsqueeze(-1)
    mean = (views * w).sum(dim=1) / valid.to(views.dtype).unsqueeze(-1)
    try:
        return safe_normalize(mean)
    except DegenerateEmbeddingError as e:
        raise DegenerateEmbeddingError(
            "pooled receiver embedding is degenerate (near-antipodal views)"
        ) from e


class StudentModel(nn.Module):
    def __init__(self, in_channels: int, channels: tuple[int, ...],
                 backbone_dim: int, embed_dim: int):
        super().__init__()
        self.arch = {
            "in_channels": in_channels, "channels": tuple(channels),
            "backbone_dim": backbone_dim, "embed_dim": embed_dim,
        }
        self.amp_backbone = CsiBackbone(in_channels, channels, backbone_dim)
        self.pha_backbone = CsiBackbone(in_channels, channels, backbone_dim)
        self.fusion = GatedFusion(backbone_dim)
        self.proj = nn.Linear(backbone_dim, embed_dim)

    def encode_view(self, amp: torch.Tensor, pha: torch.Tensor,
                    gate_override: torch.Tensor | None = None) -> torch.Tensor:
        """One receiver view (B x N_a x T x N_sc twice) -> B x d unit embedding."""
        if amp.shape != pha.shape:
            raise ValueError(f"amplitude {tuple(amp.shape)} vs phase {tuple(pha.shape)}")
        a = self.amp_backbone(amp)
        p = self.pha_backbone(pha)
        fused = self.fusion(a, p, gate_override=gate_override)
        return safe_normalize(self.proj(fused))

    def encode_clip(self, amp: torch.Tensor, pha: torch.Tensor,
                    mask: torch.Tensor) -> torch.Tensor:
        """Multi-receiver input (B x R x N_a x T x N_sc) -> pooled B x d."""
        b, r = amp.shape[:2]
        views = self.encode_view(amp.flatten(0, 1), pha.flatten(0, 1))
        return pool_receivers(views.view(b, r, -1), mask)


def init_student(cfg: RunConfig, data_cfg=None) -> StudentModel:
    dc = data_cfg or cfg.data
    torch.manual_seed(substream_seed(cfg.seed, "s2_1"))
    return StudentModel(
        in_channels=dc.csi_antennas,
        channels=cfg.student.channels,
        backbone_dim=cfg.student.backbone_dim,
        embed_dim=cfg.teacher.embed_dim,
    )


def save_student(model: StudentModel, path: str | Path, cfg: RunConfig,
                 stages: list[str], steps: int) -> None:
    meta = {
        "kind": "student",
        "arch": model.arch,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "stages": stages,
        "steps": steps,
    }
    save_checkpoint(path, state_to_tensors(model), meta)
    card = Path(path).with_suffix(".card.txt")
    card.write_text(
        "wifi2cap student checkpoint\n"
        f"stages: {', '.join(stages) if stages else 'none (untrained)'}\n"
        f"steps: {steps}\nseed: {cfg.seed}\nconfig: {config_hash(cfg)}\n"
    )


def load_student(path: str | Path) -> tuple[StudentModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    arch = dict(meta["arch"])
    arch["channels"] = tuple(arch["channels"])
    model = StudentModel(**arch)
    load_state_from_tensors(model, tensors)
    model.eval()
    return model, meta


def _csi_tensors(arrays: SplitArrays):
    amp = torch.from_numpy(arrays.amp)
    pha = torch.from_numpy(arrays.pha)
    mask = torch.from_numpy(arrays.receiver_mask)
    return amp, pha, mask


def train_stage2_1_align(dataset: Dataset, teacher: TeacherModel, cfg: RunConfig,
                         out_dir: str | Path, log_dir: str | Path | None = None) -> Path:
    """Distill frozen teacher video embeddings into the CSI encoder."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = Path(log_dir) if log_dir else out
    sc = cfg.student
    if teacher.arch["embed_dim"] != cfg.teacher.embed_dim:
        raise ValueError(
            f"teacher embed dim {teacher.arch['embed_dim']} != configured {cfg.teacher.embed_dim}"
        )

    arrays = SplitArrays.from_dataset(dataset, "train", with_mirrors=False)
    amp, pha, mask = _csi_tensors(arrays)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    with torch.no_grad():  # computed once and reused every step
        targets = teacher.encode_video(torch.from_numpy(arrays.frames))

    model = init_student(cfg, dataset.config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=sc.lr)
    sched = cosine_lr(opt, sc.steps_align)
    rng = np.random.default_rng(substream_seed(cfg.seed, "s2_1"))

    with StepLogger(logs / "s2_1_steps.csv", ["loss"]) as log:
        for step in range(sc.steps_align):
            idx = batch_indices(rng, len(arrays), sc.batch_size)
            c = model.encode_clip(amp[idx], pha[idx], mask[idx])
            loss = info_nce_symmetric(c, targets[idx], cfg.loss.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.log(step, {"loss": loss.item()}, sched.get_last_lr()[0])

    model.eval()
    ckpt = out / "student_s2_1.w2c"
    save_student(model, ckpt, cfg, ["s2_1"], sc.steps_align)
    return ckpt


def train_stage2_2_text(dataset: Dataset, teacher: TeacherModel, cfg: RunConfig,
                        out_dir: str | Path, init_ckpt: str | Path | None = None,
                        log_dir: str | Path | None = None) -> Path:
    """Align the CSI encoder to frozen text embeddings (+ text-only mirror).

    ``init_ckpt`` resumes from a stage 2-1 checkpoint; None trains from
    scratch (the stage-ablation arm).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = Path(log_dir) if log_dir else out
    sc = cfg.student
    lam = cfg.student_lambda_mc()

    arrays = SplitArrays.from_dataset(dataset, "train", with_mirrors=lam > 0)
    amp, pha, mask = _csi_tensors(arrays)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        t_emb = teacher.encode_text(torch.from_numpy(arrays.text))
        if lam > 0 and arrays.is_directional.any():
            tm_emb = teacher.encode_text(torch.from_numpy(arrays.mirror_text))

    prior_stages: list[str] = []
    if init_ckpt is not None:
        model, meta = load_student(init_ckpt)
        prior_stages = list(meta.get("stages", []))
    else:
        model = init_student(cfg, dataset.config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=sc.lr)
    sched = cosine_lr(opt, sc.steps_text)
    rng = np.random.default_rng(substream_seed(cfg.seed, "s2_2"))
    dir_set = set(np.flatnonzero(arrays.is_directional).tolist())
    if lam > 0 and not dir_set:
        import warnings

        warnings.warn("no directional clips; mirror term skipped", stacklevel=2)
        lam = 0.0

    with StepLogger(logs / "s2_2_steps.csv", ["loss", "con", "mc"]) as log:
        for step in range(sc.steps_text):
            idx = batch_indices(rng, len(arrays), sc.batch_size)
            c = model.encode_clip(amp[idx], pha[idx], mask[idx])
            con = info_nce_symmetric(c, t_emb[idx], cfg.loss.tau)
            mc = torch.zeros(())
            if lam > 0:
                bmask = np.fromiter((i in dir_set for i in idx), bool, len(idx))
                if bmask.any():
                    rows = torch.from_numpy(np.flatnonzero(bmask))
                    sel = idx[bmask]
                    mc = mirror_hinge_text_only(c[rows], t_emb[sel], tm_emb[sel], cfg.loss.margin)
            loss = teacher_total(con, mc, lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            log.log(step, {"loss": loss.item(), "con": con.item(), "mc": mc.item()},
                    sched.get_last_lr()[0])

    model.eval()
    ckpt = out / "student.w2c"
    save_student(model, ckpt, cfg, prior_stages + ["s2_2"], sc.steps_text)
    return ckpt
