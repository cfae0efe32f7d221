"""Synthetic clip corpus: generation, on-disk layout, loading, mirroring.

One dataset = one directory:

    manifest.json   schema-versioned metadata, config, splits, clip table
    lexicon.txt     mirror word pairs, one per line, tab separated
    arrays/         one binary tensor file per payload (frames, text,
                    tokens, and per-receiver CSI amplitude/phase)

Generation is fully deterministic given (config, seed): the same call
produces byte-identical files. Stored CSI is sanitized and pruned; raw
synthesis is reproducible from the clip seed, so nothing else needs to
be kept.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wifi2cap.config import DataConfig
from wifi2cap.synth.captions import MirrorLexicon, Tokenizer, all_captions, caption_for, mirror_caption
from wifi2cap.synth.csi import CsiSynthesizer, CsiTensor, prune_subcarriers, sanitize_phase
from wifi2cap.synth.features import SurrogateEncoders
from wifi2cap.tensorio import read_tensor, write_tensor

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LatentClip:
    """Generating factors of one clip."""

    class_id: int
    direction: str  # left | right | none
    position_index: int
    seed: int


@dataclass
class ClipRecord:
    """One synchronized sample: features, caption, multi-receiver CSI."""

    clip_id: str
    latent: LatentClip
    caption: str
    caption_tokens: np.ndarray
    frame_features: np.ndarray  # L x D, unit rows
    text_feature: np.ndarray    # D, unit
    csi: list[CsiTensor]
    receiver_mask: list[bool]

    @property
    def is_directional(self) -> bool:
        return self.latent.direction != "none"


def mirror_clip(record: ClipRecord, encoders: SurrogateEncoders,
                lexicon: MirrorLexicon, tokenizer: Tokenizer) -> ClipRecord:
    """Direction-flipped twin: flipped frame features + mirrored caption.

    CSI is left untouched (there is no physical mirrored measurement); an
    involution because features are pure functions of the latent.
    """
    if record.latent.direction == "none":
        raise ValueError(f"clip {record.clip_id} has no direction to mirror")
    flipped = "right" if record.latent.direction == "left" else "left"
    latent = LatentClip(
        class_id=record.latent.class_id,
        direction=flipped,
        position_index=record.latent.position_index,
        seed=record.latent.seed,
    )
    caption = mirror_caption(record.caption, lexicon)
    return ClipRecord(
        clip_id=record.clip_id,
        latent=latent,
        caption=caption,
        caption_tokens=np.asarray(tokenizer.encode(caption), dtype=np.int64),
        frame_features=encoders.frame_features(
            latent.class_id, latent.direction, latent.position_index, latent.seed
        ),
        text_feature=encoders.text_feature(caption),
        csi=record.csi,
        receiver_mask=record.receiver_mask,
    )


def _stratified_split(strata: dict, fractions, rng: np.random.Generator) -> dict[str, list[int]]:
    """Largest-remainder split inside every (class, direction) stratum."""
    out = {name: [] for name in SPLITS}
    for key in sorted(strata):
        members = list(strata[key])
        rng.shuffle(members)
        n = len(members)
        raw = [f * n for f in fractions]
        counts = [int(np.floor(r)) for r in raw]
        remainders = [r - c for r, c in zip(raw, counts)]
        for _ in range(n - sum(counts)):
            # tie-break toward the earlier split (train, then val)
            i = max(range(len(SPLITS)), key=lambda j: (remainders[j], -j))
            counts[i] += 1
            remainders[i] = -1.0
        pos = 0
        for name, c in zip(SPLITS, counts):
            out[name].extend(members[pos : pos + c])
            pos += c
    for name in SPLITS:
        out[name].sort()
    return out


def generate_dataset(cfg: DataConfig, seed: int, out_dir: str | Path) -> "Dataset":
    """Write the full corpus to ``out_dir`` and return it loaded.

    Directional classes emit left/right twins in pairs sharing a position;
    symmetric classes emit direction-free clips.
    """
    out = Path(out_dir)
    arrays = out / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)

    lexicon = MirrorLexicon()
    tokenizer = Tokenizer.from_captions(all_captions(cfg.classes, cfg.directional_classes))
    encoders = SurrogateEncoders(
        num_classes=cfg.classes,
        num_directional=cfg.directional_classes,
        frames_per_clip=cfg.frames_per_clip,
        feature_dim=cfg.feature_dim,
        vocab_words=tokenizer.vocab,
        seed=seed,
        feature_noise=cfg.feature_noise,
    )
    synth = CsiSynthesizer(
        num_classes=cfg.classes,
        csi_time=cfg.csi_time,
        csi_antennas=cfg.csi_antennas,
        csi_subcarriers_raw=cfg.csi_subcarriers_raw,
        seed=seed,
    )

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))

    # enumerate latents; positions are distinct within a class so no two
    # same-class clips differ only by noise
    latents: list[LatentClip] = []
    if cfg.clips_per_class > 24:
        raise ValueError("clips_per_class cannot exceed the 24 grid positions")
    for c in range(cfg.classes):
        directional = c < cfg.directional_classes
        if directional and cfg.clips_per_class % 2 != 0:
            raise ValueError("clips_per_class must be even so twins come in pairs")
        positions = rng.permutation(24)[: cfg.clips_per_class]
        for k in range(cfg.clips_per_class):
            if directional:
                # twins 2q / 2q+1 share the pair position
                position = int(positions[k // 2])
                direction = "left" if k % 2 == 0 else "right"
            else:
                position = int(positions[k])
                direction = "none"
            latents.append(LatentClip(
                class_id=c,
                direction=direction,
                position_index=position,
                seed=int(rng.integers(0, 2**62)),
            ))

    masks = []
    for _ in latents:
        m = rng.random(cfg.receivers) >= cfg.receiver_dropout
        if not m.any():
            m[0] = True
        masks.append([bool(x) for x in m])

    clip_rows = []
    strata: dict[tuple[int, str], list[int]] = {}
    for i, latent in enumerate(latents):
        clip_id = f"clip_{i:04d}"
        caption = caption_for(latent.class_id, latent.direction, cfg.directional_classes)
        tokens = np.asarray(tokenizer.encode(caption), dtype=np.int64)
        frames = encoders.frame_features(
            latent.class_id, latent.direction, latent.position_index, latent.seed
        )
        text = encoders.text_feature(caption)

        files = {
            "frames": f"arrays/{clip_id}_frames.bin",
            "text": f"arrays/{clip_id}_text.bin",
            "tokens": f"arrays/{clip_id}_tokens.bin",
        }
        write_tensor(out / files["frames"], frames)
        write_tensor(out / files["text"], text)
        write_tensor(out / files["tokens"], tokens)
        for r in range(cfg.receivers):
            raw = synth.synthesize(
                latent.class_id, latent.direction, latent.position_index,
                latent.seed, r, cfg.csi_noise,
            )
            clean = prune_subcarriers(
                CsiTensor(raw.amplitude, sanitize_phase(raw.phase), r),
                cfg.pruned_subcarriers,
            )
            files[f"amp_r{r}"] = f"arrays/{clip_id}_amp_r{r}.bin"
            files[f"pha_r{r}"] = f"arrays/{clip_id}_pha_r{r}.bin"
            write_tensor(out / files[f"amp_r{r}"], clean.amplitude.astype(np.float32))
            write_tensor(out / files[f"pha_r{r}"], clean.phase.astype(np.float32))

        clip_rows.append({
            "id": clip_id,
            "class_id": latent.class_id,
            "direction": latent.direction,
            "position_index": latent.position_index,
            "seed": latent.seed,
            "caption": caption,
            "receiver_mask": masks[i],
            "files": files,
        })
        strata.setdefault((latent.class_id, latent.direction), []).append(i)

    splits = _stratified_split(strata, cfg.split_fractions, rng)

    lexicon.save(out / "lexicon.txt")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "wifi2cap-dataset",
        "seed": seed,
        "config": {
            "classes": cfg.classes,
            "clips_per_class": cfg.clips_per_class,
            "directional_classes": cfg.directional_classes,
            "frames_per_clip": cfg.frames_per_clip,
            "feature_dim": cfg.feature_dim,
            "csi_time": cfg.csi_time,
            "csi_antennas": cfg.csi_antennas,
            "csi_subcarriers_raw": cfg.csi_subcarriers_raw,
            "pruned_subcarriers": list(cfg.pruned_subcarriers),
            "receivers": cfg.receivers,
            "feature_noise": cfg.feature_noise,
            "csi_noise": cfg.csi_noise,
            "receiver_dropout": cfg.receiver_dropout,
            "split_fractions": list(cfg.split_fractions),
        },
        "vocab": tokenizer.vocab,
        "splits": splits,
        "clips": clip_rows,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )
    return Dataset.load(out)


class Dataset:
    """Loaded corpus plus the seeded featurizers needed for mirroring."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        cfg_d = dict(manifest["config"])
        cfg_d["pruned_subcarriers"] = tuple(cfg_d["pruned_subcarriers"])
        cfg_d["split_fractions"] = tuple(cfg_d["split_fractions"])
        self.config = DataConfig(**cfg_d)
        self.seed = manifest["seed"]
        self.tokenizer = Tokenizer(manifest["vocab"])
        self.lexicon = MirrorLexicon.load(self.root / "lexicon.txt")
        self.encoders = SurrogateEncoders(
            num_classes=self.config.classes,
            num_directional=self.config.directional_classes,
            frames_per_clip=self.config.frames_per_clip,
            feature_dim=self.config.feature_dim,
            vocab_words=self.tokenizer.vocab,
            seed=self.seed,
            feature_noise=self.config.feature_noise,
        )
        self.synthesizer = CsiSynthesizer(
            num_classes=self.config.classes,
            csi_time=self.config.csi_time,
            csi_antennas=self.config.csi_antennas,
            csi_subcarriers_raw=self.config.csi_subcarriers_raw,
            seed=self.seed,
        )
        self._cache: dict[str, ClipRecord] = {}

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
        return cls(root, manifest)

    def __len__(self) -> int:
        return len(self.manifest["clips"])

    def split_ids(self, split: str) -> list[int]:
        return list(self.manifest["splits"][split])

    def clip(self, index: int) -> ClipRecord:
        row = self.manifest["clips"][index]
        cid = row["id"]
        if cid in self._cache:
            return self._cache[cid]
        files = row["files"]
        csi = [
            CsiTensor(
                amplitude=read_tensor(self.root / files[f"amp_r{r}"]),
                phase=read_tensor(self.root / files[f"pha_r{r}"]),
                receiver_id=r,
            )
            for r in range(self.config.receivers)
        ]
        rec = ClipRecord(
            clip_id=cid,
            latent=LatentClip(
                class_id=row["class_id"],
                direction=row["direction"],
                position_index=row["position_index"],
                seed=row["seed"],
            ),
            caption=row["caption"],
            caption_tokens=read_tensor(self.root / files["tokens"]),
            frame_features=read_tensor(self.root / files["frames"]),
            text_feature=read_tensor(self.root / files["text"]),
            csi=csi,
            receiver_mask=list(row["receiver_mask"]),
        )
        self._cache[cid] = rec
        return rec

    def mirror_clip(self, record: ClipRecord) -> ClipRecord:
        return mirror_clip(record, self.encoders, self.lexicon, self.tokenizer)

    def content_hash(self) -> str:
        """Hash of the manifest plus every referenced array file."""
        h = hashlib.sha256()
        h.update((self.root / "manifest.json").read_bytes())
        h.update((self.root / "lexicon.txt").read_bytes())
        for row in self.manifest["clips"]:
            for key in sorted(row["files"]):
                h.update((self.root / row["files"][key]).read_bytes())
        return h.hexdigest()


@dataclass
class SplitArrays:
    """Stacked numpy views of one split, ready to hand to the trainers."""

    ids: list[str]
    class_ids: np.ndarray
    directions: list[str]
    is_directional: np.ndarray
    captions: list[str]
    frames: np.ndarray        # N x L x D
    text: np.ndarray          # N x D
    tokens: np.ndarray        # N x T_max, pad-filled, starts with bos
    lengths: np.ndarray       # N, true token counts incl. bos/eos
    amp: np.ndarray           # N x R x N_a x T x N_sc
    pha: np.ndarray           # N x R x N_a x T x N_sc
    receiver_mask: np.ndarray  # N x R bool
    mirror_frames: np.ndarray = field(default=None, repr=False)
    mirror_text: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_dataset(cls, ds: Dataset, split: str, with_mirrors: bool = True) -> "SplitArrays":
        idx = ds.split_ids(split)
        recs = [ds.clip(i) for i in idx]
        if not recs:
            raise ValueError(f"split {split!r} is empty")
        pad = ds.tokenizer.pad_id
        t_max = max(len(r.caption_tokens) for r in recs)
        tokens = np.full((len(recs), t_max), pad, dtype=np.int64)
        lengths = np.zeros(len(recs), dtype=np.int64)
        for i, r in enumerate(recs):
            tokens[i, : len(r.caption_tokens)] = r.caption_tokens
            lengths[i] = len(r.caption_tokens)
        # CSI with the antenna axis first, as N_a-channel images over (T, N_sc)
        amp = np.stack([
            np.stack([np.transpose(c.amplitude, (1, 0, 2)) for c in r.csi]) for r in recs
        ]).astype(np.float32)
        pha = np.stack([
            np.stack([np.transpose(c.phase, (1, 0, 2)) for c in r.csi]) for r in recs
        ]).astype(np.float32)

        out = cls(
            ids=[r.clip_id for r in recs],
            class_ids=np.array([r.latent.class_id for r in recs], dtype=np.int64),
            directions=[r.latent.direction for r in recs],
            is_directional=np.array([r.is_directional for r in recs]),
            captions=[r.caption for r in recs],
            frames=np.stack([r.frame_features for r in recs]),
            text=np.stack([r.text_feature for r in recs]),
            tokens=tokens,
            lengths=lengths,
            amp=amp,
            pha=pha,
            receiver_mask=np.stack([np.array(r.receiver_mask) for r in recs]),
        )
        if with_mirrors:
            mf = np.zeros_like(out.frames)
            mt = np.zeros_like(out.text)
            for i, r in enumerate(recs):
                if r.is_directional:
                    m = ds.mirror_clip(r)
                    mf[i] = m.frame_features
                    mt[i] = m.text_feature
            out.mirror_frames = mf
            out.mirror_text = mt
        return out

    def __len__(self) -> int:
        return len(self.ids)
