from wifi2cap.synth.captions import MirrorLexicon, Tokenizer, caption_for, mirror_caption
from wifi2cap.synth.csi import CsiSynthesizer, CsiTensor, prune_subcarriers, sanitize_phase
from wifi2cap.synth.dataset import (
    ClipRecord,
    Dataset,
    LatentClip,
    SplitArrays,
    generate_dataset,
    mirror_clip,
)
from wifi2cap.synth.features import SurrogateEncoders

__all__ = [
    "MirrorLexicon",
    "Tokenizer",
    "caption_for",
    "mirror_caption",
    "CsiSynthesizer",
    "CsiTensor",
    "prune_subcarriers",
    "sanitize_phase",
    "ClipRecord",
    "Dataset",
    "LatentClip",
    "SplitArrays",
    "generate_dataset",
    "mirror_clip",
    "SurrogateEncoders",
]
