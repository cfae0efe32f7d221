"""Surrogate frozen encoders for frame and caption features.

Stand-ins for the frozen pretrained image/text encoders: fixed, seeded
linear maps over a structured latent (class one-hot, direction sign,
grid position, temporal phase, shared bias), unit-normalized. They are
never trained; everything downstream treats their outputs as frozen
inputs.

The component weights below set how much of each factor survives into
the feature geometry. The shared bias dominates so that features (and
hence freshly initialized embeddings) start out tightly clustered, while
class stays linearly decodable and direction is present but deliberately
faint relative to class.
"""

from __future__ import annotations

import numpy as np

# Relative strength of each latent component in the frame features.
W_SHARED = 2.0
W_CLASS = 1.0
W_DIR = 0.35
W_POS = 0.60
W_TEMP = 0.50

# Text side: captions share most words, so word-vector averages cluster
# naturally; the shared anchor tightens them further. Sized so mirrored
# twins stay nearly parallel (direction is one word out of ~10) while
# different classes separate cleanly.
TEXT_SHARED = 0.35
TEXT_WORD_STD = 1.0

GRID_ROWS, GRID_COLS = 4, 6

_DIR_SIGN = {"left": 1.0, "right": -1.0, "none": 0.0}


def position_xy(position_index: int) -> tuple[float, float]:
    """Grid cell -> centered coordinates in [-0.5, 0.5]^2."""
    if not 0 <= position_index < GRID_ROWS * GRID_COLS:
        raise ValueError(f"position_index {position_index} outside the {GRID_ROWS}x{GRID_COLS} grid")
    row, col = divmod(position_index, GRID_COLS)
    return col / (GRID_COLS - 1) - 0.5, row / (GRID_ROWS - 1) - 0.5


class SurrogateEncoders:
    """Fixed seeded featurizers shared by dataset generation and mirroring."""

    def __init__(self, num_classes: int, num_directional: int, frames_per_clip: int,
                 feature_dim: int, vocab_words: list[str], seed: int,
                 feature_noise: float = 0.0):
        self.num_classes = num_classes
        self.num_directional = num_directional
        self.frames_per_clip = frames_per_clip
        self.feature_dim = feature_dim
        self.feature_noise = float(feature_noise)
        self.latent_dim = num_classes + 1 + 2 + 2 + 1  # class, dir, pos, temporal, bias

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED_F00D]))
        self.frame_map = rng.standard_normal((feature_dim, self.latent_dim)) / np.sqrt(self.latent_dim)
        self.text_anchor = rng.standard_normal(feature_dim) / np.sqrt(feature_dim)
        # One fixed vector per vocabulary word, in sorted-word order so the
        # table does not depend on tokenizer construction details.
        words = sorted(set(vocab_words))
        vecs = rng.standard_normal((len(words), feature_dim)) * (TEXT_WORD_STD / np.sqrt(feature_dim))
        self.word_vectors = {w: vecs[i] for i, w in enumerate(words)}

    def _latent_vector(self, class_id: int, direction: str, position_index: int, frame_j: int) -> np.ndarray:
        one_hot = np.zeros(self.num_classes)
        one_hot[class_id] = 1.0
        px, py = position_xy(position_index)
        phase = 2.0 * np.pi * frame_j / self.frames_per_clip
        return np.concatenate([
            one_hot * W_CLASS,
            [_DIR_SIGN[direction] * W_DIR],
            [px * W_POS, py * W_POS],
            [np.sin(phase) * W_TEMP, np.cos(phase) * W_TEMP],
            [W_SHARED],
        ])

    def frame_features(self, class_id: int, direction: str, position_index: int,
                       clip_seed: int) -> np.ndarray:
        """L x D unit-norm rows for one clip.

        Noise is seeded by (clip_seed, frame) only, never by direction, so
        toggling direction twice reproduces the original features exactly.
        """
        rng = np.random.default_rng(np.random.SeedSequence([clip_seed, 0xF7A3]))
        rows = np.empty((self.frames_per_clip, self.feature_dim))
        for j in range(self.frames_per_clip):
            e = self._latent_vector(class_id, direction, position_index, j)
            x = self.frame_map @ e
            x = x + self.feature_noise * rng.standard_normal(self.feature_dim)
            rows[j] = x / np.linalg.norm(x)
        return rows.astype(np.float32)

    def text_feature(self, caption: str) -> np.ndarray:
        """D-dim unit vector from the word-vector average; pure in the caption."""
        words = caption.lower().split()
        if not words:
            raise ValueError("empty caption")
        vec = self.text_anchor * TEXT_SHARED + np.mean(
            [self._word_vector(w) for w in words], axis=0
        )
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def _word_vector(self, word: str) -> np.ndarray:
        try:
            return self.word_vectors[word]
        except KeyError:
            raise ValueError(f"word {word!r} has no surrogate vector") from None

    def weight_checksums(self) -> dict[str, float]:
        """Cheap frozen-contract fingerprint of all featurizer weights."""
        word_sum = float(sum(v.sum() for v in self.word_vectors.values()))
        return {
            "frame_map": float(self.frame_map.sum()),
            "text_anchor": float(self.text_anchor.sum()),
            "word_vectors": word_sum,
        }
