"""Templated captions, the direction-word lexicon, and the tokenizer.

Captions come from a fixed template bank: directional actions carry a
``{side}`` slot filled with left/right, symmetric actions have none. The
caption for a clip is fully determined by (class_id, direction), which
keeps the caption distribution low-entropy enough to pretrain a tiny
decoder while still separating every class and chirality lexically.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

# (template, uses_direction). Directional templates differ from each other in
# verb/limb/object words; mirrored pairs differ only in the side word.
DIRECTIONAL_TEMPLATES = (
    "a person is waving the {side} hand above the head",
    "the person raises the {side} arm straight out to the side",
    "a man kicks forward with the {side} leg while keeping balance",
    "the person stands upright on the {side} foot with arms folded",
    "a person stretches the {side} shoulder by pulling the elbow across the chest",
    "the person leans toward the {side} and touches the floor with one hand",
    "a person swings the {side} arm in a wide circle near the hip",
    "the person hops twice on the {side} foot and then pauses briefly",
    "a man points at the {side} corner of the room with a steady hand",
    "the person slides one step to the {side} while holding both arms up",
)

SYMMETRIC_TEMPLATES = (
    "a person claps both hands together in front of the chest",
    "the person squats down slowly and stands up again",
    "a person jumps in place with both feet together",
    "the person bends forward and touches both knees with the palms",
    "a person marches in place while lifting the knees high",
    "the person rotates the torso gently while keeping the feet planted",
)

DIRECTIONS = ("left", "right", "none")

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"


@dataclass(frozen=True)
class MirrorLexicon:
    """Unordered word pairs swapped by caption mirroring (e.g. left/right)."""

    pairs: tuple[tuple[str, str], ...] = (("left", "right"),)

    def swap_table(self) -> dict[str, str]:
        table = {}
        for a, b in self.pairs:
            table[a.lower()] = b.lower()
            table[b.lower()] = a.lower()
        return table

    def save(self, path: str | Path) -> None:
        lines = [f"{a}\t{b}" for a, b in self.pairs]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MirrorLexicon":
        pairs = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            a, b = line.split("\t")
            pairs.append((a, b))
        return cls(pairs=tuple(pairs))


def caption_for(class_id: int, direction: str, num_directional: int) -> str:
    """The fixed caption for a (class, direction) pair.

    Classes below ``num_directional`` use directional templates and require
    direction left or right; the rest are symmetric and require none.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if class_id < num_directional:
        if direction == "none":
            raise ValueError(f"class {class_id} is directional, got direction 'none'")
        tpl = DIRECTIONAL_TEMPLATES[class_id % len(DIRECTIONAL_TEMPLATES)]
        return tpl.format(side=direction)
    if direction != "none":
        raise ValueError(f"class {class_id} is symmetric, got direction {direction!r}")
    return SYMMETRIC_TEMPLATES[(class_id - num_directional) % len(SYMMETRIC_TEMPLATES)]


def mirror_caption(text: str, lexicon: MirrorLexicon) -> str:
    """Swap every lexicon word for its pair, preserving case; an involution."""
    table = lexicon.swap_table()
    out = []
    for tok in text.split():
        repl = table.get(tok.lower())
        if repl is None:
            out.append(tok)
        elif tok.isupper():
            out.append(repl.upper())
        elif tok[:1].isupper():
            out.append(repl.capitalize())
        else:
            out.append(repl)
    return " ".join(out)


def all_captions(num_classes: int, num_directional: int) -> list[str]:
    """Every caption the template bank can produce for this class layout."""
    caps = []
    for c in range(num_classes):
        if c < num_directional:
            caps.append(caption_for(c, "left", num_directional))
            caps.append(caption_for(c, "right", num_directional))
        else:
            caps.append(caption_for(c, "none", num_directional))
    return caps


class Tokenizer:
    """Whitespace + lowercase tokenizer over the closed template vocabulary."""

    def __init__(self, vocab: list[str]):
        for special in (PAD, BOS, EOS):
            if special not in vocab:
                raise ValueError(f"vocabulary missing {special}")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    @classmethod
    def from_captions(cls, captions: list[str]) -> "Tokenizer":
        words = sorted({w for cap in captions for w in cap.lower().split()})
        return cls([PAD, BOS, EOS] + words)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        """bos + word ids + eos; unknown words are an error (closed world)."""
        ids = [self.bos_id]
        for w in text.lower().split():
            if w not in self.index:
                raise ValueError(f"word {w!r} not in vocabulary")
            ids.append(self.index[w])
        ids.append(self.eos_id)
        return ids

    def decode(self, ids) -> str:
        words = []
        for i in ids:
            w = self.vocab[int(i)]
            if w in (PAD, BOS):
                continue
            if w == EOS:
                break
            words.append(w)
        return " ".join(words)
