"""Caption metrics, retrieval diagnostics, and report export.

All scorers are pure functions over tokenized strings (lowercase,
whitespace split) paired positionally: candidate i scores against
reference i. BLEU/METEOR/ROUGE use the percent convention (0..100);
the consensus TF-IDF score keeps its native 0..10 scale.

Declared deviations, recorded in every report: METEOR runs without
synonym resources (exact + suffix-stem matching only) and no
semantic-graph metric is computed.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
METEOR_ALPHA_WEIGHT = 9.0  # recall weighted 9:1 over precision
METEOR_PENALTY_GAMMA = 0.5

DEVIATIONS = (
    "meteor-lite: unigram exact + stem matching only, no synonym resources",
    "spice omitted: requires a semantic-graph parser",
)


def tokenize(text: str) -> list[str]:
    """Deterministic lowercase whitespace tokenization."""
    return text.lower().split()


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# Suffix-stripping stemmer: first matching rule wins, stems shorter than
# three characters are left alone.
_STEM_RULES = ("ing", "ed", "es", "ly", "s")


def stem(word: str) -> str:
    for suffix in _STEM_RULES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            return word[: -len(suffix)]
    return word


def _check_pairs(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def bleu4(candidates: list[str], references: list[str]) -> float:
    """Corpus-level 4-gram precision score with brevity penalty, in [0, 100].

    Clipped n-gram matches are pooled over the corpus; every precision is
    smoothed additively so a missing n-gram order degrades the score
    instead of zeroing it.
    """
    _check_pairs(candidates, references)
    matches = [0] * 4
    totals = [0] * 4
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c_tok, r_tok = tokenize(cand), tokenize(ref)
        cand_len += len(c_tok)
        ref_len += len(r_tok)
        for n in range(1, 5):
            c_counts = ngram_counts(c_tok, n)
            r_counts = ngram_counts(r_tok, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in c_counts.items())
            totals[n - 1] += max(0, len(c_tok) - n + 1)
    if cand_len == 0:
        warnings.warn("empty candidate corpus scores 0", stacklevel=2)
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        p = (m + BLEU_EPS) / (t + BLEU_EPS) if t > 0 else BLEU_EPS
        log_p += math.log(p)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p / 4.0)


def _lcs_length(a: list[str], b: list[str]) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def rouge_l(candidates: list[str], references: list[str]) -> float:
    """Corpus-averaged LCS F-measure (beta = 1.2), in [0, 100]."""
    _check_pairs(candidates, references)
    return 100.0 * float(np.mean([
        sentence_rouge_l(c, r) for c, r in zip(candidates, references)
    ]))


def sentence_rouge_l(candidate: str, reference: str) -> float:
    c_tok, r_tok = tokenize(candidate), tokenize(reference)
    if not c_tok or not r_tok:
        return 0.0
    lcs = _lcs_length(c_tok, r_tok)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(c_tok), lcs / len(r_tok)
    beta2 = ROUGE_BETA ** 2
    return (1 + beta2) * p * r / (r + beta2 * p)


def corpus_document_frequencies(references: list[str]) -> dict[tuple, int]:
    """Per-n-gram document frequency over the reference corpus (n = 1..4)."""
    df: Counter = Counter()
    for ref in references:
        toks = tokenize(ref)
        seen = set()
        for n in range(1, 5):
            seen.update(ngram_counts(toks, n).keys())
        df.update(seen)
    return dict(df)


def cider_d(candidates: list[str], references: list[str],
            corpus_df: dict[tuple, int] | None = None,
            num_ref_docs: int | None = None) -> float:
    """Consensus score: TF-IDF n-gram cosine, length penalty, 0..10 scale.

    Document frequencies default to the reference corpus of this call;
    pass ``corpus_df``/``num_ref_docs`` to weight against a larger corpus.
    """
    _check_pairs(candidates, references)
    if corpus_df is None:
        corpus_df = corpus_document_frequencies(references)
        num_ref_docs = len(references)
    if not num_ref_docs:
        raise ValueError("num_ref_docs required with an external corpus_df")
    log_docs = math.log(max(1, num_ref_docs))

    def tfidf(tokens, n):
        counts = ngram_counts(tokens, n)
        vec = {g: c * (log_docs - math.log(max(1.0, corpus_df.get(g, 0)))) for g, c in counts.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        return vec, norm

    scores = []
    for cand, ref in zip(candidates, references):
        c_tok, r_tok = tokenize(cand), tokenize(ref)
        penalty = math.exp(-((len(c_tok) - len(r_tok)) ** 2) / (2 * CIDER_SIGMA ** 2))
        per_n = []
        for n in range(1, 5):
            c_vec, c_norm = tfidf(c_tok, n)
            r_vec, r_norm = tfidf(r_tok, n)
            if c_norm == 0 or r_norm == 0:
                per_n.append(0.0)
                continue
            num = sum(min(w, r_vec.get(g, 0.0)) * r_vec.get(g, 0.0) for g, w in c_vec.items())
            per_n.append(penalty * num / (c_norm * r_norm))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


def _align_unigrams(c_tok: list[str], r_tok: list[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches, greedily left to right."""
    matched_c = [False] * len(c_tok)
    matched_r = [False] * len(r_tok)
    pairs = []
    for key in (lambda w: w, stem):
        for i, w in enumerate(c_tok):
            if matched_c[i]:
                continue
            for j, u in enumerate(r_tok):
                if not matched_r[j] and key(w) == key(u):
                    matched_c[i] = matched_r[j] = True
                    pairs.append((i, j))
                    break
    return sorted(pairs)


def sentence_meteor_lite(candidate: str, reference: str) -> float:
    c_tok, r_tok = tokenize(candidate), tokenize(reference)
    if not c_tok or not r_tok:
        return 0.0
    pairs = _align_unigrams(c_tok, r_tok)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(c_tok), m / len(r_tok)
    f_mean = p * r * (1 + METEOR_ALPHA_WEIGHT) / (r + METEOR_ALPHA_WEIGHT * p)
    chunks = 1
    for (ci, ri), (cj, rj) in zip(pairs, pairs[1:]):
        if cj != ci + 1 or rj != ri + 1:
            chunks += 1
    penalty = METEOR_PENALTY_GAMMA * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def meteor_lite(candidates: list[str], references: list[str]) -> float:
    """Unigram-alignment score without synonym resources, in [0, 100]."""
    _check_pairs(candidates, references)
    return 100.0 * float(np.mean([
        sentence_meteor_lite(c, r) for c, r in zip(candidates, references)
    ]))


def retrieval_top1(csi_embeddings: np.ndarray, text_embeddings: np.ndarray
                   ) -> tuple[float, np.ndarray]:
    """Diagonal-match accuracy plus the full similarity matrix.

    Row i pairs with row i. A row counts correct when its diagonal entry
    attains the row maximum (exact ties with duplicate columns still
    count); the argmax itself breaks ties toward the lowest index.
    """
    if csi_embeddings.ndim != 2 or csi_embeddings.shape != text_embeddings.shape:
        raise ValueError("expected two equal-shape N x d embedding matrices")
    n = csi_embeddings.shape[0]
    if n == 0:
        raise ValueError("empty embedding batch")
    sim = csi_embeddings @ text_embeddings.T
    correct = sim.diagonal() >= sim.max(axis=1)
    return float(correct.mean()), sim


def direction_accuracy(captions: list[str], directions: list[str], lexicon) -> float:
    """Fraction of captions naming the true chirality and not its mirror.

    A caption containing neither word, or both, counts incorrect.
    """
    if len(captions) != len(directions):
        raise ValueError("captions and directions must pair up")
    if not captions:
        raise ValueError("no directional clips to score")
    table = lexicon.swap_table()
    hits = 0
    for cap, true_dir in zip(captions, directions):
        word = true_dir.lower()
        if word not in table:
            raise ValueError(f"direction {true_dir!r} is not a lexicon word")
        toks = set(tokenize(cap))
        if word in toks and table[word] not in toks:
            hits += 1
    return hits / len(captions)


def export_similarity_heat(matrix: np.ndarray, path_base: str | Path) -> tuple[Path, Path]:
    """Write exact CSV values and a rendered heat image (brighter = higher)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise ValueError("similarity matrix contains non-finite entries")
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    np.savetxt(csv_path, matrix, delimiter=",", fmt="%.17g")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(matrix, cmap="viridis", interpolation="nearest")
    ax.set_xlabel("text embedding")
    ax.set_ylabel("csi embedding")
    fig.colorbar(im, ax=ax, label="cosine similarity")
    png_path = base.with_suffix(".png")
    fig.savefig(png_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return csv_path, png_path


REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    """Corpus scores plus per-clip detail for one evaluation pass."""

    config_hash: str
    split: str
    scores: dict[str, float]
    retrieval_top1: float
    direction_accuracy: float | None
    per_clip: list[dict]
    metadata: dict = field(default_factory=dict)
    deviations: tuple[str, ...] = DEVIATIONS
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config_hash": self.config_hash,
            "split": self.split,
            "scores": self.scores,
            "retrieval_top1": self.retrieval_top1,
            "direction_accuracy": self.direction_accuracy,
            "per_clip": self.per_clip,
            "metadata": self.metadata,
            "deviations": list(self.deviations),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(
            config_hash=d["config_hash"],
            split=d["split"],
            scores=d["scores"],
            retrieval_top1=d["retrieval_top1"],
            direction_accuracy=d["direction_accuracy"],
            per_clip=d["per_clip"],
            metadata=d["metadata"],
            deviations=tuple(d["deviations"]),
            schema_version=d["schema_version"],
        )


def score_corpus(candidates: list[str], references: list[str]) -> dict[str, float]:
    """All caption metrics for positionally paired corpora."""
    return {
        "bleu4": bleu4(candidates, references),
        "meteor_lite": meteor_lite(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "cider_d": cider_d(candidates, references),
    }
