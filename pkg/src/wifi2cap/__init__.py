"""CSI-to-caption pipeline at desk scale.

Three trainable stages over a synthetic corpus: a vision-language
teacher aligning frame and caption features, a CSI student distilled
into the teacher's space, and a prefix-conditioned frozen decoder that
generates captions from CSI embeddings.
"""

__version__ = "0.1.0"
