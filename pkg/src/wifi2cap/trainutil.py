"""Shared training plumbing: normalization, checkpoints, logging, batching."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
import torch


class DegenerateEmbeddingError(ValueError):
    """A vector with (near-)zero norm reached a normalization step."""


def safe_normalize(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """L2-normalize along the last dim, raising on degenerate norms.

    Near-zero vectors would normalize to numerical noise; surfacing them
    as an error beats emitting NaN-adjacent garbage embeddings.
    """
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise DegenerateEmbeddingError(
            f"embedding norm below {eps}; refusing to normalize noise"
        )
    return x / norm


def state_to_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_from_tensors(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
    module.load_state_dict(state)


def module_checksum(module: torch.nn.Module) -> str:
    """Order-stable SHA-256 over all parameter and buffer bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def cosine_lr(optimizer, total_steps: int):
    """Cosine decay from the base lr to zero over the run."""
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)


class StepLogger:
    """Per-step CSV log: step, named loss terms, lr."""

    def __init__(self, path: str | Path, fields: list[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fields = ["step"] + fields + ["lr"]
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.fields)

    def log(self, step: int, values: dict[str, float], lr: float) -> None:
        row = [step] + [values[f] for f in self.fields[1:-1]] + [lr]
        self._writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """One minibatch of distinct indices; the whole set if n <= batch_size."""
    if n <= batch_size:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)
