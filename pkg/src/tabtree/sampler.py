"""Constrained autoregressive generation from a trained split pair."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch

from .dataset import Table
from .quantizer import CAT, VocabLayout
from .transformer import Decoder, TrainedGenerator


@dataclass(frozen=True)
class GenerationConfig:
    temperature_categorical: float = 2.0
    temperature_numeric: float = 1.0
    tree_mask: tuple[float, float] = (0.5, 0.75)
    seed: int = 0
    batch_size: int = 1024

    def __post_init__(self):
        if self.temperature_categorical <= 0 or self.temperature_numeric <= 0:
            raise ValueError("temperatures must be positive")
        lo, hi = self.tree_mask
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"tree_mask must satisfy 0 <= low <= high <= 1, got {(lo, hi)}")
        object.__setattr__(self, "tree_mask", (float(lo), float(hi)))


def _restricted_probs(logits: np.ndarray, lo: int, hi: int, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)[..., lo:hi] / temperature
    if not np.isfinite(z).any(axis=-1).all():
        raise FloatingPointError("no finite logit among the valid tokens")
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def _inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    idx = (c < (u * c[..., -1])[..., None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def constrained_sample_token(logits, valid, temperature: float, rng: np.random.Generator) -> int:
    """Sample one id from ``valid`` (a set of ids or a half-open ``(lo, hi)`` range):
    invalid logits are dropped, the rest divided by the temperature, then softmaxed."""
    logits = np.asarray(logits, dtype=np.float64)
    if isinstance(valid, tuple) and len(valid) == 2:
        ids = np.arange(*valid)
    else:
        ids = np.array(sorted(valid), dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("empty valid set")
    z = np.full(len(logits), -np.inf)
    z[ids] = logits[ids]
    p = _restricted_probs(z[ids], 0, len(ids), temperature)
    return int(ids[_inverse_cdf(p, np.array(rng.random()))])


def _row_streams(seed: int, model_idx: int, n: int, layout: VocabLayout, j_rows: int, tree_mask):
    """Per-row prompt choices and sampling uniforms; each row has its own stream."""
    T, n_v = layout.n_trees, len(layout.slots)
    leaf_idx = np.empty(n, dtype=np.int64)
    mask = np.zeros((n, T), dtype=bool)
    u = np.empty((n, n_v))
    lo, hi = tree_mask
    for r in range(n):
        rng = np.random.default_rng([seed, model_idx, r])
        leaf_idx[r] = rng.integers(j_rows)
        ratio = rng.uniform(lo, hi)
        k = int(np.floor(ratio * T + rng.random())) if hi > 0 else 0
        mask[r, rng.permutation(T)[:k]] = True
        u[r] = rng.random(n_v)
    return leaf_idx, mask, u


@torch.no_grad()
def generate_from_prompts(model: Decoder, layout: VocabLayout, prompts: np.ndarray, uniforms: np.ndarray,
                          gc: GenerationConfig) -> np.ndarray:
    """Complete ``[BOS, leaf tokens]`` prompts into full sequences of length L."""
    model.eval()
    T, L = layout.n_trees, layout.seq_len
    n = len(prompts)
    seqs = np.empty((n, L), dtype=np.int64)
    seqs[:, :T + 1] = prompts
    for sl in (slice(i, min(n, i + gc.batch_size)) for i in range(0, n, gc.batch_size)):
        for s, (_, kind, _) in enumerate(layout.slots):
            k = T + 1 + s  # 0-based index being generated
            lo, hi = layout.valid_range(k + 1)
            logits = model(torch.from_numpy(seqs[sl, :k]))[:, -1].double().numpy()
            temp = gc.temperature_categorical if kind == CAT else gc.temperature_numeric
            seqs[sl, k] = lo + _inverse_cdf(_restricted_probs(logits, lo, hi, temp), uniforms[sl, s])
    seqs[:, -1] = layout.eos
    return seqs


def sample_sequences(g: TrainedGenerator, n_rows: int, gc: GenerationConfig) -> tuple[np.ndarray, np.ndarray]:
    """Returns (sequences, model index per row). Rows ``[0, n//2)`` come from the
    first model, the rest from the second."""
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    layout = g.layout
    counts = (n_rows // 2, n_rows - n_rows // 2)
    out, which = [], []
    for j, n_j in enumerate(counts):
        if n_j == 0:
            continue
        leaves = np.asarray(g.leaves[j])
        leaf_idx, mask, u = _row_streams(gc.seed, j, n_j, layout, len(leaves), gc.tree_mask)
        prompts = np.empty((n_j, layout.n_trees + 1), dtype=np.int64)
        prompts[:, 0] = layout.bos
        prompts[:, 1:] = np.where(mask, layout.mask, leaves[leaf_idx] - 1 + layout.leaf_offset)
        out.append(generate_from_prompts(g.model(j), layout, prompts, u, gc))
        which.append(np.full(n_j, j))
    return np.concatenate(out), np.concatenate(which)


def decode_sequences(g: TrainedGenerator, seqs: np.ndarray) -> Table:
    return g.tokenizer.decode(g.layout.extract_values(seqs))


def sample_rows(g: TrainedGenerator, n_rows: int, gc: GenerationConfig | None = None) -> Table:
    gc = gc or GenerationConfig()
    seqs, _ = sample_sequences(g, n_rows, gc)
    return decode_sequences(g, seqs)


def sequence_violations(layout: VocabLayout, seqs: np.ndarray) -> int:
    """Number of tokens outside their position's valid set (MASK allowed in leaf prompts)."""
    seqs = np.asarray(seqs)
    bad = 0
    for i, (lo, hi) in enumerate(layout.valid_ranges()):
        col = seqs[:, i]
        ok = (col >= lo) & (col < hi)
        if 1 <= i <= layout.n_trees:
            ok |= col == layout.mask
        bad += int((~ok).sum())
    return bad


def mixture_check(partitions, weights) -> dict:
    """Exact mixture of per-partition empirical distributions.

    ``partitions`` is a list of row lists (hashable rows); ``weights`` the mixing
    probabilities. Returns ``{row: Fraction}``.
    """
    weights = [Fraction(w) if not isinstance(w, float) else Fraction(w).limit_denominator(10**9) for w in weights]
    if len(weights) != len(partitions):
        raise ValueError("one weight per partition required")
    if sum(weights) != 1:
        raise ValueError(f"weights sum to {float(sum(weights))}, not 1")
    dist: dict = {}
    for rows, w in zip(partitions, weights):
        for r in rows:
            dist[r] = dist.get(r, Fraction(0)) + w / len(rows)
    return dist


def empirical_distribution(rows) -> dict:
    dist: dict = {}
    for r in rows:
        dist[r] = dist.get(r, Fraction(0)) + Fraction(1, len(rows))
    return dist


def total_variation(p: dict, q: dict):
    keys = set(p) | set(q)
    return sum(abs(p.get(k, 0) - q.get(k, 0)) for k in keys) / 2
