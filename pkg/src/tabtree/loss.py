"""Per-token training objective.

Non-quantile targets use plain cross entropy. Quantile targets use the ordinal
cross entropy over the position's valid quantile group plus a valid-group term
that moves probability mass into that group. Reference implementations here
work on single float64 logit vectors and come with analytic gradients;
``SequenceLoss`` is the batched torch version used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .quantizer import QUANT, VocabLayout


@dataclass(frozen=True)
class OrdinalWeightConfig:
    sigma: float = 0.005
    min_weight: float = 0.5
    group_size: int = 1000

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0 < self.min_weight <= 1:
            raise ValueError("min_weight must lie in (0, 1]")


def ordinal_weight(t, i, cfg: OrdinalWeightConfig):
    """``1 + m - exp(-(t - i)^2 / (V sigma)^2)``; equals ``m`` at ``i == t``."""
    dist = np.asarray(t, dtype=np.float64) - np.asarray(i, dtype=np.float64)
    return 1.0 + cfg.min_weight - np.exp(-(dist**2) / (cfg.group_size * cfg.sigma) ** 2)


def weight_matrix(n: int, cfg: OrdinalWeightConfig) -> np.ndarray:
    idx = np.arange(n)
    return ordinal_weight(idx[:, None], idx[None, :], cfg)


def _logsumexp(z):
    m = np.max(z)
    return m + np.log(np.sum(np.exp(z - m)))


def _softmax(z):
    e = np.exp(z - np.max(z))
    return e / e.sum()


def cel(z, t: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    return float(_logsumexp(z) - z[t])


def ocel(z, t: int, cfg: OrdinalWeightConfig, weights=None) -> float:
    """Ordinal cross entropy over a group of logits; ``weights`` overrides ``w[t, :]``."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) < 2:
        raise ValueError("ordinal group needs at least two classes")
    w = ordinal_weight(t, np.arange(len(z)), cfg) if weights is None else np.asarray(weights, dtype=np.float64)
    a = z + np.log(w)
    return float(_logsumexp(a) - a[t])


def valid_group_loss(z, q_s: int, q_e: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not q_s < q_e:
        raise ValueError("empty valid group")
    return float(_logsumexp(z) - _logsumexp(z[q_s:q_e]))


def token_loss(z, t: int, kind: str, group: tuple[int, int] | None, cfg: OrdinalWeightConfig) -> float:
    if kind != QUANT:
        return cel(z, t)
    q_s, q_e = group
    if not q_s <= t < q_e:
        raise ValueError(f"quantile target {t} outside valid group [{q_s}, {q_e})")
    z = np.asarray(z, dtype=np.float64)
    return ocel(z[q_s:q_e], t - q_s, cfg) + valid_group_loss(z, q_s, q_e)


def cel_grad(z, t: int) -> np.ndarray:
    g = _softmax(np.asarray(z, dtype=np.float64))
    g[t] -= 1.0
    return g


def ocel_grad(z, t: int, cfg: OrdinalWeightConfig) -> np.ndarray:
    """``dL/dz_i = w_ti e^{z_i} / sum_j w_tj e^{z_j}`` off target; target gets that minus 1."""
    z = np.asarray(z, dtype=np.float64)
    w = ordinal_weight(t, np.arange(len(z)), cfg)
    g = _softmax(z + np.log(w))
    g[t] -= 1.0
    return g


def valid_group_grad(z, q_s: int, q_e: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    g = _softmax(z)
    g[q_s:q_e] -= _softmax(z[q_s:q_e])
    return g


def token_loss_grad(z, t: int, kind: str, group: tuple[int, int] | None, cfg: OrdinalWeightConfig) -> np.ndarray:
    if kind != QUANT:
        return cel_grad(z, t)
    q_s, q_e = group
    if not q_s <= t < q_e:
        raise ValueError(f"quantile target {t} outside valid group [{q_s}, {q_e})")
    g = valid_group_grad(z, q_s, q_e)
    g[q_s:q_e] += ocel_grad(np.asarray(z, dtype=np.float64)[q_s:q_e], t - q_s, cfg)
    return g


class SequenceLoss(torch.nn.Module):
    """Mean token loss over target positions ``2..L`` of full row sequences.

    ``logits[:, k]`` predicts the token at 1-based position ``k + 2``.
    """

    def __init__(self, layout: VocabLayout, cfg: OrdinalWeightConfig | None = None):
        super().__init__()
        self.layout = layout
        self.cfg = cfg or OrdinalWeightConfig(group_size=max(layout.n_q, 1))
        kinds = layout.position_kinds()[1:]
        ranges = layout.valid_ranges()[1:]
        quant = [k for k, kind in enumerate(kinds) if kind == QUANT]
        self.register_buffer("quant_pos", torch.tensor(quant, dtype=torch.long))
        n_q = layout.n_q
        if quant:
            sizes = torch.tensor([ranges[k][1] - ranges[k][0] for k in quant], dtype=torch.long)
            # log w over the shared quantile family; ids beyond a feature's q_i are excluded
            logw = torch.from_numpy(np.log(weight_matrix(n_q, self.cfg)))
            in_group = torch.arange(n_q)[None, :] < sizes[:, None]
            self.register_buffer("log_w", logw)
            self.register_buffer("in_group", in_group)
        self.q_off = layout.quant_offset
        self.n_q = n_q

    def per_token(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """``B x (L-1)`` token losses. ``targets`` are the token ids at positions ``2..L``."""
        # plain cross-entropy everywhere; quantile positions add
        # lse(zq + log w_t) - lse(zq) - log w_tt, which together with the
        # cross-entropy equals the ordinal loss plus the valid-group term
        out = torch.logsumexp(logits, -1) - logits.gather(-1, targets[..., None]).squeeze(-1)
        if len(self.quant_pos):
            qp = self.quant_pos
            zq = logits[:, qp, self.q_off:self.q_off + self.n_q]   # B x P x n_q
            t = targets[:, qp] - self.q_off                        # B x P
            zq = zq.masked_fill(~self.in_group[None], torch.finfo(zq.dtype).min)
            log_w = self.log_w.to(zq.dtype)[t]                     # B x P x n_q
            corr = torch.logsumexp(zq + log_w, -1) - torch.logsumexp(zq, -1) \
                - log_w.gather(-1, t[..., None]).squeeze(-1)
            out = out.index_add(1, qp, corr)
        return out

    def forward(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        return self.per_token(logits, targets).mean()
