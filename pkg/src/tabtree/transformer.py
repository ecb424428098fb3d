"""Decoder-only transformer over row token sequences, input masking, and split training."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .embedding import init_quantile_embedding
from .loss import OrdinalWeightConfig, SequenceLoss
from .quantizer import BIN, QUANT, VocabLayout

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    dim: int = 64
    ff_dim: int = 256
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.1
    preset: str = "TINY"

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"hidden size {self.dim} not divisible by {self.n_heads} heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 5e-4
    max_steps: int = 5000
    warmup_steps: int | None = None  # shared phase length; None -> min(20 epochs, max_steps // 10)
    val_interval: int = 100
    patience: int = 3
    tree_mask: tuple[float, float] = (0.5, 0.75)
    value_mask: tuple[float, float] = (0.25, 0.5)
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("tree_mask", "value_mask"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"{name} must satisfy 0 <= low <= high <= 1, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.batch_size < 1 or self.max_steps < 0 or self.val_interval < 1 or self.patience < 1:
            raise ValueError("batch_size, val_interval and patience must be positive")

    def shared_steps(self, n_rows: int) -> int:
        if self.warmup_steps is not None:
            return min(self.warmup_steps, self.max_steps)
        return min(math.ceil(20 * n_rows / self.batch_size), self.max_steps // 10)


def _dropout(x, p: float, training: bool):
    # threshold on uniforms: several times cheaper than bernoulli_ on CPU
    if not training or p == 0:
        return x
    return x * (torch.rand_like(x) >= p) * (1.0 / (1.0 - p))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ff_dim)
        self.ff2 = nn.Linear(cfg.ff_dim, cfg.dim)
        self.dropout = cfg.dropout

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2) for t in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + _dropout(self.proj(a.transpose(1, 2).reshape(b, n, d)), self.dropout, self.training)
        h = self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x + _dropout(h, self.dropout, self.training)


class Decoder(nn.Module):
    """Pre-norm causal transformer; output logits are tied to the token embedding."""

    def __init__(self, cfg: ModelConfig, layout: VocabLayout | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self._init(layout, seed)

    @torch.no_grad()
    def _init(self, layout, seed):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        if layout is not None and layout.n_q:
            qe = init_quantile_embedding(layout.n_q, self.cfg.dim)
            off = layout.quant_offset
            self.tok_emb.weight[off:off + layout.n_q] = torch.from_numpy(qe).to(self.tok_emb.weight.dtype)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2:
            raise ValueError("expected a B x L batch of token ids")
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        if (ids < 0).any() or (ids >= self.cfg.vocab_size).any():
            raise ValueError("token id out of range")
        pos = torch.arange(n, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        x = _dropout(x, self.cfg.dropout, self.training)
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x) @ self.tok_emb.weight.T


def apply_mask(seqs: np.ndarray, layout: VocabLayout, tree_range, value_range,
               rng: np.random.Generator, return_mask: bool = False):
    """Replace a random share of leaf and value tokens with MASK.

    Each row draws one tree ratio and one value ratio uniformly from the given
    ranges; the masked count is the ratio times the slot count, stochastically
    rounded. A quantile token is never masked while its bin token is visible:
    such pairs swap their mask bits. BOS/EOS are never masked.
    """
    seqs = np.asarray(seqs)
    b = seqs.shape[0]
    T, n_v = layout.n_trees, len(layout.slots)
    mask = np.zeros(seqs.shape, dtype=bool)
    for lo_pos, count, (lo, hi) in ((1, T, tree_range), (1 + T, n_v, value_range)):
        if count == 0 or hi == 0:
            continue
        ratio = rng.uniform(lo, hi, size=b)
        k = np.floor(ratio * count + rng.random(b)).astype(np.int64)
        ranks = np.argsort(np.argsort(rng.random((b, count)), axis=1), axis=1)
        mask[:, lo_pos:lo_pos + count] = ranks < k[:, None]
    for s, (_, kind, _) in enumerate(layout.slots):
        if kind == BIN:
            bp, qp = 1 + T + s, 2 + T + s
            bad = ~mask[:, bp] & mask[:, qp]
            mask[bad, bp] = True
            mask[bad, qp] = False
    out = np.where(mask, layout.mask, seqs)
    return (out, mask) if return_mask else out


@dataclass
class TrainedGenerator:
    layout: VocabLayout
    model_config: ModelConfig
    train_config: TrainConfig
    states: list                 # two state dicts, one per split
    splits: list                 # two index arrays into the training rows
    leaves: list                 # two leaf-id matrices (n_j x T, 1-based)
    tokenizer: object = None
    ensemble: object = None
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def model(self, j: int) -> Decoder:
        m = Decoder(self.model_config)
        m.load_state_dict(self.states[j])
        m.eval()
        return m


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


@torch.no_grad()
def validation_loss(model: Decoder, seqs: np.ndarray, layout: VocabLayout, tc: TrainConfig,
                    loss_fn: SequenceLoss | None = None, seed: int | None = None) -> float:
    """Mean token loss on held-out rows under a fixed seeded mask."""
    if len(seqs) == 0:
        raise ValueError("validation set is empty")
    loss_fn = loss_fn or SequenceLoss(layout)
    rng = np.random.default_rng(tc.seed + 7919 if seed is None else seed)
    masked = apply_mask(seqs, layout, tc.tree_mask, tc.value_mask, rng)
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for sl in _batches(len(seqs), 512):
        inp = torch.from_numpy(masked[sl, :-1])
        tgt = torch.from_numpy(np.ascontiguousarray(seqs[sl, 1:]))
        per = loss_fn.per_token(model(inp), tgt)
        total += float(per.double().sum())
        count += per.numel()
    model.train(was_training)
    return total / count


def _step(model, opt, loss_fn, seqs, layout, tc, rng, step, tag):
    n = len(seqs)
    idx = rng.choice(n, size=min(n, tc.batch_size), replace=False)
    batch = seqs[idx]
    masked = apply_mask(batch, layout, tc.tree_mask, tc.value_mask, rng)
    inp = torch.from_numpy(masked[:, :-1])
    tgt = torch.from_numpy(np.ascontiguousarray(batch[:, 1:]))
    loss = loss_fn(model(inp), tgt)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"{tag}: non-finite training loss at step {step}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if tc.grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
    opt.step()
    return float(loss.detach())


def _optimizer(model, tc):
    return torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(0.9, 0.999), eps=1e-8)


def even_split(n: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[: n // 2]), np.sort(perm[n // 2:])]


def train(seqs: np.ndarray, leaves: np.ndarray, layout: VocabLayout, mc: ModelConfig, tc: TrainConfig,
          loss_cfg: OrdinalWeightConfig | None = None) -> TrainedGenerator:
    """Shared warm-up on all rows, then two copies continue on disjoint halves,
    each early-stopped on the other half's validation loss."""
    seqs = np.asarray(seqs, dtype=np.int64)
    n = len(seqs)
    if n < 4:
        raise ValueError(f"need at least 4 rows to train, got {n}")
    if seqs.shape[1] != layout.seq_len or mc.max_len < layout.seq_len - 1 or mc.vocab_size != layout.vocab_size:
        raise ValueError("model config does not match the vocabulary layout")
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    loss_fn = SequenceLoss(layout, loss_cfg)
    model = Decoder(mc, layout, seed=tc.seed)
    model.train()
    opt = _optimizer(model, tc)
    history = []
    s0 = tc.shared_steps(n)
    for step in range(1, s0 + 1):
        loss = _step(model, opt, loss_fn, seqs, layout, tc, rng, step, "shared")
        if step % tc.val_interval == 0 or step == s0:
            log.info("phase=shared step=%d train_loss=%.5f", step, loss)
        history.append({"phase": "shared", "step": step, "train_loss": loss})

    splits = even_split(n, tc.seed + 1)
    if tc.max_steps <= s0:
        state = copy.deepcopy(model.state_dict())
        states = [state, copy.deepcopy(state)]
    else:
        states = []
        for j in (0, 1):
            own, other = seqs[splits[j]], seqs[splits[1 - j]]
            g = copy.deepcopy(model)
            g.train()
            g_opt = _optimizer(g, tc)
            g_opt.load_state_dict(opt.state_dict())
            g_rng = np.random.default_rng([tc.seed, j + 1])
            best = validation_loss(g, other, layout, tc, loss_fn)
            best_state, best_step, bad = copy.deepcopy(g.state_dict()), s0, 0
            log.info("phase=split%d step=%d val_loss=%.5f", j + 1, s0, best)
            history.append({"phase": f"split{j + 1}", "step": s0, "val_loss": best})
            for step in range(s0 + 1, tc.max_steps + 1):
                loss = _step(g, g_opt, loss_fn, own, layout, tc, g_rng, step, f"split{j + 1}")
                rec = {"phase": f"split{j + 1}", "step": step, "train_loss": loss}
                if step % tc.val_interval == 0:
                    val = validation_loss(g, other, layout, tc, loss_fn)
                    rec["val_loss"] = val
                    log.info("phase=split%d step=%d train_loss=%.5f val_loss=%.5f", j + 1, step, loss, val)
                    if val < best:
                        best, best_state, best_step, bad = val, copy.deepcopy(g.state_dict()), step, 0
                    else:
                        bad += 1
                history.append(rec)
                if bad >= tc.patience:
                    log.info("phase=split%d early stop at step=%d best_step=%d best_val=%.5f",
                             j + 1, step, best_step, best)
                    break
            history.append({"phase": f"split{j + 1}", "best_step": best_step, "best_val_loss": best})
            states.append(best_state)
    return TrainedGenerator(layout, mc, tc, states, splits, [leaves[s] for s in splits], history=history)
