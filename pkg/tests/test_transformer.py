import numpy as np
import pytest
import torch

from tabtree import checkpoint
from tabtree.embedding import init_quantile_embedding
from tabtree.quantizer import BIN, CAT, QUANT, VocabLayout
from tabtree.transformer import Decoder, ModelConfig, TrainConfig, apply_mask, even_split, train, validation_loss


def _layout():
    return VocabLayout((4, 3, 4), ((0, BIN, 3), (0, QUANT, 20), (1, CAT, 3), (2, BIN, 2), (2, QUANT, 12)),
                       n_c=3, n_b=3, n_q=20)


def _seqs(lay, n, seed=0):
    r = np.random.default_rng(seed)
    return np.stack([[r.integers(lo, hi) for lo, hi in lay.valid_ranges()] for _ in range(n)])


def _model(lay, **kw):
    kw = {"dim": 16, "ff_dim": 32, "n_heads": 2, "n_layers": 2, "dropout": 0.0, **kw}
    return Decoder(ModelConfig(lay.vocab_size, lay.seq_len, **kw), lay, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, 10, dim=10, n_heads=3)
    with pytest.raises(ValueError):
        TrainConfig(tree_mask=(0.8, 0.2))


def test_shared_steps():
    tc = TrainConfig(max_steps=5000, batch_size=128)
    assert tc.shared_steps(2000) == 313
    assert tc.shared_steps(100_000) == 500
    assert TrainConfig(max_steps=50, warmup_steps=80).shared_steps(10) == 50


def test_quantile_rows_initialised():
    lay = _layout()
    m = _model(lay)
    w = m.tok_emb.weight.detach().numpy()
    qe = init_quantile_embedding(lay.n_q, 16)
    assert np.allclose(w[lay.quant_offset:lay.quant_offset + lay.n_q], qe, atol=1e-7)


def test_causal():
    lay = _layout()
    m = _model(lay).eval()
    x = torch.from_numpy(_seqs(lay, 2))
    a = m(x)
    y = x.clone()
    y[:, 6:] = lay.mask
    b = m(y)
    assert torch.allclose(a[:, :6], b[:, :6], atol=1e-6)
    assert not torch.allclose(a[:, 6:], b[:, 6:])


def test_forward_validates_ids():
    lay = _layout()
    m = _model(lay)
    with pytest.raises(ValueError):
        m(torch.full((1, 3), lay.vocab_size))
    with pytest.raises(ValueError):
        m(torch.zeros(1, lay.seq_len + 1, dtype=torch.long))


def test_zero_layers_is_tied_embedding():
    lay = _layout()
    m = _model(lay, n_layers=0).eval()
    x = torch.from_numpy(_seqs(lay, 1))
    h = m.tok_emb(x) + m.pos_emb(torch.arange(x.shape[1]))[None]
    assert torch.allclose(m(x), m.ln_f(h) @ m.tok_emb.weight.T)


def test_gradcheck_float64():
    lay = VocabLayout((2,), ((0, CAT, 2), (1, BIN, 2), (1, QUANT, 3)), n_c=2, n_b=2, n_q=3)
    m = _model(lay, dim=8, ff_dim=16, n_layers=1).double().eval()
    x = torch.from_numpy(_seqs(lay, 2))
    p = m.blocks[0].ff1.weight

    def f(w):
        with torch.no_grad():
            p.copy_(w)
        return m(x).sum()

    w0 = p.detach().clone()
    p.grad = None
    m(x).sum().backward()
    g = p.grad.clone()
    eps = 1e-6
    for idx in [(0, 0), (3, 5), (15, 7)]:
        e = torch.zeros_like(w0)
        e[idx] = eps
        fd = (f(w0 + e) - f(w0 - e)) / (2 * eps)
        assert abs(fd.item() - g[idx].item()) <= 1e-6 * max(1.0, abs(g[idx].item()))
    f(w0)


def test_mask_rates_and_swap():
    lay = _layout()
    seqs = _seqs(lay, 4000)
    out, mask = apply_mask(seqs, lay, (0.5, 0.75), (0.25, 0.5), np.random.default_rng(0), return_mask=True)
    T = lay.n_trees
    assert not mask[:, 0].any() and not mask[:, -1].any()
    assert np.array_equal(out[mask], np.full(mask.sum(), lay.mask))
    assert np.array_equal(out[~mask], seqs[~mask])
    assert mask[:, 1:1 + T].mean() == pytest.approx(0.625, abs=0.02)
    assert mask[:, 1 + T:-1].mean() == pytest.approx(0.375, abs=0.02)
    for s, (_, kind, _) in enumerate(lay.slots):
        if kind == BIN:
            assert not (~mask[:, 1 + T + s] & mask[:, 2 + T + s]).any()


def test_mask_zero_range_is_identity():
    lay = _layout()
    seqs = _seqs(lay, 50)
    assert np.array_equal(apply_mask(seqs, lay, (0, 0), (0, 0), np.random.default_rng(0)), seqs)


def test_even_split():
    a, b = even_split(11, 0)
    assert len(a) == 5 and len(b) == 6
    assert sorted(np.concatenate([a, b])) == list(range(11))


def _train(lay, seqs, steps, **kw):
    mc = ModelConfig(lay.vocab_size, lay.seq_len, dim=16, ff_dim=32, n_heads=2, n_layers=1)
    leaves = seqs[:, 1:1 + lay.n_trees] + 1
    return train(seqs, leaves, lay, mc, TrainConfig(batch_size=16, max_steps=steps, val_interval=5, **kw))


def test_training_reduces_loss():
    lay = _layout()
    seqs = np.repeat(_seqs(lay, 4), 10, axis=0)
    m0 = Decoder(ModelConfig(lay.vocab_size, lay.seq_len, dim=16, ff_dim=32, n_heads=2, n_layers=1), lay)
    g = _train(lay, seqs, 60, patience=100)
    tc = g.train_config
    assert validation_loss(g.model(0), seqs, lay, tc) < validation_loss(m0, seqs, lay, tc) - 0.5
    phases = {h["phase"] for h in g.history}
    assert phases == {"shared", "split1", "split2"}
    assert len(g.splits[0]) + len(g.splits[1]) == len(seqs)


def test_training_deterministic():
    lay = _layout()
    seqs = _seqs(lay, 40)
    a = _train(lay, seqs, 20, seed=3)
    b = _train(lay, seqs, 20, seed=3)
    for k in a.states[1]:
        assert torch.equal(a.states[1][k], b.states[1][k])


def test_early_stopping_restores_best():
    lay = _layout()
    seqs = _seqs(lay, 40)
    g = _train(lay, seqs, 200, patience=1)
    best = [h for h in g.history if "best_step" in h]
    assert len(best) == 2
    for j, rec in enumerate(best):
        val = validation_loss(g.model(j), seqs[g.splits[1 - j]], lay, g.train_config)
        assert val == pytest.approx(rec["best_val_loss"], rel=1e-5)


def test_rejects_tiny_input():
    lay = _layout()
    with pytest.raises(ValueError):
        _train(lay, _seqs(lay, 3), 5)


def test_checkpoint_round_trip(tmp_path, toy_generator):
    table, gen, seqs = toy_generator
    p = tmp_path / "m.ttf"
    checkpoint.save(gen, p)
    back = checkpoint.load(p)
    assert back.layout == gen.layout
    x = torch.from_numpy(seqs[:5, :-1])
    for j in (0, 1):
        assert torch.equal(back.model(j)(x), gen.model(j)(x))
        assert np.array_equal(back.leaves[j], gen.leaves[j])
    assert np.array_equal(back.tokenizer.encode(table), gen.tokenizer.encode(table))


def test_checkpoint_corruption(tmp_path, toy_generator):
    _, gen, _ = toy_generator
    p = tmp_path / "m.ttf"
    checkpoint.save(gen, p)
    raw = p.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-10])
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "extra").write_bytes(raw + b"\0")
    for name in ("trunc", "magic", "extra"):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load(tmp_path / name)
