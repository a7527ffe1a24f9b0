import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from grammar_ode.grammar import builtin_grammar, is_valid, one_hot_batch, parse, sample_dataset, sequence_masks
from grammar_ode.gvae import (GvaeConfig, GvaeModel, MaskedDecoder, TrainConfig, decode_latent, kl_divergence,
                              min_expansion, reconstruction_accuracy, reparametrize, split_indices, train, vae_loss)

TOY = builtin_grammar("toy")
TINY = GvaeConfig(d_z=4, hidden=6, conv_channels=(3, 3, 3), kernels=(2, 2, 2), dense=8, gru_layers=1)


def _batch(g, texts):
    seqs = [parse(g, s) for s in texts]
    x = torch.as_tensor(one_hot_batch(g, seqs), dtype=torch.float64)
    m = torch.as_tensor(np.stack([sequence_masks(g, s) for s in seqs]))
    return seqs, x, m


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    model = GvaeModel(TOY.n_max, TOY.n_rules, TINY).double()
    _, x, m = _batch(TOY, ["C + sin(t)", "t + C", "cos(t) + C"])
    eps = torch.randn(3, TINY.d_z, dtype=torch.float64)
    params = [p for p in model.parameters()]

    def f(*ps):
        with torch.no_grad():
            for p, v in zip(params, ps):
                p.copy_(v)
        return vae_loss(model, x, m, 0.1, eps)[0]

    total = vae_loss(model, x, m, 0.1, eps)[0]
    grads = torch.autograd.grad(total, params)
    h = 1e-6
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.data.view(-1), g.view(-1)
        for j in range(0, flat.numel(), max(1, flat.numel() // 5)):
            old = flat[j].item()
            flat[j] = old + h
            lp = vae_loss(model, x, m, 0.1, eps)[0].item()
            flat[j] = old - h
            lm = vae_loss(model, x, m, 0.1, eps)[0].item()
            flat[j] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - gflat[j].item()) / max(abs(fd), abs(gflat[j].item()), 1e-6))
    assert worst < 1e-4


def test_kl_is_nonnegative_and_zero_at_prior():
    mean = torch.zeros(2, 5)
    assert torch.allclose(kl_divergence(mean, torch.zeros(2, 5)), torch.zeros(2))
    gen = torch.Generator().manual_seed(1)
    mu, lv = torch.randn(50, 5, generator=gen), torch.randn(50, 5, generator=gen)
    assert (kl_divergence(mu, lv) >= 0).all()


def test_zero_beta_drops_kl_from_total():
    model = GvaeModel(TOY.n_max, TOY.n_rules, TINY).double()
    _, x, m = _batch(TOY, ["t + t"])
    total, bce, kl = vae_loss(model, x, m, 0.0, None)
    assert total.item() == bce.item()
    assert kl.item() >= 0


def test_reparametrize_statistics():
    z = reparametrize(np.full((20000, 2), 1.5), np.log(np.full((20000, 2), 0.25)), seed=3)
    assert abs(z.mean() - 1.5) < 0.01
    assert abs(z.std() - 0.5) < 0.01
    np.testing.assert_array_equal(z, reparametrize(np.full((20000, 2), 1.5), np.log(np.full((20000, 2), 0.25)), 3))


def test_min_expansion_lengths():
    assert min_expansion(TOY)["S"] == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["argmax", "sample"]))
def test_masked_decoding_always_valid(seed, mode):
    g = builtin_grammar("bench1")
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, (g.n_max, g.n_rules))
    seq = MaskedDecoder(g).decode(logits, mode, rng)
    assert is_valid(g, seq)
    assert len(seq) == g.n_max


def test_decode_from_random_latents():
    g = builtin_grammar("bench1")
    torch.manual_seed(0)
    model = GvaeModel(g.n_max, g.n_rules, GvaeConfig(d_z=4, hidden=8, dense=16, gru_layers=1))
    z = np.random.default_rng(0).normal(size=(25, 4))
    for seq in decode_latent(model, g, z):
        assert is_valid(g, seq)
    a = decode_latent(model, g, z[:3], mode="sample", seed=9)
    assert a == decode_latent(model, g, z[:3], mode="sample", seed=9)


def test_decoding_ignores_dropout_training_mode():
    g = builtin_grammar("bench1")
    torch.manual_seed(0)
    model = GvaeModel(g.n_max, g.n_rules, GvaeConfig(d_z=4, hidden=6, conv_channels=(3, 3, 3), dense=8,
                                                     gru_layers=2, dropout=0.5))
    z = np.random.default_rng(1).normal(size=(8, 4))
    first = decode_latent(model.train(), g, z)
    second = decode_latent(model.train(), g, z)
    assert [s.indices for s in first] == [s.indices for s in second]


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = GvaeModel(TOY.n_max, TOY.n_rules, TINY)
    path = tmp_path / "m.gvae"
    model.save(path, TOY)
    back = GvaeModel.load(path, TOY)
    _, x, _ = _batch(TOY, ["C + sin(t)"])
    x = x.float()
    with torch.no_grad():
        np.testing.assert_array_equal(model(x)[0].numpy(), back(x)[0].numpy())
    with pytest.raises(ValueError):
        GvaeModel.load(path, builtin_grammar("toy", n_max=TOY.n_max + 1))
    with pytest.raises(ValueError):
        GvaeModel.from_bytes(b"nope" + path.read_bytes()[4:])


def test_split_is_disjoint_and_seeded():
    tr, va = split_indices(100, 0.1, 4)
    assert len(va) == 10 and not set(tr) & set(va)
    assert np.array_equal(va, split_indices(100, 0.1, 4)[1])


def test_training_is_deterministic_and_learns():
    g = builtin_grammar("bench1")
    seqs = [parse(g, s) for s in sample_dataset(g, 120, seed=1)]
    cfg = GvaeConfig(d_z=4, hidden=16, dense=32, gru_layers=1)
    tc = TrainConfig(max_epochs=6, batch_size=32, seed=2)
    a, b = train(g, seqs, cfg, tc), train(g, seqs, cfg, tc)
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert a.log[-1]["bce"] < a.log[0]["bce"]
    assert 0.0 <= reconstruction_accuracy(a.model, g, seqs[:10]) <= 1.0


def test_exact_monitor_keeps_best_reconstruction_epoch():
    g = builtin_grammar("bench1")
    seqs = [parse(g, s) for s in sample_dataset(g, 100, seed=4)]
    cfg = GvaeConfig(d_z=4, hidden=16, dense=32, gru_layers=1)
    res = train(g, seqs, cfg, TrainConfig(max_epochs=5, batch_size=32, seed=1, monitor="val_exact"))
    scores = [r["val_exact"] for r in res.log]
    assert res.best_epoch == 1 + scores.index(max(scores))
    val = [seqs[i] for i in res.val_idx]
    assert reconstruction_accuracy(res.model, g, val) == max(scores)
    with pytest.raises(ValueError):
        TrainConfig(monitor="accuracy")
