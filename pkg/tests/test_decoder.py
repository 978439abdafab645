import itertools

import numpy as np
import pytest
import torch

from _fd import fd_relative_errors
from _oracles import brute_force_marginals
from splatmark.codec import CodecConfig, chunk_indices, make_codebook
from splatmark.decoder import (
    DecoderConfig,
    DecoderOutput,
    DualBranchDecoder,
    bit_accuracy,
    chunks_to_bits,
    decoder_loss,
    group_bits,
    predict_bits,
    ungroup_bits,
)
from splatmark.errors import ConfigError, FormatError


def small_decoder(L=8, n=2, G=2, **kw):
    torch.manual_seed(0)
    kw = {"d": 16, "phi_hidden": 32, "hidden": 32, **kw}
    return DualBranchDecoder(DecoderConfig(L=L, n=n, G=G, **kw))


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_marginalization_matches_brute_force(n):
    rng = np.random.default_rng(n)
    L = 3 * n - (1 if n > 1 else 0)
    C = -(-L // n)
    book = torch.from_numpy(make_codebook(n).astype(np.float64))
    for _ in range(20):
        s = rng.normal(scale=3.0, size=(C, 1 << n))
        p, _ = chunks_to_bits(torch.from_numpy(s), book, L)
        assert np.abs(p.numpy() - brute_force_marginals(s, n, L)).max() < 1e-6


def test_one_hot_chunk_gives_codeword():
    book = torch.from_numpy(make_codebook(4).astype(np.float64))
    for j in (0, 5, 15):
        s = torch.zeros(1, 16, dtype=torch.float64)
        s[0, j] = 30.0
        p, _ = chunks_to_bits(s, book, 4)
        assert torch.allclose(p, book[j].clamp(1e-6, 1 - 1e-6), atol=1e-6)


def test_uniform_chunk_gives_half():
    book = torch.from_numpy(make_codebook(2).astype(np.float64))
    p, logits = chunks_to_bits(torch.zeros(3, 4, dtype=torch.float64), book, 6)
    assert torch.allclose(p, torch.full((6,), 0.5, dtype=torch.float64))
    assert torch.allclose(logits, torch.zeros(6, dtype=torch.float64))


def test_two_state_marginal_is_softmax():
    book = torch.from_numpy(make_codebook(1).astype(np.float64))
    s = torch.randn(5, 2, dtype=torch.float64)
    p, _ = chunks_to_bits(s, book, 5)
    assert torch.allclose(p, s.softmax(-1)[:, 1])


def test_probabilities_clamped_and_logits_finite():
    book = torch.from_numpy(make_codebook(2).astype(np.float32))
    s = torch.tensor([[1e4, -1e4, -1e4, -1e4]])
    p, logits = chunks_to_bits(s, book, 2)
    assert (p >= 1e-6).all() and (p <= 1 - 1e-6).all()
    assert torch.isfinite(logits).all()
    assert torch.allclose(logits, torch.log(p) - torch.log(1 - p), atol=1e-3)


@pytest.mark.parametrize("L,n,G", [(16, 1, 1), (32, 2, 4), (48, 2, 4), (64, 2, 4), (96, 2, 4), (128, 4, 4)])
def test_shape_contract(L, n, G):
    dec = DualBranchDecoder(DecoderConfig(L=L, n=n, G=G, d=16, phi_hidden=32, hidden=64))
    out = dec(torch.randn(3, 512))
    C = -(-L // n)
    assert out.chunk_logits.shape == (3, C, 1 << n)
    assert out.proj_probs.shape == out.proj_logits.shape == out.bit_logits.shape == (3, L)


def test_default_chunk_shape():
    dec = DualBranchDecoder(DecoderConfig(L=64, n=2, G=4))
    assert dec.chunk_branch(torch.randn(512)).shape == (32, 4)


def test_config_validation():
    with pytest.raises(ConfigError, match="L mod G"):
        DecoderConfig(L=64, n=2, G=3)
    with pytest.raises(ConfigError):
        DecoderConfig(L=8, d=10, heads=4)


def test_positional_embedding_matters():
    dec = small_decoder()
    f = torch.nn.functional.normalize(torch.randn(4, 512), dim=-1)
    with torch.no_grad():
        a = dec.chunk_branch(f)
        dec.chunk_pos.zero_()
        b = dec.chunk_branch(f)
    assert not torch.allclose(a, b)


def test_distinct_inputs_give_distinct_logits():
    dec = small_decoder()
    f = torch.nn.functional.normalize(torch.randn(2, 512), dim=-1)
    with torch.no_grad():
        s = dec.chunk_branch(f)
    assert not torch.allclose(s[0], s[1])


def test_grouping_round_trip_and_layout():
    z = torch.randn(5, 12)
    assert torch.equal(ungroup_bits(group_bits(z, 3)), z)
    Z = group_bits(torch.arange(12.0), 3)
    assert Z.shape == (4, 3)
    for g, l in itertools.product(range(3), range(4)):
        assert Z[l, g] == g * 4 + l


def test_zero_gate_switches_attention_off():
    dec = small_decoder(L=8, G=4)
    with torch.no_grad():
        dec.gate.zero_()
        f = torch.randn(3, 512)
        z = dec.raw_bit_logits(f)
        expected = dec.bit_norm(torch.zeros_like(z)) + z
        assert torch.allclose(dec.bit_branch(f), expected)


def test_single_group_shape():
    dec = small_decoder(L=6, n=1, G=1)
    assert dec.bit_branch(torch.randn(2, 512)).shape == (2, 6)


def test_saturated_prediction_has_tiny_loss():
    L, n = 8, 2
    cfg = CodecConfig(L=L, n=n)
    bits = np.random.default_rng(0).integers(0, 2, size=(4, L)).astype(np.uint8)
    y = torch.from_numpy(chunk_indices(bits, cfg))
    s = torch.full((4, cfg.C, 4), -30.0, dtype=torch.float64)
    s.scatter_(2, y[..., None], 30.0)
    book = torch.from_numpy(make_codebook(n).astype(np.float64))
    p, m = chunks_to_bits(s, book, L)
    target = torch.from_numpy(bits).double()
    out = DecoderOutput(s, p, m, (target * 2 - 1) * 30)
    total, _ = decoder_loss(out, target, y)
    assert total.item() < 1e-6 * (1.0 * cfg.C + L)


def test_loss_weight_ablation_equals_plain_bce():
    dec = small_decoder()
    f = torch.randn(4, 512)
    bits = torch.randint(0, 2, (4, 8)).float()
    y = torch.from_numpy(chunk_indices(bits.numpy().astype(np.uint8), CodecConfig(L=8, n=2)))
    out = dec(f)
    total, _ = decoder_loss(out, bits, y, 0.0, 0.0, 1.0)
    ref = torch.nn.functional.binary_cross_entropy(torch.sigmoid(out.bit_logits), bits)
    assert torch.allclose(total, ref, atol=1e-5)


def test_loss_rejects_shape_mismatch():
    dec = small_decoder()
    out = dec(torch.randn(2, 512))
    with pytest.raises(FormatError):
        decoder_loss(out, torch.zeros(2, 7), torch.zeros(2, 4, dtype=torch.long))


def test_decoder_loss_gradient_matches_finite_differences():
    torch.manual_seed(1)
    dec = DualBranchDecoder(DecoderConfig(L=4, n=2, d=8, G=2, phi_hidden=16, hidden=16)).double()
    f = torch.nn.functional.normalize(torch.randn(3, 512, dtype=torch.float64), dim=-1)
    bits = torch.tensor([[1, 0, 0, 1], [0, 1, 1, 1], [1, 1, 0, 0]], dtype=torch.float64)
    y = torch.from_numpy(chunk_indices(bits.numpy().astype(np.uint8), CodecConfig(L=4, n=2)))
    params = dict(dec.named_parameters())

    def loss():
        return decoder_loss(dec(f), bits, y)[0]

    errors = fd_relative_errors(loss, params)
    assert max(errors.values()) < 1e-3, errors


def test_every_parameter_receives_gradient():
    dec = small_decoder(L=8, n=2, G=2)
    bits = torch.randint(0, 2, (6, 8)).float()
    y = torch.from_numpy(chunk_indices(bits.numpy().astype(np.uint8), CodecConfig(L=8, n=2)))
    decoder_loss(dec(torch.randn(6, 512)), bits, y)[0].backward()
    dead = [n for n, p in dec.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert not dead


def test_predict_bits_threshold():
    assert predict_bits(torch.tensor([2.0, -2.0])).tolist() == [1, 0]
    assert predict_bits(torch.tensor([0.0])).tolist() == [0]


def test_bit_accuracy_against_naive_loop():
    rng = np.random.default_rng(3)
    a, b = rng.integers(0, 2, (7, 16)), rng.integers(0, 2, (7, 16))
    agree = 0
    for i in range(7):
        for j in range(16):
            agree += int(a[i, j] == b[i, j])
    assert bit_accuracy(a, b) == pytest.approx(agree / (7 * 16))
    assert bit_accuracy(a, a) == 1.0
    assert bit_accuracy(a, 1 - a) == 0.0
    one_wrong = a[:1].copy()
    one_wrong[0, 3] ^= 1
    assert bit_accuracy(one_wrong, a[:1]) == 0.9375
    with pytest.raises(FormatError):
        bit_accuracy(a, b[:, :3])
