import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatedfl import lora
from gatedfl._binio import CheckpointError
from gatedfl.lora import Role
from gatedfl.tinylm import (ModelConfig, TinyLM, forward_logits, hidden_state_at, init_weights,
                            load_model, mean_loss, perplexity, perplexity_from_log_probs,
                            pretrain_base, sample, save_model)
from gatedfl.tokenizer import EOT, FIRST_KEY_SLOT, CharTokenizer

from conftest import SMALL

ONE_LAYER = ModelConfig(vocab_size=160, embed_dim=16, n_layers=1, context_len=32)


def _reference_logits(w, cfg, tokens, deltas=None):
    """Plain numpy forward pass, written independently of the tape engine."""
    deltas = deltas or {}
    T, d = len(tokens), cfg.embed_dim
    pos = np.arange(T)[:, None]
    ang = pos / 10000.0 ** (np.arange(0, d, 2)[None, :] / d)
    pe = np.zeros((T, d))
    pe[:, 0::2], pe[:, 1::2] = np.sin(ang), np.cos(ang)

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    x = w["tok_emb"][tokens] + pe
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        W = {n: w[p + f"attn.{n}"] + deltas.get(p + f"attn.{n}", 0.0) for n in "qkvo"}
        h = ln(x, w[p + "ln1.g"], w[p + "ln1.b"])
        q, k, v = h @ W["q"].T, h @ W["k"].T, h @ W["v"].T
        s = q @ k.T / math.sqrt(d)
        s = np.where(np.tril(np.ones((T, T), bool)), s, -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        x = x + (a @ v) @ W["o"].T
        h = ln(x, w[p + "ln2.g"], w[p + "ln2.b"])
        x = x + gelu(h @ w[p + "ffn.up"].T + w[p + "ffn.up_b"]) @ w[p + "ffn.down"].T + w[p + "ffn.down_b"]
    x = ln(x, w["ln_f.g"], w["ln_f.b"])
    return x @ w["head"].T + w["head_b"]


def _random_model(cfg=ONE_LAYER, seed=0):
    return TinyLM(cfg, init_weights(cfg, seed))


def _trained_adapter(model, seed=0, r=4):
    ad = lora.init_adapter(model, r, Role.SECURE, seed)
    rng = np.random.default_rng(seed + 1)
    for p in ad.points:
        ad.B[p] = rng.normal(0, 0.05, size=ad.B[p].shape)
    return ad


def test_base_forward_matches_reference():
    m = _random_model()
    toks = [0, 40, 41, 72, 5, 0]
    assert np.allclose(forward_logits(m, None, toks), _reference_logits(m.weights, m.config, toks),
                       atol=1e-10)


def test_adapter_additivity_on_one_layer():
    m = _random_model(seed=1)
    ad = _trained_adapter(m, seed=2)
    toks = [0, 50, 60, 70, 80, 90, 4]
    deltas = {p: ad.scale * ad.B[p] @ ad.A[p] for p in ad.points}
    expect = _reference_logits(m.weights, m.config, toks, deltas)
    assert np.allclose(forward_logits(m, ad, toks), expect, atol=1e-9, rtol=0)


def test_zero_b_adapter_is_identity():
    m = _random_model()
    ad = lora.init_adapter(m, 8, Role.SECURE, 3)
    toks = [0, 10, 20, 30]
    assert np.array_equal(forward_logits(m, ad, toks), forward_logits(m, None, toks))


def test_doubled_adapter_changes_logits():
    m = _random_model()
    ad = _trained_adapter(m, seed=4)
    toks = [0, 10, 20, 30]
    once = forward_logits(m, lora.fuse([ad], [1.0]), toks)
    twice = forward_logits(m, lora.fuse([ad], [2.0]), toks)
    assert np.abs(once - twice).max() > 1e-6
    assert np.allclose(once, forward_logits(m, ad, toks), atol=1e-12)


def test_empty_tokens_give_empty_logits():
    assert forward_logits(_random_model(), None, []).shape == (0, 160)


def test_out_of_vocab_and_too_long_rejected():
    m = _random_model()
    with pytest.raises(ValueError, match="vocabulary"):
        forward_logits(m, None, [0, 160])
    with pytest.raises(ValueError, match="context_len"):
        forward_logits(m, None, [4] * 33)


def _constant_head_model(bias):
    w = init_weights(ONE_LAYER, 0)
    w["head"] = np.zeros_like(w["head"])
    w["head_b"] = np.asarray(bias, dtype=np.float64)
    return TinyLM(ONE_LAYER, w)


def test_uniform_model_has_ppl_equal_to_vocab():
    m = _constant_head_model(np.zeros(160))
    assert perplexity(m, None, [0, 5, 9, 44, 0]) == pytest.approx(160, rel=1e-12)


def test_deterministic_model_has_ppl_one():
    b = np.zeros(160)
    b[7] = 1e3
    m = _constant_head_model(b)
    assert perplexity(m, None, [0, 7, 7, 7, 7]) == pytest.approx(1.0, abs=1e-12)


def test_hand_set_probabilities_give_ppl_four():
    p = np.full(160, 0.125 / 157)
    p[[10, 11, 12]] = [0.5, 0.25, 0.125]
    m = _constant_head_model(np.log(p))
    assert perplexity(m, None, [0, 10, 11, 12]) == pytest.approx(4.0, rel=1e-12)
    assert perplexity_from_log_probs(np.log([0.5, 0.25, 0.125])) == pytest.approx(4.0, rel=1e-15)


def test_ppl_needs_a_scored_position():
    m = _random_model()
    with pytest.raises(ValueError):
        perplexity(m, None, [0])
    with pytest.raises(ValueError):
        perplexity_from_log_probs([])


def test_ppl_of_repeated_document_list_equals_single(small_model, tok):
    doc = tok.encode_doc("Maria Lopez visited Brightwater on 1995-03-12.")
    one = perplexity(small_model, None, doc)
    many = perplexity(small_model, None, [doc, doc, doc])
    assert abs(one - many) <= 1e-9 * one


def test_ppl_is_at_least_one(small_model, tok):
    assert perplexity(small_model, None, tok.encode_doc("anything at all")) >= 1.0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(4, 98), min_size=3, max_size=20), st.integers(1, 18), st.integers(4, 98))
def test_causality_under_suffix_perturbation(toks, cut, new_tok):
    m = _random_model(seed=5)
    cut = min(cut, len(toks) - 1)
    other = toks[:cut] + [new_tok] + toks[cut + 1:]
    a = forward_logits(m, None, toks)[:cut]
    b = forward_logits(m, None, other)[:cut]
    assert np.array_equal(a, b)


def test_base_forward_is_pure():
    m = _random_model(seed=6)
    toks = [0, 30, 31, 32]
    assert forward_logits(m, None, toks).tobytes() == forward_logits(m, None, toks).tobytes()


def test_weights_are_frozen():
    m = _random_model()
    with pytest.raises(ValueError):
        m.weights["head"][0, 0] = 1.0


def test_pretrain_learns_and_is_deterministic(dictionary, tok):
    from gatedfl.privacy import generate_documents
    rng = np.random.default_rng(0)
    docs = [tok.encode_doc(d.text) for d in generate_documents(80, dictionary, rng)]
    assert sum(len(d) for d in docs) >= 5000
    held = [tok.encode_doc(d.text) for d in generate_documents(20, dictionary, rng)]
    m1 = pretrain_base(SMALL, docs, steps=200, seed=3, lr=1e-2)
    m2 = pretrain_base(SMALL, docs, steps=200, seed=3, lr=1e-2)
    rand = TinyLM(SMALL, init_weights(SMALL, 3))
    assert all(np.array_equal(m1.weights[k], m2.weights[k]) for k in m1.weights)
    assert mean_loss(m1, None, held) < mean_loss(rand, None, held)
    assert perplexity(m1, None, held) < SMALL.vocab_size


def test_pretrain_preconditions():
    with pytest.raises(ValueError, match="steps"):
        pretrain_base(ONE_LAYER, [[0, 5, 0]], steps=0, seed=0)
    with pytest.raises(ValueError, match="empty"):
        pretrain_base(ONE_LAYER, [], steps=5, seed=0)


def test_sampling_contract(small_model, tok):
    prompt = tok.encode_doc("The ")[:-1]
    a = sample(small_model, None, prompt, 1.0, 30, seed=11)
    b = sample(small_model, None, prompt, 1.0, 30, seed=11)
    assert a == b
    assert sample(small_model, None, prompt, 1.0, 0, seed=11) == []
    assert all(t < FIRST_KEY_SLOT and t != EOT for t in a)
    with pytest.raises(ValueError):
        sample(small_model, None, prompt, 0.0, 5, seed=0)


def test_greedy_sampling_reproduces_a_memorised_continuation(tok):
    text = "abcabcabcabcabcabc"
    seqs = [tok.encode_doc(text)] * 8
    m = pretrain_base(ONE_LAYER, seqs, steps=150, seed=0, lr=2e-2, batch_size=8)
    prompt = tok.encode_doc(text)[:4]
    out = sample(m, None, prompt, 1.0, len(text) - 3, seed=0, greedy=True)
    assert tok.decode(out) == text[3:]


def test_hidden_state_contract(small_model):
    h = hidden_state_at(small_model, [40], 0)
    assert h.shape == (SMALL.embed_dim,)
    a = hidden_state_at(small_model, [40, 50, 60], 0)
    b = hidden_state_at(small_model, [40, 70], 0)
    assert np.array_equal(a, b) and np.array_equal(a, h)
    with pytest.raises(IndexError):
        hidden_state_at(small_model, [40], 1)


def test_hidden_state_matches_full_sequence_state(small_model):
    from gatedfl.autodiff import Tape
    toks = [40, 50, 60, 70]
    _, hidden = small_model.graph(Tape(), np.asarray([toks]))
    assert np.allclose(hidden_state_at(small_model, toks, 2), hidden.value[0, 2], atol=1e-12)


def test_checkpoint_round_trip(tmp_path, small_model):
    path = tmp_path / "m.sglm"
    save_model(small_model, path)
    back = load_model(path)
    assert back.config == small_model.config
    assert all(np.array_equal(back.weights[k], small_model.weights[k]) for k in back.weights)
    raw = path.read_bytes()
    assert raw[:4] == b"SGLM"
    (tmp_path / "bad.sglm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_model(tmp_path / "bad.sglm")
    (tmp_path / "cut.sglm").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "cut.sglm")


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(n_heads=2)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=50)
    assert CharTokenizer().encode_doc("a")[0] == EOT
