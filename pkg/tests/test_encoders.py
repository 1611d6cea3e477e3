import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from leapd.config import DomainLabel
from leapd.encoders import ImageEncoder, TextEncoder, TokenStream, encode_image, encode_tokens, l2_normalize, tokenize
from leapd.prompting import build_manual_prompt


@pytest.fixture
def image_encoder():
    torch.manual_seed(0)
    return ImageEncoder(16).double()


@pytest.fixture
def text_encoder():
    torch.manual_seed(0)
    return TextEncoder(16, token_dim=8, hidden=12, vocab_size=64).double()


def test_image_embedding_unit_norm_and_deterministic(image_encoder):
    img = np.random.default_rng(0).random((3, 32, 32))
    v1, v2 = encode_image(img, image_encoder), encode_image(img, image_encoder)
    assert abs(float(v1.detach().norm()) - 1) < 1e-5
    assert torch.equal(v1, v2)


def test_brightness_shift_moves_embedding(image_encoder):
    img = np.random.default_rng(1).random((3, 32, 32)) * 0.5
    v, w = encode_image(img, image_encoder), encode_image(img + 0.3, image_encoder)
    assert float((v @ w).detach()) < 1 - 1e-6


def test_image_shape_errors(image_encoder):
    with pytest.raises(ValueError, match="channel"):
        encode_image(np.zeros((1, 32, 32)), image_encoder)
    with pytest.raises(ValueError):
        encode_image(np.zeros((3, 4, 4)), image_encoder)


def test_tokenize_repeats_share_vectors(text_encoder):
    s = tokenize("a b a", text_encoder)
    assert len(s) == 3
    assert torch.equal(s.vectors[0], s.vectors[2])
    assert torch.equal(tokenize("a b a", text_encoder).vectors, s.vectors)


def test_filled_template_token_count(text_encoder):
    text = build_manual_prompt(DomainLabel("high", "bird", "foggy"))
    assert len(tokenize(text, text_encoder)) == len(text.split()) == 13


def test_tokenize_rejects_empty(text_encoder):
    with pytest.raises(ValueError):
        tokenize("   ", text_encoder)


def test_empty_stream_rejected():
    with pytest.raises(ValueError):
        TokenStream(torch.zeros(0, 8), "learnable_context")


def test_text_embedding_shared_dimension(text_encoder, image_encoder):
    t = encode_tokens(tokenize("an aerial view", text_encoder), text_encoder)
    v = encode_image(np.zeros((3, 16, 16)), image_encoder)
    assert t.shape == v.shape == (16,)
    assert abs(float(t.detach().norm()) - 1) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=12))
def test_normalization_idempotent(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    if float(x.norm()) < 1e-6:
        return
    y = l2_normalize(x)
    assert float((l2_normalize(y) - y).abs().max()) <= 1e-7


def _fd_check(module, loss_fn, n_params=40, seed=0):
    rng = np.random.default_rng(seed)
    module.zero_grad()
    loss_fn().backward()
    # the token table is unused when the stream carries free context vectors
    flat = [(p, i) for p in module.parameters() if p.grad is not None for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    h = 1e-5
    for k in picks:
        p, i = flat[k]
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            p.view(-1)[i] += h
            up = float(loss_fn())
            p.view(-1)[i] -= 2 * h
            down = float(loss_fn())
            p.view(-1)[i] += h
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6), (k, analytic, numeric)


def test_image_encoder_gradients(image_encoder):
    img = torch.from_numpy(np.random.default_rng(2).random((2, 3, 16, 16)))
    target = l2_normalize(torch.ones(16, dtype=torch.float64))
    _fd_check(image_encoder, lambda: (image_encoder(img) @ target).sum())


def test_text_encoder_gradients(text_encoder):
    ctx = torch.from_numpy(np.random.default_rng(3).normal(size=(5, 8)))
    target = l2_normalize(torch.arange(16, dtype=torch.float64))
    _fd_check(text_encoder, lambda: text_encoder(TokenStream(ctx, "learnable_context")) @ target)
