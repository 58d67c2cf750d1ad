import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimlab import gradcheck
from swimlab import numerics as nx
from swimlab.model import (
    ModelConfig,
    ModelInput,
    collate,
    forward,
    init_params,
    load_params,
    param_shapes,
    save_params,
    task_loss,
)
from swimlab.numerics import SeededRng

SMALL = ModelConfig(d=16, n_layers=3, n_heads=2, ffn_mult=2, vocab_size=20, visual_feature_dim=5, max_text_len=8)


def random_input(rng, cfg=SMALL, b=3, t=6, lv=9, ragged=True):
    lengths = rng.integers(1, t + 1, size=b) if ragged else np.full(b, t)
    lengths[0] = t
    toks = [rng.integers(0, cfg.vocab_size, size=n).tolist() for n in lengths]
    feats = [rng.normal(size=(lv, cfg.visual_feature_dim)) for _ in range(b)]
    return collate(toks, feats)


def test_init_is_deterministic():
    a = init_params(SMALL, SeededRng(3))
    b = init_params(SMALL, SeededRng(3))
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].value, b[k].value) for k in a)


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(d=8, n_heads=3)


def test_counts_must_be_positive():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_init_values_are_within_bounds():
    params = init_params(SMALL, SeededRng(0))
    for name, shape in param_shapes(SMALL).items():
        v = params[name].value
        assert v.shape == shape and np.all(np.isfinite(v))
        if len(shape) == 2 and not name.endswith("_emb"):
            assert np.abs(v).max() <= math.sqrt(6.0 / sum(shape))
        if len(shape) == 1:
            assert np.all(v == 1.0)


def test_single_visual_token_gives_unit_rows():
    rng = np.random.default_rng(0)
    trace = forward(init_params(SMALL, SeededRng(0)), SMALL, random_input(rng, lv=1))
    for a in trace.attention:
        assert np.all(a.value == 1.0)


def test_zero_query_key_gives_uniform_rows():
    params = init_params(SMALL, SeededRng(1))
    for l in range(SMALL.n_layers):
        params[f"layer{l}.cross_q"] = nx.param(np.zeros((SMALL.d, SMALL.d)))
        params[f"layer{l}.cross_k"] = nx.param(np.zeros((SMALL.d, SMALL.d)))
    trace = forward(params, SMALL, random_input(np.random.default_rng(1), lv=7))
    for a in trace.attention:
        assert np.allclose(a.value, 1 / 7, atol=1e-15, rtol=0)


def test_attention_shape():
    trace = forward(init_params(SMALL, SeededRng(0)), SMALL, random_input(np.random.default_rng(0), b=2, t=5, lv=4))
    assert trace.n_layers == SMALL.n_layers
    assert all(a.shape == (2, SMALL.n_heads, 5, 4) for a in trace.attention)
    assert trace.logits.shape == (2, SMALL.vocab_size)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL, SeededRng(seed))
    for v in params.values():
        v.value = v.value + rng.normal(0, 1.0, v.shape)
    trace = forward(params, SMALL, random_input(rng))
    for a in trace.attention:
        assert np.abs(a.value.sum(-1) - 1).max() <= 1e-9


def test_length_overflow():
    inp = collate([[1] * 9], [np.zeros((4, SMALL.visual_feature_dim))])
    with pytest.raises(ValueError, match="max_text_len"):
        forward(init_params(SMALL, SeededRng(0)), SMALL, inp)


def test_feature_dim_mismatch():
    inp = collate([[1, 2]], [np.zeros((4, SMALL.visual_feature_dim + 1))])
    with pytest.raises(ValueError, match="visual features"):
        forward(init_params(SMALL, SeededRng(0)), SMALL, inp)


def test_causality():
    rng = np.random.default_rng(5)
    params = init_params(SMALL, SeededRng(5))
    inp = random_input(rng, b=1, t=6, ragged=False)
    base = forward(params, SMALL, inp)
    for t in range(6):
        ids = inp.ids.copy()
        ids[0, t] = (ids[0, t] + 1) % SMALL.vocab_size
        other = forward(params, SMALL, ModelInput(ids, inp.lengths, inp.features))
        for a, b in zip(base.attention, other.attention):
            assert np.array_equal(a.value[:, :, :t], b.value[:, :, :t])


def test_padding_does_not_leak():
    rng = np.random.default_rng(2)
    params = init_params(SMALL, SeededRng(2))
    feats = rng.normal(size=(5, SMALL.visual_feature_dim))
    alone = forward(params, SMALL, collate([[3, 4]], [feats]))
    padded = forward(params, SMALL, collate([[3, 4], [1, 2, 3, 4, 5, 6]], [feats, feats]))
    np.testing.assert_allclose(padded.logits.value[0], alone.logits.value[0], atol=1e-12)


def test_visual_permutation_equivariance():
    rng = np.random.default_rng(7)
    params = init_params(SMALL, SeededRng(7))
    inp = random_input(rng, lv=9)
    perm = rng.permutation(9)
    shuffled = ModelInput(inp.ids, inp.lengths, inp.features[:, perm])
    a, b = forward(params, SMALL, inp), forward(params, SMALL, shuffled)
    np.testing.assert_allclose(b.logits.value, a.logits.value, atol=1e-12)
    for x, y in zip(a.attention, b.attention):
        np.testing.assert_allclose(y.value, x.value[..., perm], atol=1e-14)


def test_cross_entropy_uniform_logits():
    loss = task_loss(nx.const(np.zeros((1, 4))), [2])
    assert loss.value == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_decreases_with_margin():
    losses = []
    for m in (0.0, 1.0, 5.0, 20.0, 60.0):
        logits = np.zeros((1, 4))
        logits[0, 1] = m
        losses.append(float(task_loss(nx.const(logits), [1]).value))
    assert losses == sorted(losses, reverse=True)
    assert losses[-1] < 1e-20


def test_cross_entropy_bad_id():
    with pytest.raises(ValueError):
        task_loss(nx.const(np.zeros((1, 4))), [4])


def test_cross_entropy_gradient():
    logits = nx.param(np.random.default_rng(0).normal(size=(3, 5)))
    assert nx.check_gradients(lambda: task_loss(logits, [0, 4, 2]), [logits]) < 1e-6


def test_tiny_model_gradients():
    fn, inputs = gradcheck.tiny_model_case(0)
    assert nx.check_gradients(fn, inputs, h=1e-5) < 1e-3


def test_save_load_round_trip(tmp_path):
    params = init_params(SMALL, SeededRng(0))
    path = tmp_path / "m.bin"
    save_params(params, SMALL, path)
    loaded, cfg = load_params(path)
    assert cfg == SMALL
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].value.tobytes() == params[k].value.tobytes()
    save_params(loaded, cfg, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.bin"
    save_params(init_params(SMALL, SeededRng(0)), SMALL, path)
    data = bytearray(path.read_bytes())
    data[0:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="magic"):
        load_params(path)


def test_load_rejects_newer_version(tmp_path):
    path = tmp_path / "m.bin"
    save_params(init_params(SMALL, SeededRng(0)), SMALL, path)
    data = bytearray(path.read_bytes())
    data[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="unsupported format version 2"):
        load_params(path)


def test_load_rejects_shape_mismatch(tmp_path):
    params = init_params(SMALL, SeededRng(0))
    params["head"] = nx.param(np.zeros((SMALL.d, SMALL.vocab_size + 1)))
    path = tmp_path / "m.bin"
    save_params(params, SMALL, path)
    with pytest.raises(ValueError, match="shape"):
        load_params(path)


def test_load_rejects_truncation(tmp_path):
    path = tmp_path / "m.bin"
    save_params(init_params(SMALL, SeededRng(0)), SMALL, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_params(path)
