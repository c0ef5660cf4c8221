"""Model assembly, heads, greedy forecasting, streaming equivalence."""

import numpy as np
import pytest

import ehrseq.autodiff as ad
from ehrseq.errors import DataError
from ehrseq.model import (ModelConfig, StreamState, forecast_tokens,
                          forecasting_head, forward, init_model, make_batch,
                          parameter_count, prediction_head, prediction_logit,
                          stream_forward)
from helpers import marker_corpus, marker_vocab, raw_sequence, sequence_from_names


@pytest.fixture
def vocab():
    return marker_vocab()


@pytest.fixture
def model(vocab):
    cfg = ModelConfig(d=16, n_blocks=2, n_state=8, l_c=48, vocab_size=vocab.size,
                      dropout=0.0, v_max=4, seed=0)
    return init_model(cfg)


@pytest.fixture
def batch(vocab):
    pairs = marker_corpus(vocab, 4, l_c=48, seed=3)
    return make_batch([s for s, _ in pairs])


def test_config_validation():
    with pytest.raises(DataError):
        ModelConfig(d=0).validate()
    with pytest.raises(DataError):
        ModelConfig(dropout=1.0).validate()
    with pytest.raises(DataError):
        ModelConfig(time_k=1).validate()
    assert ModelConfig().d_inner == 128


def test_init_is_deterministic(vocab):
    cfg = ModelConfig(d=16, n_blocks=2, n_state=8, l_c=48, vocab_size=vocab.size, seed=9)
    a, b = init_model(cfg), init_model(cfg)
    for (na, ta), (nb, tb) in zip(sorted(a.named_parameters().items()),
                                  sorted(b.named_parameters().items())):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)


def test_parameter_census(model):
    cfg = model.config
    d, di, N, k = cfg.d, cfg.d_inner, cfg.n_state, cfg.time_k
    embed = (cfg.vocab_size * d + 9 * d + 3 * d + (cfg.v_max + 1) * d
             + 2 * (k + k + k * d))  # concept/type/segment/order + two t2v banks
    per_block = (d + 2 * d * di                   # norm + two input projections
                 + di * cfg.conv_width + di       # conv weights + bias
                 + di * di + di                   # delta projection + bias
                 + 2 * di * N + di * N            # B/C projections + a_log
                 + di * d)                        # output projection
    heads = d + d * cfg.vocab_size + cfg.vocab_size + d + 1
    assert parameter_count(model) == embed + cfg.n_blocks * per_block + heads


def test_zero_blocks_model_runs(vocab, batch):
    cfg = ModelConfig(d=16, n_blocks=0, n_state=8, l_c=48, vocab_size=vocab.size,
                      dropout=0.0, v_max=4, seed=0)
    m = init_model(cfg)
    h = forward(m, batch)
    assert h.data.shape[2] == 16


def test_eval_forward_is_deterministic(model, batch):
    a = forward(model, batch).data
    b = forward(model, batch).data
    np.testing.assert_array_equal(a, b)


def test_train_dropout_changes_output(vocab, batch):
    cfg = ModelConfig(d=16, n_blocks=1, n_state=8, l_c=48, vocab_size=vocab.size,
                      dropout=0.3, v_max=4, seed=0)
    m = init_model(cfg)
    a = forward(m, batch, train=True, rng=np.random.default_rng(1)).data
    b = forward(m, batch, train=False).data
    assert np.any(a != b)


def test_out_of_vocab_id_rejected(model, batch):
    batch.ids[0, 0] = model.config.vocab_size + 5
    with pytest.raises(DataError):
        forward(model, batch)


def test_forecasting_head_is_log_distribution(model, batch):
    lp = forecasting_head(model, forward(model, batch)).data
    assert lp.shape == (*batch.ids.shape, model.config.vocab_size)
    np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-10)


def test_prediction_head_zero_weights_gives_half(model, batch):
    model.clf_weight.data[:] = 0.0
    model.clf_bias.data[:] = 0.0
    p = prediction_head(model, forward(model, batch), batch.true_lengths).data
    np.testing.assert_allclose(p, 0.5, atol=1e-15)


def test_prediction_head_reads_final_token(model, batch):
    h = forward(model, batch)
    z = prediction_logit(model, h, batch.true_lengths).data
    manual = h.data[np.arange(len(z)), batch.true_lengths - 1] @ model.clf_weight.data
    np.testing.assert_allclose(z, manual[:, 0] + model.clf_bias.data[0], atol=1e-12)


def test_prediction_head_requires_nonempty(model, batch):
    with pytest.raises(DataError):
        prediction_head(model, forward(model, batch), np.zeros_like(batch.true_lengths))


def test_padding_does_not_affect_prefix(model, vocab):
    # widening the padded tail must not change hidden states of real tokens
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "f01", "[VE]", "[REG]"], vocab, 48)
    short = make_batch([seq], trim_to_multiple=8)
    long = make_batch([seq], trim_to_multiple=48)
    hs = forward(model, short).data
    hl = forward(model, long).data
    np.testing.assert_allclose(hs[0, :6], hl[0, :6], atol=1e-12)


def test_make_batch_trims_to_multiple(vocab):
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "[VE]", "[REG]"], vocab, 48)
    b = make_batch([seq], trim_to_multiple=8)
    assert b.ids.shape[1] == 8
    b1 = make_batch([seq], trim_to_multiple=1)
    assert b1.ids.shape[1] == 5


# --- forecasting -------------------------------------------------------------

def test_forecast_zero_steps(model, vocab):
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "[VE]", "[REG]"], vocab, 48)
    assert forecast_tokens(model, seq, 0) == []


def test_forecast_never_emits_pad(model, vocab):
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "[VE]", "[REG]"], vocab, 48)
    toks = forecast_tokens(model, seq, 10, vocab_pad_id=vocab.pad_id)
    assert len(toks) == 10
    assert vocab.pad_id not in toks


def test_forecast_requires_room(model, vocab):
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "[VE]", "[REG]"], vocab, 6)
    with pytest.raises(DataError):
        forecast_tokens(model, seq, 5)


def test_forecast_stream_equals_rerun(model, vocab):
    for seed in range(3):
        seq = marker_corpus(vocab, 1, l_c=48, seed=seed)[0][0]
        a = forecast_tokens(model, seq, 8, vocab.pad_id, use_stream=True,
                            type_of=vocab.type_of)
        b = forecast_tokens(model, seq, 8, vocab.pad_id, use_stream=False,
                            type_of=vocab.type_of)
        assert a == b


def test_forecast_does_not_mutate_input(model, vocab):
    seq = sequence_from_names(["[CLS]", "[VS]", "mk_0", "[VE]", "[REG]"], vocab, 48)
    ids_before = seq.ids.copy()
    tl_before = seq.true_length
    forecast_tokens(model, seq, 4, vocab.pad_id)
    np.testing.assert_array_equal(seq.ids, ids_before)
    assert seq.true_length == tl_before


# --- streaming ---------------------------------------------------------------

def test_stream_forward_matches_batched(model, vocab):
    seq = marker_corpus(vocab, 1, l_c=48, seed=5)[0][0]
    batch = make_batch([seq], trim_to_multiple=1)
    h_batch = forward(model, batch).data[0]
    h_stream, _ = stream_forward(model, seq)
    np.testing.assert_allclose(h_stream, h_batch[:seq.true_length], atol=1e-12)


def test_stream_state_size_independent_of_length(model, vocab):
    sizes = set()
    for l_c in (48, 96, 192):
        seq = marker_corpus(vocab, 1, l_c=l_c, seed=5)[0][0]
        _, nbytes = stream_forward(model, seq)
        sizes.add(nbytes)
    assert len(sizes) == 1


def test_stream_state_nbytes_formula(model):
    state = StreamState(model)
    cfg = model.config
    expected = cfg.n_blocks * ((cfg.conv_width - 1) * cfg.d_inner
                               + cfg.d_inner * cfg.n_state) * 8
    assert state.nbytes() == expected


def test_raw_sequence_forward_shapes(model, rng):
    seqs = [raw_sequence(rng, 32, model.config.vocab_size) for _ in range(3)]
    b = make_batch(seqs)
    h = forward(model, b)
    assert h.data.shape == (3, b.ids.shape[1], model.config.d)
