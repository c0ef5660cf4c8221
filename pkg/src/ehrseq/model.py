"""Model assembly: embeddings, stacked gated SSM blocks, and two heads.

Pretraining reads the forecasting head (token distribution per position);
finetuning reads the clinical head (one shared sigmoid unit applied to
the hidden state of the final task token). Greedy forecasting can run
either by re-encoding the growing prefix or by streaming with O(1)
per-step state; both must emit identical tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embedding import EmbeddingTables, embed_batch, init_tables, time2vec, Time2VecParams
from .errors import DataError
from .sequence import EVENT_TYPES, PatientSequence, TokenType
from .ssm import (RMSNORM_EPS, MambaBlockWeights, init_block, mamba_block_forward,
                  rmsnorm)


@dataclass
class ModelConfig:
    d: int = 64
    n_blocks: int = 2
    n_state: int = 16
    conv_width: int = 4
    l_c: int = 256
    vocab_size: int = 64
    dropout: float = 0.1
    expansion: int = 2
    time_k: int = 8
    v_max: int = 16
    seed: int = 0

    def validate(self):
        if min(self.d, self.n_blocks + 1, self.n_state, self.conv_width, self.l_c,
               self.vocab_size, self.expansion, self.time_k - 1, self.v_max) <= 0:
            raise DataError("model dimensions must be positive (time_k >= 2)")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must lie in [0, 1)")

    @property
    def d_inner(self):
        return self.expansion * self.d


@dataclass
class Model:
    config: ModelConfig
    tables: EmbeddingTables
    blocks: list
    head_norm_scale: ad.Tensor  # (d,)
    head_out: ad.Tensor  # (d, v)
    head_bias: ad.Tensor  # (v,)
    clf_weight: ad.Tensor  # (d, 1) shared across all tasks
    clf_bias: ad.Tensor  # (1,)

    def named_parameters(self):
        out = dict(self.tables.named_parameters())
        if not self.use_position:
            out.pop("embed.position")
        for i, b in enumerate(self.blocks):
            out.update(b.named_parameters(f"block{i}"))
        out.update({"head.norm_scale": self.head_norm_scale, "head.out": self.head_out,
                    "head.bias": self.head_bias, "clf.weight": self.clf_weight,
                    "clf.bias": self.clf_bias})
        return out

    use_position: bool = False

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()


def init_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    tables = init_tables(rng, cfg.vocab_size, cfg.d, cfg.time_k, cfg.v_max, cfg.l_c)
    blocks = [init_block(rng, cfg.d, cfg.d_inner, cfg.n_state, cfg.conv_width)
              for _ in range(cfg.n_blocks)]
    return Model(
        config=cfg, tables=tables, blocks=blocks,
        head_norm_scale=ad.tensor(np.ones(cfg.d), requires_grad=True),
        head_out=ad.tensor(rng.normal(0, 1.0 / np.sqrt(cfg.d), size=(cfg.d, cfg.vocab_size)),
                           requires_grad=True),
        head_bias=ad.tensor(np.zeros(cfg.vocab_size), requires_grad=True),
        clf_weight=ad.tensor(rng.normal(0, 1.0 / np.sqrt(cfg.d), size=(cfg.d, 1)),
                             requires_grad=True),
        clf_bias=ad.tensor(np.zeros(1), requires_grad=True),
    )


def parameter_count(model: Model) -> int:
    return sum(p.data.size for p in model.named_parameters().values())


@dataclass
class Batch:
    ids: np.ndarray  # (B, L) int
    type: np.ndarray
    age: np.ndarray
    time: np.ndarray
    segment: np.ndarray
    visit_order: np.ndarray
    position: np.ndarray
    true_lengths: np.ndarray  # (B,)


def make_batch(seqs, trim_to_multiple: int = 8) -> Batch:
    """Stack sequences; trim shared padding down to the longest true length."""
    lengths = np.array([s.true_length for s in seqs])
    lc = len(seqs[0])
    m = int(lengths.max())
    m = min(lc, ((m + trim_to_multiple - 1) // trim_to_multiple) * trim_to_multiple)
    def stack(attr):
        return np.stack([getattr(s, attr)[:m] for s in seqs])
    return Batch(stack("ids"), stack("type"), stack("age"), stack("time"),
                 stack("segment"), stack("visit_order"), stack("position"), lengths)


def forward(model: Model, batch: Batch, train: bool = False, rng=None,
            embeddings: ad.Tensor | None = None) -> ad.Tensor:
    """Hidden states (B, L, d). `embeddings` overrides the embedding layer
    (used by attribution, which differentiates with respect to it)."""
    if embeddings is None:
        if np.any(batch.ids >= model.config.vocab_size):
            raise DataError("token id out of vocabulary range")
        h = embed_batch(batch.ids, batch.type, batch.age, batch.time, batch.segment,
                        batch.visit_order, batch.position, model.tables, model.use_position)
    else:
        h = embeddings
    if train and model.config.dropout > 0:
        h = ad.dropout(h, model.config.dropout, rng)
    for block in model.blocks:
        h = mamba_block_forward(h, block)
    return h


def forecasting_head(model: Model, h: ad.Tensor) -> ad.Tensor:
    """Log-probabilities (B, L, v); exponentiate for probabilities."""
    z = ad.add(ad.matmul(rmsnorm(h, model.head_norm_scale), model.head_out), model.head_bias)
    return ad.log_softmax(z, axis=-1)


def prediction_logit(model: Model, h: ad.Tensor, true_lengths, train=False, rng=None) -> ad.Tensor:
    """Pre-sigmoid clinical-head output (B,), read at the final non-pad token."""
    if np.any(true_lengths <= 0):
        raise DataError("prediction head requires at least one non-pad token")
    last = ad.take_positions(h, np.asarray(true_lengths) - 1)
    if train and model.config.dropout > 0:
        last = ad.dropout(last, model.config.dropout, rng)
    z = ad.matmul(last, model.clf_weight)
    return ad.add(ad.tsum(z, axis=-1), model.clf_bias)


def prediction_head(model: Model, h: ad.Tensor, true_lengths, train=False, rng=None) -> ad.Tensor:
    """Probability of the positive outcome for each sequence in the batch."""
    return ad.sigmoid(prediction_logit(model, h, true_lengths, train, rng))


# ---------------------------------------------------------------------------
# greedy forecasting

def _next_structural(seq: PatientSequence, pos: int, tok_id: int, tok_type: int):
    """Attributes for a decoded token appended at `pos`.

    Event tokens inherit the previous event's attributes; structural
    tokens carry zeros; a visit-start after an interval token opens a new
    visit (segment flips, order increments).
    """
    if tok_type in (int(TokenType.PAD),):
        return 0.0, 0.0, 0, 0
    if tok_type not in [int(t) for t in EVENT_TYPES]:
        return 0.0, 0.0, 0, 0
    prev_ev = np.nonzero(np.isin(seq.type[:pos], [int(t) for t in EVENT_TYPES]))[0]
    if prev_ev.size == 0:
        return 0.0, 0.0, 1, 1
    j = prev_ev[-1]
    # crossed a visit boundary since the last event?
    crossed = np.any(seq.type[j + 1 : pos] == int(TokenType.VISIT_START))
    seg = int(seq.segment[j])
    order = int(seq.visit_order[j])
    if crossed:
        return float(seq.age[j]), float(seq.time[j]), 3 - seg, order + 1
    return float(seq.age[j]), float(seq.time[j]), seg, order


def forecast_tokens(model: Model, seq: PatientSequence, n: int, vocab_pad_id: int = 0,
                    use_stream: bool = True, type_of=None):
    """Greedily decode n tokens after the sequence's non-pad prefix.

    The padding token is masked out of the argmax. Decoding runs with the
    O(1)-per-step streaming state; the re-encode path is available for
    cross-checking.
    """
    if n == 0:
        return []
    if seq.true_length < 1:
        raise DataError("forecasting requires at least one non-pad token")
    if seq.true_length + n > len(seq):
        raise DataError("context full: no room to decode further tokens")
    if use_stream:
        return _forecast_stream(model, seq, n, vocab_pad_id, type_of)
    return _forecast_rerun(model, seq, n, vocab_pad_id, type_of)


def _decode_step(model: Model, seq: PatientSequence, logp_row, pad_id):
    logp = logp_row.copy()
    logp[pad_id] = -np.inf
    return int(np.argmax(logp))


def _apply_decoded(seq, tok_id, model, type_of):
    pos = seq.true_length
    tok_type = int(type_of[tok_id]) if type_of is not None else int(TokenType.PAD)
    age, tw, seg, order = _next_structural(seq, pos, tok_id, tok_type)
    seq.ids[pos] = tok_id
    seq.type[pos] = tok_type
    seq.age[pos] = age
    seq.time[pos] = tw
    seq.segment[pos] = min(seg, 2)
    seq.visit_order[pos] = min(order, model.tables.visit_order.data.shape[0] - 1)
    seq.position[pos] = pos
    seq.true_length = pos + 1


def _forecast_rerun(model, seq, n, pad_id, type_of=None):
    if type_of is None:
        type_of = _default_type_of(model)
    work = seq.copy()
    out = []
    for _ in range(n):
        batch = make_batch([work], trim_to_multiple=1)
        h = forward(model, batch)
        logp = forecasting_head(model, h).data[0, work.true_length - 1]
        tok = _decode_step(model, work, logp, pad_id)
        out.append(tok)
        _apply_decoded(work, tok, model, type_of)
    return out


_TYPE_CACHE = {}


def _default_type_of(model):
    # decoding without a vocabulary: treat every id as a generic event
    v = model.config.vocab_size
    key = v
    if key not in _TYPE_CACHE:
        _TYPE_CACHE[key] = np.full(v, int(TokenType.PROCEDURE), dtype=np.int64)
        _TYPE_CACHE[key][0] = int(TokenType.PAD)
    return _TYPE_CACHE[key]


# ---------------------------------------------------------------------------
# streaming (recurrent-mode) inference

class StreamState:
    """Per-block conv ring buffers and recurrent states; size independent of L."""

    def __init__(self, model: Model):
        cfg = model.config
        self.conv = [np.zeros((cfg.conv_width - 1, cfg.d_inner)) for _ in model.blocks]
        self.h = [np.zeros((cfg.d_inner, cfg.n_state)) for _ in model.blocks]

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.conv) + sum(a.nbytes for a in self.h)


def _np_rms(x, scale):
    return x / np.sqrt(np.mean(x * x) + RMSNORM_EPS) * scale


def _np_silu(x):
    return x / (1.0 + np.exp(-x))


def stream_step(model: Model, state: StreamState, e_row: np.ndarray) -> np.ndarray:
    """Advance the recurrent state by one embedded token; returns the d-vector."""
    h = e_row
    for i, w in enumerate(model.blocks):
        xn = _np_rms(h, w.norm_scale.data)
        xm = xn @ w.in_proj_main.data
        xg = xn @ w.in_proj_gate.data
        window = np.concatenate([state.conv[i], xm[None]], axis=0)
        conv = (window[::-1].T * w.conv_w.data).sum(axis=1) + w.conv_b.data
        state.conv[i] = window[1:]
        xc = _np_silu(conv)
        delta = np.logaddexp(0.0, xc @ w.delta_w.data + w.delta_b.data)
        bvec = xc @ w.b_w.data
        cvec = xc @ w.c_w.data
        a = -np.exp(w.a_log.data)
        z = delta[:, None] * a
        abar = np.exp(z)
        g = np.where(np.abs(z) < 1e-8, delta[:, None] * (1.0 + 0.5 * z), np.expm1(z) / a)
        state.h[i] = abar * state.h[i] + (g * bvec[None, :]) * xc[:, None]
        y = state.h[i] @ cvec
        h = h + (y * _np_silu(xg)) @ w.out_proj.data
    return h


def embed_row(model: Model, tok_id, tok_type, age, tw, seg, order) -> np.ndarray:
    """Embedding-layer output for a single token (numpy, no tape)."""
    t = model.tables
    if tok_id == 0:
        return np.zeros(model.config.d)
    out = t.concept.data[tok_id] + t.type.data[tok_type]
    if tok_type in [int(x) for x in EVENT_TYPES]:
        a2v = time2vec(age, Time2VecParams(t.age_omega.data, t.age_phi.data))
        t2v = time2vec(tw, Time2VecParams(t.time_omega.data, t.time_phi.data))
        out = out + t.segment.data[seg] + t.visit_order.data[order]
        out = out + a2v @ t.age_proj.data + t2v @ t.time_proj.data
    return out


def stream_logits(model: Model, h_row: np.ndarray) -> np.ndarray:
    z = _np_rms(h_row, model.head_norm_scale.data) @ model.head_out.data + model.head_bias.data
    return z - (z.max() + np.log(np.exp(z - z.max()).sum()))


def _forecast_stream(model, seq, n, pad_id, type_of=None):
    if type_of is None:
        type_of = _default_type_of(model)
    work = seq.copy()
    state = StreamState(model)
    h_row = None
    for j in range(work.true_length):
        e = embed_row(model, int(work.ids[j]), int(work.type[j]), float(work.age[j]),
                      float(work.time[j]), int(work.segment[j]), int(work.visit_order[j]))
        h_row = stream_step(model, state, e)
    out = []
    for _ in range(n):
        logp = stream_logits(model, h_row)
        tok = _decode_step(model, work, logp, pad_id)
        out.append(tok)
        _apply_decoded(work, tok, model, type_of)
        j = work.true_length - 1
        e = embed_row(model, int(work.ids[j]), int(work.type[j]), float(work.age[j]),
                      float(work.time[j]), int(work.segment[j]), int(work.visit_order[j]))
        h_row = stream_step(model, state, e)
    return out


def stream_forward(model: Model, seq: PatientSequence) -> tuple[np.ndarray, int]:
    """Recurrent-mode forward over the non-pad prefix.

    Returns (hidden states (true_length, d), peak recurrent-state bytes).
    Wall time is linear in length; state memory is independent of it.
    """
    state = StreamState(model)
    out = np.empty((seq.true_length, model.config.d))
    for j in range(seq.true_length):
        e = embed_row(model, int(seq.ids[j]), int(seq.type[j]), float(seq.age[j]),
                      float(seq.time[j]), int(seq.segment[j]), int(seq.visit_order[j]))
        out[j] = stream_step(model, state, e)
    return out, state.nbytes()
