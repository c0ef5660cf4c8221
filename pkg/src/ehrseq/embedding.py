"""Summed token embeddings with sinusoidal age/time components.

Each position's row is the sum of concept, type, age, time, segment and
visit-order lookups (plus an optional absolute position table, unused by
the recurrent model). Age and time are continuous: a learnable bank of
one linear plus k-1 sine components, linearly projected to width d.
Structural tokens contribute zero for the age/time/segment/visit-order
streams and padding rows are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sequence import EVENT_TYPES


@dataclass
class Time2VecParams:
    omega: np.ndarray  # (k,) frequencies; component 0 is the linear term
    phi: np.ndarray  # (k,) phases


def time2vec(t: float, params: Time2VecParams) -> np.ndarray:
    """Reference evaluation: (omega_0 t + phi_0, sin(omega_i t + phi_i)...)."""
    arg = params.omega * t + params.phi
    out = np.sin(arg)
    out[0] = arg[0]
    return out


@dataclass
class EmbeddingTables:
    concept: ad.Tensor  # (v, d)
    type: ad.Tensor  # (9, d)
    segment: ad.Tensor  # (3, d), row 0 pinned zero
    visit_order: ad.Tensor  # (V_max + 1, d)
    position: ad.Tensor  # (l_c, d)
    age_omega: ad.Tensor  # (k,)
    age_phi: ad.Tensor
    age_proj: ad.Tensor  # (k, d)
    time_omega: ad.Tensor
    time_phi: ad.Tensor
    time_proj: ad.Tensor
    d: int
    k: int

    def named_parameters(self, prefix="embed"):
        out = {}
        for name in ("concept", "type", "segment", "visit_order", "position",
                     "age_omega", "age_phi", "age_proj",
                     "time_omega", "time_phi", "time_proj"):
            out[f"{prefix}.{name}"] = getattr(self, name)
        return out


def init_tables(rng, v, d, k, v_max, l_c, pad_id=0) -> EmbeddingTables:
    scale = 1.0 / np.sqrt(d)

    def table(rows):
        return ad.tensor(rng.normal(0.0, scale, size=(rows, d)), requires_grad=True)

    concept = table(v)
    concept.data[pad_id] = 0.0
    segment = table(3)
    segment.data[0] = 0.0
    # frequencies cover weekly-to-yearly periods in week units
    def freqs():
        w = np.exp(rng.uniform(np.log(1e-2), np.log(1.0), size=k))
        return ad.tensor(w, requires_grad=True)

    return EmbeddingTables(
        concept=concept, type=table(9), segment=segment, visit_order=table(v_max + 1),
        position=table(l_c),
        age_omega=freqs(), age_phi=ad.tensor(rng.normal(0, 0.1, size=k), requires_grad=True),
        age_proj=ad.tensor(rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, d)), requires_grad=True),
        time_omega=freqs(), time_phi=ad.tensor(rng.normal(0, 0.1, size=k), requires_grad=True),
        time_proj=ad.tensor(rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, d)), requires_grad=True),
        d=d, k=k,
    )


def _t2v_batch(values, omega, phi, k):
    """Vectorized sinusoidal features: values (B, L) -> (B, L, k)."""
    arg = ad.add(ad.mul(ad.constant(values[..., None]), omega), phi)
    lin_mask = np.zeros(k)
    lin_mask[0] = 1.0
    return ad.add(ad.mul(ad.constant(lin_mask), arg), ad.mul(ad.constant(1.0 - lin_mask), ad.sin(arg)))


def embed_batch(ids, types, age, time, segment, visit_order, position, tables: EmbeddingTables,
                use_position: bool = False) -> ad.Tensor:
    """Embed a batch of sequences: integer/real arrays (B, L) -> (B, L, d)."""
    event_mask = np.isin(types, [int(t) for t in EVENT_TYPES]).astype(float)[..., None]
    nonpad_mask = (ids != 0).astype(float)[..., None]  # [PAD] id is pinned to 0
    out = ad.add(ad.gather_rows(tables.concept, ids), ad.gather_rows(tables.type, types))
    attr = ad.add(ad.gather_rows(tables.segment, segment),
                  ad.gather_rows(tables.visit_order, visit_order))
    attr = ad.add(attr, ad.matmul(_t2v_batch(age, tables.age_omega, tables.age_phi, tables.k),
                                  tables.age_proj))
    attr = ad.add(attr, ad.matmul(_t2v_batch(time, tables.time_omega, tables.time_phi, tables.k),
                                  tables.time_proj))
    out = ad.add(out, ad.mul(ad.constant(event_mask), attr))
    if use_position:
        out = ad.add(out, ad.gather_rows(tables.position, position))
    return ad.mul(ad.constant(nonpad_mask), out)


def embed_sequence(seq, tables: EmbeddingTables, use_position: bool = False) -> ad.Tensor:
    """Single-sequence convenience wrapper returning an (l_c, d) tensor."""
    out = embed_batch(seq.ids[None], seq.type[None], seq.age[None], seq.time[None],
                      seq.segment[None], seq.visit_order[None], seq.position[None],
                      tables, use_position)
    return ad.tsum(out, axis=0)
