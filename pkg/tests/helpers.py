"""Shared fixture builders for the test suite.

Builds the small corpora used across test modules: raw attribute-stream
sequences for gradient checks, a deterministic-bigram corpus for the
pretraining learnability check, and a marker-presence corpus for the
multitask finetuning check.
"""

import datetime as dt

import numpy as np

from ehrseq.data import PatientRecord, RawEvent, Visit
from ehrseq.sequence import (PatientSequence, TaskKind, TokenType,
                             apply_task_token, build_vocabulary)
from ehrseq.training import TaskExample

EVENT_TYPE_VALUES = (int(TokenType.PROCEDURE), int(TokenType.MEDICATION), int(TokenType.LAB))


def raw_sequence(rng, length, vocab_size, min_events=20):
    """A synthetic id/type stream (not a valid clinical encoding).

    Used where only the network matters, e.g. gradient checks whose
    vocabulary budget is smaller than the special-token registry.
    """
    k = int(rng.integers(min_events, length - 1))
    ids = np.zeros(length, np.int64)
    types = np.zeros(length, np.int64)
    ids[:k] = rng.integers(1, vocab_size, size=k)
    types[:k] = rng.integers(1, 9, size=k)
    ev = np.isin(types, EVENT_TYPE_VALUES)
    age = np.where(ev, 40.0 + 0.5 * np.arange(length), 0.0)
    tw = np.where(ev, 0.1 * np.arange(length), 0.0)
    seg = np.where(ev, 1, 0).astype(np.int64)
    return PatientSequence(ids, types, age, tw, seg, seg.copy(),
                           np.arange(length), k, "raw")


def sequence_from_names(names, vocab, l_c, patient_id="p", plain=False):
    """Encode a list of token names into a padded PatientSequence.

    Event tokens get constant placeholder attributes; structural tokens
    carry zeros, matching the encoder's convention. With `plain=True` the
    attribute streams stay zero everywhere, which keeps the embedding
    dominated by the concept stream (used by the learnability corpora).
    """
    ids = np.zeros(l_c, np.int64)
    types = np.zeros(l_c, np.int64)
    age = np.zeros(l_c)
    tw = np.zeros(l_c)
    seg = np.zeros(l_c, np.int64)
    vo = np.zeros(l_c, np.int64)
    for i, name in enumerate(names):
        ids[i] = vocab.id_of(name)
        types[i] = int(vocab.type_of[ids[i]])
        if not plain and types[i] in EVENT_TYPE_VALUES:
            seg[i] = 1
            vo[i] = 1
            age[i] = 50.0
    return PatientSequence(ids, types, age, tw, seg, vo, np.arange(l_c),
                           len(names), patient_id)


# deterministic-bigram corpus -------------------------------------------------

BIGRAM_EVENTS = 19  # 31 specials + 19 concepts = vocab of 50
BIGRAM_LEN = 28


def bigram_vocab():
    return build_vocabulary([(f"c{i:02d}", "P") for i in range(BIGRAM_EVENTS)])


def bigram_successor(vocab):
    """Fixed permutation successor over the event ids."""
    base = vocab.id_of("c00")
    return {base + i: base + ((i * 7 + 3) % BIGRAM_EVENTS) for i in range(BIGRAM_EVENTS)}


def bigram_corpus(vocab, n_sequences, l_c=40, seed=11):
    """Sequences whose events follow the fixed successor chain.

    Every position after the first event is fully determined by the
    previous token, so next-token accuracy has a ceiling near 1.
    """
    rng = np.random.default_rng(seed)
    succ = bigram_successor(vocab)
    base = vocab.id_of("c00")
    out = []
    for p in range(n_sequences):
        first = base + int(rng.integers(0, BIGRAM_EVENTS))
        chain = [first]
        for _ in range(BIGRAM_LEN - 1):
            chain.append(succ[chain[-1]])
        names = ["[CLS]", "[VS]"] + [vocab.id_to_token[i] for i in chain] + ["[VE]", "[REG]"]
        out.append(sequence_from_names(names, vocab, l_c, patient_id=str(p)))
    return out


def bigram_determined_mask(batch, vocab):
    """True at positions whose next token is bigram-determined (event->event)."""
    succ = bigram_successor(vocab)
    in_chain = np.isin(batch.ids, list(succ))
    nxt = np.zeros_like(in_chain)
    nxt[:, :-1] = in_chain[:, 1:]
    return in_chain & nxt


# marker-presence multitask corpus -------------------------------------------

MARKERS = ("mk_0", "mk_1", "mk_2")
FILLERS = tuple(f"f{i:02d}" for i in range(16))
MARKER_TASKS = (TaskKind.C0, TaskKind.C1, TaskKind.C2)
# every pattern is non-constant so task identity matters for every patient
MARKER_PATTERNS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1))


def marker_vocab():
    return build_vocabulary([(m, "P") for m in MARKERS + FILLERS])


def marker_corpus(vocab, n_patients, l_c=48, seed=7):
    """(sequence, label-triple) pairs; label j is presence of marker j."""
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_patients):
        has = MARKER_PATTERNS[int(rng.integers(0, len(MARKER_PATTERNS)))]
        events = list(rng.choice(FILLERS, size=24))
        for j, h in enumerate(has):
            if h:
                events.insert(int(rng.integers(0, len(events))), MARKERS[j])
        names = ["[CLS]", "[VS]"] + events + ["[VE]", "[REG]"]
        out.append((sequence_from_names(names, vocab, l_c, patient_id=str(p),
                                        plain=True), has))
    return out


def marker_examples(pairs, vocab):
    return [TaskExample(apply_task_token(seq, task, vocab), task, float(has[j]))
            for seq, has in pairs for j, task in enumerate(MARKER_TASKS)]


# tiny clinical records -------------------------------------------------------

def record_with_visits(patient_id, visit_specs, death=None, birth=None):
    """Build a PatientRecord from (start, duration_hours, [concepts]) specs."""
    visits = []
    for start, hours, concepts in visit_specs:
        end = start + dt.timedelta(hours=hours)
        n = max(len(concepts), 1)
        events = []
        for i, c in enumerate(concepts):
            ts = start + (end - start) * i / n
            code = "L" if c.startswith("lab") else "P"
            events.append(RawEvent(c, code, ts, value=1.0 if code == "L" else None))
        visits.append(Visit(start, end, events))
    return PatientRecord(patient_id, birth or dt.datetime(1960, 1, 1), death, visits)
