"""Token vocabulary and patient-sequence encoding.

A patient sequence starts with a sequence-start token, then one block per
visit: an inter-visit time-interval token (from the second visit on), a
visit-start marker, the chronologically ordered event tokens, a visit-end
marker, and a register token. Sequences are padded (id 0) or truncated to
the context length by dropping the oldest whole visits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DuplicateEntryError, MalformedSequenceError, OversizeVisitError

DAYS_PER_YEAR = 365.25
DAYS_PER_MONTH = 30.44
SECONDS_PER_DAY = 86400.0


class TokenType(enum.IntEnum):
    """The nine token categories (type-vocabulary size is fixed at 9)."""

    PAD = 0
    SEQ_START = 1  # sequence-start and task tokens
    VISIT_START = 2
    VISIT_END = 3
    TIME_INTERVAL = 4
    REGISTER = 5
    PROCEDURE = 6
    MEDICATION = 7
    LAB = 8


EVENT_TYPES = (TokenType.PROCEDURE, TokenType.MEDICATION, TokenType.LAB)

_TYPE_CODE = {"P": TokenType.PROCEDURE, "M": TokenType.MEDICATION, "L": TokenType.LAB}


class TaskKind(enum.Enum):
    MOR = "[MOR]"
    LOS = "[LOS]"
    REA = "[REA]"
    C0 = "[C0]"
    C1 = "[C1]"
    C2 = "[C2]"

    @property
    def token(self) -> str:
        return self.value


WEEK_TOKENS = tuple(f"[W_{i}]" for i in range(4))
MONTH_TOKENS = tuple(f"[M_{i}]" for i in range(13))
LONG_TERM_TOKEN = "[LT]"

# (token, category); [PAD] must come first so it gets id 0.
SPECIAL_TOKENS = (
    [("[PAD]", TokenType.PAD), ("[CLS]", TokenType.SEQ_START), ("[VS]", TokenType.VISIT_START),
     ("[VE]", TokenType.VISIT_END), ("[REG]", TokenType.REGISTER), ("[UNK]", TokenType.PAD),
     ("[MASK]", TokenType.PAD)]
    + [(w, TokenType.TIME_INTERVAL) for w in WEEK_TOKENS]
    + [(m, TokenType.TIME_INTERVAL) for m in MONTH_TOKENS]
    + [(LONG_TERM_TOKEN, TokenType.TIME_INTERVAL)]
    + [(t.token, TokenType.SEQ_START) for t in TaskKind]
)


@dataclass
class Vocabulary:
    token_to_id: dict
    id_to_token: list
    special_ids: dict
    type_of: np.ndarray  # id -> TokenType value

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def concept_id(self, concept: str) -> int:
        return self.token_to_id.get(concept, self.special_ids["[UNK]"])

    @property
    def pad_id(self) -> int:
        return self.special_ids["[PAD]"]

    def task_id(self, task: TaskKind) -> int:
        return self.special_ids[task.token]


def build_vocabulary(concept_catalog) -> Vocabulary:
    """Build a vocabulary from (concept, 'P'|'M'|'L') pairs.

    Special and task tokens are registered first; [PAD] has id 0 and ids
    are dense from 0.
    """
    token_to_id = {}
    id_to_token = []
    types = []
    special_ids = {}
    for token, ttype in SPECIAL_TOKENS:
        special_ids[token] = len(id_to_token)
        token_to_id[token] = len(id_to_token)
        id_to_token.append(token)
        types.append(int(ttype))
    for concept, code in concept_catalog:
        if concept in token_to_id:
            raise DuplicateEntryError(f"duplicate concept: {concept}")
        if code not in _TYPE_CODE:
            raise DataError(f"unknown event type code {code!r} for {concept}")
        token_to_id[concept] = len(id_to_token)
        id_to_token.append(concept)
        types.append(int(_TYPE_CODE[code]))
    return Vocabulary(token_to_id, id_to_token, special_ids, np.array(types, dtype=np.int64))


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, token in enumerate(vocab.id_to_token):
            f.write(f"{i}\t{token}\t{TokenType(vocab.type_of[i]).name}\n")


def load_vocabulary(path) -> Vocabulary:
    token_to_id = {}
    id_to_token = []
    types = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            sid, token, tname = line.rstrip("\n").split("\t")
            assert int(sid) == len(id_to_token), "vocabulary file ids must be dense"
            token_to_id[token] = int(sid)
            id_to_token.append(token)
            types.append(int(TokenType[tname]))
    special_ids = {tok: token_to_id[tok] for tok, _ in SPECIAL_TOKENS}
    return Vocabulary(token_to_id, id_to_token, special_ids, np.array(types, dtype=np.int64))


def interval_token_name(gap_days: int) -> str:
    """Map a non-negative day gap to a time-interval token string.

    Weeks below 28 days, months (floor days/30.44, clamped to 12) below a
    year, long-term beyond.
    """
    if gap_days < 0:
        raise ValueError("gap_days must be non-negative")
    if gap_days < 28:
        return WEEK_TOKENS[gap_days // 7]
    if gap_days < 365:
        return MONTH_TOKENS[min(12, int(gap_days / DAYS_PER_MONTH))]
    return LONG_TERM_TOKEN


def interval_token(gap_days: int, vocab: Vocabulary) -> int:
    return vocab.special_ids[interval_token_name(gap_days)]


@dataclass
class EventToken:
    """One token with its attribute tuple; special tokens carry zeros."""

    concept: int
    type: TokenType
    age: float = 0.0
    time: float = 0.0
    segment: int = 0
    visit_order: int = 0


@dataclass
class PatientSequence:
    ids: np.ndarray
    type: np.ndarray
    age: np.ndarray
    time: np.ndarray
    segment: np.ndarray
    visit_order: np.ndarray
    position: np.ndarray
    true_length: int
    patient_id: str = ""

    def __len__(self):
        return len(self.ids)

    def copy(self) -> "PatientSequence":
        return PatientSequence(
            self.ids.copy(), self.type.copy(), self.age.copy(), self.time.copy(),
            self.segment.copy(), self.visit_order.copy(), self.position.copy(),
            self.true_length, self.patient_id,
        )


def _tokens_to_sequence(tokens, l_c, patient_id) -> PatientSequence:
    n = len(tokens)
    if n > l_c:
        raise OversizeVisitError(f"sequence of {n} tokens exceeds context length {l_c}")
    ids = np.zeros(l_c, dtype=np.int64)
    typ = np.zeros(l_c, dtype=np.int64)
    age = np.zeros(l_c)
    tim = np.zeros(l_c)
    seg = np.zeros(l_c, dtype=np.int64)
    vor = np.zeros(l_c, dtype=np.int64)
    pos = np.zeros(l_c, dtype=np.int64)
    for j, t in enumerate(tokens):
        ids[j] = t.concept
        typ[j] = int(t.type)
        age[j] = t.age
        tim[j] = t.time
        seg[j] = t.segment
        vor[j] = t.visit_order
        pos[j] = j
    return PatientSequence(ids, typ, age, tim, seg, vor, pos, n, patient_id)


def _fit_groups(head, groups, l_c):
    """Drop oldest visit groups until head + groups fit in l_c.

    The time-interval token of the new first group is stripped, since its
    predecessor visit is gone.
    """
    groups = list(groups)
    while True:
        if groups and groups[0] and groups[0][0].type == TokenType.TIME_INTERVAL:
            groups[0] = groups[0][1:]
        total = len(head) + sum(len(g) for g in groups)
        if total <= l_c:
            return head + [t for g in groups for t in g]
        if len(groups) <= 1:
            raise OversizeVisitError(
                f"single visit of {total} tokens does not fit context length {l_c}"
            )
        groups = groups[1:]


def encode_patient(record, vocab: Vocabulary, l_c: int) -> PatientSequence:
    """Encode a patient record into a fixed-length token sequence.

    Event tokens carry age (years), time (weeks since the patient's first
    admission), alternating visit segment and incrementing visit order;
    structural tokens carry zero attributes.
    """
    if not record.visits:
        raise DataError(f"patient {record.patient_id}: empty record")
    ref = record.visits[0].start_time
    head = [EventToken(vocab.special_ids["[CLS]"], TokenType.SEQ_START)]
    groups = []
    prev_end = None
    for v_idx, visit in enumerate(record.visits):
        group = []
        if v_idx > 0:
            gap = max(0, int((visit.start_time - prev_end).total_seconds() // SECONDS_PER_DAY))
            name = interval_token_name(gap)
            group.append(EventToken(vocab.special_ids[name], TokenType.TIME_INTERVAL))
        group.append(EventToken(vocab.special_ids["[VS]"], TokenType.VISIT_START))
        segment = 1 if v_idx % 2 == 0 else 2
        for ev in visit.events:
            age = (ev.timestamp - record.birth_date).total_seconds() / (
                SECONDS_PER_DAY * DAYS_PER_YEAR
            )
            tw = max(0.0, (ev.timestamp - ref).total_seconds() / (SECONDS_PER_DAY * 7.0))
            group.append(
                EventToken(
                    vocab.concept_id(ev.concept), _TYPE_CODE[ev.type], age, tw, segment, v_idx + 1
                )
            )
        group.append(EventToken(vocab.special_ids["[VE]"], TokenType.VISIT_END))
        group.append(EventToken(vocab.special_ids["[REG]"], TokenType.REGISTER))
        groups.append(group)
        prev_end = visit.end_time
    tokens = _fit_groups(head, groups, l_c)
    return _tokens_to_sequence(tokens, l_c, record.patient_id)


def _parse_groups(seq: PatientSequence):
    head = []
    groups = []
    j = 0
    n = seq.true_length
    def tok(i):
        return EventToken(
            int(seq.ids[i]), TokenType(seq.type[i]), float(seq.age[i]), float(seq.time[i]),
            int(seq.segment[i]), int(seq.visit_order[i]),
        )
    if n and seq.type[0] == TokenType.SEQ_START:
        head.append(tok(0))
        j = 1
    current = []
    for i in range(j, n):
        t = TokenType(seq.type[i])
        if t in (TokenType.TIME_INTERVAL, TokenType.VISIT_START) and current and current[-1].type == TokenType.REGISTER:
            groups.append(current)
            current = []
        current.append(tok(i))
    if current:
        groups.append(current)
    return head, groups


def pad_truncate(seq: PatientSequence, l_c: int) -> PatientSequence:
    """Resize to context length l_c, dropping oldest whole visits if needed."""
    if seq.true_length <= l_c:
        out = PatientSequence(
            np.zeros(l_c, dtype=np.int64), np.zeros(l_c, dtype=np.int64), np.zeros(l_c),
            np.zeros(l_c), np.zeros(l_c, dtype=np.int64), np.zeros(l_c, dtype=np.int64),
            np.arange(l_c, dtype=np.int64), seq.true_length, seq.patient_id,
        )
        n = seq.true_length
        out.ids[:n] = seq.ids[:n]
        out.type[:n] = seq.type[:n]
        out.age[:n] = seq.age[:n]
        out.time[:n] = seq.time[:n]
        out.segment[:n] = seq.segment[:n]
        out.visit_order[:n] = seq.visit_order[:n]
        out.position = np.zeros(l_c, dtype=np.int64)
        out.position[:n] = np.arange(n)
        return out
    head, groups = _parse_groups(seq)
    tokens = _fit_groups(head, groups, l_c)
    return _tokens_to_sequence(tokens, l_c, seq.patient_id)


def apply_task_token(seq: PatientSequence, task: TaskKind, vocab: Vocabulary) -> PatientSequence:
    """Replace the sequence-start and final register tokens by the task token."""
    if seq.true_length < 2 or seq.type[0] != TokenType.SEQ_START:
        raise MalformedSequenceError("sequence must start with a sequence-start token")
    last = seq.true_length - 1
    tid = vocab.task_id(task)
    if seq.type[last] != TokenType.REGISTER and seq.ids[last] != tid:
        raise MalformedSequenceError("last non-pad token is not a register token")
    out = seq.copy()
    out.ids[0] = tid
    out.ids[last] = tid
    out.type[0] = int(TokenType.SEQ_START)
    out.type[last] = int(TokenType.SEQ_START)
    return out


def decode_patient(seq: PatientSequence, vocab: Vocabulary):
    """Recover the per-visit concept lists from an encoded sequence."""
    visits = []
    current = None
    for i in range(seq.true_length):
        t = TokenType(seq.type[i])
        if t == TokenType.VISIT_START:
            current = []
        elif t == TokenType.VISIT_END:
            visits.append(current)
            current = None
        elif t in EVENT_TYPES and current is not None:
            current.append(vocab.id_to_token[seq.ids[i]])
    return visits


def validate_sequence(seq: PatientSequence, vocab: Vocabulary):
    """Return a list of structural violations (empty when well formed)."""
    problems = []
    n = seq.true_length
    if n == 0 or seq.type[0] != TokenType.SEQ_START:
        problems.append("first token is not a sequence-start or task token")
    if np.any(seq.ids[n:] != vocab.pad_id):
        problems.append("non-pad token after true_length")
    for arr, name in ((seq.age, "age"), (seq.time, "time"), (seq.segment, "segment"),
                      (seq.visit_order, "visit_order")):
        if np.any(arr[n:] != 0):
            problems.append(f"nonzero {name} in padding")
    depth = 0
    expect_reg = False
    for i in range(n):
        t = TokenType(seq.type[i])
        if expect_reg:
            if t != TokenType.REGISTER and seq.type[i] != TokenType.SEQ_START:
                problems.append(f"visit end at {i - 1} not followed by register token")
            expect_reg = False
        if t == TokenType.VISIT_START:
            depth += 1
        elif t == TokenType.VISIT_END:
            depth -= 1
            expect_reg = True
            if depth < 0:
                problems.append(f"unmatched visit end at {i}")
    if expect_reg:
        problems.append(f"visit end at {n - 1} not followed by register token")
    if depth > 0:
        problems.append("unmatched visit start")
    ev = seq.type[:n]
    ev_mask = np.isin(ev, [int(t) for t in EVENT_TYPES])
    orders = seq.visit_order[:n][ev_mask]
    if orders.size:
        uniq = np.unique(orders)
        if np.any(np.diff(uniq) != 1):
            problems.append("visit order does not increment by 1")
        for o in uniq:
            segs = np.unique(seq.segment[:n][ev_mask][orders == o])
            if segs.size != 1:
                problems.append(f"mixed segments within visit {o}")
        times = seq.time[:n][ev_mask]
        for o in uniq:
            tv = times[orders == o]
            if np.any(np.diff(tv) < -1e-9):
                problems.append(f"non-monotone times within visit {o}")
    return problems
