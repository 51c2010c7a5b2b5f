"""Synthetic text -> speech-token language.

Each text symbol ``a`` at index ``i`` becomes a run of fine-grained tokens
``a*R_max + j`` for ``j = 0 .. len-1``. The run length is
``2 + (a + i) % 4``, extended by one with probability ``p_ext``. So several
tokens encode one symbol and the exact run length is stochastic, which keeps
next-token distributions from being one-hot while leaving an exact inverse.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels

ERROR_SYMBOL = -1
DEFAULT_LEN_RANGE = (2, 6)


@dataclass(frozen=True)
class SynthGrammar:
    T: int = 16
    R_max: int = 6
    p_ext: float = 0.2

    def __post_init__(self):
        if self.R_max < 6:
            raise ValueError("R_max must be at least 6 (base run length 5 plus extension)")

    @property
    def V_core(self):
        return self.T * self.R_max

    # speech specials follow the core tokens
    @property
    def SOS(self):
        return self.V_core

    @property
    def EOS(self):
        return self.V_core + 1

    @property
    def PAD(self):
        return self.V_core + 2

    @property
    def V_speech(self):
        return self.V_core + 3

    # text specials follow the symbols
    @property
    def BOS(self):
        return self.T

    @property
    def TEXT_PAD(self):
        return self.T + 1

    @property
    def V_text(self):
        return self.T + 2

    def tok(self, a, j):
        return a * self.R_max + j

    def base_length(self, a, i):
        return 2 + (a + i) % 4

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class CorpusRecord:
    id: int
    text_tokens: list
    speech_tokens: list
    seed: int

    def to_json(self):
        return {"id": self.id, "text": self.text_tokens, "speech": self.speech_tokens, "seed": self.seed}


def record_seed(seed, record_id):
    """Per-record seed so records can be generated in any order."""
    return int(np.random.SeedSequence([seed, record_id]).generate_state(1)[0])


def expand(grammar, text_tokens, seed):
    """Speech tokens for ``text_tokens`` (EOS-terminated)."""
    rng = np.random.default_rng(seed)
    out = []
    for i, a in enumerate(text_tokens):
        a = int(a)
        if not 0 <= a < grammar.T:
            raise ValueError(f"text symbol {a} outside [0, {grammar.T})")
        length = grammar.base_length(a, i)
        if rng.random() < grammar.p_ext:
            length += 1
        out.extend(grammar.tok(a, j) for j in range(length))
    out.append(grammar.EOS)
    return out


def decode(grammar, speech_tokens):
    """Invert :func:`expand`; total on arbitrary streams.

    A valid run starts at ``j == 0`` and continues while the symbol stays the
    same and ``j`` increases by one. Each maximal stretch of tokens that is
    not part of a valid run decodes to a single ``ERROR_SYMBOL``.
    """
    text = []
    prev_a = prev_j = None
    in_error = False
    for t in speech_tokens:
        t = int(t)
        if t == grammar.EOS:
            break
        if 0 <= t < grammar.V_core:
            a, j = divmod(t, grammar.R_max)
            if prev_a is not None and a == prev_a and j == prev_j + 1:
                prev_j = j
                continue
            if j == 0:
                text.append(a)
                prev_a, prev_j = a, 0
                in_error = False
                continue
        prev_a = prev_j = None
        if not in_error:
            text.append(ERROR_SYMBOL)
            in_error = True
    return text


def reconstruction_error(reference_text, hypothesis_text):
    """Edit distance over ``max(1, len(reference))``, clipped to 1.

    Not symmetric: the normaliser is the reference length.
    """
    dist = kernels.levenshtein(list(reference_text), list(hypothesis_text))
    return min(1.0, dist / max(1, len(reference_text)))


def make_record(grammar, record_id, len_range, seed):
    rseed = record_seed(seed, record_id)
    rng = np.random.default_rng(rseed)
    lo, hi = len_range
    length = int(rng.integers(lo, hi + 1))
    text = [int(a) for a in rng.integers(0, grammar.T, size=length)]
    speech = expand(grammar, text, int(rng.integers(0, 2**63 - 1)))
    return CorpusRecord(record_id, text, speech, rseed)


def header(grammar, n_records, len_range, seed):
    return {"schema_version": 1, "grammar": grammar.to_json(), "n_records": n_records,
            "len_range": list(len_range), "seed": seed}


def gen_corpus(grammar, n_records, len_range, seed, path):
    """Write a line-delimited JSON corpus: a header line, then one record per line."""
    lo, hi = len_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid len_range {len_range}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header(grammar, n_records, len_range, seed), sort_keys=True) + "\n")
            for rid in range(n_records):
                rec = make_record(grammar, rid, len_range, seed)
                fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write corpus {path}: {exc}") from exc


def load_corpus(path):
    """Return ``(grammar, header, records)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            records = []
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    records.append(CorpusRecord(obj["id"], obj["text"], obj["speech"], obj.get("seed", 0)))
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    return SynthGrammar.from_json(head["grammar"]), head, records
