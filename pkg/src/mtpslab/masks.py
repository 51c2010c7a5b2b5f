"""Text/speech attention masks for the speech decoder.

A sequence is laid out as ``L_t`` text positions (position 1 is BOS) followed
by ``L_s`` speech positions (position ``L_t + 1`` is SOS). All indices in this
module are 1-based; :func:`to_array` is the single place where a mask becomes
a 0-based numpy array for the model.

Two modes exist:

* non-streaming: text positions see every text position (and no speech);
  speech positions see all text plus earlier speech.
* streaming: text is causal; speech position ``i`` sees speech up to ``i``
  and only the first ``ceil((i - L_t - 1) / C_s) * C_t + 1`` text positions.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

NONSTREAMING = "nonstreaming"
STREAMING = "streaming"
EQ2_LITERAL = "eq2-literal"
MODES = (NONSTREAMING, STREAMING, EQ2_LITERAL)


@dataclass(frozen=True)
class SequenceLayout:
    L_t: int
    L_s: int

    def __post_init__(self):
        if self.L_t < 1 or self.L_s < 0:
            raise ConfigError(f"invalid layout L_t={self.L_t}, L_s={self.L_s} (need L_t >= 1, L_s >= 0)")

    @property
    def n(self):
        return self.L_t + self.L_s


@dataclass(frozen=True)
class ChunkSchedule:
    C_s: int = 15
    C_t: int = 5

    def __post_init__(self):
        if self.C_s < 1 or self.C_t < 1:
            raise ConfigError(f"invalid chunk schedule C_s={self.C_s}, C_t={self.C_t}")


@dataclass(frozen=True, eq=False)
class AttnMask:
    """``bits[i-1, j-1]`` is true when position ``i`` may attend to ``j``."""

    n: int
    bits: np.ndarray

    def get(self, i, j):
        if not (1 <= i <= self.n and 1 <= j <= self.n):
            raise IndexError(f"mask index ({i}, {j}) outside 1..{self.n}")
        return bool(self.bits[i - 1, j - 1])

    def rows(self):
        return [[int(b) for b in row] for row in self.bits]

    def __eq__(self, other):
        return isinstance(other, AttnMask) and self.n == other.n and np.array_equal(self.bits, other.bits)


def visible_text_budget(sched, speech_pos_offset):
    """Text positions (BOS included) visible from speech offset ``o`` (1 = SOS).

    Not capped at ``L_t``; callers apply the cap.
    """
    if speech_pos_offset < 1:
        raise ValueError(f"speech offset must be >= 1, got {speech_pos_offset}")
    return -(-(speech_pos_offset - 1) // sched.C_s) * sched.C_t + 1


def build_nonstreaming_mask(layout, eq2_literal=False):
    """Non-streaming mask.

    With ``eq2_literal`` the text rows see every column, speech included,
    which is what the closed-form case analysis says when read literally.
    """
    lt, n = layout.L_t, layout.n
    i = np.arange(1, n + 1)[:, None]
    j = np.arange(1, n + 1)[None, :]
    text_row = i <= lt
    if eq2_literal:
        text_part = np.ones((n, n), dtype=bool)
    else:
        text_part = np.broadcast_to(j <= lt, (n, n))
    speech_part = (j <= lt) | ((j > lt) & (j <= i))
    return AttnMask(n, np.where(text_row, text_part, speech_part))


def build_streaming_mask(layout, sched):
    lt, n = layout.L_t, layout.n
    i = np.arange(1, n + 1)[:, None]
    j = np.arange(1, n + 1)[None, :]
    offset = np.maximum(i - lt, 1)
    budget = np.minimum(lt, -(-(offset - 1) // sched.C_s) * sched.C_t + 1)
    text_rows = (i <= lt) & (j <= i)
    speech_rows = (i > lt) & (((j > lt) & (j <= i)) | (j <= budget))
    return AttnMask(n, text_rows | speech_rows)


def build_mask(layout, mode, sched=None):
    if mode == STREAMING:
        return build_streaming_mask(layout, sched or ChunkSchedule())
    if mode == NONSTREAMING:
        return build_nonstreaming_mask(layout)
    if mode == EQ2_LITERAL:
        return build_nonstreaming_mask(layout, eq2_literal=True)
    raise ConfigError(f"unknown mask mode {mode!r}; expected one of {MODES}")


def mask_oracle(layout, sched, mode, i, j):
    """Entry ``(i, j)`` evaluated straight from the case definitions.

    Written independently of the vectorised builders so the two can be
    checked against each other.
    """
    lt, n = layout.L_t, layout.n
    if not (1 <= i <= n and 1 <= j <= n):
        raise IndexError(f"mask index ({i}, {j}) outside 1..{n}")
    if mode == EQ2_LITERAL:
        if i <= lt:
            return True
        return i >= j
    if mode == NONSTREAMING:
        if i <= lt:
            return j <= lt
        if j <= lt:
            return True
        return j <= i
    if mode == STREAMING:
        if i <= lt and i >= j:
            return True
        if i > lt and i >= j > lt:
            return True
        if i > lt:
            quotient = (i - lt - 1) / sched.C_s
            ceil = int(quotient) if quotient == int(quotient) else int(quotient) + 1
            if j <= min(lt, ceil * sched.C_t + 1):
                return True
        return False
    raise ConfigError(f"unknown mask mode {mode!r}")


def to_array(mask):
    """0-based boolean view for the model: ``arr[a, b]`` with ``a = i - 1``."""
    return mask.bits


def render(mask):
    """0/1 grid, one row per line."""
    return "\n".join("".join("1" if b else "0" for b in row) for row in mask.bits)
