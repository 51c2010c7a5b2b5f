"""Padded batch layout shared by training, analysis and full-recompute decoding.

Text is left-padded to the batch maximum and speech right-padded, so the
speech segment starts at the same column for every sample and a sample's
real positions are numbered from 0 exactly as they would be unpadded.
Padding rows attend only to themselves.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import masks as M

IGNORE = -100


@dataclass
class SeqBatch:
    text_ids: np.ndarray        # [B, Lt]
    speech_ids: np.ndarray      # [B, Ls] (group variants: [B, Ls, g]); column 0 is SOS
    text_len: np.ndarray        # [B]
    speech_len: np.ndarray      # [B]
    modes: tuple
    mask: np.ndarray            # [B, Lt+Ls, Lt+Ls]
    text_mask: np.ndarray       # [B, Lt, Lt]
    positions: np.ndarray       # [B, Lt+Ls]
    text_positions: np.ndarray  # [B, Lt]

    @property
    def batch_size(self):
        return self.text_ids.shape[0]

    @property
    def Lt(self):
        return self.text_ids.shape[1]

    @property
    def Ls(self):
        return self.speech_ids.shape[1]


@lru_cache(maxsize=4096)
def layout_mask(lt, ls, mode, C_s, C_t):
    mask = M.build_mask(M.SequenceLayout(lt, ls), mode, M.ChunkSchedule(C_s, C_t))
    arr = M.to_array(mask)
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=256)
def _causal(n):
    arr = np.tril(np.ones((n, n), dtype=bool))
    arr.setflags(write=False)
    return arr


def assemble(text_seqs, speech_seqs, modes, C_s, C_t, text_pad, speech_pad, group_size=None):
    """Build a :class:`SeqBatch`.

    ``text_seqs`` start with BOS; ``speech_seqs`` are backbone inputs starting
    with SOS. With ``group_size`` each speech sequence is a ``[K, g]`` array
    whose row 0 stands for SOS.
    """
    B = len(text_seqs)
    tl = np.array([len(t) for t in text_seqs], dtype=np.int64)
    sl = np.array([len(s) for s in speech_seqs], dtype=np.int64)
    Lt, Ls = int(tl.max()), int(sl.max())
    L = Lt + Ls
    text_ids = np.full((B, Lt), text_pad, dtype=np.int64)
    if group_size is not None:
        speech_ids = np.full((B, Ls, group_size), speech_pad, dtype=np.int64)
    else:
        speech_ids = np.full((B, Ls), speech_pad, dtype=np.int64)
    mask = np.zeros((B, L, L), dtype=bool)
    text_mask = np.zeros((B, Lt, Lt), dtype=bool)
    idx = np.arange(L)
    mask[:, idx, idx] = True
    text_mask[:, idx[:Lt], idx[:Lt]] = True
    positions = np.empty((B, L), dtype=np.int64)
    for b in range(B):
        lt, ls = int(tl[b]), int(sl[b])
        o = Lt - lt
        text_ids[b, o:] = text_seqs[b]
        speech_ids[b, :ls] = speech_seqs[b]
        n = lt + ls
        # padding rows keep their self-edge; real rows are overwritten
        mask[b, o:o + n, o:o + n] = layout_mask(lt, ls, modes[b], C_s, C_t)
        text_mask[b, o:, o:] = _causal(lt)
        positions[b] = idx - o
    return SeqBatch(text_ids, speech_ids, tl, sl, tuple(modes), mask, text_mask,
                    positions, positions[:, :Lt].copy())
