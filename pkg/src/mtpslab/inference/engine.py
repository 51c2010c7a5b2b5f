"""Autoregressive generation with an incremental key/value cache.

One engine drives every variant. Each call to :meth:`Engine.step` is one
backbone forward over the positions that became known since the previous
call (newly revealed text rows plus newly committed speech rows), after which
the variant's machinery emits up to ``m`` tokens from the last speech row.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import masks as M
from ..errors import ConfigError, ContractError, NumericError
from ..model.batching import layout_mask
from ..model.layers import LayerCache, decoder_layer_np, output_head_np, rms_norm_np
from ..numerics.functional import rope_tables, sinusoidal_table

REPORT_SCHEMA_VERSION = 1
STAGES = ("projector_ms", "backbone_ms", "mtp_modules_ms", "heads_ms")


@dataclass
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    max_speech_tokens: int = 512
    min_speech_tokens: int = 0
    m: int = None
    streaming: bool = False
    C_s: int = None
    C_t: int = None
    use_cache: bool = True
    keep_logits: bool = False

    def resolved(self, mcfg):
        """Copy with ``m``, ``C_s`` and ``C_t`` filled in, validated against the model."""
        out = DecodeConfig(**asdict(self))
        if out.mode not in ("greedy", "sample"):
            raise ConfigError(f"decode mode must be greedy or sample, got {out.mode!r}")
        if out.mode == "sample" and not out.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {out.temperature}")
        if out.max_speech_tokens < 1:
            raise ConfigError("max_speech_tokens must be >= 1")
        if mcfg.is_group:
            if out.m is not None and out.m != mcfg.N:
                raise ConfigError(f"group model emits g={mcfg.N} tokens per step; m={out.m} is not allowed")
            out.m = mcfg.N
        else:
            out.m = 1 if out.m is None else int(out.m)
            if not 1 <= out.m <= mcfg.N:
                raise ConfigError(f"m={out.m} outside 1..{mcfg.N} for a {mcfg.variant} model with N={mcfg.N}")
        out.C_s = mcfg.C_s if out.C_s is None else out.C_s
        out.C_t = mcfg.C_t if out.C_t is None else out.C_t
        if out.C_s < 1 or out.C_t < 1:
            raise ConfigError("chunk sizes must be >= 1")
        return out


@dataclass
class GenerationReport:
    tokens: list
    backbone_forwards: int
    tokens_per_forward: float
    projector_ms: float = 0.0
    backbone_ms: float = 0.0
    mtp_modules_ms: float = 0.0
    heads_ms: float = 0.0
    total_ms: float = 0.0
    m: int = 1
    variant: str = "ntp"
    realized_speedup: float = None
    schema_version: int = REPORT_SCHEMA_VERSION
    step_logits: list = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("step_logits")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class IncrementalCache:
    """Keys/values of a stack of layers, stored per absolute position slot.

    ``mask`` is the 0-based visibility matrix for every slot the cache can
    hold. Slots may be filled in any order as long as no row attends to a
    slot that is still empty.
    """

    def __init__(self, prefixes, n_heads, head_dim, capacity, dtype, mask):
        self.prefixes = list(prefixes)
        self.n_heads = n_heads
        self.layers = [LayerCache(n_heads, capacity, head_dim, dtype) for _ in self.prefixes]
        self.filled = np.zeros(capacity, dtype=bool)
        self.mask = mask

    @property
    def capacity(self):
        return self.filled.shape[0]

    @property
    def length(self):
        """One past the highest filled slot."""
        idx = np.flatnonzero(self.filled)
        return int(idx[-1]) + 1 if idx.size else 0

    def extend_slots(self, W, x, positions, use_rope=True, rope=None):
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size == 0:
            return x[:0]
        if positions.max() >= self.capacity:
            raise ContractError(f"position {int(positions.max())} beyond cache capacity {self.capacity}")
        if self.filled[positions].any():
            raise ContractError("cache slot written twice")
        end = int(positions.max()) + 1
        rows = self.mask[positions, :end]
        known = self.filled[:end].copy()
        known[positions] = True
        if (rows & ~known).any() or self.mask[positions, end:].any():
            raise ContractError("a new row attends to a position that has not been computed")
        h = x
        for prefix, lc in zip(self.prefixes, self.layers):
            h = decoder_layer_np(W, prefix, h, positions, rows, self.n_heads, lc, use_rope, rope)
        self.filled[positions] = True
        return h


def cached_extend(model, cache, inputs, positions):
    """Run ``inputs[n, d]`` at ``positions`` through the cached stack.

    Positions must continue the committed prefix without gaps; an empty
    extension is a no-op.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return np.asarray(inputs)[:0]
    start = cache.length
    if positions[0] != start or not np.array_equal(positions, np.arange(start, start + positions.size)):
        raise ContractError(f"positions must continue at {start} without gaps, got {positions.tolist()}")
    rope = None
    if model.use_rope:
        rope = rope_tables(positions, model.config.d_model // model.config.n_heads, model.dtype)
    return cache.extend_slots(model.arrays(), np.asarray(inputs, dtype=model.dtype), positions,
                              model.use_rope, rope)


def backbone_cache(model, capacity, mask):
    cfg = model.config
    prefixes = [f"backbone.{i}." for i in range(cfg.n_backbone_layers)]
    return IncrementalCache(prefixes, cfg.n_heads, cfg.d_model // cfg.n_heads, capacity, model.dtype, mask)


class _Stall(Exception):
    def __init__(self, needed, revealed):
        super().__init__(f"need {needed} text positions, {revealed} revealed")
        self.needed = needed
        self.revealed = revealed


class Engine:
    """Decoding state for one prompt.

    ``text_len`` is the BOS-prefixed text length, known up front so that
    speech positions can be numbered before the text is fully revealed.
    """

    def __init__(self, model, text_len, cfg):
        self.model = model
        mc = self.mcfg = model.config
        self.cfg = cfg = cfg.resolved(mc)
        self.W = model.arrays()
        self.lt = int(text_len)
        if self.lt < 1:
            raise ConfigError("text must contain at least BOS")
        self.m = cfg.m
        self.g = mc.N if mc.is_group else 1
        self.mode = M.STREAMING if cfg.streaming else M.NONSTREAMING
        self.sched = M.ChunkSchedule(cfg.C_s, cfg.C_t)
        # speech rows: SOS plus every committed row, with slack for one block
        max_rows = -(-cfg.max_speech_tokens // self.g) + 1 + self.m
        self.cap = self.lt + max_rows
        self.mask = layout_mask(self.lt, max_rows, self.mode, cfg.C_s, cfg.C_t)
        self.text_mask = np.tril(np.ones((self.lt, self.lt), dtype=bool))
        self.dh = mc.d_model // mc.n_heads
        self.rope = rope_tables(np.arange(self.cap), self.dh, model.dtype) if model.use_rope else None
        self.group_rope = rope_tables(np.arange(self.g + 1), self.dh, model.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self.depth = self.m if mc.variant in ("mtp_vocalnet", "mtp_deepseek") else 1
        self.tokens = []
        self.done = False
        self.forwards = 0
        self.times = dict.fromkeys(STAGES, 0.0)
        self.step_logits = [] if cfg.keep_logits else None
        self.text_done = 0
        self.speech_rows = 0
        if cfg.use_cache:
            H, dh, dt = mc.n_heads, self.dh, model.dtype
            self.proj_cache = IncrementalCache([f"projector.{i}." for i in range(mc.n_projector_layers)],
                                               H, dh, self.lt, dt, self.text_mask)
            self.caches = {"backbone": backbone_cache(model, self.cap, self.mask)}
            for k in range(1, self.depth):
                prefix = f"mtp.{k}." if mc.variant == "mtp_vocalnet" else f"mtp.{k}.layer."
                self.caches[k] = IncrementalCache([prefix], H, dh, self.cap, dt, self.mask)

    # -- stacks -----------------------------------------------------------------

    def _prefixes(self, name):
        mc = self.mcfg
        if name == "backbone":
            return [f"backbone.{i}." for i in range(mc.n_backbone_layers)]
        if name == "projector":
            return [f"projector.{i}." for i in range(mc.n_projector_layers)]
        return [f"mtp.{name}." if mc.variant == "mtp_vocalnet" else f"mtp.{name}.layer."]

    def _rope_rows(self, positions):
        if self.rope is None:
            return None
        return self.rope[0][positions], self.rope[1][positions]

    def _run(self, name, x, positions):
        """Cached: extend stack ``name`` by rows ``positions``. Uncached: ``x`` is every row."""
        use_rope, rope = self.model.use_rope, self._rope_rows(positions)
        if self.cfg.use_cache:
            cache = self.proj_cache if name == "projector" else self.caches[name]
            return cache.extend_slots(self.W, x, positions, use_rope, rope)
        full = self.text_mask if name == "projector" else self.mask
        rows = full[np.ix_(positions, positions)]
        for prefix in self._prefixes(name):
            x = decoder_layer_np(self.W, prefix, x, positions, rows, self.mcfg.n_heads, None, use_rope, rope)
        return x

    # -- inputs -----------------------------------------------------------------

    def _with_positions(self, x, positions):
        if self.model.use_rope:
            return x
        return x + sinusoidal_table(positions, self.mcfg.d_model, self.model.dtype)

    def _speech_inputs(self, rows):
        """Backbone input vectors for speech rows ``rows`` (row 0 is SOS)."""
        mc, W = self.mcfg, self.W
        emb = W["speech_embed"]
        out = np.empty((len(rows), mc.d_model), dtype=self.model.dtype)
        for i, r in enumerate(rows):
            if r == 0:
                out[i] = emb[mc.sos_id]
            elif self.g == 1 and not mc.is_group:
                out[i] = emb[self.tokens[r - 1]]
            else:
                grp = self.tokens[(r - 1) * self.g:r * self.g]
                out[i] = emb[grp].reshape(-1) @ W["group.compose"]
        return self._with_positions(out, self.lt + np.asarray(rows, dtype=np.int64))

    def _needed_text(self):
        if self.mode == M.NONSTREAMING:
            return self.lt
        o = self.speech_rows_total()
        return min(self.lt, M.visible_text_budget(self.sched, o))

    def speech_rows_total(self):
        """Speech rows that exist once the next step runs (SOS counts as row 1)."""
        return len(self.tokens) // self.g + 1

    # -- one backbone forward -----------------------------------------------------

    def step(self, text_tokens):
        """Emit the next block of tokens given the text revealed so far.

        Raises :class:`_Stall` when the block needs text that is not yet
        visible. Returns the list of new tokens (empty once finished).
        """
        if self.done:
            return []
        revealed = len(text_tokens)
        needed = self._needed_text()
        if revealed < needed:
            raise _Stall(needed, revealed)
        n_rows = self.speech_rows_total()
        if self.cfg.use_cache:
            text_rows = list(range(self.text_done, revealed if self.mode == M.STREAMING else self.lt))
            speech_rows = list(range(self.speech_rows, n_rows))
        else:
            if revealed < self.lt:
                raise ContractError("full recompute needs the whole text")
            text_rows = list(range(self.lt))
            speech_rows = list(range(n_rows))
        t0 = time.perf_counter()
        parts = []
        if text_rows:
            tpos = np.asarray(text_rows, dtype=np.int64)
            ids = np.asarray(text_tokens, dtype=np.int64)[tpos]
            if ids.min() < 0 or ids.max() >= self.mcfg.V_text:
                raise IndexError(f"text token outside [0, {self.mcfg.V_text})")
            x = self._with_positions(self.W["text_embed"][ids], tpos)
            parts.append(self._run("projector", x, tpos))
        t1 = time.perf_counter()
        parts.append(self._speech_inputs(speech_rows))
        positions = np.concatenate([np.asarray(text_rows, dtype=np.int64),
                                    self.lt + np.asarray(speech_rows, dtype=np.int64)])
        h = self._run("backbone", np.concatenate(parts, axis=0), positions)
        t2 = time.perf_counter()
        self.times["projector_ms"] += (t1 - t0) * 1e3
        self.times["backbone_ms"] += (t2 - t1) * 1e3
        self.forwards += 1
        self.text_done = max(self.text_done, len(text_rows) and text_rows[-1] + 1)
        self.speech_rows = n_rows
        block = self._emit_block(h, positions)
        return block

    # -- variant machinery ----------------------------------------------------------

    def _pick(self, logits, block):
        if not np.all(np.isfinite(logits)):
            raise NumericError(f"non-finite logits at speech token {len(self.tokens) + len(block) + 1}")
        if self.step_logits is not None:
            self.step_logits.append(np.array(logits, copy=True))
        mc, cfg = self.mcfg, self.cfg
        z = logits.astype(np.float64)
        if len(self.tokens) + len(block) + 1 < cfg.min_speech_tokens:
            z = z.copy()
            z[mc.eos_id] = -np.inf
        if cfg.mode == "greedy":
            return int(np.argmax(z))
        z = z / cfg.temperature
        p = np.exp(z - z.max())
        cdf = np.cumsum(p)
        return int(min(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right"), len(p) - 1))

    def _accept(self, tok, block):
        """Append; returns True when generation must stop after this token."""
        block.append(tok)
        if tok == self.mcfg.eos_id or len(self.tokens) + len(block) >= self.cfg.max_speech_tokens:
            self.done = True
            return True
        return False

    def _head(self, prefix, h_last):
        t = time.perf_counter()
        out = output_head_np(self.W, prefix, h_last[None])[0]
        self.times["heads_ms"] += (time.perf_counter() - t) * 1e3
        return out

    def _emit_block(self, h, positions):
        mc = self.mcfg
        block = []
        v = mc.variant
        if mc.is_group:
            self._accept_group(h[-1], block)
        elif v in ("ntp", "mtp_parallel"):
            for k in range(self.m):
                if self._accept(self._pick(self._head(f"heads.{k}.", h[-1]), block), block):
                    break
        else:
            state = h
            if not self._accept(self._pick(self._head("heads.0.", state[-1]), block), block):
                for k in range(1, self.m):
                    t = time.perf_counter()
                    if v == "mtp_vocalnet":
                        state = self._run(k, state, positions)
                    else:
                        state = self._run(k, self._deepseek_inputs(k, state, positions, block), positions)
                    self.times["mtp_modules_ms"] += (time.perf_counter() - t) * 1e3
                    if self._accept(self._pick(self._head(f"heads.{k}.", state[-1]), block), block):
                        break
        self.tokens.extend(block)
        return block

    def _deepseek_inputs(self, k, state, positions, block):
        mc, W = self.mcfg, self.W
        stream = self.tokens + block
        ids = np.full(len(positions), mc.pad_id, dtype=np.int64)
        for i, p in enumerate(positions):
            t = int(p) - self.lt
            if t >= 0:
                ids[i] = stream[t + k - 1]
        merged = np.concatenate([rms_norm_np(state, W[f"mtp.{k}.hid_norm"]),
                                 rms_norm_np(W["speech_embed"][ids], W[f"mtp.{k}.emb_norm"])], axis=-1)
        return merged @ W[f"mtp.{k}.merge"]

    def _accept_group(self, h_last, block):
        mc, W = self.mcfg, self.W
        g, V = mc.N, mc.V_speech
        t = time.perf_counter()
        if mc.variant == "group_linear":
            logits = output_head_np(W, "group.decompose.", h_last[None]).reshape(g, V)
        else:
            x = np.concatenate([h_last[None], W["group.queries"]], axis=0)
            pos = np.arange(g + 1)
            full = np.ones((g + 1, g + 1), dtype=bool)
            for i in range(mc.group_trans_layers):
                x = decoder_layer_np(W, f"group.dec.{i}.", x, pos, full, mc.n_heads, None, True, self.group_rope)
            logits = output_head_np(W, "group.head.", x[1:])
        self.times["heads_ms"] += (time.perf_counter() - t) * 1e3
        for j in range(g):
            if self._accept(self._pick(logits[j], block), block):
                break

    def report(self, total_ms=0.0):
        n = len(self.tokens)
        return GenerationReport(
            tokens=list(self.tokens), backbone_forwards=self.forwards,
            tokens_per_forward=n / self.forwards if self.forwards else 0.0,
            total_ms=total_ms, m=self.m, variant=self.mcfg.variant,
            step_logits=self.step_logits, **self.times)


def generate(model, text_tokens, cfg=None):
    """Generate speech tokens for BOS-prefixed ``text_tokens``.

    Returns ``(tokens, report)``; ``tokens`` ends with EOS unless the
    ``max_speech_tokens`` limit was hit first.
    """
    cfg = cfg or DecodeConfig()
    text = np.asarray(text_tokens, dtype=np.int64)
    t0 = time.perf_counter()
    eng = Engine(model, len(text), cfg)
    while not eng.done:
        eng.step(text)
    rep = eng.report((time.perf_counter() - t0) * 1e3)
    return list(eng.tokens), rep


# -- streaming -----------------------------------------------------------------------

class TextFeed:
    """Text arriving over time; only the first ``revealed`` positions are readable."""

    def __init__(self, tokens, revealed=1):
        self._tokens = np.asarray(tokens, dtype=np.int64)
        self.revealed = min(max(int(revealed), 0), len(self._tokens))

    @property
    def total(self):
        return len(self._tokens)

    def visible(self):
        return self._tokens[:self.revealed].copy()

    def reveal(self, n):
        self.revealed = min(self.total, self.revealed + int(n))

    @property
    def complete(self):
        return self.revealed >= self.total


@dataclass
class Stall:
    """The next block needs ``needed`` text positions but only ``revealed`` are visible."""
    needed: int
    revealed: int


@dataclass
class SpeechChunk:
    index: int
    tokens: list
    text_visible: int
    final: bool = False
    report: GenerationReport = None


def chunk_end(index, C_s):
    """Number of speech tokens emitted once chunk ``index`` is complete."""
    return 1 if index == 0 else index * C_s + 1


def generate_streaming(model, feed, cfg=None):
    """Yield :class:`SpeechChunk` objects as speech is generated under the streaming mask.

    Chunk 0 is the first token; chunk ``c >= 1`` holds the next ``C_s``
    tokens. When the next step needs text the feed has not revealed, a
    :class:`Stall` is yielded instead and the step is retried on the next
    iteration.
    """
    cfg = DecodeConfig(**asdict(cfg or DecodeConfig(streaming=True)))
    if not cfg.streaming:
        raise ConfigError("generate_streaming needs streaming=True")
    cfg.use_cache = True
    t0 = time.perf_counter()
    eng = Engine(model, feed.total, cfg)
    C_s, C_t, lt = eng.cfg.C_s, eng.cfg.C_t, eng.lt
    c, sent = 0, 0
    while True:
        while sent < len(eng.tokens) and (chunk_end(c, C_s) <= len(eng.tokens) or eng.done):
            end = min(chunk_end(c, C_s), len(eng.tokens))
            final = eng.done and end == len(eng.tokens)
            visible = min(lt, 1 if c == 0 else c * C_t + 1)
            report = eng.report((time.perf_counter() - t0) * 1e3) if final else None
            yield SpeechChunk(c, list(eng.tokens[sent:end]), visible, final, report)
            sent = end
            c += 1
        if eng.done:
            return
        try:
            eng.step(feed.visible())
        except _Stall as st:
            yield Stall(st.needed, st.revealed)


def run_streaming(model, text_tokens, cfg=None, initial=1):
    """Drive :func:`generate_streaming`, revealing ``C_t`` text positions per chunk or stall."""
    cfg = cfg or DecodeConfig(streaming=True)
    rc = cfg.resolved(model.config)
    feed = TextFeed(text_tokens, initial)
    chunks, stalls = [], 0
    for item in generate_streaming(model, feed, cfg):
        if isinstance(item, Stall):
            stalls += 1
            if feed.complete:
                raise ContractError("stalled with the whole text revealed")
            feed.reveal(rc.C_t)
        else:
            chunks.append(item)
            feed.reveal(rc.C_t)
    return chunks, stalls


def ceil_div(a, b):
    return -(-a // b)


def expected_forwards(n_tokens, m):
    return math.ceil(n_tokens / m)
