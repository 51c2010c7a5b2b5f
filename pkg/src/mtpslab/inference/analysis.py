"""Evaluation, predictive-distribution statistics and latency benchmarking."""

import math
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .. import synthdata
from ..model import IGNORE
from .engine import STAGES, DecodeConfig, generate

STATS_SCHEMA_VERSION = 1
MAXPROB_BIN_WIDTH = 0.05
ENTROPY_BIN_WIDTH = 0.25


# -- evaluation ------------------------------------------------------------------

def evaluate_records(model, grammar, records, cfg=None):
    """Generate for each record and score the decoded text against the reference.

    Returns ``(rows, summary)``; rows carry record_id, recon_error, tokens,
    backbone_forwards, wall_ms.
    """
    cfg = cfg or DecodeConfig()
    rows = []
    for rec in records:
        text = [grammar.BOS] + list(rec.text_tokens)
        t0 = time.perf_counter()
        tokens, rep = generate(model, text, cfg)
        wall = (time.perf_counter() - t0) * 1e3
        hyp = synthdata.decode(grammar, tokens)
        rows.append({
            "record_id": rec.id,
            "recon_error": synthdata.reconstruction_error(rec.text_tokens, hyp),
            "tokens": len(tokens),
            "backbone_forwards": rep.backbone_forwards,
            "wall_ms": wall,
        })
    return rows, summarize(rows)


def summarize(rows):
    if not rows:
        return {"schema_version": STATS_SCHEMA_VERSION, "n_records": 0, "mean_recon_error": float("nan"),
                "mean_tokens_per_forward": float("nan"), "median_wall_ms": float("nan")}
    return {
        "schema_version": STATS_SCHEMA_VERSION,
        "n_records": len(rows),
        "mean_recon_error": float(np.mean([r["recon_error"] for r in rows])),
        "mean_tokens_per_forward": float(np.mean([r["tokens"] / r["backbone_forwards"] for r in rows])),
        "median_wall_ms": float(statistics.median(r["wall_ms"] for r in rows)),
    }


# -- predictive distributions ----------------------------------------------------

def distribution_stats(logits):
    """Max probability and entropy (nats) of ``softmax(logits)`` along the last axis.

    Entries of ``-inf`` are allowed and contribute nothing.
    """
    z = np.asarray(logits, dtype=np.float64)
    mx = z.max(axis=-1, keepdims=True)
    e = np.exp(z - mx)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    zc = np.where(p > 0, z - mx, 0.0)
    entropy = np.log(s[..., 0]) - (p * zc).sum(axis=-1)
    return p.max(axis=-1), entropy


def reference_stats(probs):
    """Direct per-distribution summation of ``-sum p ln p``, for cross-checking."""
    maxp, ent = [], []
    for row in np.asarray(probs, dtype=np.float64).reshape(-1, np.shape(probs)[-1]):
        maxp.append(max(row))
        ent.append(-math.fsum(float(q) * math.log(float(q)) for q in row if q > 0))
    return np.array(maxp), np.array(ent)


def histogram_edges(V):
    maxprob = np.linspace(0.0, 1.0, int(round(1.0 / MAXPROB_BIN_WIDTH)) + 1)
    top = math.log(V)
    ent = np.arange(0.0, top, ENTROPY_BIN_WIDTH)
    ent = np.append(ent, top) if ent[-1] < top else ent
    return maxprob, ent


@dataclass
class EntropyReport:
    n_tokens: int
    mean_max_prob: float
    mean_entropy: float
    max_prob_edges: list
    max_prob_counts: list
    entropy_edges: list
    entropy_counts: list
    schema_version: int = STATS_SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)


def summarize_distributions(maxp, ent, V):
    mp_edges, en_edges = histogram_edges(V)
    mp_counts, _ = np.histogram(np.clip(maxp, 0.0, 1.0), bins=mp_edges)
    en_counts, _ = np.histogram(np.clip(ent, 0.0, en_edges[-1]), bins=en_edges)
    return EntropyReport(
        n_tokens=int(len(maxp)),
        mean_max_prob=float(np.mean(maxp)) if len(maxp) else float("nan"),
        mean_entropy=float(np.mean(ent)) if len(ent) else float("nan"),
        max_prob_edges=mp_edges.tolist(), max_prob_counts=mp_counts.tolist(),
        entropy_edges=en_edges.tolist(), entropy_counts=en_counts.tolist())


def entropy_stats(model, records, n_tokens, batch_size=16):
    """Teacher-forced head-0 distributions over the first ``n_tokens`` scored speech positions."""
    from ..training import make_batch

    mcfg = model.config
    maxps, ents = [], []
    got = 0
    for start in range(0, len(records), batch_size):
        if got >= n_tokens:
            break
        chunk = records[start:start + batch_size]
        tb = make_batch(mcfg, [(r.text_tokens, r.speech_tokens) for r in chunk], [False] * len(chunk))
        out = model.eval_logits(tb.seq, tb.future)
        if mcfg.is_group:
            logits, valid = out, tb.targets != IGNORE
        else:
            logits, valid = out[0], tb.targets != IGNORE
        sel = logits[valid]
        mp, en = distribution_stats(sel)
        take = min(len(mp), n_tokens - got)
        maxps.append(mp[:take])
        ents.append(en[:take])
        got += take
    maxp = np.concatenate(maxps) if maxps else np.empty(0)
    ent = np.concatenate(ents) if ents else np.empty(0)
    return summarize_distributions(maxp, ent, mcfg.V_speech)


# -- latency -----------------------------------------------------------------------

@dataclass
class LatencyReport:
    m: int
    n_trials: int
    n_prompts: int
    tokens: int
    backbone_forwards: int
    tokens_per_forward: float
    median_total_ms: float
    median_ms_per_token: float
    projector_ms: float
    backbone_ms: float
    mtp_modules_ms: float
    heads_ms: float
    baseline_ms_per_token: float = None
    realized_speedup: float = None
    schema_version: int = STATS_SCHEMA_VERSION

    def to_dict(self):
        return asdict(self)


def _trial(model, prompts, cfg):
    t0 = time.perf_counter()
    stages = dict.fromkeys(STAGES, 0.0)
    n_tok = n_fwd = 0
    for text in prompts:
        tokens, rep = generate(model, text, cfg)
        n_tok += len(tokens)
        n_fwd += rep.backbone_forwards
        for s in STAGES:
            stages[s] += getattr(rep, s)
    return (time.perf_counter() - t0) * 1e3, n_tok, n_fwd, stages


def bench_latency(model, cfg, prompts, n_trials=5, warmup=3, baseline=True):
    """Median wall time over ``n_trials`` after ``warmup`` discarded trials.

    With ``baseline`` an ``m = 1`` run on the same prompts is interleaved
    trial by trial and ``realized_speedup`` is the ratio of per-token times.
    """
    cfg = cfg.resolved(model.config)
    base_cfg = DecodeConfig(**{**asdict(cfg), "m": 1}) if baseline and not model.config.is_group else None
    totals, per_tok, base_per_tok = [], [], []
    stage_runs = {s: [] for s in STAGES}
    n_tok = n_fwd = 0
    for t in range(warmup + n_trials):
        if base_cfg is not None:
            bt, bn, _, _ = _trial(model, prompts, base_cfg)
        total, n_tok, n_fwd, stages = _trial(model, prompts, cfg)
        if t < warmup:
            continue
        totals.append(total)
        per_tok.append(total / max(n_tok, 1))
        for s in STAGES:
            stage_runs[s].append(stages[s])
        if base_cfg is not None:
            base_per_tok.append(bt / max(bn, 1))
    med = statistics.median
    rep = LatencyReport(
        m=cfg.m, n_trials=n_trials, n_prompts=len(prompts), tokens=n_tok, backbone_forwards=n_fwd,
        tokens_per_forward=n_tok / n_fwd if n_fwd else 0.0,
        median_total_ms=med(totals), median_ms_per_token=med(per_tok),
        **{s: med(v) for s, v in stage_runs.items()})
    if base_per_tok:
        rep.baseline_ms_per_token = med(base_per_tok)
        rep.realized_speedup = rep.baseline_ms_per_token / rep.median_ms_per_token
    return rep
