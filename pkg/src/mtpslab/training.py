"""Losses for every variant, batch assembly, the LR schedule and the train loop."""

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import masks as M
from .errors import ConfigError, NumericError
from .model import IGNORE, assemble, save_checkpoint
from .numerics import AdamState, adam_step, backward, clip_grad_norm
from .numerics import functional as F

LOG_SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_ratio: float = 0.03
    total_steps: int = 5000
    batch_size: int = 8
    seed: int = 0
    lam: float = 0.5
    mask_mode_mix: float = 0.5
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    lr_min_ratio: float = 0.01
    eval_every: int = 0
    checkpoint_dir: str = None

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigError("total_steps must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class TrainBatch:
    seq: object               # SeqBatch
    targets: np.ndarray       # [B, Ls] (group variants: [B, K, g]); IGNORE where undefined
    future: list              # DeepSeek token streams [B, Lt+Ls], one per module


def lr_at(cfg, step):
    """Linear warmup over ``warmup_ratio * total_steps``, then cosine to ``lr_min_ratio * lr``."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_ratio * total
    if step < warm:
        return cfg.lr * step / warm
    lr_min = cfg.lr_min_ratio * cfg.lr
    if total <= warm:
        return cfg.lr
    progress = (step - warm) / (total - warm)
    return lr_min + (cfg.lr - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _mode(streaming):
    return M.STREAMING if streaming else M.NONSTREAMING


def make_batch(mcfg, samples, streaming):
    """Assemble a training batch from ``(text, speech)`` pairs.

    ``text`` holds symbols without BOS; ``speech`` is EOS-terminated. The
    output at SOS predicts the first speech token.
    """
    texts = [[mcfg.bos_id] + list(t) for t, _ in samples]
    modes = [_mode(s) for s in streaming]
    if mcfg.is_group:
        g = mcfg.N
        groups, tgt = [], []
        for _, sp in samples:
            K = -(-len(sp) // g)
            padded = np.full(K * g, mcfg.pad_id, dtype=np.int64)
            padded[:len(sp)] = sp
            grid = padded.reshape(K, g)
            inputs = np.full((K, g), mcfg.pad_id, dtype=np.int64)
            inputs[0, 0] = mcfg.sos_id
            inputs[1:] = grid[:-1]
            groups.append(inputs)
            t = grid.copy()
            t[t == mcfg.pad_id] = IGNORE
            tgt.append(t)
        seq = assemble(texts, groups, modes, mcfg.C_s, mcfg.C_t, mcfg.text_pad_id, mcfg.pad_id, g)
        targets = np.full((len(samples), seq.Ls, g), IGNORE, dtype=np.int64)
        for b, t in enumerate(tgt):
            targets[b, :len(t)] = t
        return TrainBatch(seq, targets, [])
    speech_in = [[mcfg.sos_id] + list(sp[:-1]) for _, sp in samples]
    seq = assemble(texts, speech_in, modes, mcfg.C_s, mcfg.C_t, mcfg.text_pad_id, mcfg.pad_id)
    targets = np.full((len(samples), seq.Ls), IGNORE, dtype=np.int64)
    for b, (_, sp) in enumerate(samples):
        targets[b, :len(sp)] = sp
    future = []
    if mcfg.variant == "mtp_deepseek":
        for k in range(1, mcfg.N):
            # module k at speech offset t reads s_{t+k} = targets[t + k - 1]
            shifted = shift_targets(targets, k - 1)
            shifted = np.where(shifted == IGNORE, mcfg.pad_id, shifted)
            text_part = np.full((len(samples), seq.Lt), mcfg.pad_id, dtype=np.int64)
            future.append(np.concatenate([text_part, shifted], axis=1))
    return TrainBatch(seq, targets, future)


def shift_targets(targets, k):
    """Targets for head ``k``: ``out[:, t] = targets[:, t + k]``, IGNORE past the end."""
    if k == 0:
        return targets
    out = np.full_like(targets, IGNORE)
    out[:, :-k] = targets[:, k:]
    return out


def _weighted(ces, lam):
    total = ces[0] * 1.0
    for k in range(1, len(ces)):
        total = total + ces[k] * (lam ** k)
    return total


def ntp_loss(model, tb):
    """Cross-entropy of head 0 at the speech positions."""
    logits = model.forward(tb.seq)
    return F.cross_entropy(logits[0], tb.targets, IGNORE)


def mtp_loss(model, tb, lam=None):
    """``sum_k lam**k * CE_k``; head ``k`` at offset ``t`` is scored against ``s_{t+k+1}``.

    Returns ``(loss, [CE_0, ..., CE_{N-1}])``.
    """
    lam = model.config.lam if lam is None else lam
    logits = model.forward(tb.seq)
    ces = [F.cross_entropy(lg, shift_targets(tb.targets, k), IGNORE) for k, lg in enumerate(logits)]
    return _weighted(ces, lam), ces


def deepseek_loss(model, tb, lam=None):
    """Teacher-forced chain: module ``k`` sees the ground-truth token ``k`` ahead."""
    lam = model.config.lam if lam is None else lam
    logits = model.forward(tb.seq, tb.future)
    ces = [F.cross_entropy(lg, shift_targets(tb.targets, k), IGNORE) for k, lg in enumerate(logits)]
    return _weighted(ces, lam), ces


def group_loss(model, tb):
    """Each group position predicts the next group's ``g`` tokens; PAD slots ignored."""
    logits = model.forward(tb.seq)
    return F.cross_entropy(logits, tb.targets, IGNORE)


def variant_loss(model, tb, lam=None):
    v = model.config.variant
    if v == "ntp":
        loss = ntp_loss(model, tb)
        return loss, [loss]
    if v in ("mtp_vocalnet", "mtp_parallel"):
        return mtp_loss(model, tb, lam)
    if v == "mtp_deepseek":
        return deepseek_loss(model, tb, lam)
    loss = group_loss(model, tb)
    return loss, [loss]


def valid_target_counts(targets, n_heads):
    """Number of scored positions for each head in a padded target array."""
    return [int((shift_targets(targets, k) != IGNORE).sum()) for k in range(n_heads)]


class BatchSampler:
    """Seeded epoch-shuffled sampling plus per-sample mask-mode draws."""

    def __init__(self, n_records, batch_size, seed, mask_mode_mix):
        self.rng = np.random.default_rng(seed)
        self.n = n_records
        self.batch_size = batch_size
        self.mix = mask_mode_mix
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        idx = []
        while len(idx) < self.batch_size:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            take = min(self.batch_size - len(idx), len(self._order) - self._pos)
            idx.extend(int(i) for i in self._order[self._pos:self._pos + take])
            self._pos += take
        streaming = self.rng.random(self.batch_size) < self.mix
        return idx, streaming


@dataclass
class TrainResult:
    rows: list
    final_loss: float
    steps: int

    @property
    def initial_loss(self):
        return self.rows[0]["loss"] if self.rows else float("nan")


def log_columns(n_ce):
    return ["schema_version", "step", "lr", "loss"] + [f"ce_head_{k}" for k in range(n_ce)] + ["seq_len", "wall_ms"]


def train(model, records, cfg, log_path=None, progress=None):
    """Train ``model`` in place on corpus records; deterministic for a given seed.

    Every step draws a batch, draws each sample's mask mode, computes the
    variant loss, back-propagates, clips to ``grad_clip`` and applies Adam at
    the scheduled rate. ``progress(row)`` is called after every step.
    """
    if not records:
        raise ConfigError("cannot train on an empty corpus")
    mcfg = model.config
    params = model.params
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sampler = BatchSampler(len(records), cfg.batch_size, cfg.seed, cfg.mask_mode_mix)
    n_ce = 1 if mcfg.is_group else mcfg.N
    cols = log_columns(n_ce)
    rows = []
    writer = fh = None
    if log_path:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
    loss_value = float("nan")
    try:
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            idx, streaming = sampler.next()
            tb = make_batch(mcfg, [(records[i].text_tokens, records[i].speech_tokens) for i in idx], streaming)
            model.zero_grad()
            loss, ces = variant_loss(model, tb, cfg.lam)
            loss_value = float(loss.item())
            if not math.isfinite(loss_value):
                raise NumericError(f"non-finite loss at step {step}")
            backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            lr = lr_at(cfg, step + 1)
            adam_step(adam, params, lr)
            row = {"schema_version": LOG_SCHEMA_VERSION, "step": step, "lr": lr, "loss": loss_value}
            for k, ce in enumerate(ces):
                row[f"ce_head_{k}"] = float(ce.item())
            row["seq_len"] = tb.seq.Lt + tb.seq.Ls
            row["wall_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
            if writer:
                writer.writerow(row)
            if progress:
                progress(row)
            if cfg.eval_every and cfg.checkpoint_dir and (step + 1) % cfg.eval_every == 0:
                save_checkpoint(model, os.path.join(cfg.checkpoint_dir, f"step_{step + 1:06d}.ckpt"))
    finally:
        if fh:
            fh.close()
    return TrainResult(rows, loss_value, cfg.total_steps)


def train_config_dict(cfg):
    return asdict(cfg)
