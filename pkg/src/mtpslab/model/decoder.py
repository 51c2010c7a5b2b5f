"""The speech decoder and its five multi-token prediction variants.

Shared trunk: text embeddings -> projector (causal decoder layers, giving
``v_LLM``) -> concatenated with speech embeddings -> backbone decoder layers
(giving ``h0``). Variants differ only in what sits on top of ``h0``:

``ntp``           one output head.
``mtp_parallel``  N independent heads all reading ``h0``.
``mtp_vocalnet``  N-1 chained decoder layers ``h^k = MTP_k(h^{k-1})`` under the
                  backbone's mask, with one head per depth.
``mtp_deepseek``  N-1 modules, each merging ``h^{k-1}`` with the embedding of
                  the token ``k`` steps ahead before its decoder layer.
``group_*``       groups of ``g`` speech tokens are merged into one input
                  embedding and each output is decomposed back into ``g``
                  logit vectors (linear, or learned queries + small
                  non-causal transformer).
"""

from collections import OrderedDict

import numpy as np

from ..errors import ConfigError, ShapeError, VariantError
from ..numerics import DTYPES, Tensor, no_grad
from ..numerics import functional as F
from . import layers
from .batching import assemble
from .config import ModelConfig


class DecoderModel:
    def __init__(self, config, params=None):
        config.validate()
        self.config = config
        self.dtype = DTYPES[config.dtype]
        if params is None:
            params = self._init_params(np.random.default_rng(config.init_seed))
        else:
            expected = self.parameter_specs(config)
            names = [n for n, _, _ in expected]
            if list(params) != names:
                raise ShapeError("parameter registry does not match the configuration")
            for name, shape, _ in expected:
                if params[name].shape != shape:
                    raise ShapeError(f"parameter {name}: shape {params[name].shape} != expected {shape}")
        self.params = params

    # -- registry --------------------------------------------------------------

    @staticmethod
    def parameter_specs(cfg):
        """Ordered ``(name, shape, kind)``; kind is matrix, gain, bias or head."""
        d, V = cfg.d_model, cfg.V_speech
        specs = [("text_embed", (cfg.V_text, d), "matrix"), ("speech_embed", (V, d), "matrix")]

        def layer(prefix, d_ff=cfg.d_ff):
            for name, shape in layers.layer_shapes(d, d_ff).items():
                specs.append((prefix + name, shape, "gain" if name.endswith("norm") else "matrix"))

        def head(prefix, n_out):
            specs.append((prefix + "norm", (d,), "gain"))
            specs.append((prefix + "weight", (d, n_out), "head"))
            specs.append((prefix + "bias", (n_out,), "bias"))

        for i in range(cfg.n_projector_layers):
            layer(f"projector.{i}.")
        for i in range(cfg.n_backbone_layers):
            layer(f"backbone.{i}.")
        v, N = cfg.variant, cfg.N
        if v == "mtp_vocalnet":
            for k in range(1, N):
                layer(f"mtp.{k}.")
        elif v == "mtp_deepseek":
            for k in range(1, N):
                specs.append((f"mtp.{k}.hid_norm", (d,), "gain"))
                specs.append((f"mtp.{k}.emb_norm", (d,), "gain"))
                specs.append((f"mtp.{k}.merge", (2 * d, d), "matrix"))
                layer(f"mtp.{k}.layer.")
        if v in ("ntp", "mtp_parallel", "mtp_vocalnet", "mtp_deepseek"):
            for k in range(N):
                head(f"heads.{k}.", V)
        elif v == "group_linear":
            specs.append(("group.compose", (N * d, d), "matrix"))
            head("group.decompose.", N * V)
        elif v == "group_trans":
            specs.append(("group.compose", (N * d, d), "matrix"))
            specs.append(("group.queries", (N, d), "matrix"))
            for i in range(cfg.group_trans_layers):
                layer(f"group.dec.{i}.")
            head("group.head.", V)
        return specs

    def _init_params(self, rng):
        params = OrderedDict()
        for name, shape, kind in self.parameter_specs(self.config):
            if kind == "gain":
                data = np.ones(shape, dtype=self.dtype)
            elif kind == "bias" or (kind == "head" and self.config.head_init == "zero"):
                data = np.zeros(shape, dtype=self.dtype)
            else:
                data = layers.init_matrix(rng, shape, self.dtype)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return params

    def named_parameters(self):
        return list(self.params.items())

    def arrays(self):
        """Name -> live numpy array (no copies)."""
        return {n: t.data for n, t in self.params.items()}

    def num_parameters(self):
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    @property
    def use_rope(self):
        return self.config.pos_encoding == "rotary"

    def _require(self, *variants):
        if self.config.variant not in variants:
            raise VariantError(f"operation needs variant in {variants}, model is {self.config.variant!r}")

    # -- trunk -------------------------------------------------------------------

    def _add_positions(self, x, positions):
        if self.use_rope:
            return x
        return x + Tensor(F.sinusoidal_table(positions, self.config.d_model, self.dtype))

    def _layers(self, prefix, count, x, mask, positions):
        P, H = self.params, self.config.n_heads
        for i in range(count):
            x = layers.decoder_layer(P, f"{prefix}.{i}.", x, mask, positions, H, self.use_rope)
        return x

    def _project(self, text_ids, text_mask, text_positions):
        ids = np.asarray(text_ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.V_text):
            raise IndexError(f"text token outside [0, {self.config.V_text})")
        x = self._add_positions(F.embedding(self.params["text_embed"], ids), text_positions)
        return self._layers("projector", self.config.n_projector_layers, x, text_mask, text_positions)

    def _speech_embed(self, speech_ids):
        """Backbone inputs for the speech segment, ``[B, Ls, d]``."""
        P, cfg = self.params, self.config
        if not cfg.is_group:
            return F.embedding(P["speech_embed"], speech_ids)
        B, Ls, g = speech_ids.shape
        comp = self.compose_groups(speech_ids[:, 1:])
        sos = F.embedding(P["speech_embed"], np.full((B, 1), cfg.sos_id))
        return F.concat([sos, comp], axis=1)

    def compose_groups(self, group_ids):
        """``[B, K, g]`` token ids -> ``[B, K, d]`` merged embeddings."""
        B, K, g = group_ids.shape
        emb = F.embedding(self.params["speech_embed"], group_ids)
        return F.matmul(F.reshape(emb, (B, K, g * self.config.d_model)), self.params["group.compose"])

    def encode(self, batch):
        """Backbone hidden states ``h0`` over all positions, ``[B, Lt+Ls, d]``."""
        v = self._project(batch.text_ids, batch.text_mask, batch.text_positions)
        s = self._speech_embed(batch.speech_ids)
        x = F.concat([v, self._add_positions(s, batch.positions[:, batch.Lt:])], axis=1)
        return self._layers("backbone", self.config.n_backbone_layers, x, batch.mask, batch.positions)

    # -- variant machinery on hidden states --------------------------------------

    def head_logits(self, k, h):
        return layers.output_head(self.params, f"heads.{k}.", h)

    def vocalnet_chain(self, h0, mask, positions, depth=None):
        """``[h0, h1, ...]`` with ``h^k = MTP_k(h^{k-1})`` over the full sequence."""
        depth = self.config.N if depth is None else depth
        states = [h0]
        for k in range(1, depth):
            states.append(layers.decoder_layer(self.params, f"mtp.{k}.", states[-1], mask, positions,
                                               self.config.n_heads, self.use_rope))
        return states

    def deepseek_chain(self, h0, future_tokens, mask, positions):
        """``future_tokens[k-1]`` (``[B, L]``) is the token ``k`` steps ahead of each position."""
        P = self.params
        if len(future_tokens) < self.config.N - 1:
            raise ShapeError(f"deepseek chain needs {self.config.N - 1} token streams, got {len(future_tokens)}")
        states = [h0]
        for k in range(1, self.config.N):
            e = F.embedding(P["speech_embed"], future_tokens[k - 1])
            merged = F.concat([F.rms_norm(states[-1], P[f"mtp.{k}.hid_norm"]),
                               F.rms_norm(e, P[f"mtp.{k}.emb_norm"])], axis=-1)
            x = F.matmul(merged, P[f"mtp.{k}.merge"])
            states.append(layers.decoder_layer(P, f"mtp.{k}.layer.", x, mask, positions,
                                               self.config.n_heads, self.use_rope))
        return states

    def decompose_groups(self, hg):
        """``[B, K, d]`` group hidden states -> ``[B, K, g, V]`` logits."""
        cfg, P = self.config, self.params
        B, K, d = hg.shape
        g, V = cfg.N, cfg.V_speech
        if cfg.variant == "group_linear":
            logits = layers.output_head(P, "group.decompose.", hg)
            return F.reshape(logits, (B, K, g, V))
        flat = F.reshape(hg, (B * K, 1, d))
        queries = F.add(Tensor(np.zeros((B * K, g, d), dtype=self.dtype)), P["group.queries"])
        x = F.concat([flat, queries], axis=1)
        mask = np.ones((B * K, g + 1, g + 1), dtype=bool)
        pos = np.broadcast_to(np.arange(g + 1), (B * K, g + 1))
        for i in range(cfg.group_trans_layers):
            x = layers.decoder_layer(P, f"group.dec.{i}.", x, mask, pos, cfg.n_heads, True)
        out = layers.output_head(P, "group.head.", x[:, 1:])
        return F.reshape(out, (B, K, g, V))

    def forward(self, batch, future_tokens=None):
        """Logits over the speech segment.

        Returns a list of ``[B, Ls, V]`` tensors, one per head (head ``k``
        predicts ``k + 1`` tokens ahead), or for group variants a single
        ``[B, Ls, g, V]`` tensor. ``future_tokens`` feeds the DeepSeek chain.
        """
        cfg = self.config
        h0 = self.encode(batch)
        Lt = batch.Lt
        if cfg.is_group:
            return self.decompose_groups(h0[:, Lt:])
        if cfg.variant in ("ntp", "mtp_parallel"):
            hs = h0[:, Lt:]
            return [self.head_logits(k, hs) for k in range(cfg.N)]
        if cfg.variant == "mtp_vocalnet":
            states = self.vocalnet_chain(h0, batch.mask, batch.positions)
        else:
            states = self.deepseek_chain(h0, future_tokens or [], batch.mask, batch.positions)
        return [self.head_logits(k, s[:, Lt:]) for k, s in enumerate(states)]

    # -- single-sequence API -------------------------------------------------------

    def project_text(self, text_tokens):
        """``v_LLM`` for one BOS-prefixed text sequence, ``[L_t, d]``."""
        ids = np.asarray(text_tokens, dtype=np.int64)[None]
        n = ids.shape[1]
        pos = np.arange(n)[None]
        mask = np.tril(np.ones((n, n), dtype=bool))[None]
        return F.reshape(self._project(ids, mask, pos), (n, self.config.d_model))

    def backbone_forward(self, v_llm, speech_inputs, mask):
        """``h0`` for one sequence under an :class:`~mtpslab.masks.AttnMask`."""
        cfg = self.config
        lt = v_llm.shape[0]
        if cfg.is_group:
            speech_inputs = np.asarray(speech_inputs, dtype=np.int64)
            ls = speech_inputs.shape[0]
        else:
            speech_inputs = np.asarray(speech_inputs, dtype=np.int64).reshape(-1)
            ls = len(speech_inputs)
        n = lt + ls
        bits = np.asarray(mask.bits if hasattr(mask, "bits") else mask, dtype=bool)
        if bits.shape != (n, n):
            raise ShapeError(f"mask is {bits.shape[0]}x{bits.shape[1]} but sequence has {n} positions")
        if ls and (speech_inputs.reshape(-1)[0] != cfg.sos_id):
            raise ValueError("speech inputs must begin with SOS")
        pos = np.arange(n)[None]
        s = self._speech_embed(speech_inputs[None])
        v = F.reshape(v_llm, (1, lt, cfg.d_model))
        x = F.concat([v, self._add_positions(s, pos[:, lt:])], axis=1)
        h = self._layers("backbone", cfg.n_backbone_layers, x, bits[None], pos)
        return F.reshape(h, (n, cfg.d_model))

    def mtp_chain_forward(self, h0, mask):
        self._require("mtp_vocalnet")
        n, d = h0.shape
        bits = np.asarray(mask.bits if hasattr(mask, "bits") else mask, dtype=bool)[None]
        states = self.vocalnet_chain(F.reshape(h0, (1, n, d)), bits, np.arange(n)[None])
        return [F.reshape(s, (n, d)) for s in states]

    def mtp_heads(self, states, position):
        """``p^k = Linear_k(RMSNorm(h^k[position]))`` for each depth ``k``."""
        position %= states[0].shape[0]
        return [self.head_logits(k, s[position:position + 1])[0] for k, s in enumerate(states)]

    def parallel_heads_forward(self, h0, position):
        self._require("mtp_parallel", "ntp")
        position %= h0.shape[0]
        h = h0[position:position + 1]
        return [self.head_logits(k, h)[0] for k in range(self.config.N)]

    def deepseek_chain_forward(self, h0, tokens, mask, mode="train"):
        """Chain states for one sequence.

        ``tokens[k-1][p]`` is the token fed to module ``k`` at position ``p``:
        ground truth in ``train`` mode, the previous depth's predictions in
        ``infer`` mode.
        """
        self._require("mtp_deepseek")
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be train or infer, got {mode!r}")
        n, d = h0.shape
        bits = np.asarray(mask.bits if hasattr(mask, "bits") else mask, dtype=bool)[None]
        toks = [np.asarray(t, dtype=np.int64).reshape(1, n) for t in tokens]
        states = self.deepseek_chain(F.reshape(h0, (1, n, d)), toks, bits, np.arange(n)[None])
        return [F.reshape(s, (n, d)) for s in states]

    def group_compose(self, speech_tokens, g=None):
        """Merge a flat token sequence into ``ceil(L/g)`` group embeddings."""
        self._require("group_linear", "group_trans")
        g = self.config.N if g is None else g
        if g < 1:
            raise ConfigError(f"group size must be >= 1, got {g}")
        if g != self.config.N:
            raise ConfigError(f"model was built for group size {self.config.N}, got {g}")
        toks = list(speech_tokens)
        K = -(-len(toks) // g)
        toks += [self.config.pad_id] * (K * g - len(toks))
        ids = np.asarray(toks, dtype=np.int64).reshape(1, K, g)
        return F.reshape(self.compose_groups(ids), (K, self.config.d_model))

    def group_decompose(self, group_hidden, g=None):
        """One group hidden state ``[d]`` -> ``g`` logit vectors."""
        self._require("group_linear", "group_trans")
        if g is not None and g != self.config.N:
            raise ConfigError(f"model was built for group size {self.config.N}, got {g}")
        d = self.config.d_model
        out = self.decompose_groups(F.reshape(group_hidden, (1, 1, d)))
        return [out[0, 0, j] for j in range(self.config.N)]

    # -- helpers ---------------------------------------------------------------------

    def single_batch(self, text_tokens, speech_inputs, mode="nonstreaming"):
        """A one-sample :class:`SeqBatch` (no padding)."""
        cfg = self.config
        return assemble([list(text_tokens)], [speech_inputs], [mode], cfg.C_s, cfg.C_t,
                        cfg.text_pad_id, cfg.pad_id, cfg.N if cfg.is_group else None)

    def clone(self):
        params = OrderedDict((n, Tensor(t.data.copy(), requires_grad=True, name=n)) for n, t in self.params.items())
        return DecoderModel(ModelConfig.from_dict(dict(vars(self.config))), params)

    def eval_logits(self, batch, future_tokens=None):
        with no_grad():
            out = self.forward(batch, future_tokens)
        if isinstance(out, list):
            return [t.data for t in out]
        return out.data
