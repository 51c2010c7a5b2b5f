import json

import numpy as np
import pytest

from mtpslab import masks as M
from mtpslab import training as T
from mtpslab.errors import ConfigError, ShapeError, VariantError
from mtpslab.model import (
    BadMagicError,
    ChecksumError,
    DecoderModel,
    LayoutError,
    ModelConfig,
    TruncatedError,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from mtpslab.model import checkpoint as ckpt
from mtpslab.numerics import Tensor

from helpers import GRAMMAR, records, tiny_config, tiny_model


def share_params(src, dst):
    """Copy every same-named parameter of ``src`` into ``dst``."""
    for name, t in dst.params.items():
        if name in src.params:
            t.data[...] = src.params[name].data


@pytest.fixture(scope="module")
def trained_vocalnet():
    model = tiny_model("mtp_vocalnet", 3, dtype="f32", seed=3)
    T.train(model, records(200), T.TrainConfig(total_steps=60, batch_size=4, lr=3e-3))
    return model


def nonstreaming(lt, ls):
    return M.build_nonstreaming_mask(M.SequenceLayout(lt, ls))


# -- config -----------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config("ntp", 2)
    with pytest.raises(ConfigError):
        tiny_config("mtp_vocalnet", 0)
    with pytest.raises(ConfigError):
        tiny_config(lam=1.0)
    with pytest.raises(ConfigError):
        tiny_config(d_model=18, n_heads=4)
    with pytest.raises(ConfigError):
        tiny_config("tree")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 8, "colour": "red"})


def test_special_ids_match_grammar():
    cfg = tiny_config()
    assert (cfg.sos_id, cfg.eos_id, cfg.pad_id) == (GRAMMAR.SOS, GRAMMAR.EOS, GRAMMAR.PAD)
    assert (cfg.bos_id, cfg.text_pad_id) == (GRAMMAR.BOS, GRAMMAR.TEXT_PAD)


def test_config_json_canonical():
    cfg = tiny_config("mtp_deepseek", 3)
    text = cfg.to_json()
    assert list(json.loads(text)) == sorted(json.loads(text))
    assert ModelConfig.from_json(text) == cfg


# -- trunk ------------------------------------------------------------------------

def test_project_text_shapes_and_purity():
    model = tiny_model()
    v = model.project_text([GRAMMAR.BOS])
    assert v.shape == (1, 16)
    np.testing.assert_array_equal(model.project_text([16, 3, 4]).data, model.project_text([16, 3, 4]).data)


def test_project_text_mixes_order(trained_vocalnet):
    a = trained_vocalnet.project_text([16, 3, 9]).data
    b = trained_vocalnet.project_text([16, 9, 3]).data
    assert not np.allclose(a, b)


def test_backbone_shapes_and_errors():
    model = tiny_model()
    v = model.project_text([16, 2])
    assert model.backbone_forward(v, [GRAMMAR.SOS], nonstreaming(2, 1)).shape == (3, 16)
    with pytest.raises(ShapeError):
        model.backbone_forward(v, [GRAMMAR.SOS], nonstreaming(2, 2))
    with pytest.raises(ValueError):
        model.backbone_forward(v, [5], nonstreaming(2, 1))
    with pytest.raises(IndexError):
        model.project_text([16, 40])


@pytest.mark.parametrize("mode", [M.NONSTREAMING, M.STREAMING])
def test_masked_positions_do_not_leak(mode):
    model = tiny_model(seed=1)
    text, speech = [16, 3, 5, 7, 1, 2], [GRAMMAR.SOS, 18, 19, 20, 24, 25, 26]
    lt, ls = len(text), len(speech)
    mask = M.build_mask(M.SequenceLayout(lt, ls), mode, M.ChunkSchedule(3, 2))
    base = model.backbone_forward(model.project_text(text), speech, mask).data
    for target in range(lt + ls):
        hidden = [j for j in range(lt + ls) if not mask.bits[target, j]]
        if not hidden:
            continue
        v = model.project_text(text).data.copy()
        alt = list(speech)
        sp_emb = model.params["speech_embed"].data
        saved = sp_emb.copy()
        for j in hidden:
            if j < lt:
                v[j] = 0.0
            elif j == lt:
                sp_emb[GRAMMAR.SOS] += 1.0  # SOS occurs only here
            else:
                alt[j - lt] = GRAMMAR.PAD
        out = model.backbone_forward(Tensor(v), alt, mask).data
        sp_emb[...] = saved
        assert np.array_equal(out[target], base[target])


# -- heads and chains -------------------------------------------------------------

def test_zero_heads_give_uniform():
    model = DecoderModel(tiny_config("mtp_parallel", 3, head_init="zero"))
    h = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    for lg in model.parallel_heads_forward(h, 2):
        assert lg.shape == (GRAMMAR.V_speech,)
        assert np.all(lg.data == 0.0)


@pytest.mark.parametrize("variant", ["mtp_parallel", "mtp_vocalnet"])
def test_head_isolation(variant):
    model = tiny_model(variant, 3, seed=2)
    tb = T.make_batch(model.config, [(r.text_tokens, r.speech_tokens) for r in records(3)], [False, True, False])
    before = model.eval_logits(tb.seq)
    model.params["heads.2.weight"].data += 0.5
    model.params["heads.2.bias"].data -= 0.1
    after = model.eval_logits(tb.seq)
    for k in (0, 1):
        assert np.array_equal(before[k], after[k])
    assert not np.array_equal(before[2], after[2])


def test_vocalnet_chain(trained_vocalnet):
    m = trained_vocalnet
    h = Tensor(np.random.default_rng(0).normal(size=(5, 16)).astype(np.float32))
    mask = nonstreaming(2, 3)
    states = m.mtp_chain_forward(h, mask)
    assert len(states) == 3
    assert np.array_equal(states[0].data, h.data)
    for a, b in zip(states, states[1:]):
        assert not np.allclose(a.data, b.data)
    one = tiny_model("mtp_vocalnet", 1)
    assert len(one.mtp_chain_forward(Tensor(np.zeros((3, 16))), nonstreaming(2, 1))) == 1
    assert len(m.mtp_heads(states, -1)) == 3


def test_parallel_heads_are_causal():
    model = tiny_model("mtp_parallel", 3, seed=4)
    text, speech = [16, 4, 8], [GRAMMAR.SOS, 24, 25, 26]
    mask = nonstreaming(3, 4)
    h = model.backbone_forward(model.project_text(text), speech, mask)
    h2 = model.backbone_forward(model.project_text(text), speech[:3] + [GRAMMAR.PAD], mask)
    p = [x.data for x in model.parallel_heads_forward(h, 4)]
    p2 = [x.data for x in model.parallel_heads_forward(h2, 4)]
    assert all(np.array_equal(a, b) for a, b in zip(p, p2))


def test_deepseek_chain_modes():
    model = tiny_model("mtp_deepseek", 3, seed=5)
    h = Tensor(np.random.default_rng(1).normal(size=(4, 16)))
    toks = [[1, 2, 3, 4], [5, 6, 7, 8]]
    states = model.deepseek_chain_forward(h, toks, nonstreaming(1, 3), mode="train")
    assert len(states) == 3
    again = model.deepseek_chain_forward(h, toks, nonstreaming(1, 3), mode="infer")
    assert all(np.array_equal(a.data, b.data) for a, b in zip(states, again))
    with pytest.raises(ShapeError):
        model.deepseek_chain_forward(h, toks[:1], nonstreaming(1, 3))
    with pytest.raises(ValueError):
        model.deepseek_chain_forward(h, toks, nonstreaming(1, 3), mode="guess")
    with pytest.raises(VariantError):
        tiny_model("ntp").deepseek_chain_forward(h, toks, nonstreaming(1, 3))


def test_deepseek_training_consumes_shifted_streams():
    cfg = tiny_config("mtp_deepseek", 4)
    text, speech = [3, 4], [18, 19, 24, 25, GRAMMAR.EOS]
    tb = T.make_batch(cfg, [(text, speech)], [False])
    assert len(tb.future) == 3
    lt = tb.seq.Lt
    for k, stream in enumerate(tb.future, 1):
        assert np.all(stream[0, :lt] == cfg.pad_id)
        expect = speech[k - 1:] + [cfg.pad_id] * (k - 1)
        assert stream[0, lt:].tolist() == expect


# -- groups -----------------------------------------------------------------------

def test_group_compose_padding():
    model = tiny_model("group_linear", 3)
    assert model.group_compose([1, 2, 3, 4, 5, 6]).shape == (2, 16)
    seven = model.group_compose([1, 2, 3, 4, 5, 6, 7]).data
    manual = model.group_compose([1, 2, 3, 4, 5, 6, 7, GRAMMAR.PAD, GRAMMAR.PAD]).data
    assert seven.shape == (3, 16)
    np.testing.assert_array_equal(seven, manual)
    with pytest.raises(ConfigError):
        model.group_compose([1, 2], g=2)


def test_group_decompose_slices():
    model = tiny_model("group_linear", 3, seed=6)
    h = Tensor(np.random.default_rng(2).normal(size=16))
    before = [x.data for x in model.group_decompose(h)]
    assert len(before) == 3 and before[0].shape == (GRAMMAR.V_speech,)
    V = GRAMMAR.V_speech
    model.params["group.decompose.weight"].data[:, V:2 * V] += 1.0
    after = [x.data for x in model.group_decompose(h)]
    assert np.array_equal(before[0], after[0]) and np.array_equal(before[2], after[2])
    assert not np.array_equal(before[1], after[1])
    trans = tiny_model("group_trans", 2)
    assert len(trans.group_decompose(h)) == 2


def test_group_g1_compose_is_linear_reembedding():
    model = tiny_model("group_linear", 1, seed=7)
    out = model.group_compose([3, 4]).data
    emb = model.params["speech_embed"].data[[3, 4]]
    np.testing.assert_allclose(out, emb @ model.params["group.compose"].data, rtol=1e-12)


# -- reductions -------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["mtp_vocalnet", "mtp_parallel", "mtp_deepseek", "group_linear"])
def test_reduction_to_ntp_forward(variant):
    ntp = tiny_model("ntp", 1, seed=8)
    other = tiny_model(variant, 1, seed=9)
    share_params(ntp, other)
    if variant == "group_linear":
        other.params["group.compose"].data[...] = np.eye(16)
        for part in ("norm", "weight", "bias"):
            other.params[f"group.decompose.{part}"].data[...] = ntp.params[f"heads.0.{part}"].data
    samples = [(r.text_tokens, r.speech_tokens) for r in records(4, seed=3)]
    flags = [False, True, True, False]
    a = ntp.eval_logits(T.make_batch(ntp.config, samples, flags).seq)[0]
    tb = T.make_batch(other.config, samples, flags)
    b = other.eval_logits(tb.seq, tb.future)
    b = b[:, :, 0] if variant == "group_linear" else b[0]
    keep = T.make_batch(ntp.config, samples, flags).targets != -100
    np.testing.assert_allclose(b[keep], a[keep], rtol=0, atol=1e-10)


# -- checkpoints ------------------------------------------------------------------

@pytest.mark.parametrize("variant,N", [("ntp", 1), ("mtp_deepseek", 3), ("group_trans", 2)])
def test_checkpoint_round_trip(tmp_path, variant, N):
    model = tiny_model(variant, N, dtype="f32", seed=10)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert list(loaded.params) == list(model.params)
    assert loaded.config == model.config


def test_checkpoint_corruption_detected(tmp_path):
    model = tiny_model("mtp_vocalnet", 2, seed=11)
    data = ckpt.dumps(model)
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(data), size=60, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 0xFF
        with pytest.raises((ckpt.CheckpointError, ShapeError, ConfigError)):
            ckpt.loads(bytes(bad))
    with pytest.raises(BadMagicError):
        ckpt.loads(b"NOTACKPT" + data[8:])
    with pytest.raises(VersionError):
        ckpt.loads(data[:8] + (7).to_bytes(4, "little") + data[12:])
    with pytest.raises(TruncatedError):
        ckpt.loads(data[:-3])
    with pytest.raises(LayoutError):
        ckpt.loads(data + b"\0")


def test_checksum_error_on_payload_byte(tmp_path):
    model = tiny_model("ntp", 1, seed=12)
    data = bytearray(ckpt.dumps(model))
    data[-10] ^= 0x01  # inside the last payload
    with pytest.raises(ChecksumError):
        ckpt.loads(bytes(data))


def test_checkpoint_io_errors(tmp_path):
    with pytest.raises(OSError, match="nope"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_registry_mismatch():
    model = tiny_model("ntp", 1)
    with pytest.raises(ShapeError):
        DecoderModel(tiny_config("mtp_parallel", 2), model.params)
