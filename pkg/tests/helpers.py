"""Shared builders for the test suite."""

import numpy as np

from mtpslab.model import DecoderModel, ModelConfig
from mtpslab.numerics import backward
from mtpslab.synthdata import SynthGrammar, make_record

GRAMMAR = SynthGrammar()


def tiny_config(variant="ntp", N=1, dtype="f64", **kw):
    base = dict(d_model=16, n_heads=2, d_ff=24, n_backbone_layers=2, n_projector_layers=1,
                C_s=3, C_t=2, dtype=dtype, head_init="normal")
    base.update(kw)
    return ModelConfig.for_grammar(GRAMMAR, variant=variant, N=N, **base)


def tiny_model(variant="ntp", N=1, dtype="f64", seed=0, **kw):
    return DecoderModel(tiny_config(variant, N, dtype, init_seed=seed, **kw))


def records(n, len_range=(2, 6), seed=0):
    return [make_record(GRAMMAR, i, len_range, seed) for i in range(n)]


def central_difference(loss_fn, tensor, index, h=1e-5):
    old = tensor.data[index]
    tensor.data[index] = old + h
    up = loss_fn()
    tensor.data[index] = old - h
    down = loss_fn()
    tensor.data[index] = old
    return (up - down) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(build_loss, params, n_samples, rng, h=1e-5):
    """Largest relative error between taped and finite-difference gradients.

    ``build_loss()`` returns a scalar Tensor over ``params`` (name -> Tensor);
    ``n_samples`` entries are drawn across each named parameter.
    """
    for t in params.values():
        t.grad = None
    loss = build_loss()
    backward(loss)
    worst = 0.0
    checked = 0
    for name, t in params.items():
        flat = rng.choice(t.data.size, size=min(n_samples, t.data.size), replace=False)
        for f in flat:
            idx = np.unravel_index(f, t.data.shape)
            analytic = float(t.grad[idx])
            numeric = central_difference(lambda: float(build_loss().data), t, idx, h)
            worst = max(worst, relative_error(analytic, numeric))
            checked += 1
    return worst, checked
