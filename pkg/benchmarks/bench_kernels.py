"""Compare the compiled kernels against the numpy fallback.

Times each kernel at shapes seen during desk-scale training, then one training
step and one greedy generation end to end under each backend.

    python benchmarks/bench_kernels.py --repeat 50 --csv kernels.csv
"""

import argparse
import csv
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from mtpslab import kernels
from mtpslab import training as T
from mtpslab.inference import DecodeConfig, generate
from mtpslab.model import DecoderModel, ModelConfig
from mtpslab.synthdata import DEFAULT_LEN_RANGE, SynthGrammar, make_record


def kernel_cases(rng, dtype):
    rows, width, d, vocab = 16 * 4 * 40, 40, 64, 99
    scores = rng.normal(size=(rows, width)).astype(dtype)
    mask = np.tril(np.ones((40, 40), dtype=bool))
    mask = np.tile(mask, (rows // 40, 1))
    x = rng.normal(size=(16 * 40, d)).astype(dtype)
    gain = rng.normal(size=d).astype(dtype)
    h = rng.normal(size=(16 * 40, 2 * 256)).astype(dtype)
    logits = rng.normal(size=(16 * 40, vocab)).astype(dtype)
    targets = rng.integers(0, vocab, size=16 * 40)
    p = np.exp(scores) / np.exp(scores).sum(1, keepdims=True)
    inv = (1.0 / np.sqrt((x * x).mean(1) + 1e-6)).astype(dtype)
    n = 200_000
    param, grad = rng.normal(size=n).astype(dtype), rng.normal(size=n).astype(dtype)
    m, v = np.zeros(n, dtype), np.zeros(n, dtype)
    a, b = rng.integers(0, 16, size=60), rng.integers(0, 16, size=60)
    return {
        "masked_softmax": lambda: kernels.masked_softmax(scores, mask),
        "softmax_backward": lambda: kernels.softmax_backward(p, scores),
        "rms_norm_fwd": lambda: kernels.rms_norm_fwd(x, gain, 1e-6),
        "rms_norm_bwd": lambda: kernels.rms_norm_bwd(x, x, gain, inv),
        "swiglu_fwd": lambda: kernels.swiglu_fwd(h),
        "swiglu_bwd": lambda: kernels.swiglu_bwd(h[:, :256].copy(), h),
        "cross_entropy": lambda: kernels.cross_entropy(logits, targets, -100),
        "adam_update": lambda: kernels.adam_update(param, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.0, 0.1, 0.001),
        "levenshtein": lambda: kernels.levenshtein(a, b),
    }


def end_to_end_cases():
    grammar = SynthGrammar()
    recs = [make_record(grammar, i, DEFAULT_LEN_RANGE, 0) for i in range(64)]
    cfg = ModelConfig.for_grammar(grammar, variant="mtp_vocalnet", N=5, d_model=64, d_ff=256,
                                  head_init="normal")
    model = DecoderModel(cfg)
    tb = T.make_batch(cfg, [(r.text_tokens, r.speech_tokens) for r in recs[:16]], [False, True] * 8)
    text = [grammar.BOS] + recs[0].text_tokens

    def train_step():
        model.zero_grad()
        loss, _ = T.variant_loss(model, tb)
        from mtpslab.numerics import backward
        backward(loss)

    def decode():
        generate(model, text, DecodeConfig(m=1, max_speech_tokens=64, min_speech_tokens=64))

    return {"train_step (B=16, N=5)": train_step, "greedy decode (64 tokens)": decode}


def best_ms(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args(argv)

    if "compiled" not in kernels.available_backends():
        print("compiled extension not built; run `python setup.py build_ext --inplace`", file=sys.stderr)
        return 1
    dtype = np.float32 if args.dtype == "f32" else np.float64
    rng = np.random.default_rng(0)
    rows = []
    with threadpool_limits(1):
        groups = [(kernel_cases(rng, dtype), 10), (end_to_end_cases(), 1)]
        for cases, number in groups:
            for name, fn in cases.items():
                times = {}
                for backend in ("python", "compiled"):
                    with kernels.use_backend(backend):
                        fn()  # warm caches
                        times[backend] = best_ms(fn, args.repeat, number)
                rows.append((name, times["python"], times["compiled"], times["python"] / times["compiled"]))

    print(f"{'case':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, py, co, ratio in rows:
        print(f"{name:<28}{py:>12.4f}{co:>14.4f}{ratio:>9.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "python_ms", "compiled_ms", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
