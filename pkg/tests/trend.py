"""Quality-trend experiment: train every variant on the default corpus and score it.

Run directly to populate a results directory ahead of the acceptance suite::

    python tests/trend.py /path/to/results

Each (variant, seed) run writes one JSON file; existing files are reused.
"""

import json
import statistics
import sys
import time
from pathlib import Path

from mtpslab import training as T
from mtpslab.cli import EVAL_SEED_OFFSET
from mtpslab.inference import DecodeConfig, evaluate_records
from mtpslab.model import DecoderModel, ModelConfig
from mtpslab.synthdata import DEFAULT_LEN_RANGE, SynthGrammar, make_record

SEEDS = (0, 1, 2)
CORPUS_SEED = 0
N_TRAIN = 20000
N_EVAL = 100
MODEL = dict(d_model=64, d_ff=256, n_heads=4, n_backbone_layers=4, n_projector_layers=2)
TRAIN = dict(total_steps=2500, batch_size=16, lr=3e-3)
MAX_TOKENS = 200

# name -> (variant, N, speedup ratios evaluated)
RUNS = {
    "NTP": ("ntp", 1, (1,)),
    "MTP-VocalNet": ("mtp_vocalnet", 5, (1, 3, 5)),
    "MTP-Parallel": ("mtp_parallel", 5, (1, 3, 5)),
    "MTP-DeepSeek": ("mtp_deepseek", 5, (1, 3, 5)),
    "Group-Linear-3": ("group_linear", 3, (3,)),
    "Group-Linear-5": ("group_linear", 5, (5,)),
}


def corpora(grammar):
    train = [make_record(grammar, i, DEFAULT_LEN_RANGE, CORPUS_SEED) for i in range(N_TRAIN)]
    held = [make_record(grammar, i, DEFAULT_LEN_RANGE, CORPUS_SEED + EVAL_SEED_OFFSET) for i in range(N_EVAL)]
    return train, held


def run_one(name, seed, grammar, train, held, log=print):
    variant, N, ms = RUNS[name]
    cfg = ModelConfig.for_grammar(grammar, variant=variant, N=N, init_seed=seed, **MODEL)
    model = DecoderModel(cfg)
    t0 = time.perf_counter()
    res = T.train(model, train, T.TrainConfig(seed=seed, **TRAIN))
    train_s = time.perf_counter() - t0
    recon = {}
    for m in ms:
        dc = DecodeConfig(m=None if cfg.is_group else m, max_speech_tokens=MAX_TOKENS)
        _, summary = evaluate_records(model, grammar, held, dc)
        recon[str(m)] = summary["mean_recon_error"]
    log(f"{name} seed={seed} train={train_s:.0f}s final_loss={res.final_loss:.4f} recon={recon}")
    return {"name": name, "seed": seed, "train_s": train_s, "final_loss": res.final_loss, "recon": recon}


def run_all(out_dir=None, log=print):
    """Return ``{name: {m: [recon per seed]}}``, training whatever is not cached in ``out_dir``."""
    grammar = SynthGrammar()
    data = None
    results = {}
    for name in RUNS:
        for seed in SEEDS:
            path = Path(out_dir) / f"{name}_seed{seed}.json" if out_dir else None
            if path is not None and path.exists():
                row = json.loads(path.read_text())
            else:
                if data is None:
                    data = corpora(grammar)
                row = run_one(name, seed, grammar, *data, log=log)
                if path is not None:
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(json.dumps(row, sort_keys=True))
            for m, err in row["recon"].items():
                results.setdefault(name, {}).setdefault(int(m), []).append(err)
    return results


def medians(results):
    return {name: {m: statistics.median(v) for m, v in per.items()} for name, per in results.items()}


if __name__ == "__main__":
    res = medians(run_all(sys.argv[1] if len(sys.argv) > 1 else None))
    print(json.dumps({k: {str(m): v for m, v in d.items()} for k, d in res.items()}, indent=2))
