"""Command-line entry point: ``mtpslab <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 numeric failure.
"""

import argparse
import csv
import datetime
import json
import os
import sys
from dataclasses import asdict

from . import __version__
from . import masks as M
from . import synthdata
from .errors import ConfigError, NumericError
from .inference import DecodeConfig, bench_latency, entropy_stats, evaluate_records, generate
from .model import CheckpointError, DecoderModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_SCHEMA_VERSION = 1
EVAL_SEED_OFFSET = 2**31


class UsageError(Exception):
    pass


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(out_dir, command, config, seed, artifacts, started):
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": command,
        "config": json.loads(json.dumps(config, sort_keys=True)),
        "seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _mkdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc


def _write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _threads():
    raw = os.environ.get("MTPSLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MTPSLAB_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("MTPSLAB_THREADS must be >= 1")
    return n


# -- gen-data --------------------------------------------------------------------

def cmd_gen_data(args):
    started = _now()
    grammar = synthdata.SynthGrammar(T=args.T, R_max=args.r_max, p_ext=args.p_ext)
    _mkdir(args.out)
    train_path = os.path.join(args.out, "train.jsonl")
    eval_path = os.path.join(args.out, "eval.jsonl")
    lr = tuple(args.len_range)
    synthdata.gen_corpus(grammar, args.n_train, lr, args.seed, train_path)
    synthdata.gen_corpus(grammar, args.n_eval, lr, args.seed + EVAL_SEED_OFFSET, eval_path)
    cfg = {"grammar": grammar.to_json(), "n_train": args.n_train, "n_eval": args.n_eval,
           "len_range": list(lr), "seed": args.seed, "eval_seed": args.seed + EVAL_SEED_OFFSET}
    write_manifest(args.out, "gen-data", cfg, args.seed, {"train": train_path, "eval": eval_path}, started)
    print(f"wrote {train_path} ({args.n_train} records) and {eval_path} ({args.n_eval} records)")
    return EXIT_OK


# -- train -------------------------------------------------------------------------

def model_config_from_args(args, grammar):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    else:
        base = {}
    n = args.n if args.n is not None else args.g
    if args.n is not None and args.g is not None:
        raise UsageError("give --n for MTP variants or --g for group variants, not both")
    flags = {
        "variant": args.variant, "N": n, "lam": args.lam, "C_s": args.cs, "C_t": args.ct,
        "d_model": args.d_model, "n_heads": args.n_heads, "d_ff": args.d_ff,
        "n_backbone_layers": args.backbone_layers, "n_projector_layers": args.projector_layers,
        "dtype": args.dtype, "mask_mode_mix": args.mask_mix, "init_seed": args.seed,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    if base.get("N") is None:
        base["N"] = 1
    if base["variant"] in ("group_linear", "group_trans") and args.n is not None:
        raise UsageError("group variants take --g, not --n")
    if base["variant"] not in ("group_linear", "group_trans") and args.g is not None:
        raise UsageError("--g applies only to group variants")
    return ModelConfig.for_grammar(grammar, **base)


def cmd_train(args):
    started = _now()
    grammar, _, records = synthdata.load_corpus(args.corpus)
    mcfg = model_config_from_args(args, grammar)
    tcfg = TrainConfig(lr=args.lr, warmup_ratio=args.warmup_ratio, total_steps=args.steps,
                       batch_size=args.batch_size, seed=args.seed, lam=mcfg.lam,
                       mask_mode_mix=mcfg.mask_mode_mix, eval_every=args.eval_every,
                       checkpoint_dir=args.out if args.eval_every else None)
    _mkdir(args.out)
    model = DecoderModel(mcfg)
    log_path = os.path.join(args.out, "train_log.csv")
    ckpt = os.path.join(args.out, "model.ckpt")
    result = train(model, records, tcfg, log_path=log_path)
    save_checkpoint(model, ckpt)
    cfg = {"model": json.loads(mcfg.to_json()), "train": asdict(tcfg), "corpus": args.corpus}
    write_manifest(args.out, "train", cfg, args.seed, {"checkpoint": ckpt, "log": log_path}, started)
    print(f"trained {mcfg.variant} for {result.steps} steps, final loss {result.final_loss:.4f}; wrote {ckpt}")
    return EXIT_OK


# -- generate / eval -------------------------------------------------------------------

def decode_config_from_args(args):
    return DecodeConfig(mode=args.mode, temperature=args.temperature, seed=args.seed,
                        max_speech_tokens=args.max_tokens, min_speech_tokens=args.min_tokens,
                        m=args.m, streaming=args.streaming, C_s=args.cs, C_t=args.ct)


def cmd_generate(args):
    model = load_checkpoint(args.checkpoint)
    cfg = decode_config_from_args(args)
    cfg.resolved(model.config)
    text = [model.config.bos_id] + [int(t) for t in args.text]
    tokens, rep = generate(model, text, cfg)
    print(" ".join(str(t) for t in tokens))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(rep.to_json() + "\n")
    return EXIT_OK


EVAL_COLUMNS = ["record_id", "recon_error", "tokens", "backbone_forwards", "wall_ms"]


def cmd_eval(args):
    started = _now()
    model = load_checkpoint(args.checkpoint)
    grammar, _, records = synthdata.load_corpus(args.corpus)
    if args.limit:
        records = records[:args.limit]
    cfg = decode_config_from_args(args)
    cfg.resolved(model.config)
    _mkdir(args.out)
    rows, summary = evaluate_records(model, grammar, records, cfg)
    metrics = os.path.join(args.out, "metrics.csv")
    summ = os.path.join(args.out, "summary.json")
    _write_csv(metrics, [{**r, "schema_version": 1} for r in rows], ["schema_version"] + EVAL_COLUMNS)
    _write_json(summ, summary)
    write_manifest(args.out, "eval", {"decode": asdict(cfg), "checkpoint": args.checkpoint,
                                      "corpus": args.corpus, "limit": args.limit},
                   args.seed, {"metrics": metrics, "summary": summ}, started)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------------

def cmd_analyze(args):
    started = _now()
    model = load_checkpoint(args.checkpoint)
    _, _, records = synthdata.load_corpus(args.corpus)
    _mkdir(args.out)
    rep = entropy_stats(model, records, args.n_tokens)
    hist = os.path.join(args.out, "histograms.csv")
    rows = []
    for name, edges, counts in (("max_prob", rep.max_prob_edges, rep.max_prob_counts),
                                ("entropy", rep.entropy_edges, rep.entropy_counts)):
        for i, c in enumerate(counts):
            rows.append({"schema_version": 1, "quantity": name, "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": c})
    _write_csv(hist, rows, ["schema_version", "quantity", "bin_lo", "bin_hi", "count"])
    stats = os.path.join(args.out, "stats.json")
    _write_json(stats, {"schema_version": rep.schema_version, "n_tokens": rep.n_tokens,
                        "mean_max_prob": rep.mean_max_prob, "mean_entropy": rep.mean_entropy})
    write_manifest(args.out, "analyze", {"checkpoint": args.checkpoint, "corpus": args.corpus,
                                         "n_tokens": args.n_tokens}, None,
                   {"histograms": hist, "stats": stats}, started)
    print(f"mean_max_prob={rep.mean_max_prob:.4f} mean_entropy={rep.mean_entropy:.4f} over {rep.n_tokens} tokens")
    return EXIT_OK


# -- bench -----------------------------------------------------------------------------

BENCH_COLUMNS = ["schema_version", "checkpoint", "method", "module_num_or_group_size", "m", "speedup_ratio",
                 "recon_error", "median_wall_ms", "median_ms_per_token", "realized_speedup", "speedup_baseline"]
METHOD_NAMES = {"ntp": "NTP", "mtp_parallel": "MTP-Parallel", "mtp_vocalnet": "MTP-VocalNet",
                "mtp_deepseek": "MTP-DeepSeek", "group_linear": "Group-Linear", "group_trans": "Group-Trans"}


def bench_rows(models, grammar, records, m_values, base_cfg, n_trials, warmup):
    """One row per (checkpoint, m); realized speedup is against the NTP checkpoint when
    one is present, otherwise against m=1 on the same checkpoint."""
    prompts = [[grammar.BOS] + list(r.text_tokens) for r in records]
    runs = []
    for path, model in models:
        mc = model.config
        ms = [mc.N] if mc.is_group else ([1] if mc.variant == "ntp" else [m for m in m_values if m <= mc.N])
        for m in ms:
            cfg = DecodeConfig(**{**asdict(base_cfg), "m": m})
            _, summary = evaluate_records(model, grammar, records, cfg)
            lat = bench_latency(model, cfg, prompts, n_trials=n_trials, warmup=warmup, baseline=False)
            runs.append((path, mc, m, summary, lat))
    ntp = [r for r in runs if r[1].variant == "ntp"]
    rows = []
    for path, mc, m, summary, lat in runs:
        if ntp:
            base, label = ntp[0][4].median_ms_per_token, "ntp"
        else:
            same = [r for r in runs if r[0] == path and r[2] == 1]
            base, label = (same[0][4].median_ms_per_token, "m1") if same else (None, "none")
        rows.append({
            "schema_version": 1, "checkpoint": path, "method": METHOD_NAMES[mc.variant],
            "module_num_or_group_size": mc.N, "m": m, "speedup_ratio": lat.tokens_per_forward,
            "recon_error": summary["mean_recon_error"], "median_wall_ms": summary["median_wall_ms"],
            "median_ms_per_token": lat.median_ms_per_token,
            "realized_speedup": base / lat.median_ms_per_token if base else "",
            "speedup_baseline": label,
        })
    return rows


def cmd_bench(args):
    started = _now()
    models = [(p, load_checkpoint(p)) for p in args.checkpoint]
    grammar, _, records = synthdata.load_corpus(args.corpus)
    records = records[:args.limit] if args.limit else records
    base = decode_config_from_args(args)
    base.m = None
    _mkdir(args.out)
    rows = bench_rows(models, grammar, records, args.m_values, base, args.trials, args.warmup)
    table = os.path.join(args.out, "bench.csv")
    _write_csv(table, rows, BENCH_COLUMNS)
    write_manifest(args.out, "bench", {"checkpoints": args.checkpoint, "corpus": args.corpus,
                                       "m_values": args.m_values, "decode": asdict(base),
                                       "trials": args.trials, "warmup": args.warmup, "limit": args.limit},
                   args.seed, {"table": table}, started)
    for r in rows:
        print(f"{r['method']:<14} N/g={r['module_num_or_group_size']} m={r['m']} "
              f"ratio={r['speedup_ratio']:.2f} recon={r['recon_error']:.4f}")
    return EXIT_OK


# -- masks print -------------------------------------------------------------------------

def cmd_masks(args):
    if args.masks_cmd != "print":
        raise UsageError("usage: mtpslab masks print --lt N --ls N [--mode ...]")
    layout = M.SequenceLayout(args.lt, args.ls)
    print(M.render(M.build_mask(layout, args.mode, M.ChunkSchedule(args.cs, args.ct))))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def _add_decode_flags(p):
    p.add_argument("--m", type=int, default=None, help="tokens accepted per backbone step")
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--min-tokens", type=int, default=0, help="suppress EOS before this many tokens")
    p.add_argument("--streaming", action="store_true")
    p.add_argument("--cs", type=int, default=None)
    p.add_argument("--ct", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="mtpslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mtpslab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/eval synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=20000)
    p.add_argument("--n-eval", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--len-range", type=int, nargs=2, default=list(synthdata.DEFAULT_LEN_RANGE), metavar=("LO", "HI"))
    p.add_argument("--T", type=int, default=16)
    p.add_argument("--r-max", type=int, default=6)
    p.add_argument("--p-ext", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config JSON; flags override it")
    p.add_argument("--variant", default="ntp", choices=sorted(METHOD_NAMES))
    p.add_argument("--n", type=int, default=None, help="tokens predicted per step (MTP variants)")
    p.add_argument("--g", type=int, default=None, help="group size (group variants)")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--cs", type=int, default=None)
    p.add_argument("--ct", type=int, default=None)
    p.add_argument("--mask-mix", type=float, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--backbone-layers", type=int, default=None)
    p.add_argument("--projector-layers", type=int, default=None)
    p.add_argument("--dtype", choices=["f32", "f64"], default=None)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--warmup-ratio", type=float, default=0.03)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate speech tokens for one text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", type=int, nargs="*", default=[], help="text symbols (BOS is added)")
    p.add_argument("--report", help="write the GenerationReport JSON here")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="generate for a corpus and score reconstruction error")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="max-probability and entropy statistics of head 0")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-tokens", type=int, default=70000)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="variant comparison table")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m-values", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    _add_decode_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("masks", help="mask utilities")
    p.add_argument("masks_cmd", choices=["print"])
    p.add_argument("--lt", type=int, required=True)
    p.add_argument("--ls", type=int, required=True)
    p.add_argument("--mode", choices=list(M.MODES), default=M.NONSTREAMING)
    p.add_argument("--cs", type=int, default=15)
    p.add_argument("--ct", type=int, default=5)
    p.set_defaults(func=cmd_masks)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except NumericError as exc:
        print(f"mtpslab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"mtpslab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ValueError, IndexError) as exc:
        print(f"mtpslab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
