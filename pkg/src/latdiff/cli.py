"""Command line front end: train, sample, eval, plot.

Everything that lands on stdout or in an output file is a pure function of
the inputs and seeds; wall-clock chatter goes to stderr so reruns diff clean.
Exit codes: 0 success, 2 configuration or checkpoint problems, 3 numerical
failures at run time.
"""

import argparse
import csv
import sys
import time

import numpy as np
import torch

from .checkpoint import apply_optimizer, apply_parameters, read_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Vocabulary, batch_iter, build_vocab, decode_text, encode, load_lines
from .errors import CheckpointError, ConfigError, LatdiffError
from .evalsuite import NGramOracle, evaluate_policy, strip_ids, train_fourgrams
from .objectives import Trainer, bpc, estimate_breakdown
from .sampler import SamplerConfig, generate


def _say(msg):
    print(msg, file=sys.stderr)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_trained(path):
    state = read_checkpoint(path)
    run, vocab_rec = state.config.get("run"), state.config.get("vocab")
    if run is None or vocab_rec is None:
        raise CheckpointError(f"{path}: missing run or vocabulary record")
    cfg = RunConfig.from_dict(run)
    model = cfg.build_model()
    apply_parameters(model, state)
    model.eval()
    vocab = Vocabulary(vocab_rec["tokens"], vocab_rec["mode"])
    return model, cfg, vocab, state


def cmd_train(args) -> int:
    cfg = RunConfig.from_ini(args.config)
    if not cfg.corpus:
        raise ConfigError("train.corpus is required to train")
    lines = load_lines(cfg.corpus)
    if not lines:
        raise ConfigError(f"corpus {cfg.corpus!r} holds no usable lines")
    vocab = build_vocab(lines, cfg.tokenizer, cfg.vocab_cap)
    cfg.vocab_size = vocab.size
    seqs = [encode(ln, vocab, cfg.seq_len) for ln in lines]

    model = cfg.build_model().init(cfg.seed)
    trainer = Trainer(model, cfg.resolved_loss_mode(), cfg.lr, seed=cfg.seed,
                      clip_norm=cfg.clip_norm, clip_start_step=cfg.clip_start_step,
                      time_mode=cfg.time_sampler)
    if args.resume:
        state = read_checkpoint(args.resume)
        saved, mine = dict(state.config.get("run") or {}), cfg.to_dict()
        saved.pop("steps", None), mine.pop("steps", None)  # only the stop point may move
        if saved != mine:
            raise ConfigError("resume checkpoint was trained under a different configuration")
        apply_parameters(model, state)
        apply_optimizer(trainer.opt, model, state)
        trainer.step_count = state.step

    history = []
    t0 = time.monotonic()
    for batch in batch_iter(seqs, cfg.batch_size, cfg.seed, start_step=trainer.step_count):
        if trainer.step_count >= cfg.steps:
            break
        stats = trainer.train_step(batch)
        history.append(stats)
        if stats["step"] % 200 == 0 or stats["step"] == cfg.steps - 1:
            _say(f"step {stats['step']} loss {stats['loss']:.4f} ({time.monotonic() - t0:.1f}s)")

    save_checkpoint(args.out, model, step=trainer.step_count,
                    config={"run": cfg.to_dict(),
                            "vocab": {"mode": vocab.mode, "tokens": list(vocab.tokens[4:])}},
                    optimizer=trainer.opt)
    if args.log:
        _write_rows(args.log, ["step", "loss", "diff", "rec", "prior"],
                    [[h["step"], h["loss"], h["diff"], h["rec"], h["prior"]] for h in history])
        print(args.log)
    print(args.out)
    return 0


def _parse_mix(raw):
    if raw is None or raw == "snr_star":
        return raw
    return float(raw)


def cmd_sample(args) -> int:
    model, _, vocab, _ = _load_trained(args.ckpt)
    scfg = SamplerConfig(args.method, args.sample_steps, noise_mix=_parse_mix(args.noise_mix),
                         tau=args.tau, seed=args.seed)
    batch = generate(model, scfg, args.count)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in batch.ids:
            fh.write(decode_text(row, vocab) + "\n")
    if args.ids_csv:
        _write_rows(args.ids_csv, [f"p{i}" for i in range(model.seq_len)], batch.ids.tolist())
        print(args.ids_csv)
    print(args.out)
    return 0


_ABLATION_GRID = (
    ("star", None),
    ("chain", 0.3),
    ("chain", 1.0),
    ("chain", "snr_star"),
    ("ode", None),
    ("sde", 0.5),
    ("sde", 1.0),
)


def cmd_eval(args) -> int:
    model, cfg, vocab, state = _load_trained(args.ckpt)
    corpus = args.corpus or cfg.corpus
    lines = load_lines(corpus)
    seqs = [encode(ln, vocab, cfg.seq_len) for ln in lines]
    t0 = time.monotonic()
    breakdown = estimate_breakdown(model, seqs, args.draws, args.seed)
    value, se = bpc(breakdown)
    _say(f"breakdown over {len(seqs)} sequences took {time.monotonic() - t0:.1f}s")
    _write_rows(args.out, ["metric", "value"], [
        ["bpc", value],
        ["bpc_se", se],
        ["diff_nats", float(breakdown.diff_nats.mean())],
        ["rec_nats", float(breakdown.rec_nats.mean())],
        ["prior_nats", float(breakdown.prior_nats.mean())],
        ["draws", args.draws],
        ["sequences", len(seqs)],
        ["term", breakdown.mode],
        ["step", state.step],
    ])
    print(args.out)

    if args.ablation:
        stripped = [strip_ids(q.ids) for q in seqs]
        oracle = NGramOracle.fit(stripped, order=3, vocab_size=vocab.size)
        grams = train_fourgrams(s[1:] for s in stripped)
        rows = []
        for method, knob in _ABLATION_GRID:
            if knob == "snr_star" and model.kind == "nfdm":
                continue
            kw = {}
            if method == "chain":
                kw["noise_mix"] = knob
            elif method == "sde":
                kw["tau"] = knob
            cfgs = [SamplerConfig(method, args.sample_steps, seed=s, **kw)
                    for s in range(args.ablation_seeds)]
            t0 = time.monotonic()
            row = evaluate_policy(model, cfgs, args.count, oracle, grams)
            _say(f"{method}/{row.knob or '-'} took {time.monotonic() - t0:.1f}s")
            rows.append([row.method, row.steps, row.knob, row.ppl, row.ppl_se,
                         row.diversity, row.memorization, value, row.seed_count])
        _write_rows(args.ablation, ["method", "steps", "knob", "ppl", "ppl_se",
                                    "diversity", "memorization", "bpc", "seed_count"], rows)
        print(args.ablation)
    return 0


def cmd_plot(args) -> int:
    from . import plotting  # matplotlib import deferred to the one command that draws

    if args.target == "ramp":
        paths = plotting.ramp_report(args.out)
    elif args.target == "cosine":
        if not args.ckpt:
            raise ConfigError("plot cosine needs --ckpt")
        model, cfg, vocab, _ = _load_trained(args.ckpt)
        lines = load_lines(args.corpus or cfg.corpus)[: args.count]
        ids = np.stack([encode(ln, vocab, cfg.seq_len).ids for ln in lines])
        with torch.no_grad():
            emb = model.embed(torch.from_numpy(ids))
        paths = plotting.cosine_report(model, emb, args.out)
    elif args.target == "history":
        if not args.log:
            raise ConfigError("plot history needs --log")
        paths = plotting.history_report(args.log, args.out)
    else:
        if not args.csv:
            raise ConfigError("plot ablation needs --csv")
        paths = plotting.ablation_report(args.csv, args.out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latdiff", description="latent text diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model from an INI config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True, help="checkpoint to write")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--log", help="CSV training log to write")
    tr.set_defaults(fn=cmd_train)

    sa = sub.add_parser("sample", help="generate text from a checkpoint")
    sa.add_argument("--ckpt", required=True)
    sa.add_argument("--out", required=True, help="text file to write")
    sa.add_argument("--method", default="star", choices=["star", "chain", "sde", "ode"])
    sa.add_argument("--sample-steps", type=int, default=200)
    sa.add_argument("--noise-mix", help="chain only: fraction in [0,1] or snr_star")
    sa.add_argument("--tau", type=float, help="sde only: volatility scale")
    sa.add_argument("--count", type=int, default=16)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--ids-csv", help="also dump raw id rows")
    sa.set_defaults(fn=cmd_sample)

    ev = sub.add_parser("eval", help="ELBO terms and sample-quality metrics")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--out", required=True, help="metrics CSV to write")
    ev.add_argument("--corpus", help="defaults to the training corpus")
    ev.add_argument("--draws", type=int, default=16)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--ablation", help="also sweep sampler policies into this CSV")
    ev.add_argument("--sample-steps", type=int, default=50)
    ev.add_argument("--count", type=int, default=64, help="samples per policy seed")
    ev.add_argument("--ablation-seeds", type=int, default=2)
    ev.set_defaults(fn=cmd_eval)

    pl = sub.add_parser("plot", help="render figures with CSV twins")
    pl.add_argument("target", choices=["ramp", "cosine", "history", "ablation"])
    pl.add_argument("--out", required=True, help="directory for figures")
    pl.add_argument("--ckpt", help="cosine: trained free-flow checkpoint")
    pl.add_argument("--corpus", help="cosine: text to embed")
    pl.add_argument("--count", type=int, default=8, help="cosine: sequences to embed")
    pl.add_argument("--log", help="history: training log CSV")
    pl.add_argument("--csv", help="ablation: sweep CSV from eval")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, OSError) as e:
        _say(f"error: {e}")
        return 2
    except LatdiffError as e:
        _say(f"error: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
