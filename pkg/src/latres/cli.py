"""Command line interface: ``latres <command> ...``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from latres import __version__
from latres.channel import Dataset, generate_corpus, load_dataset, save_dataset
from latres.config import RunConfig, load_run_config, resolve_seed
from latres.errors import ConfigError, DataError, LatresError
from latres.evaluate import evaluate, lambda_sweep, oracle_wer, tune_lambda
from latres.lattice import count_paths, enumerate_paths, format_lattice_text, parse_lattice_text, prune_to_nbest
from latres.model import (
    EncoderSpec,
    ModelConfig,
    RescoringModel,
    ScoredHypothesis,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    score_hypotheses,
    vocabulary_for,
)
from latres.transform import edge_to_node_lattice, format_forward_normalized, format_node_lattice, forward_normalize

log = logging.getLogger("latres")


class UsageError(Exception):
    """Bad arguments that argparse cannot catch (exit code 2)."""


# ---------------------------------------------------------------------------
# helpers


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p.read_text(encoding="utf-8")


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _load_data(path: str) -> Dataset:
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return load_dataset(path)


def _load_model(path: str) -> RescoringModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _split(ds: Dataset, name: str):
    if name not in ds.splits:
        raise UsageError(f"unknown split {name!r}")
    if not ds.splits[name]:
        raise UsageError(f"split {name!r} is empty")
    return ds.splits[name]


def _config_with_overrides(args: argparse.Namespace) -> RunConfig:
    """Config file values, then command-line flags on top (flags win)."""
    cfg = load_run_config(getattr(args, "config", None))
    raw = cfg.to_dict()
    enc = raw["encoder"]
    if getattr(args, "encoder", None) is not None:
        enc["kind"] = args.encoder
    if getattr(args, "companion", None) is not None:
        enc["companion"] = None if args.companion == "none" else args.companion
    if getattr(args, "mechanisms", None) is not None:
        enc["mechanisms"] = [m for m in args.mechanisms.split(",") if m and m != "none"]
    if getattr(args, "lattice_nbest", None) is not None:
        enc["lattice_nbest"] = args.lattice_nbest
    tr = raw["train"]
    if getattr(args, "epochs", None) is not None:
        tr["mle_epochs"] = args.epochs
        if getattr(args, "mwer_epochs", None) is None and args.epochs == 0:
            tr["mwer_epochs"] = 0
    if getattr(args, "mwer_epochs", None) is not None:
        tr["mwer_epochs"] = args.mwer_epochs
    if getattr(args, "n_utts", None) is not None:
        raw["n_utts"] = args.n_utts
    merged = RunConfig.from_dict(raw)
    merged.raw = cfg.raw
    return merged


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _config_with_overrides(args)
    seed = resolve_seed(args.seed, cfg.explicit_seed("channel"))
    cfg.channel.seed = seed
    ds = generate_corpus(cfg.channel, cfg.n_utts, cfg.nbest, jobs=args.jobs)
    ds.config["run_config"] = cfg.to_dict()
    save_dataset(ds, args.out)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {sum(sizes.values())} utterances to {args.out} ({sizes}, seed {seed})")
    return 0


def cmd_lattice(args: argparse.Namespace) -> int:
    lat = parse_lattice_text(_read(args.input))
    if args.action == "normalize":
        _emit(format_forward_normalized(forward_normalize(lat)), args.out)
    elif args.action == "linegraph":
        nl = edge_to_node_lattice(lat)
        lines = ["# nodes: idx token"] + [f"{i} {n.token}" for i, n in enumerate(nl.nodes)]
        lines += ["# arcs: src dst w_F"] + [f"{a.src} {a.dst} {a.fwd:.6f}" for a in nl.arcs]
        _emit("\n".join(lines) + "\n", args.out)
    elif args.action == "inspect":
        nl = edge_to_node_lattice(lat)
        head = f"# states {lat.num_states} arcs {len(lat.arcs)} paths {count_paths(lat)} nodes {len(nl.nodes)}\n"
        _emit(head + format_node_lattice(nl), args.out)
    elif args.action == "prune":
        if args.n < 1:
            raise UsageError("--n must be >= 1")
        _emit(format_lattice_text(prune_to_nbest(lat, args.n)), args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from latres.train import train

    cfg = _config_with_overrides(args)
    if args.jobs != 1:
        log.warning("training always runs in one job for determinism; --jobs ignored")
    seed = resolve_seed(args.seed, cfg.explicit_seed("train") or cfg.explicit_seed("model"))
    cfg.model.seed = seed
    cfg.train.seed = seed
    ds = _load_data(args.data)
    model = RescoringModel(cfg.model, cfg.encoder, vocabulary_for(ds.vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("%s: %d parameters", cfg.encoder.label(), model.num_parameters())
    header = {"run_config": echo, "data": str(args.data)}
    train(model, ds["train"], cfg.train, dev_utts=ds["dev"], out_dir=out, header=header)
    save_checkpoint(model, out / "model.ckpt", header)
    print(f"wrote {out / 'model.ckpt'} ({cfg.encoder.label()}, {model.num_parameters()} parameters, seed {seed})")
    return 0


def _scored_from_file(path: str, utts) -> list[list[ScoredHypothesis]]:
    by_id = {}
    for line in _read(path).splitlines():
        rec = json.loads(line)
        if "id" in rec:
            by_id[rec["id"]] = [ScoredHypothesis(h["tokens"], h["cost"], h["rescore_logprob"]) for h in rec["hyps"]]
    missing = [u.id for u in utts if u.id not in by_id]
    if missing:
        raise DataError(f"{len(missing)} utterances missing from {path} (first: {missing[0]})")
    return [by_id[u.id] for u in utts]


def cmd_rescore(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    utts = _split(ds, args.split)
    scored = score_hypotheses(model, utts, jobs=args.jobs)
    header = {"config": read_checkpoint_header(args.model).get("extra", {}).get("run_config"), "model": str(args.model)}
    lines = [json.dumps(header, sort_keys=True)]
    for u, hyps in zip(utts, scored):
        rec = {"id": u.id, "hyps": [{"tokens": h.tokens, "cost": h.first_pass_cost, "rescore_logprob": h.rescore_logprob} for h in hyps]}
        lines.append(json.dumps(rec))
    _emit("\n".join(lines) + "\n", args.out)
    if args.out:
        print(f"wrote scores for {len(utts)} utterances to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load_data(args.data)
    test = _split(ds, args.split)
    if args.model is None and args.scores is None:
        raise UsageError("one of --model or --scores is required")
    model = _load_model(args.model) if args.model else None
    if args.oracle is not None:
        if args.oracle < 1:
            raise UsageError("--oracle must be >= 1")
        print(f"oracle WER at {args.oracle}-best: {100 * oracle_wer(test, args.oracle):.2f}%")
    if args.scores:
        scored = _scored_from_file(args.scores, test)
    else:
        scored = score_hypotheses(model, test, jobs=args.jobs)
    meta: dict = {"split": args.split}
    if args.lam is not None:
        if not 0.0 <= args.lam <= 1.0:
            raise UsageError("--lambda must be in [0, 1]")
        lam = args.lam
    else:
        if model is None:
            raise UsageError("--tune-lambda needs --model (the dev split must be rescored)")
        dev = _split(ds, args.tune_lambda)
        dev_scored = score_hypotheses(model, dev, jobs=args.jobs)
        lam = tune_lambda(dev, model, args.grid, scored=dev_scored)
        meta["dev_sweep"] = lambda_sweep(dev, dev_scored, args.grid)
        print(f"tuned lambda on {args.tune_lambda}: {lam:.2f}")
    report = evaluate(test, model, lam, scored=scored)
    if model is not None:
        meta["config"] = read_checkpoint_header(args.model).get("extra", {}).get("run_config")
        title = model.spec.label()
    else:
        title = "Rescoring"
    meta["model"] = args.model or args.scores
    report.meta = meta
    if args.out:
        report.write(args.out, title)
    sys.stdout.write(report.summary_table(title))
    return 0


def cmd_attention_dump(args: argparse.Namespace) -> int:
    model = _load_model(args.model)
    ds = _load_data(args.data)
    try:
        utt = ds.find(args.utt)
    except KeyError:
        raise UsageError(f"unknown utterance id {args.utt!r}") from None
    kinds = model.spec.kinds
    if not kinds:
        raise UsageError("the model has no encoder to attend to")
    kind = args.encoder_kind or ("lattice" if "lattice" in kinds else kinds[0])
    if kind not in kinds:
        raise UsageError(f"model has no {kind!r} encoder (has {kinds})")
    if args.hyp == "ref":
        tokens = utt.ref
    else:
        k = int(args.hyp)
        if not 0 <= k < len(utt.nbest):
            raise UsageError(f"--hyp {k} out of range (utterance has {len(utt.nbest)} hypotheses)")
        tokens = utt.nbest[k][0]
    import torch

    prep = model.prepare(utt)
    with torch.no_grad():
        enc = model.encode([prep])
        _, tgt, _, attn = model.decoder_logits(enc, [model.ids(tokens)], [0])
    weights = attn[kind][0]  # [heads, T, N]
    targets = list(tokens) + ["</s>"]
    if kind == "lattice":
        nodes = [(n.token, n.marginal) for n in prep.lattice.nodes]
    elif kind == "audio":
        nodes = [(f"frame{i}", "") for i in range(prep.features.shape[0])]
    else:
        nodes = []
        for seq in prep.text_seqs:
            nodes += [(model.vocab.token_of(i), "") for i in seq]
    steps = range(len(targets)) if args.step is None else [args.step]
    if args.step is not None and not 0 <= args.step < len(targets):
        raise UsageError(f"--step {args.step} out of range (0..{len(targets) - 1})")
    heads = weights.shape[0]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "target", "node", "token", "marginal"] + [f"head{h}" for h in range(heads)])
        for t in steps:
            for j, (tok, marg) in enumerate(nodes):
                m = f"{marg:.6f}" if marg != "" else ""
                w.writerow([t, targets[t], j, tok, m] + [f"{float(weights[h, t, j]):.6f}" for h in range(heads)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_experiments(args: argparse.Namespace) -> int:
    from latres.experiments import TABLES, Runner, Setup, format_table

    cfg = _config_with_overrides(args)
    setup = Setup(cfg.channel, cfg.model, cfg.train, cfg.n_utts, cfg.nbest, cfg.eval.get("grid", 0.05))
    runner = Runner(setup, cache=args.cache, recompute=args.recompute or None)
    seeds = [int(s) for s in args.seeds.split(",")]
    names = list(TABLES) if args.table == "all" else [args.table]
    out = Path(args.out) if args.out else None
    for name in names:
        rows = runner.table(name, seeds, extra=args.extra)
        text = format_table(rows, name)
        sys.stdout.write(text + "\n")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.txt").write_text(text, encoding="utf-8")
            blob = {"table": name, "seeds": seeds, "config": setup.to_dict(), "rows": rows}
            (out / f"{name}.json").write_text(json.dumps(blob, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--encoder", choices=["none", "one_best", "n_best", "lattice", "audio"])
    p.add_argument("--companion", choices=["none", "one_best", "n_best", "lattice", "audio"])
    p.add_argument("--mechanisms", help="comma list of wcs,bfg,batt,weo (or 'none')")
    p.add_argument("--lattice-nbest", type=int, help="prune encoder lattices to the n best paths")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latres", description="Lattice-attention n-best rescoring toolkit.")
    ap.add_argument("--version", action="version", version=f"latres {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-utts", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("lattice", help="lattice transforms and inspection")
    p.add_argument("action", choices=["normalize", "linegraph", "inspect", "prune"])
    p.add_argument("input")
    p.add_argument("--n", type=int, default=5, help="paths to keep (prune)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lattice)

    p = sub.add_parser("train", help="train a rescoring model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="maximum-likelihood epochs (0 writes the initial model)")
    p.add_argument("--mwer-epochs", type=int)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rescore", help="score n-best lists with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("eval", help="interpolate, rerank and report WER/WERR")
    p.add_argument("--model")
    p.add_argument("--scores", help="scores written by 'rescore' instead of --model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--tune-lambda", default="dev", metavar="SPLIT")
    p.add_argument("--grid", type=float, default=0.05)
    p.add_argument("--oracle", type=int, metavar="N")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention-dump", help="per-head attention weights over encoder positions (CSV)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--utt", required=True)
    p.add_argument("--hyp", default="ref", help="'ref' or an n-best index to teacher-force")
    p.add_argument("--step", type=int, help="decoder step (default: all)")
    p.add_argument("--encoder-kind", choices=["one_best", "n_best", "lattice", "audio"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_attention_dump)

    p = sub.add_parser("experiments", help="ablation tables (median over seeds, cached)")
    p.add_argument("--config")
    p.add_argument("--table", choices=["mechanisms", "depth", "encoders", "all"], default="all")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--extra", action="store_true", help="add the optional encoder rows")
    p.add_argument("--cache")
    p.add_argument("--recompute", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiments)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("latres: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"latres: error: {exc}", file=sys.stderr)
        return 2
    except (LatresError, ValueError, OSError) as exc:
        print(f"latres: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
