"""Batch command line: ``moecollab <command> [flags]``.

Exit codes: 0 success, 2 input/validation error, 3 compatibility error,
4 numeric error. Every command writes ``run.json`` into ``--out-dir`` with
the fully resolved arguments; ``moecollab replay run.json`` re-runs it.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthSpec, load_corpus, save_corpus, split, synth_generate
from .encoder import EncoderConfig, TokenizerConfig, init_encoder
from .exceptions import CompatibilityError, NumericError, ValidationError
from .expert import init_expert
from .gating import GateLossConfig
from .moe import combine_hidden, routing_entropy, utilization
from .registry import (assemble_moe, format_fingerprint, load_bundle, load_encoder,
                       load_index, make_bundle, parse_selectors,
                       register_encoder, register_expert, save_bundle, save_encoder,
                       save_gating)
from .train import (OptimizerConfig, TrainReport, encode_texts, evaluate, pretrain_encoder,
                    train_expert, train_gating)

log = logging.getLogger("moecollab")

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4


class CliInputError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliInputError(f"{what} not found: {p}")
    return p


def _registry(args) -> Path:
    if not args.registry_dir:
        raise CliInputError("no registry: pass --registry-dir or set MOECOLLAB_REGISTRY")
    return Path(args.registry_dir)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _domain_id(corpus, name: str) -> int:
    if name in corpus.domain_names:
        return corpus.domain_names.index(name)
    if name.isdigit() and int(name) < len(corpus.domain_names):
        return int(name)
    raise CliInputError(f"unknown domain {name!r}; known: {corpus.domain_names}")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cpd = [int(c) for c in str(args.classes_per_domain).split(",")]
    if len(cpd) == 1:
        cpd = cpd * args.num_domains
    spec = SynthSpec(args.num_domains, tuple(cpd), args.vocab_words_per_class,
                     args.samples_per_class, args.noise_rate, args.doc_length, args.seed)
    corpus = synth_generate(spec)
    out = _out_dir(args)
    save_corpus(corpus, out / "corpus.jsonl")
    train, held = split(corpus, args.train_fraction, seed=args.seed)
    save_corpus(train, out / "train.jsonl")
    save_corpus(held, out / "eval.jsonl")
    _emit({"corpus": str(out / "corpus.jsonl"), "examples": len(corpus),
           "train": len(train), "eval": len(held)})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    corpus = load_corpus(_require(args.data, "data file"))
    out = _out_dir(args)
    cfg = EncoderConfig(args.hidden_dim, args.num_layers, args.num_heads, args.ff_dim, args.max_len)
    enc = init_encoder(cfg, TokenizerConfig(args.vocab_size, args.max_len), seed=args.seed)
    n_out = {"domain": len(corpus.domain_names), "label": len(corpus.label_names),
             "joint": len(corpus.domain_names) * len(corpus.label_names)}[args.target]
    head = init_expert(args.hidden_dim, 1, max(2, n_out), seed=args.seed + 1)
    report = pretrain_encoder(corpus, enc, head, OptimizerConfig(learning_rate=args.lr, seed=args.seed),
                              args.epochs, args.batch_size, target=args.target)
    save_encoder(enc, out / "encoder.moec")
    (out / "pretrain_report.json").write_text(report.to_json())
    (out / "pretrain_report.csv").write_text(report.to_csv())
    # no-adapter reference: a linear head on the frozen encoder over the whole label set
    baseline = init_expert(args.hidden_dim, 1, len(corpus.label_names), seed=args.seed + 2,
                           domain_tag="*")
    base_report = train_expert(corpus, baseline, enc,
                               OptimizerConfig(learning_rate=args.baseline_lr, seed=args.seed),
                               args.baseline_epochs, args.batch_size, train_adapter=False)
    fp = enc.fingerprint()
    save_bundle(make_bundle(baseline, "baseline", "1.0.0", fp, corpus.label_names),
                out / "baseline.moec")
    (out / "baseline_report.json").write_text(base_report.to_json())
    _emit({"encoder": str(out / "encoder.moec"), "fingerprint": format_fingerprint(fp),
           "final_loss": report.epochs[-1].loss if report.epochs else None})
    return EXIT_OK


def cmd_train_expert(args) -> int:
    corpus = load_corpus(_require(args.data, "data file"))
    enc = load_encoder(_require(args.encoder, "encoder bundle"))
    out = _out_dir(args)
    d = _domain_id(corpus, args.domain)
    subset = corpus.by_domain(d)
    if len(subset) == 0:
        raise CliInputError(f"no examples for domain {args.domain!r}")
    n_classes = max(2, int(subset.labels.max()) + 1)
    expert = init_expert(enc.hidden_dim, args.adapter_dim, n_classes, seed=args.seed,
                         domain_tag=corpus.domain_names[d])
    report = train_expert(subset, expert, enc, OptimizerConfig(learning_rate=args.lr, seed=args.seed),
                          args.epochs, args.batch_size)
    expert_id = args.expert_id or f"expert-{corpus.domain_names[d]}"
    bundle = make_bundle(expert, expert_id, args.version, enc.fingerprint(),
                         corpus.label_names[:n_classes], contributor=args.contributor)
    path = out / f"{expert_id}-{args.version}.moec"
    save_bundle(bundle, path)
    (out / f"{expert_id}-{args.version}.report.json").write_text(report.to_json())
    _emit({"bundle": str(path), "expert_id": expert_id, "version": args.version,
           "train_accuracy": report.epochs[-1].accuracy if report.epochs else None})
    return EXIT_OK


def cmd_register(args) -> int:
    reg = _registry(args)
    if args.encoder:
        register_encoder(load_encoder(_require(args.encoder, "encoder bundle")), reg)
    registered = []
    for path in args.bundle or []:
        bundle = load_bundle(_require(path, "bundle"))
        register_expert(bundle, reg)
        registered.append(f"{bundle.manifest.expert_id}@{bundle.manifest.version}")
    index = load_index(reg)
    _emit({"registered": registered,
           "entries": [f"{e.expert_id}@{e.version}" for e in index.entries],
           "label_universe": index.label_universe})
    return EXIT_OK


def _selected(args) -> list[str]:
    if not args.experts:
        raise CliInputError("--experts is required (id@version,...)")
    return [f"{i}@{v}" for i, v in parse_selectors(args.experts)]


def cmd_train_gate(args) -> int:
    reg = _registry(args)
    corpus = load_corpus(_require(args.data, "data file"))
    model = assemble_moe(reg, _selected(args), None, seed=args.seed)
    out = _out_dir(args)
    report = train_gating(corpus, model, GateLossConfig(args.lambda1, args.lambda2),
                          OptimizerConfig(learning_rate=args.lr, seed=args.seed),
                          args.epochs, args.batch_size, corpus.domain_names)
    save_gating(model.gating, out / "gate.moec", _selected(args),
                format_fingerprint(model.encoder.fingerprint()))
    (out / "gate_report.json").write_text(report.to_json())
    (out / "gate_report.csv").write_text(report.to_csv())
    if report.epochs:
        final = report.routing_stats(-1)
        (out / "routing.csv").write_text(final.to_csv())
        (out / "routing_summary.json").write_text(final.summary_json())
    _emit({"gate": str(out / "gate.moec"), "losses": report.losses()})
    return EXIT_OK


def _table(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_eval(args) -> int:
    reg = _registry(args)
    corpus = load_corpus(_require(args.data, "data file"))
    gate = _require(args.gate, "gate bundle") if args.gate else None
    model = assemble_moe(reg, _selected(args), gate, seed=args.seed)
    cfg = GateLossConfig(args.lambda1, args.lambda2)
    overall = evaluate(corpus, model, domain_names=corpus.domain_names, gate_cfg=cfg)
    result = overall.to_dict()
    result["balance_kl"] = overall.gate_breakdown.balance_kl
    out = _out_dir(args)

    baseline = None
    if args.baseline:
        baseline = load_bundle(_require(args.baseline, "baseline bundle")).to_expert()
    rows = []
    scopes = [(name, corpus.by_domain(i)) for i, name in enumerate(corpus.domain_names)]
    scopes.append(("mixed", corpus))
    for name, subset in scopes:
        if len(subset) == 0:
            continue
        row = {"domain": name}
        if baseline is not None:
            row["baseline"] = evaluate(subset, baseline, model.encoder, model.num_classes).macro_f1
        own = [e for e in model.experts if e.domain_tag == name]
        experts_f1 = [evaluate(subset, e, model.encoder, model.num_classes).macro_f1
                      for e in (own or model.experts)]
        row["expert"] = max(experts_f1)
        row["moe"] = evaluate(subset, model, num_classes=model.num_classes,
                              domain_names=corpus.domain_names).macro_f1
        if baseline is not None:
            row["gain"] = row["moe"] - row["baseline"]
        rows.append(row)
    result["table"] = rows
    (out / "table.csv").write_text(_table(rows))
    _write_json(out / "eval.json", result)
    _emit(result)
    return EXIT_OK


def cmd_route(args) -> int:
    reg = _registry(args)
    gate = _require(args.gate, "gate bundle") if args.gate else None
    model = assemble_moe(reg, _selected(args), gate, seed=args.seed)
    out = combine_hidden(encode_texts([args.text], model.encoder), model)
    w = out.gate_weights[0]
    _emit({"text": args.text, "gate_weights": w.tolist(), "top_expert": int(np.argmax(w)),
           "experts": _selected(args),
           "per_expert_logits": [y[0].tolist() for y in out.per_expert_logits],
           "logits": out.logits[0].tolist()})
    return EXIT_OK


def cmd_stats(args) -> int:
    report = TrainReport.from_dict(json.loads(_require(args.report, "report").read_text()))
    if report.kind != "gating":
        raise CliInputError(f"stats needs a gating report, got {report.kind!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "expert", "utilization", "routing_entropy"])
    for i, rec in enumerate(report.epochs):
        stats = report.routing_stats(i)
        util = utilization(stats)
        for e in range(stats.num_experts):
            ent = routing_entropy(stats, e) if stats.weight_mass[e].sum() > 0 else ""
            w.writerow([rec.epoch, e, repr(float(util[e])), ent if ent == "" else repr(ent)])
    out = _out_dir(args)
    (out / "stats.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = json.loads(_require(args.run_json, "run.json").read_text())
    return main(cfg["argv"])


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--registry-dir", default=os.environ.get("MOECOLLAB_REGISTRY"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="moecollab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-domain corpus")
    s.add_argument("--num-domains", type=int, default=4)
    s.add_argument("--classes-per-domain", default="3", help="one count or a comma list")
    s.add_argument("--vocab-words-per-class", type=int, default=8)
    s.add_argument("--samples-per-class", type=int, default=40)
    s.add_argument("--noise-rate", type=float, default=0.15)
    s.add_argument("--doc-length", type=int, default=12)
    s.add_argument("--train-fraction", type=float, default=0.75)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the shared encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--target", choices=["domain", "label", "joint"], default="domain")
    s.add_argument("--hidden-dim", type=int, default=64)
    s.add_argument("--num-layers", type=int, default=2)
    s.add_argument("--num-heads", type=int, default=4)
    s.add_argument("--ff-dim", type=int, default=128)
    s.add_argument("--max-len", type=int, default=32)
    s.add_argument("--vocab-size", type=int, default=1024)
    s.add_argument("--baseline-epochs", type=int, default=30)
    s.add_argument("--baseline-lr", type=float, default=1e-2)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-expert", parents=[common], help="fine-tune one domain expert")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", required=True)
    s.add_argument("--domain", required=True)
    s.add_argument("--expert-id")
    s.add_argument("--version", default="1.0.0")
    s.add_argument("--contributor", default="")
    s.add_argument("--adapter-dim", type=int, default=64)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--batch-size", type=int, default=16)
    s.set_defaults(func=cmd_train_expert)

    s = sub.add_parser("register", parents=[common], help="add bundles to the registry")
    s.add_argument("--encoder", help="install this shared encoder first")
    s.add_argument("--bundle", nargs="*")
    s.set_defaults(func=cmd_register)

    for name, func, helptext in (("train-gate", cmd_train_gate, "train the gating network"),
                                 ("eval", cmd_eval, "evaluate baseline / experts / mixture"),
                                 ("route", cmd_route, "show routing for one text")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--experts", help="comma list of id@version (version optional = latest)")
        s.add_argument("--lambda1", type=float, default=0.01)
        s.add_argument("--lambda2", type=float, default=0.1)
        if name == "train-gate":
            s.add_argument("--data", required=True)
            s.add_argument("--epochs", type=int, default=10)
            s.add_argument("--lr", type=float, default=1e-2)
            s.add_argument("--batch-size", type=int, default=16)
        elif name == "eval":
            s.add_argument("--data", required=True)
            s.add_argument("--gate")
            s.add_argument("--baseline")
        else:
            s.add_argument("--text", required=True)
            s.add_argument("--gate")
        s.set_defaults(func=func)

    s = sub.add_parser("stats", parents=[common], help="per-epoch utilization/entropy CSV")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("replay", help="re-run a command from its run.json")
    s.add_argument("run_json")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "replay":
        resolved = {k: v for k, v in vars(args).items() if k != "func"}
        full_argv = list(argv)
        if args.registry_dir and "--registry-dir" not in argv:
            full_argv += ["--registry-dir", args.registry_dir]  # came from the environment
        _write_json(_out_dir(args) / "run.json", {"command": args.command, "args": resolved,
                                                  "argv": full_argv, "version": __version__})
    try:
        return args.func(args)
    except CompatibilityError as exc:
        log.error("%s", exc)
        sys.stderr.write(json.dumps({"error": str(exc), "violations": exc.violations}) + "\n")
        return EXIT_COMPAT
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except (CliInputError, ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except FloatingPointError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
