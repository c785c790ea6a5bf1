"""Command-line driver: generate, train, evaluate, visualize and sweep.

Every run resolves a configuration from built-in defaults, an optional YAML
file (``--config``) and command-line overrides, writes that snapshot to its
output directory, and embeds its hash in every report. Outputs always go to
a fresh directory.

Set ``PRODEMBED_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from typing import Any

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import eval_intent, eval_nep, prod2vec, prodbert, synth, viz
from ._io import config_hash
from .eval_nep import format_table
from .session_data import build_vocab, duplicate, filter_by_length, ingest, split

logger = logging.getLogger("prodembed")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "corpus": None,
    "catalog": None,
    "generate": {
        "n_products": 500,
        "n_types": 10,
        **{f.name: f.default for f in dataclasses.fields(synth.GenParams)
           if f.name not in ("seed", "trigger_products")},
    },
    "split": [0.8, 0.1, 0.1],
    "prodbert": {f.name: f.default for f in dataclasses.fields(prodbert.ProdBertConfig) if f.name != "seed"},
    "prod2vec": {f.name: f.default for f in dataclasses.fields(prod2vec.Prod2vecConfig) if f.name != "seed"},
    "eval": {"k": 10, "n_cases": None, "prodbert": None, "prod2vec": None},
    "intent": {
        **{f.name: f.default for f in dataclasses.fields(eval_intent.IntentConfig) if f.name != "seed"},
        "n_per_class": 2000,
        "strategies": ["enc_0", "concat", "wal"],
    },
    "visualize": {"perplexity": 30.0, "iterations": 1000, "n_points": 1000, "prodbert": None, "prod2vec": None},
    "sweep": {"mask_prob": [0.15, 0.25], "layers": [4, 8], "duplicated": [False], "baseline": True},
}

# Which config sections each subcommand exposes as flags.
_SUBCOMMANDS = {
    "generate": ("generate",),
    "train-prodbert": ("prodbert",),
    "train-prod2vec": ("prod2vec",),
    "eval-nep": ("eval",),
    "eval-intent": ("intent", "eval"),
    "visualize": ("visualize",),
    "sweep": ("sweep", "prodbert", "prod2vec", "eval"),
}


class CliError(Exception):
    """A user-facing failure; reported without a traceback."""


def _flag(section: str, key: str) -> str:
    return f"--{section}.{key}".replace("_", "-")


def _parse_value(text: str):
    return yaml.safe_load(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prodembed", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, sections in _SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--config", help="YAML file with configuration overrides")
        p.add_argument("--seed", type=int, help="global seed (u64)")
        p.add_argument("--out", required=True, help="output directory (must not exist or be empty)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1: reproducible)")
        if name != "generate":
            p.add_argument("--corpus", help="session log file")
        if name in ("visualize", "eval-intent", "eval-nep", "sweep"):
            p.add_argument("--catalog", help="catalog TSV (product_id<TAB>type)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key; repeatable")
        for i, section in enumerate(sections):
            for key in DEFAULTS[section]:
                # the subcommand's own section also gets the short --key form
                names = [_flag(section, key)] + ([f"--{key}".replace("_", "-")] if i == 0 else [])
                p.add_argument(*names, dest=f"{section}.{key}", type=_parse_value,
                               default=None, metavar="V")
    return parser


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise CliError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must be a mapping")
        cfg = _merge(cfg, loaded)
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise CliError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        dotted, value = item.split("=", 1)
        node = overrides
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            overrides.setdefault(section, {})[key] = value
    for key in ("seed", "corpus", "catalog"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    cfg = _merge(cfg, overrides)
    cfg["command"] = args.command
    return cfg


def snapshot_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# -- helpers ------------------------------------------------------------------------


def _prepare_out(path: str) -> str:
    if os.path.exists(path):
        if not os.path.isdir(path) or os.listdir(path):
            raise CliError(f"output directory {path} exists and is not empty; choose a fresh --out")
    else:
        os.makedirs(path)
    return path


def _write_text(path: str, text: str) -> None:
    if os.path.exists(path):
        raise CliError(f"refusing to overwrite {path}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_report(out: str, name: str, payload: dict, table_rows: list) -> None:
    _write_text(os.path.join(out, f"{name}.json"), json.dumps(payload, sort_keys=True, indent=1) + "\n")
    _write_text(os.path.join(out, f"{name}.txt"), format_table(table_rows))


def _dataclass_from(section: dict, cls, seed: int, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in section.items() if k in names}
    kwargs.update(extra)
    if "seed" in names:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid {cls.__name__}: {exc}") from exc


def _need(cfg: dict, key: str, what: str) -> str:
    path = cfg.get(key)
    if not path:
        raise CliError(f"missing {what}: pass --{key.replace('.', '-')}")
    if not os.path.exists(path):
        raise CliError(f"{what} {path} does not exist")
    return path


def _load_split(cfg: dict):
    sessions = filter_by_length(ingest(_need(cfg, "corpus", "corpus")))
    if not sessions:
        raise CliError("corpus has no sessions of length 3..20")
    try:
        return split(sessions, tuple(cfg["split"]), seed=cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _model_path(cfg: dict, section: str, key: str) -> str | None:
    path = cfg[section].get(key)
    if path and not os.path.exists(path):
        raise CliError(f"{key} model {path} does not exist")
    return path


def _load_models(cfg: dict, section: str, vocab):
    """Load the ProdBERT / prod2vec models named in ``section``; refuse vocab mismatch."""
    models = {}
    try:
        if _model_path(cfg, section, "prodbert"):
            models["prodbert"] = prodbert.load_checkpoint(cfg[section]["prodbert"], vocab)
        if _model_path(cfg, section, "prod2vec"):
            models["prod2vec"] = prod2vec.load_model(cfg[section]["prod2vec"], vocab)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    return models


# -- subcommands -----------------------------------------------------------------------


def cmd_generate(cfg: dict, out: str, run_hash: str) -> None:
    g = cfg["generate"]
    seed = cfg["seed"]
    catalog = synth.generate_catalog(g["n_products"], g["n_types"], np.random.default_rng([seed, 9]))
    params = _dataclass_from(g, synth.GenParams, seed)
    corpus = synth.generate_sessions(catalog, params)
    corpus_path, catalog_path = synth.write_corpus(corpus, out)
    lengths = np.array([len(s.items) for s in corpus.sessions])
    labels = np.array([bool(s.add_to_cart) for s in corpus.sessions])
    report = {
        "run_config_hash": run_hash,
        "seed": seed,
        "gen_config_hash": config_hash(params),
        "n_sessions": len(corpus.sessions),
        "n_products": len(catalog),
        "n_types": len(catalog.types),
        "length_p50": float(np.percentile(lengths, 50)),
        "length_p75": float(np.percentile(lengths, 75)),
        "positive_fraction": round(float(labels.mean()), 6),
        "trigger_products": corpus.trigger_products,
        "files": {"corpus": os.path.basename(corpus_path), "catalog": os.path.basename(catalog_path)},
    }
    row = {k: report[k] for k in ("n_sessions", "n_products", "n_types", "length_p50", "length_p75",
                                  "positive_fraction", "seed", "run_config_hash")}
    _write_report(out, "generate", report, [row])


def cmd_train_prodbert(cfg: dict, out: str, run_hash: str) -> None:
    sp = _load_split(cfg)
    pcfg = _dataclass_from(cfg["prodbert"], prodbert.ProdBertConfig, cfg["seed"])
    vocab = build_vocab(sp.train)
    train = duplicate(sp.train, 5) if pcfg.duplicated else sp.train
    model = prodbert.init_model(pcfg, vocab)
    model, history = prodbert.train_mlm(model, train, pcfg, validation=sp.validation,
                                        progress=logger.isEnabledFor(logging.INFO))
    model.metadata["run_config_hash"] = run_hash
    prodbert.save_checkpoint(model, os.path.join(out, "prodbert.ckpt"))
    report = {
        "run_config_hash": run_hash,
        "config_hash": model.metadata["config_hash"],
        "seed": cfg["seed"],
        "vocab_hash": vocab.hash(),
        "n_parameters": model.n_parameters(),
        "train_sessions": len(train),
        "history": history,
    }
    row = {"model": "prodbert", "config_hash": report["config_hash"], "seed": cfg["seed"],
           "epochs": pcfg.epochs, "final_train_loss": f"{history['train_loss'][-1]:.4f}",
           "final_val_loss": f"{history['val_loss'][-1]:.4f}" if history["val_loss"] else ""}
    _write_report(out, "train_prodbert", report, [row])


def cmd_train_prod2vec(cfg: dict, out: str, run_hash: str) -> None:
    sp = _load_split(cfg)
    pcfg = _dataclass_from(cfg["prod2vec"], prod2vec.Prod2vecConfig, cfg["seed"])
    vocab = build_vocab(sp.train)
    model, history = prod2vec.train_cbow(sp.train, pcfg, vocab)
    model.metadata["run_config_hash"] = run_hash
    prod2vec.save_model(model, os.path.join(out, "prod2vec.model"))
    prod2vec.export_embeddings(model, os.path.join(out, "embeddings.txt"))
    report = {
        "run_config_hash": run_hash,
        "config_hash": model.metadata["config_hash"],
        "seed": cfg["seed"],
        "vocab_hash": vocab.hash(),
        "history": history,
    }
    row = {"model": "prod2vec", "config_hash": report["config_hash"], "seed": cfg["seed"],
           "iterations": pcfg.iterations, "final_loss": f"{history['loss'][-1]:.4f}"}
    _write_report(out, "train_prod2vec", report, [row])


def _nep_reports(cfg: dict, models: dict, test, run_hash: str) -> list:
    e = cfg["eval"]
    n = e["n_cases"]
    try:
        cases = eval_nep.sample_cases(test, n, cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    reports = []
    if "prodbert" in models:
        reports.append(eval_nep.eval_prodbert(models["prodbert"], k=e["k"], seed=cfg["seed"], cases=cases))
    if "prod2vec" in models:
        reports.append(eval_nep.eval_prod2vec(models["prod2vec"], k=e["k"], seed=cfg["seed"], cases=cases))
    for r in reports:
        r.extra["run_config_hash"] = run_hash
    return reports


def cmd_eval_nep(cfg: dict, out: str, run_hash: str) -> None:
    sp = _load_split(cfg)
    vocab = build_vocab(sp.train)
    models = _load_models(cfg, "eval", vocab)
    if not models:
        raise CliError("eval-nep needs --eval.prodbert and/or --eval.prod2vec model paths")
    reports = _nep_reports(cfg, models, sp.test, run_hash)
    for r in reports:
        _write_report(out, f"nep_{r.model}", r.to_dict(), [r.summary_row()])


def cmd_eval_intent(cfg: dict, out: str, run_hash: str) -> None:
    sessions = filter_by_length(ingest(_need(cfg, "corpus", "corpus")))
    if any(s.add_to_cart is None for s in sessions):
        raise CliError("eval-intent needs a labeled corpus (session<TAB>0/1 lines)")
    sp = split(sessions, tuple(cfg["split"]), seed=cfg["seed"])
    vocab = build_vocab(sp.train)
    models = _load_models(cfg, "eval", vocab)
    if "prodbert" not in models:
        raise CliError("eval-intent needs a pre-trained model: --eval.prodbert <checkpoint>")
    icfg = _dataclass_from(cfg["intent"], eval_intent.IntentConfig, cfg["seed"])
    try:
        ds = eval_intent.build_intent_dataset(sessions, cfg["intent"]["n_per_class"], cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    reports = []
    for strategy in cfg["intent"]["strategies"]:
        try:
            reports.append(eval_intent.evaluate_strategy(models["prodbert"], ds, strategy, icfg))
        except (ValueError, IndexError) as exc:
            raise CliError(f"strategy {strategy}: {exc}") from exc
    if "prod2vec" in models:
        reports.append(eval_intent.train_intent_lstm(models["prod2vec"], ds, icfg)[1])
    payload = {"run_config_hash": run_hash, "seed": cfg["seed"], "reports": [r.to_dict() for r in reports]}
    _write_report(out, "intent", payload, [r.summary_row() for r in reports])


def cmd_visualize(cfg: dict, out: str, run_hash: str) -> None:
    sp = _load_split(cfg)
    vocab = build_vocab(sp.train)
    models = _load_models(cfg, "visualize", vocab)
    if not models:
        raise CliError("visualize needs --visualize.prodbert and/or --visualize.prod2vec model paths")
    catalog = synth.Catalog.read(_need(cfg, "catalog", "catalog"))
    v = cfg["visualize"]
    rng = np.random.default_rng([cfg["seed"], 10])
    pool = [s for s in sp.test if all(it in vocab for it in s.items)]
    n = min(v["n_points"], len(pool))
    picked = [pool[i] for i in np.sort(rng.choice(len(pool), size=n, replace=False))]
    summary = []
    for name, model in models.items():
        try:
            proj = viz.project_sessions(model, picked, catalog, perplexity=v["perplexity"],
                                        iterations=v["iterations"], seed=cfg["seed"], source=name)
        except KeyError as exc:
            raise CliError(f"product missing from catalog: {exc}") from exc
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        viz.export_plot(proj, os.path.join(out, f"tsne_{name}"))
        summary.append({"model": name, "points": len(proj), "final_kl": f"{proj.kl[max(proj.kl)]:.4f}",
                        "seed": cfg["seed"], "run_config_hash": run_hash})
    _write_report(out, "visualize", {"run_config_hash": run_hash, "projections": summary}, summary)


def cmd_sweep(cfg: dict, out: str, run_hash: str) -> None:
    sp = _load_split(cfg)
    vocab = build_vocab(sp.train)
    s = cfg["sweep"]
    e = cfg["eval"]
    try:
        cases = eval_nep.sample_cases(sp.test, e["n_cases"], cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    rows, payload = [], []
    for m in s["mask_prob"]:
        for layers in s["layers"]:
            for dup in s["duplicated"]:
                section = dict(cfg["prodbert"], mask_prob=m, layers=layers, duplicated=dup)
                pcfg = _dataclass_from(section, prodbert.ProdBertConfig, cfg["seed"])
                model = prodbert.init_model(pcfg, vocab)
                train = duplicate(sp.train, 5) if dup else sp.train
                logger.info("sweep cell m=%s l=%s d=%s", m, layers, int(dup))
                model, _ = prodbert.train_mlm(model, train, pcfg)
                r = eval_nep.eval_prodbert(model, k=e["k"], seed=cfg["seed"], cases=cases)
                payload.append(dict(r.to_dict(), mask_prob=m, layers=layers, duplicated=dup))
                rows.append({"model": "ProdBERT", "l": layers, "m": m, "d": int(dup),
                             f"nDCG@{e['k']}": f"{r.mean:.4f}", f"HR@{e['k']}": f"{r.hit_rate:.4f}",
                             "config_hash": r.config_hash})
    if s["baseline"]:
        pcfg = _dataclass_from(cfg["prod2vec"], prod2vec.Prod2vecConfig, cfg["seed"])
        p2v, _ = prod2vec.train_cbow(sp.train, pcfg, vocab)
        r = eval_nep.eval_prod2vec(p2v, k=e["k"], seed=cfg["seed"], cases=cases)
        payload.append(r.to_dict())
        rows.append({"model": "prod2vec", "l": "", "m": "", "d": "",
                     f"nDCG@{e['k']}": f"{r.mean:.4f}", f"HR@{e['k']}": f"{r.hit_rate:.4f}",
                     "config_hash": r.config_hash})
    _write_report(out, "sweep", {"run_config_hash": run_hash, "seed": cfg["seed"], "results": payload}, rows)


COMMANDS = {
    "generate": cmd_generate,
    "train-prodbert": cmd_train_prodbert,
    "train-prod2vec": cmd_train_prod2vec,
    "eval-nep": cmd_eval_nep,
    "eval-intent": cmd_eval_intent,
    "visualize": cmd_visualize,
    "sweep": cmd_sweep,
}


def _configure_logging() -> None:
    level = os.environ.get("PRODEMBED_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    created = False
    try:
        cfg = resolve_config(args)
        if not 0 <= int(cfg["seed"]) < 2**64:
            raise CliError("--seed must be an unsigned 64-bit integer")
        created = not os.path.exists(args.out)
        out = _prepare_out(args.out)
        run_hash = snapshot_hash(cfg)
        _write_text(os.path.join(out, "config.yaml"), yaml.safe_dump(cfg, sort_keys=True))
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, out, run_hash)
    except (CliError, OSError, FloatingPointError) as exc:
        print(f"prodembed {args.command}: error: {exc}", file=sys.stderr)
        if created and os.path.isdir(args.out):
            shutil.rmtree(args.out)  # no partial outputs from a failed run
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
