"""Command-line pipeline: world -> data -> models -> metrics.

Every command reads an optional JSON config file plus flat flag
overrides, funnels all randomness through one seed, and writes
byte-identical outputs on reruns. HALVA_KIT_THREADS caps worker
parallelism; the desk-scale pipeline runs single-threaded, so the cap
is an upper bound and defaults to 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter

import numpy as np

from . import augment as ag
from . import autodiff as ad
from . import losses as ls
from .lexicon import (ConceptLexicon, build_cooccurrence, default_lexicon,
                      sample_closed_set_replacement)
from .metrics import evaluate_model
from .model import PARAM_NAMES, WindowedLM
from .trainer import (TrainConfig, finetune, mean_alignment_loss, mean_nll,
                      pretrain_mle, sweep_alpha)
from .world import (WorldConfig, caption_corpus, generate_scenes,
                    load_scenes, save_scenes, standard_vocab)

_JSON = "json"

# key -> (type, default); default None marks a required key
SCHEMAS = {
    "gen-world": {
        "n": (int, None),
        "out": (str, None),
        "seed": (int, 0),
        "lexicon": (str, ""),
        "lexicon_out": (str, ""),
        "bias": (_JSON, []),
        "size_range": (_JSON, [1, 3]),
        "attr_prob": (float, 0.5),
        "action_prob": (float, 0.6),
        "location_prob": (float, 0.6),
    },
    "augment": {
        "scenes": (str, None),
        "lexicon": (str, None),
        "out_train": (str, None),
        "out_ref": (str, None),
        "mix": (_JSON, {"one_sentence": 0.25, "short": 0.25,
                        "detailed": 0.25, "yesno": 0.25}),
        "mode": (str, "open"),
        "seed": (int, 0),
        "n_reference": (int, -1),
        "reference_scenes": (str, ""),
        "llm_endpoint": (str, ""),
    },
    "pretrain": {
        "scenes": (str, None),
        "lexicon": (str, None),
        "out": (str, None),
        "d": (int, 32),
        "h": (int, 64),
        "k": (int, 3),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-5),
        "steps": (int, 2000),
        "batch": (int, 32),
        "seed": (int, 0),
        "styles": (str, "all"),
    },
    "finetune": {
        "train": (str, None),
        "refs": (str, None),
        "model_in": (str, None),
        "out_dir": (str, None),
        "loss": (str, "dpa"),
        "alpha": (float, 0.4),
        "beta": (float, 0.1),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-5),
        "steps": (int, 2000),
        "batch": (int, 32),
        "seed": (int, 0),
        "kl_mode": (str, "full_vocab"),
        "probe_every": (int, 50),
        "probe_size": (int, 256),
    },
    "sweep-alpha": {
        "train": (str, None),
        "refs": (str, None),
        "model_in": (str, None),
        "out": (str, None),
        "alphas": (_JSON, [0.01, 0.1, 0.4, 2.0]),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 1e-5),
        "steps": (int, 2000),
        "batch": (int, 32),
        "seed": (int, 0),
        "kl_mode": (str, "full_vocab"),
        "probe_every": (int, 50),
        "probe_size": (int, 256),
        "scenes": (str, ""),
        "lexicon": (str, ""),
        "eval_seed": (int, 0),
    },
    "eval": {
        "model": (str, None),
        "scenes": (str, None),
        "lexicon": (str, None),
        "out": (str, None),
        "seed": (int, 0),
        "style": (str, "detailed"),
        "max_len": (int, 64),
    },
    "gradcheck": {
        "seeds": (int, 5),
        "tol": (float, 1e-4),
        "out": (str, ""),
    },
}

_IN_PATH_KEYS = ("scenes", "lexicon", "reference_scenes", "train", "refs",
                 "model_in", "model")
_OUT_PATH_KEYS = ("out", "out_train", "out_ref", "lexicon_out", "out_dir")


def _threads() -> int:
    raw = os.environ.get("HALVA_KIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"HALVA_KIT_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"HALVA_KIT_THREADS must be >= 1, got {n}")
    return n


def _merged_config(command: str, args: argparse.Namespace) -> dict:
    schema = SCHEMAS[command]
    cfg = {k: default for k, (_, default) in schema.items()}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            loaded = json.load(f)
        for k, v in loaded.items():
            if k not in schema:
                raise ValueError(f"unknown config key {k!r} for {command}")
            kind = schema[k][0]
            cfg[k] = v if kind == _JSON else kind(v)
    for k in schema:
        flag = getattr(args, k)
        if flag is not None:
            cfg[k] = flag
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise ValueError(f"missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    _check_paths(command, cfg)
    return cfg


def _check_paths(command: str, cfg: dict) -> None:
    # fail on bad paths before any compute happens
    for k in _IN_PATH_KEYS:
        p = cfg.get(k)
        if p and not os.path.isfile(p):
            raise ValueError(f"--{k.replace('_', '-')}: no such file: {p}")
    for k in _OUT_PATH_KEYS:
        p = cfg.get(k)
        if not p:
            continue
        parent = os.path.dirname(p.rstrip("/")) or "."
        if not os.path.isdir(parent):
            raise ValueError(
                f"--{k.replace('_', '-')}: output directory does not exist: {parent}")


def _load_lexicon(path: str) -> ConceptLexicon:
    return ConceptLexicon.load(path) if path else default_lexicon()


def cmd_gen_world(cfg: dict) -> int:
    if cfg["n"] <= 0:
        raise ValueError(f"n must be positive, got {cfg['n']}")
    lex = _load_lexicon(cfg["lexicon"])
    bias = {}
    for entry in cfg["bias"]:
        if len(entry) != 3:
            raise ValueError(f"bias entries are [a, b, p], got {entry}")
        a, b, p = entry
        bias[(str(a), str(b))] = float(p)
    wc = WorldConfig(
        lexicon=lex, bias=bias, size_range=tuple(cfg["size_range"]),
        seed=cfg["seed"], attr_prob=cfg["attr_prob"],
        action_prob=cfg["action_prob"], location_prob=cfg["location_prob"],
    )
    scenes = generate_scenes(wc, cfg["n"])
    save_scenes(scenes, cfg["out"])
    if cfg["lexicon_out"]:
        # persist corpus co-occurrence counts: closed-set replacement
        # sampling and question negatives both read them downstream
        build_cooccurrence(scenes, lex).save(cfg["lexicon_out"])
    print(f"wrote {len(scenes)} scenes to {cfg['out']} (seed {cfg['seed']})")
    return 0


def _endpoint_rewriter(endpoint: str, lexicon: ConceptLexicon, vocab, mode: str):
    template = "open_set" if mode == "open" else "closed_set"

    def rewrite(scene, caption, task, rng, record_id):
        targets = ag.select_replacement_targets(scene, caption, task, rng=rng)
        fill = {
            "text": caption,
            "targets": ", ".join(targets),
            "forbidden": ", ".join(sorted(scene.concept_names())),
        }
        if template == "closed_set":
            forbidden = set(scene.concept_names())
            repl = []
            for name in targets:
                got = sample_closed_set_replacement(
                    lexicon, lexicon.concepts[name], forbidden, rng)
                repl.append(got.name)
                forbidden.add(got.name)
            fill["replacements"] = ", ".join(repl)
        text = ag.external_llm_rewrite(endpoint, template, fill)
        return ag.record_from_llm_completion(
            scene, caption, task, targets, text, lexicon, vocab,
            record_id=record_id)

    return rewrite


def cmd_augment(cfg: dict) -> int:
    scenes = load_scenes(cfg["scenes"])
    lex = ConceptLexicon.load(cfg["lexicon"])
    for s in scenes:
        for name in sorted(s.concept_names()):
            if name not in lex:
                raise ValueError(
                    f"scene {s.id} references unknown concept {name!r}")
    vocab = standard_vocab(lex)
    ref_scenes = load_scenes(cfg["reference_scenes"]) if cfg["reference_scenes"] else None
    rewriter = None
    if cfg["llm_endpoint"]:
        rewriter = _endpoint_rewriter(cfg["llm_endpoint"], lex, vocab, cfg["mode"])
    records, refs = ag.build_dataset(
        scenes, lex, vocab, cfg["mix"], seed=cfg["seed"], mode=cfg["mode"],
        reference_scenes=ref_scenes,
        n_reference=None if cfg["n_reference"] < 0 else cfg["n_reference"],
        rewriter=rewriter,
    )
    by_id = {s.id: s for s in scenes}
    for r in records:  # independent re-validation of everything emitted
        ag.validate_record(r, by_id[r.scene_id].concept_names(), vocab,
                           lex if r.task != "yesno" else None)
    ag.save_training_records(records, cfg["out_train"])
    ag.save_reference_records(refs, cfg["out_ref"])
    counts = Counter(r.task for r in records)
    for task in ag.TASK_ORDER:
        print(f"{task}: {counts.get(task, 0)} records")
    print(f"reference: {len(refs)} records")
    print(f"validator pass rate 100.0% ({len(records)}/{len(records)})")
    return 0


def cmd_pretrain(cfg: dict) -> int:
    scenes = load_scenes(cfg["scenes"])
    lex = ConceptLexicon.load(cfg["lexicon"])
    vocab = standard_vocab(lex)
    corpus = caption_corpus(scenes, vocab, cfg["styles"])
    model = WindowedLM.init_random(len(vocab), d=cfg["d"], h=cfg["h"],
                                   k=cfg["k"], seed=cfg["seed"])
    tc = TrainConfig(loss="mle", lr=cfg["lr"], momentum=cfg["momentum"],
                     weight_decay=cfg["weight_decay"], steps=cfg["steps"],
                     batch=cfg["batch"], seed=cfg["seed"])
    model, _ = pretrain_mle(model, corpus, tc)
    model.save(cfg["out"])
    print(f"pretrained on {len(corpus)} pairs, "
          f"final mean NLL {mean_nll(model, corpus):.4f}")
    return 0


def _train_config(cfg: dict, loss: str) -> TrainConfig:
    return TrainConfig(
        loss=loss, alpha=cfg.get("alpha", 0.4), beta=cfg.get("beta", 0.1),
        lr=cfg["lr"], momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"], steps=cfg["steps"],
        batch=cfg["batch"], seed=cfg["seed"], kl_mode=cfg["kl_mode"],
        probe_every=cfg["probe_every"], probe_size=cfg["probe_size"],
    )


def cmd_finetune(cfg: dict) -> int:
    records = ag.load_training_records(cfg["train"])
    refs = ag.load_reference_records(cfg["refs"])
    model = WindowedLM.load(cfg["model_in"])
    model, trace = finetune(model, records, refs,
                            _train_config(cfg, cfg["loss"]),
                            out_dir=cfg["out_dir"])
    print(f"{cfg['loss']} finetune done: "
          f"mean alignment loss {mean_alignment_loss(model, records):.4f}, "
          f"divergence from start {trace.final_divergence:.6f}")
    return 0


def cmd_sweep_alpha(cfg: dict) -> int:
    records = ag.load_training_records(cfg["train"])
    refs = ag.load_reference_records(cfg["refs"])
    model = WindowedLM.load(cfg["model_in"])
    eval_fn = None
    if cfg["scenes"]:
        lex = ConceptLexicon.load(cfg["lexicon"]) if cfg["lexicon"] else default_lexicon()
        vocab = standard_vocab(lex)
        scenes = load_scenes(cfg["scenes"])

        def eval_fn(m):
            r = evaluate_model(m, scenes, lex, vocab, seed=cfg["eval_seed"])
            return {"chair_i": r.chair_i, "chair_s": r.chair_s,
                    "coverage": r.coverage, "f1": r.f1}

    rows = sweep_alpha(model, records, refs, list(cfg["alphas"]),
                       _train_config(cfg, "dpa"), csv_path=cfg["out"],
                       eval_fn=eval_fn)
    for row in rows:
        print(f"alpha {row['alpha']}: final_l_a {row['final_l_a']:.4f}, "
              f"divergence {row['final_divergence']:.6f}")
    return 0


def cmd_eval(cfg: dict) -> int:
    model = WindowedLM.load(cfg["model"])
    scenes = load_scenes(cfg["scenes"])
    lex = ConceptLexicon.load(cfg["lexicon"])
    vocab = standard_vocab(lex)
    report = evaluate_model(model, scenes, lex, vocab, seed=cfg["seed"],
                            style=cfg["style"], max_len=cfg["max_len"])
    echo = {k: v for k, v in cfg.items() if k != "seed"}
    report.save(cfg["out"], config=echo, seed=cfg["seed"])
    print(f"chair_i {report.chair_i:.4f} chair_s {report.chair_s:.4f} "
          f"coverage {report.coverage:.4f} f1 {report.f1:.4f} "
          f"yes_bias {report.yes_bias:+.4f}")
    return 0


def _gradcheck_fixture(seed: int):
    """Tiny synthetic batch leaving no parameter coordinate gradient-free."""
    V = 14
    m = WindowedLM.init_random(V, d=3, h=4, k=3, seed=seed)
    ref = WindowedLM.init_random(V, d=3, h=4, k=3, seed=seed + 1)
    everything = list(range(V))
    records = [
        ag.TrainingRecord(
            id="ga", task="short", instruction=everything,
            correct=[7, 8, 9, 10], hallucinated=[7, 11, 9, 10],
            pairs=(ag.AlignedPair(1, 2, 1, 2, "b", "c"),), scene_id="s",
        ),
        ag.TrainingRecord(
            id="gb", task="short", instruction=everything,
            correct=[6, 7, 8, 9, 10], hallucinated=[6, 11, 8, 12, 13],
            pairs=(ag.AlignedPair(1, 2, 1, 2, "a", "b"),
                   ag.AlignedPair(3, 5, 3, 5, "c d", "e f")),
            scene_id="s",
        ),
    ]
    refs = [
        ag.ReferenceRecord(id="ra", instruction=everything, response=[5, 6, 7, 8]),
        ag.ReferenceRecord(id="rb", instruction=everything, response=[11, 12, 13, 2]),
    ]
    return m, ref, records, refs


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["seeds"] < 1:
        raise ValueError(f"seeds must be >= 1, got {cfg['seeds']}")
    worst = {"l_a": 0.0, "l_d": 0.0, "dpa": 0.0, "dpo": 0.0}
    per_seed = {}
    for seed in range(11, 11 + cfg["seeds"]):
        m, ref, records, refs = _gradcheck_fixture(seed)
        params = [m.params[n] for n in PARAM_NAMES]
        builders = {
            "l_a": lambda p: ls.build_dpa_graph(p, records, [], ref, 0.0, m.k)["l_a"],
            "l_d": lambda p: ls.build_dpa_graph(p, records, refs, ref, 1.0, m.k)["l_d"],
            "dpa": lambda p: ls.build_dpa_graph(p, records, refs, ref, 0.4, m.k)["loss"],
            "dpo": lambda p: ls.build_dpo_graph(p, records, ref, 0.1, m.k)["loss"],
        }
        errs = {}
        for name, builder in builders.items():
            def f(leaves, _b=builder):
                return _b(dict(zip(PARAM_NAMES, leaves)))
            errs[name] = ad.grad_check(f, params)
            worst[name] = max(worst[name], errs[name])
        per_seed[seed] = errs
    ok = all(v < cfg["tol"] for v in worst.values())
    for name, v in worst.items():
        mark = "ok" if v < cfg["tol"] else "FAIL"
        print(f"{name}: max rel err {v:.3e} [{mark}]")
    if cfg["out"]:
        with open(cfg["out"], "w", encoding="utf-8") as f:
            json.dump({"tol": cfg["tol"], "max": worst,
                       "per_seed": {str(k): v for k, v in per_seed.items()}},
                      f, indent=2, sort_keys=True)
            f.write("\n")
    return 0 if ok else 1


COMMANDS = {
    "gen-world": cmd_gen_world,
    "augment": cmd_augment,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep-alpha": cmd_sweep_alpha,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phrasealign",
        description="phrase-level alignment experiments on a synthetic world",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default="", help="JSON config file")
        for key, (kind, default) in schema.items():
            flag = "--" + key.replace("_", "-")
            if kind == _JSON:
                p.add_argument(flag, dest=key, type=json.loads, default=None,
                               help=f"JSON value (default {json.dumps(default)})")
            else:
                p.add_argument(flag, dest=key, type=kind, default=None,
                               help=f"default {default!r}" if default is not None
                               else "required")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _threads()
        cfg = _merged_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
