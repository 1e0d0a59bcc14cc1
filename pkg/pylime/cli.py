# -*- coding: utf-8 -*-
'''
Command-line interface.

Subcommands: gen-data, train, eval, analyze, audit and run (multi-run recipes).
Exit codes: 0 on success, 1 on runtime failures, 2 on usage or configuration
errors. Errors are reported on stderr as one JSON object.
'''

import os
import sys
import csv
import json
import time
import hashlib
import logging
import argparse
from dataclasses import dataclass, field, asdict, replace
import numpy as np
from .config import LimeConfig, TrainConfig, load_config, resolve_seed, split_config_dict
from .model import LimeModel
from .tasks import gen_arithmetic, gen_prosqa, build_vocab
from .data import Dataset, read_dataset, write_dataset, load_corpus
from .trainer import Trainer, evaluate
from .checkpoint import load_checkpoint
from .audit import cost_report
from .diagnostics import (collect_representations, probe_patterns, entropy_profile, probe_profile,
                          router_heatmap, per_head_router_report, export_embeddings)
from .exceptions import PyLimeException, ConfigError, UsageError, ProbeError, VocabularyError

COMPLETION_FILE = "completion.json"

__all__ = ["RunManifest", "dispatch", "main", "run_experiment", "train_run", "git_blob_sha1", "RECIPES", "PROFILES"]


def git_blob_sha1(path:str) -> str:
    '''
    Content hash of a file, computed like git hashes blobs.
    '''
    with open(path, "rb") as f:
        content = f.read()
    return hashlib.sha1(b"blob " + str(len(content)).encode("ascii") + b"\0" + content).hexdigest()


def _write_json(path:str, values) -> None:
    tmp = "{}.tmp".format(path)
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(values, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    '''
    Description of a run. manifest.json is written once when the run starts and
    never rewritten; the end time and produced files go to completion.json next
    to it.

    Attributes:
        config (dict): resolved model and training configuration
        seed (int): run seed
        data (dict[str, str]): git-style content hash of every data file
        start_time (float): UNIX time at start
        end_time (float or None): UNIX time at completion
        artifacts (dict[str, str]): produced files
    '''
    config: dict
    seed: int
    data: dict = field(default_factory=dict)
    start_time: float = 0.0
    end_time: float|None = None
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def start(cls, config:dict, seed:int, data_paths=()) -> 'RunManifest':
        return cls(config, seed, {os.path.abspath(p): git_blob_sha1(p) for p in data_paths}, time.time())

    @staticmethod
    def completion_path(path:str) -> str:
        return os.path.join(os.path.dirname(path), COMPLETION_FILE)

    def write(self, path:str) -> None:
        '''
        Write the start record atomically.

        Raises:
            PyLimeException: if a manifest already exists at path.
        '''
        if os.path.exists(path):
            raise PyLimeException("Manifest {} already exists and is immutable.".format(path))
        values = asdict(self)
        del values["end_time"], values["artifacts"]
        _write_json(path, values)

    def seal(self, path:str, artifacts:dict) -> None:
        '''
        Record completion next to the manifest at path, leaving the manifest untouched.
        '''
        self.end_time = time.time()
        self.artifacts = dict(artifacts)
        _write_json(self.completion_path(path), {"end_time": self.end_time, "artifacts": self.artifacts})

    @classmethod
    def read(cls, path:str) -> 'RunManifest':
        '''
        Load a manifest together with its completion record, when there is one.
        '''
        with open(path, "r", encoding="utf-8") as f:
            manifest = cls(**json.load(f))
        completion = cls.completion_path(path)
        if os.path.exists(completion):
            with open(completion, "r", encoding="utf-8") as f:
                record = json.load(f)
            manifest.end_time = record["end_time"]
            manifest.artifacts = record["artifacts"]
        return manifest


def _load_data(path:str, seq_len:int) -> Dataset:
    if path.endswith(".txt"):
        return load_corpus(path, seq_len)
    return read_dataset(path)


def _fit_config(model_cfg:LimeConfig, train_cfg:TrainConfig, data:Dataset) -> 'tuple[LimeConfig, TrainConfig]':
    '''
    Adapt vocabulary size, sequence length and context length to a dataset.
    '''
    longest = max(len(s) for s in data)
    seq_len = max(train_cfg.seq_len, longest - 1) if data.kind != "corpus" else train_cfg.seq_len
    max_seq = max(model_cfg.max_seq, seq_len)
    if data.kind != "corpus":
        # room for open generation of twice the longest solution
        max_seq = max(max_seq, longest + 2 * data.max_solution_length)
    return replace(model_cfg, vocab_size=len(data.vocab), max_seq=max_seq), replace(train_cfg, seq_len=seq_len)


def train_run(run_dir:str, model_cfg:LimeConfig, train_cfg:TrainConfig, train_data:Dataset, eval_data:Dataset|None=None, data_paths=(), resume:str|None=None, accuracy:bool=False) -> dict:
    '''
    Train one model in its own run directory.

    The directory receives manifest.json, config.json, metrics.jsonl,
    last.ckpt (best.ckpt with periodic evaluation), summary.json and
    completion.json. Resuming into a directory keeps its manifest.

    Returns:
        dict: summary (final loss, evaluation metrics)
    '''
    os.makedirs(run_dir, exist_ok=True)
    model_cfg, train_cfg = _fit_config(model_cfg, train_cfg, train_data)
    config = dict(model_cfg.to_dict(), **train_cfg.to_dict())
    manifest_path = os.path.join(run_dir, "manifest.json")
    if resume is not None and os.path.exists(manifest_path):
        manifest = RunManifest.read(manifest_path)
        current = {os.path.abspath(p): git_blob_sha1(p) for p in data_paths}
        if current and current != manifest.data:
            logging.warning("Resuming %s with data that differs from its manifest", run_dir)
    else:
        manifest = RunManifest.start(config, train_cfg.seed, data_paths)
        manifest.write(manifest_path)
    _write_json(os.path.join(run_dir, "config.json"), config)
    logging.info("Run %s: variant %s, %d layers, seed %d", run_dir, model_cfg.routing_variant, model_cfg.num_layers, train_cfg.seed)
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, train_data, eval_data, run_dir, train_cfg)
    else:
        model = LimeModel(model_cfg, seed=train_cfg.seed)
        trainer = Trainer(model, train_cfg, train_data, eval_data, run_dir)
    metrics = trainer.fit()
    summary = {"steps": trainer.state.step, "final_loss": metrics[-1]["loss"] if metrics else None,
               "variant": model_cfg.routing_variant, "j": model_cfg.routing_j, "layers": model_cfg.num_layers}
    if eval_data is not None:
        summary.update(trainer.evaluate("ppl"))
        if accuracy and eval_data.kind != "corpus":
            summary.update(trainer.evaluate("accuracy"))
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    artifacts = {name: os.path.join(run_dir, name) for name in ("config.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "summary.json")
                 if os.path.exists(os.path.join(run_dir, name))}
    manifest.seal(manifest_path, artifacts)
    return summary


# ---------------------------------------------------------------- recipes

@dataclass
class Profile:
    '''
    Scale of a recipe.
    '''
    aet_train: int
    aet_test: int
    aet_epochs: int
    prosqa_train: int
    prosqa_test: int
    prosqa_epochs: int
    lm_samples: int
    lm_steps: int
    lm_hidden: int
    lm_layers: int
    depth_hidden: int
    depth_steps: int
    batch_size: int
    task_model: dict = field(default_factory=dict)


PROFILES = {
    "reference": Profile(50000, 1000, 200, 18000, 500, 10, 50000, 20000, 256, 8, 128, 5000, 64),
    "fast": Profile(10000, 500, 60, 4000, 200, 10, 10000, 2000, 256, 8, 128, 1000, 64),
    "smoke": Profile(8, 4, 1, 8, 4, 1, 16, 2, 16, 2, 16, 2, 4,
                     task_model=dict(hidden_size=16, intermediate_size=32, num_heads=2, num_kv_heads=2)),
}

ABLATION_VARIANTS = [("baseline", None), ("full", None), ("average", None),
                     ("last_j", 2), ("last_j", 4), ("last_j", 6), ("first_j", 2), ("first_j", 4), ("first_j", 6)]
# desk analogues of 32 / 64 / 128-layer runs
DEPTH_MAPPING = {8: 32, 16: 64, 32: 128}


def _preset(name:str, profile:Profile, **train_overrides) -> 'tuple[LimeConfig, TrainConfig]':
    model_values, train_values = split_config_dict({"preset": name})
    model_values.update(profile.task_model)
    train_values.update(batch_size=profile.batch_size, **train_overrides)
    if train_values.get("max_steps") is not None:
        train_values["epochs"] = None
    return LimeConfig(**model_values), TrainConfig(**train_values)


def _task_split(task:str, train:int, test:int, seed:int, **params) -> 'tuple[Dataset, Dataset]':
    if task == "aet":
        samples = gen_arithmetic(params["n_operands"], train + test, seed)
    else:
        samples = gen_prosqa(train + test, seed)
    vocab = build_vocab(samples)
    return Dataset(samples[:train], vocab), Dataset(samples[train:], vocab)


def _lm_split(profile:Profile, seed:int, corpus:str|None, seq_len:int) -> 'tuple[Dataset, Dataset]':
    if corpus is not None:
        data = load_corpus(corpus, seq_len)
        cut = max(1, int(len(data) * 0.95))
        return Dataset(data.samples[:cut], data.vocab), Dataset(data.samples[cut:] or data.samples[-1:], data.vocab)
    return _task_split("aet", profile.lm_samples, max(profile.lm_samples // 10, 2), seed, n_operands=6)


def _write_rows(path:str, rows:'list[dict]') -> None:
    fieldnames = []
    for row in rows:
        fieldnames += [k for k in row if k not in fieldnames]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _aet_sweep(out_dir:str, profile:Profile, seed:int, corpus:str|None) -> 'list[dict]':
    rows = []
    for n in (4, 5, 6):
        train, test = _task_split("aet", profile.aet_train, profile.aet_test, seed, n_operands=n)
        for variant in ("full", "baseline"):
            model_cfg, train_cfg = _preset("aet", profile, epochs=profile.aet_epochs, seed=seed)
            summary = train_run(os.path.join(out_dir, "aet{}-{}".format(n, variant)), model_cfg.with_variant(variant),
                                train_cfg, train, test, accuracy=True)
            rows.append({"operands": n, "variant": variant, "accuracy": summary["accuracy"], "ppl": summary["ppl"]})
    return rows


def _prosqa_ft(out_dir:str, profile:Profile, seed:int, corpus:str|None) -> 'list[dict]':
    train, test = _task_split("prosqa", profile.prosqa_train, profile.prosqa_test, seed)
    rows = []
    for variant in ("full", "baseline"):
        model_cfg, train_cfg = _preset("prosqa", profile, epochs=profile.prosqa_epochs, seed=seed)
        summary = train_run(os.path.join(out_dir, "prosqa-{}".format(variant)), model_cfg.with_variant(variant),
                            train_cfg, train, test, accuracy=True)
        rows.append({"variant": variant, "accuracy": summary["accuracy"], "ppl": summary["ppl"]})
    return rows


def _lm_configs(profile:Profile, seed:int, layers:int, hidden:int, steps:int) -> 'tuple[LimeConfig, TrainConfig]':
    heads = max(1, hidden // 32) if hidden >= 32 else 2
    model_cfg = LimeConfig(hidden_size=hidden, intermediate_size=4 * hidden, num_layers=layers,
                           num_heads=heads, num_kv_heads=heads, max_seq=256)
    warmup = min(200, steps // 10)
    train_cfg = TrainConfig(lr=1e-3, router_lr=1e-2, weight_decay=0.1, schedule="cosine", warmup_steps=warmup,
                            max_steps=steps, batch_size=profile.batch_size, seq_len=256, mode="lm", seed=seed)
    return model_cfg, train_cfg


def _ablation_sweep(out_dir:str, profile:Profile, seed:int, corpus:str|None) -> 'list[dict]':
    model_cfg, train_cfg = _lm_configs(profile, seed, profile.lm_layers, profile.lm_hidden, profile.lm_steps)
    train, valid = _lm_split(profile, seed, corpus, train_cfg.seq_len)
    rows = []
    for variant, j in ABLATION_VARIANTS:
        name = variant if j is None else "{}-{}".format(variant.split("_")[0], j)
        summary = train_run(os.path.join(out_dir, name), model_cfg.with_variant(variant, j), train_cfg, train, valid)
        rows.append({"variant": name, "val_loss": summary["loss"], "ppl": summary["ppl"]})
    return rows


def _depth_sweep(out_dir:str, profile:Profile, seed:int, corpus:str|None) -> 'list[dict]':
    rows = []
    for layers, reference in DEPTH_MAPPING.items():
        model_cfg, train_cfg = _lm_configs(profile, seed, layers, profile.depth_hidden, profile.depth_steps)
        train, valid = _lm_split(profile, seed, corpus, train_cfg.seq_len)
        for variant in ("full", "baseline"):
            summary = train_run(os.path.join(out_dir, "L{}-{}".format(layers, variant)), model_cfg.with_variant(variant),
                                train_cfg, train, valid)
            rows.append({"layers": layers, "reference_layers": reference, "variant": variant,
                         "val_loss": summary["loss"], "ppl": summary["ppl"]})
    return rows


def _collapse_report(out_dir:str, profile:Profile, seed:int, corpus:str|None) -> 'list[dict]':
    if corpus is not None:
        model_cfg, train_cfg = _lm_configs(profile, seed, profile.lm_layers, profile.lm_hidden, profile.lm_steps)
        train, test = _lm_split(profile, seed, corpus, train_cfg.seq_len)
    else:
        train, test = _task_split("aet", profile.aet_train, profile.aet_test, seed, n_operands=6)
        model_cfg, train_cfg = _preset("aet", profile, epochs=profile.aet_epochs, seed=seed)
    rows = []
    for variant in ("full", "baseline"):
        run_dir = os.path.join(out_dir, variant)
        train_run(run_dir, model_cfg.with_variant(variant), train_cfg, train, test)
        model = load_checkpoint(os.path.join(run_dir, "last.ckpt")).model
        dump, probe = _record(model, test, 256)
        for kind, layers in entropy_profile(dump).items():
            for layer, value in layers.items():
                rows.append({"variant": variant, "measure": "entropy", "kind": kind, "layer": layer, "value": value})
        if probe is not None:
            for layer, (mean, std) in probe_profile(probe).items():
                rows.append({"variant": variant, "measure": "probe", "kind": "hiddens", "layer": layer, "value": mean, "std": std})
        heatmap = router_heatmap(model.router)
        np.savetxt(os.path.join(out_dir, "heatmap-{}.csv".format(variant)), heatmap.matrix, delimiter=",", fmt="%.9g")
    return rows


RECIPES = {
    "aet-sweep": _aet_sweep,
    "prosqa-ft": _prosqa_ft,
    "ablation-sweep": _ablation_sweep,
    "depth-sweep": _depth_sweep,
    "collapse-report": _collapse_report,
}


def run_experiment(recipe:str, out_dir:str, profile:str="fast", seed:int=0, corpus:str|None=None) -> 'list[dict]':
    '''
    Run a multi-run recipe and write summary.csv.

    Args:
        recipe (str): one of RECIPES
        out_dir (str): directory receiving one run directory per run
        profile (str): "reference", "fast" or "smoke"
        seed (int): seed shared by every run
        corpus (str or None): plain-text corpus for language-model recipes;
            6-operand AET samples stand in for it when None

    Returns:
        list[dict]: summary rows

    Raises:
        UsageError: if the recipe or profile is unknown.
    '''
    if recipe not in RECIPES:
        raise UsageError("Unknown recipe '{}'; expected one of {}.".format(recipe, ", ".join(RECIPES)))
    if profile not in PROFILES:
        raise UsageError("Unknown profile '{}'; expected one of {}.".format(profile, ", ".join(PROFILES)))
    os.makedirs(out_dir, exist_ok=True)
    logging.info("Recipe %s (%s profile) in %s", recipe, profile, out_dir)
    rows = RECIPES[recipe](out_dir, PROFILES[profile], seed, corpus)
    _write_rows(os.path.join(out_dir, "summary.csv"), rows)
    logging.info("Recipe %s done: %d rows", recipe, len(rows))
    return rows


# ---------------------------------------------------------------- commands

def _record(model:LimeModel, data:Dataset, count:int, include_routed:bool=False):
    sequences = data.samples[:count]
    try:
        return collect_representations(model, sequences, probe_patterns(data.vocab), include_routed=include_routed)
    except (ProbeError, VocabularyError) as e:
        logging.info("No probe set: %s", e)
        return collect_representations(model, sequences, None, include_routed=include_routed)


def _cmd_gen_data(args) -> dict:
    seed = resolve_seed(args.seed)
    total = args.count + (args.split or 0)
    if args.task == "aet":
        samples = gen_arithmetic(args.operands, total, seed)
        data = Dataset(samples, build_vocab(samples))
    elif args.task == "prosqa":
        samples = gen_prosqa(total, seed, args.concepts, args.rules, args.depth)
        data = Dataset(samples, build_vocab(samples))
    else:
        if args.input is None:
            raise UsageError("gen-data --task corpus needs --input.")
        data = load_corpus(args.input, args.seq_len)
    os.makedirs(args.out, exist_ok=True)
    files = {}
    train = data.subset(args.count) if args.task != "corpus" else data
    files["train"] = os.path.join(args.out, "train.jsonl")
    write_dataset(files["train"], train)
    if args.split and args.task != "corpus":
        files["test"] = os.path.join(args.out, "test.jsonl")
        write_dataset(files["test"], Dataset(data.samples[args.count:], data.vocab))
    return {"task": args.task, "seed": seed, "samples": len(data), "vocab_size": len(data.vocab), "files": files}


def _cmd_train(args) -> dict:
    overrides = {}
    if args.variant is not None:
        overrides["routing_variant"] = args.variant
    if args.j is not None:
        overrides["routing_j"] = args.j
    model_cfg, train_cfg = load_config(args.config, overrides)
    train_cfg = replace(train_cfg, seed=resolve_seed(args.seed, train_cfg.seed if "seed" in _config_keys(args.config) else None))
    train_data = _load_data(args.data, train_cfg.seq_len)
    eval_data = _load_data(args.eval_data, train_cfg.seq_len) if args.eval_data else None
    paths = [p for p in (args.data, args.eval_data) if p]
    return train_run(args.out_dir, model_cfg, train_cfg, train_data, eval_data, paths, args.resume, accuracy=args.accuracy)


def _config_keys(path:str) -> set:
    with open(path, "r", encoding="utf-8") as f:
        values = json.load(f)
    return set(values) if isinstance(values, dict) else set()


def _cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_data(args.data, ckpt.model.cfg.max_seq - 1)
    return evaluate(ckpt.model, data, args.mode, batch_size=args.batch_size)


def _cmd_analyze(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    if args.analysis == "router-heatmap":
        heatmap = router_heatmap(model.router)
        np.savetxt(args.out, heatmap.matrix, delimiter=",", fmt="%.9g")
        report = per_head_router_report(model.router).normalized
        return {"heatmap": heatmap.matrix.tolist(), "per_head": report.tolist(), "out": args.out}
    data = _load_data(args.data, args.seq_len)
    dump, probe = _record(model, data, args.sequences, include_routed=args.include_routed)
    if args.analysis == "entropy":
        result = entropy_profile(dump, args.alpha, kinds=("values", "hiddens", "routed") if args.include_routed else ("values", "hiddens"))
        _write_json(args.out, result)
        return result
    if args.analysis == "probe":
        if probe is None:
            raise ProbeError("The probe words do not occur in {}.".format(args.data))
        result = {str(layer): {"mean": m, "std": s} for layer, (m, s) in probe_profile(probe, args.folds, args.seed or 0, args.kind).items()}
        _write_json(args.out, result)
        return result
    labels = {}
    if probe is not None:
        labels = {int(row): probe.classes[int(label)] for row, label in zip(probe.rows, probe.labels)}
    rows = export_embeddings(dump, args.layer, args.kind, args.out, labels)
    return {"rows": rows, "out": args.out}


def _cmd_audit(args) -> dict:
    with open(args.config, "r", encoding="utf-8") as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise ConfigError("Configuration file {} must hold a JSON object.".format(args.config))
    model_values, _ = split_config_dict(values)
    cfg = LimeConfig.from_dict(model_values)
    return cost_report(cfg, args.batch, args.seq or cfg.max_seq).to_dict()


def _cmd_run(args) -> dict:
    rows = run_experiment(args.recipe, args.out_dir, args.profile, resolve_seed(args.seed), args.corpus)
    return {"recipe": args.recipe, "rows": rows}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pylime", description="Layer-integrated memory transformer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--task", choices=["aet", "prosqa", "corpus"], required=True)
    p.add_argument("--operands", type=int, default=4, help="AET operand count")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--split", type=int, default=0, help="extra samples written to test.jsonl")
    p.add_argument("--concepts", type=int, default=20)
    p.add_argument("--rules", type=int, default=23)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--input", help="plain-text file for --task corpus")
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset .jsonl or corpus .txt")
    p.add_argument("--eval-data")
    p.add_argument("--variant", choices=["full", "baseline", "average", "last-j", "first-j"])
    p.add_argument("--j", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume")
    p.add_argument("--accuracy", action="store_true", help="score open generation on --eval-data")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["ppl", "accuracy"], default="ppl")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="representation and router diagnostics")
    p.add_argument("analysis", choices=["entropy", "probe", "router-heatmap", "export-embeddings"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--kind", choices=["values", "hiddens", "routed"], default="hiddens")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--sequences", type=int, default=256)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--include-routed", action="store_true")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("audit", help="analytic parameter and FLOPs report")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seq", type=int)
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("run", help="run a multi-run recipe")
    p.add_argument("recipe", choices=list(RECIPES))
    p.add_argument("--profile", choices=list(PROFILES), default="fast")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus")
    p.set_defaults(func=_cmd_run)
    return parser


def _report_error(e:Exception) -> None:
    print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)


def dispatch(argv:'list[str]|None'=None) -> int:
    '''
    Parse arguments, run a subcommand and print its result as JSON.

    Args:
        argv (list[str] or None): arguments without the program name; sys.argv when None

    Returns:
        int: 0 on success, 1 on runtime failure, 2 on usage or configuration error
    '''
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        _report_error(e)
        return 2
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "analyze" and args.analysis != "router-heatmap" and args.data is None:
        _report_error(UsageError("analyze {} needs --data.".format(args.analysis)))
        return 2
    try:
        result = args.func(args)
    except (UsageError, ConfigError) as e:
        _report_error(e)
        return 2
    except (PyLimeException, OSError, ValueError, KeyError) as e:
        logging.debug("Command failed", exc_info=True)
        _report_error(e)
        return 1
    print(json.dumps(result, default=float))
    return 0


def main() -> None:
    sys.exit(dispatch())
