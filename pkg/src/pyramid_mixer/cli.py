"""Command line front end.

One executable, six subcommands: ``prep`` materializes a filtered
dataset, ``train`` fits a model, ``eval`` ranks with a saved
checkpoint, ``gradcheck`` compares backward gradients against finite
differences, ``ablate`` sweeps the branch-removal variants, and
``cost`` prints the analytic multiply/parameter budget.

Configuration is one JSON document with sections ``data``, ``model``,
``train``, ``eval``, ``gradcheck``, ``ablate``, ``cost`` plus top-level
``seed``, ``out``, ``tag``. Every key has a default, unknown keys are
rejected, and dotted ``--set`` overrides (``--set model.D=32``) patch
individual values. Each artifact-producing run writes its fully
resolved config next to its outputs so the run can be replayed
bit-identically.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure (divergence or a failed gradient check), 5 malformed binary
artifact, 1 anything else. Errors print one ``pymx: error[kind] ...``
line on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .data import core_filter, export_canonical_tsv, ingest, split_leave_one_out
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    NumericError,
    PymxError,
)
from .evaluation import (
    ablation_variants,
    compare_variants,
    count_cost,
    evaluate_ranking,
    variants_as_json,
    variants_as_text,
)
from .model import ModelConfig, PyramidMixerNet
from .tensor import grad_check
from .training import (
    TrainSettings,
    compute_loss,
    load_checkpoint,
    net_from_checkpoint,
    train,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "run",
    "tag": None,
    "data": {"path": None, "format": "canonical-tsv", "min_count": 5},
    "model": {
        "L": 50, "F": 2, "D": 64, "D_prime": 16, "L_prime": 12, "S": 3,
        "K": 3, "stride": 2, "padding": 1, "activation": "gelu",
        "low_rank": True, "cross_behavior_on": True, "cross_feature_on": True,
        "fusion_on": True, "pyramid_on": True, "eps": 1e-5,
    },
    "train": {
        "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
        "weight_decay": 0.0, "batch_size": 256, "patience": 10,
        "max_epochs": 200, "valid_k": 10, "resume": None,
    },
    "eval": {"checkpoint": None, "stage": "test", "k": 10, "batch_size": 256, "use_best": True},
    "gradcheck": {
        "L": 6, "F": 2, "D": 8, "D_prime": 4, "L_prime": 2, "S": 2,
        "K": 3, "stride": 2, "padding": 1, "activation": "gelu",
        "vocab_sizes": [20, 6], "batch": 4, "seeds": 3, "h": 1e-5, "tolerance": 1e-3,
    },
    "ablate": {"seeds": [0, 1, 2], "k": 10},
    "cost": {"vocab_sizes": [1350, 12]},
}

_MODEL_KEYS = ("L", "F", "D", "D_prime", "L_prime", "S", "K", "stride", "padding",
               "activation", "low_rank", "cross_behavior_on", "cross_feature_on",
               "fusion_on", "pyramid_on", "eps")


# ---------------------------------------------------------------------------
# config plumbing


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' expects a section, got {value!r}")
            merged[key] = _merge(merged[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = value
    return merged


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key '{key}'")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key '{key}' is a section, not a value")
    node[leaf] = value


def resolve_config(args) -> dict:
    override = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                override = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(override, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
    config = _merge(DEFAULT_CONFIG, override)
    for assignment in args.set or []:
        _apply_set(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    return config


def _model_config(section: dict, **extra) -> ModelConfig:
    unknown = sorted(set(section) - set(_MODEL_KEYS))
    if unknown:
        raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
    return ModelConfig(**section, **extra)


def make_run_dir(config: dict, command: str) -> str:
    tag = config["tag"] or command
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(config["out"], f"{stamp}-{tag}")
    path = base
    counter = 2
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path = f"{base}-{counter}"
            counter += 1


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def save_resolved(run_dir: str, config: dict) -> None:
    _write_json(os.path.join(run_dir, "config.json"), config)


def load_dataset(config: dict):
    data = config["data"]
    if not data["path"]:
        raise ConfigError("data.path is required for this command")
    records = ingest(data["path"], data["format"])
    return split_leave_one_out(records, min_count=data["min_count"])


def _inject_vocab(model_cfg: ModelConfig, dataset) -> ModelConfig:
    fields = dataset.vocab.fields
    if model_cfg.F != len(fields):
        raise ConfigError(f"model.F={model_cfg.F} but the dataset has {len(fields)} fields {fields!r}")
    return replace(model_cfg, field_names=fields, vocab_sizes=dataset.vocab.sizes())


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep(config: dict) -> int:
    data = config["data"]
    if not data["path"]:
        raise ConfigError("data.path is required for this command")
    records = ingest(data["path"], data["format"])
    filtered = core_filter(records, min_count=data["min_count"])
    dataset = split_leave_one_out(records, min_count=data["min_count"])
    run_dir = make_run_dir(config, "prep")
    save_resolved(run_dir, config)
    tsv_path = os.path.join(run_dir, "dataset.tsv")
    export_canonical_tsv(filtered, tsv_path)
    vocab_path = os.path.join(run_dir, "vocab.json")
    dataset.vocab.save(vocab_path)
    item_field = dataset.vocab.fields[0]
    stats = {
        "interactions": len(filtered),
        "users": len(dataset.split),
        "items": len(dataset.vocab.values[item_field]),
        "dropped_users": dataset.dropped_users,
        "fields": list(dataset.vocab.fields),
    }
    _write_json(os.path.join(run_dir, "stats.json"), stats)
    print(f"prep: {stats['interactions']} interactions, {stats['users']} users, "
          f"{stats['items']} items ({stats['dropped_users']} users dropped)")
    print(f"wrote {tsv_path}")
    print(f"wrote {vocab_path}")
    return 0


def _train_settings(section: dict) -> TrainSettings:
    settings = TrainSettings(**{k: v for k, v in section.items() if k != "resume"})
    settings.validate()
    return settings


def cmd_train(config: dict) -> int:
    dataset = load_dataset(config)
    model_cfg = _model_config(config["model"])
    settings = _train_settings(config["train"])
    run_dir = make_run_dir(config, "train")
    save_resolved(run_dir, config)
    print(f"run dir {run_dir}")
    outcome = train(model_cfg, dataset, settings, seed=config["seed"],
                    out_dir=run_dir, resume_from=config["train"]["resume"])
    best = outcome.best_net()
    report = evaluate_ranking(best, dataset.split, stage="test",
                              k=config["eval"]["k"], batch_size=config["eval"]["batch_size"])
    _write_json(os.path.join(run_dir, "metrics.json"), {
        "test": report.as_dict(),
        "valid_best": outcome.best_metric,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
    })
    _write_json(os.path.join(run_dir, "cost.json"), count_cost(best.config).as_dict())
    print(f"trained {outcome.epochs_run} epochs, best epoch {outcome.best_epoch} "
          f"(valid mrr {outcome.best_metric:.4f})")
    print(f"test {report.as_text()}")
    print(f"wrote {outcome.checkpoint_path}")
    return 0


def cmd_eval(config: dict) -> int:
    section = config["eval"]
    if not section["checkpoint"]:
        raise ConfigError("eval.checkpoint is required for this command")
    if section["stage"] not in ("valid", "test"):
        raise ConfigError(f"eval.stage must be 'valid' or 'test', got {section['stage']!r}")
    ck = load_checkpoint(section["checkpoint"])
    dataset = load_dataset(config)
    if ck.config.field_names != dataset.vocab.fields or ck.config.vocab_sizes != dataset.vocab.sizes():
        raise ConfigError(
            f"checkpoint was built for fields {ck.config.field_names!r} with sizes "
            f"{ck.config.vocab_sizes!r}, dataset has {dataset.vocab.fields!r} "
            f"with sizes {dataset.vocab.sizes()!r}")
    net = net_from_checkpoint(ck, use_best=section["use_best"])
    report = evaluate_ranking(net, dataset.split, stage=section["stage"],
                              k=section["k"], batch_size=section["batch_size"])
    run_dir = make_run_dir(config, "eval")
    save_resolved(run_dir, config)
    metrics_path = os.path.join(run_dir, "metrics.json")
    _write_json(metrics_path, report.as_dict())
    print(json.dumps(report.as_dict()))
    log.info("wrote %s", metrics_path)
    return 0


def cmd_gradcheck(config: dict) -> int:
    section = dict(config["gradcheck"])
    vocab_sizes = tuple(section.pop("vocab_sizes"))
    batch = section.pop("batch")
    n_seeds = section.pop("seeds")
    h = section.pop("h")
    tolerance = section.pop("tolerance")
    if len(vocab_sizes) != section["F"]:
        raise ConfigError(f"gradcheck.vocab_sizes must list {section['F']} sizes, got {vocab_sizes!r}")
    field_names = ("item",) + tuple(f"side{i}" for i in range(1, section["F"]))
    model_cfg = ModelConfig(**section, low_rank=True,
                            field_names=field_names, vocab_sizes=vocab_sizes)
    model_cfg.validate()

    worst_by_group: dict[str, float] = {}
    for seed in range(n_seeds):
        net = PyramidMixerNet(model_cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(1000 + seed)
        fields = np.stack([rng.integers(2, size_, size=(batch, model_cfg.L))
                           for size_ in vocab_sizes], axis=2).astype(np.int32)
        lengths = rng.integers(1, model_cfg.L + 1, size=batch)
        mask = np.zeros((batch, model_cfg.L), dtype=bool)
        for i, n in enumerate(lengths):
            mask[i, model_cfg.L - n:] = True
        fields[~mask] = 0
        targets = rng.integers(2, vocab_sizes[0], size=batch)

        def loss_fn():
            return compute_loss(net.forward(fields, mask), targets)

        groups: dict[str, list] = {}
        for name, p in net.params.items():
            groups.setdefault(name.rsplit(".", 1)[0], []).append(p)
        for group, tensors in groups.items():
            err = grad_check(loss_fn, tensors, h=h, rel_tol=float("inf"))
            worst_by_group[group] = max(worst_by_group.get(group, 0.0), err)

    worst = max(worst_by_group.values())
    for group in sorted(worst_by_group):
        err = worst_by_group[group]
        verdict = "PASS" if err <= tolerance else "FAIL"
        print(f"{group:<16} max rel err {err:.3e}  {verdict}")
    if worst > tolerance:
        raise NumericError(f"gradient check failed: worst rel err {worst:.3e} > {tolerance:g}")
    print(f"gradcheck PASS (worst rel err {worst:.3e} <= {tolerance:g}, {n_seeds} seeds)")
    return 0


def cmd_ablate(config: dict) -> int:
    dataset = load_dataset(config)
    base = _model_config(config["model"])
    settings = _train_settings(config["train"])
    results = compare_variants(ablation_variants(base), dataset, settings,
                               seeds=list(config["ablate"]["seeds"]), k=config["ablate"]["k"])
    run_dir = make_run_dir(config, "ablate")
    save_resolved(run_dir, config)
    table_path = os.path.join(run_dir, "ablation.json")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(variants_as_json(results))
        fh.write("\n")
    print(variants_as_text(results))
    print(f"wrote {table_path}")
    return 0


def cmd_cost(config: dict) -> int:
    model_cfg = _model_config(config["model"])
    if config["data"]["path"]:
        model_cfg = _inject_vocab(model_cfg, load_dataset(config))
    else:
        vocab_sizes = tuple(config["cost"]["vocab_sizes"])
        if len(vocab_sizes) != model_cfg.F:
            raise ConfigError(
                f"cost.vocab_sizes must list {model_cfg.F} sizes, got {vocab_sizes!r}")
        field_names = ("item",) + tuple(f"side{i}" for i in range(1, model_cfg.F))
        model_cfg = replace(model_cfg, field_names=field_names, vocab_sizes=vocab_sizes)
    report = count_cost(model_cfg)
    run_dir = make_run_dir(config, "cost")
    save_resolved(run_dir, config)
    cost_path = os.path.join(run_dir, "cost.json")
    _write_json(cost_path, report.as_dict())
    print(report.as_text())
    print(f"wrote {cost_path}")
    return 0


COMMANDS = {
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # argparse would exit(2) with multi-line usage text; route through the
    # single-line error contract instead.
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pymx", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--set", metavar="KEY=VALUE", action="append",
                       help="override one config value (dotted path, repeatable)")
        p.add_argument("--seed", type=int, metavar="N", help="override the run seed")
        p.add_argument("--out", metavar="DIR", help="parent directory for run outputs")
    return parser


_ERROR_CODES = (
    (ConfigError, 2, "config"),
    (DataError, 3, "data"),
    ((DivergenceError, NumericError), 4, "numeric"),
    (FormatError, 5, "format"),
)


def _fail(kind: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(f"pymx: error[{kind}] {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except PymxError as exc:
        for types, code, kind in _ERROR_CODES:
            if isinstance(exc, types):
                return _fail(kind, exc, code)
        return _fail("internal", exc, 1)
    except OSError as exc:
        return _fail("data", exc, 3)


if __name__ == "__main__":
    raise SystemExit(main())
