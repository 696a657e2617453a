"""Command-line entry point.

Subcommands::

    gen-data   write a synthetic corpus
    pretrain   multitask pretraining on a labeled (and optional unlabeled) manifest
    finetune   new CTC head on a target-language manifest, feature encoder frozen
    eval       phone error rate of a model on a manifest
    analyze    codeword/phoneme co-occurrence and codebook diagnostics

Settings come from an optional INI file (sections ``[model]``, ``[loss]``,
``[train]``, ``[data]``) and are overridden by flags.  Relative output
directories are placed under ``$MTSPEECH_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import data as D
from . import losses as L
from . import model as M
from . import training as T

log = logging.getLogger("mtspeech")

OUTPUT_ROOT_ENV = "MTSPEECH_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_INFEASIBLE = 5


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


def _coerce(value: str, default, name):
    try:
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
        if isinstance(default, tuple):
            return tuple(type(default[0])(v) for v in value.replace(",", " ").split()) if default else ()
        return value
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for {name}") from None


def _apply(cfg, items, section):
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    updates = {}
    for key, raw in items.items():
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = getattr(cfg, key)
        updates[key] = raw if not isinstance(raw, str) else _coerce(raw, default, f"{section}.{key}")
    try:
        return dataclasses.replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def read_ini(path):
    parser = configparser.ConfigParser()
    if path is None:
        return {}
    if not Path(path).is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {"model", "loss", "train", "data"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"{path}: unknown section [{sec}]")
    return {sec: dict(parser[sec]) for sec in parser.sections()}


def build_configs(ini, flags):
    """Merge INI sections and flag overrides into (ModelConfig, LossConfig, TrainConfig)."""
    model_sec = dict(ini.get("model", {}))
    preset = model_sec.pop("preset", None)
    preset = flags.get("preset") or preset or "desk"
    if preset not in M.PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(M.PRESETS)}")
    mcfg = M.PRESETS[preset]
    qkeys = {f.name for f in dataclasses.fields(M.QuantizerConfig)}
    enc = _apply(mcfg.encoder, {k: v for k, v in model_sec.items() if k not in qkeys}, "model")
    quant = _apply(mcfg.quantizer, {k: v for k, v in model_sec.items() if k in qkeys}, "model")
    mcfg = M.ModelConfig(enc, quant)
    lcfg = _apply(L.LossConfig(), ini.get("loss", {}), "loss")
    tcfg = _apply(T.TrainConfig(), ini.get("train", {}), "train")
    lcfg = _apply(lcfg, {k: v for k, v in flags.items()
                         if k in {f.name for f in dataclasses.fields(L.LossConfig)} and v is not None},
                  "loss")
    tcfg = _apply(tcfg, {k: v for k, v in flags.items()
                         if k in {f.name for f in dataclasses.fields(T.TrainConfig)} and v is not None},
                  "train")
    return mcfg, lcfg, tcfg


def resolve_out(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def file_digest(path):
    """Git-style blob digest of a file."""
    blob = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def manifest_digest(path):
    """Digest over a manifest and every audio file it lists."""
    man = D.load_manifest(path)
    h = hashlib.sha1(file_digest(path).encode())
    for rec in man.records:
        h.update(file_digest(man.audio_path(rec)).encode())
    return h.hexdigest()


def write_run_info(out, command, config, seed, inputs):
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, path in inputs.items():
        if path is None:
            continue
        digests[name] = manifest_digest(path) if str(path).endswith(".tsv") else file_digest(path)
    info = {"command": command, "seed": seed, "config": config, "inputs": digests}
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def _load(path, with_frames=False):
    try:
        return D.load_utterances(D.load_manifest(path), with_frame_labels=with_frames)
    except OSError as exc:
        raise D.DataError(str(exc)) from None


def _model_from_checkpoint(path):
    ck = T.load_checkpoint(path)
    mcfg, lcfg, tcfg = T.config_from_dict(ck.config)
    return ck, mcfg, lcfg, tcfg


def cmd_gen_data(args):
    d = {}
    if args.spec:
        try:
            d = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read spec file {args.spec}: {exc}") from None
    d.update(read_ini(args.config).get("data", {}))
    defaults = D.SyntheticSpec()
    typed = {}
    for k, v in d.items():
        if k not in {f.name for f in dataclasses.fields(D.SyntheticSpec)}:
            raise ConfigError(f"unknown data key {k!r}")
        typed[k] = _coerce(v, getattr(defaults, k), f"data.{k}") if isinstance(v, str) else v
    if args.seed is not None:
        typed["seed"] = args.seed
    try:
        spec = D.SyntheticSpec.from_dict(typed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid corpus spec: {exc}") from None
    out = resolve_out(args.out)
    manifests = D.generate_corpus(spec, out)
    for name, path in manifests.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_pretrain(args):
    ini = read_ini(args.config)
    mcfg, lcfg, tcfg = build_configs(ini, vars(args))
    labeled = _load(args.labeled)
    unlabeled = _load(args.unlabeled) if args.unlabeled else []
    vocab_size = len(D.load_vocab(args.vocab)) if args.vocab else None
    out = resolve_out(args.out)
    config = T.config_to_dict(mcfg, lcfg, tcfg, vocab_size=vocab_size, stage="pretrain")
    write_run_info(out, "pretrain", config, tcfg.seed,
                   {"labeled": args.labeled, "unlabeled": args.unlabeled, "vocab": args.vocab})
    resume = args.resume
    T.pretrain(mcfg, lcfg, tcfg, labeled, unlabeled, vocab_size=vocab_size, out_dir=out, resume=resume,
               on_step=_progress(args))
    print(out / "checkpoint.bin")
    return EXIT_OK


def _progress(args):
    every = getattr(args, "log_every", 0)

    def cb(rec):
        if every and rec["step"] % every == 0:
            log.info("step %d loss %.4f", rec["step"], rec["loss_total"])
    return cb


def cmd_finetune(args):
    ck, mcfg, lcfg, _ = _model_from_checkpoint(args.checkpoint)
    ini = read_ini(args.config)
    tcfg = _apply(T.DESK_FINETUNE, ini.get("train", {}), "train")
    tcfg = _apply(tcfg, {k: v for k, v in vars(args).items()
                         if k in {f.name for f in dataclasses.fields(T.TrainConfig)} and v is not None},
                  "train")
    vocab = D.load_vocab(args.vocab)
    labeled = _load(args.labeled)
    out = resolve_out(args.out)
    config = T.config_to_dict(mcfg, lcfg, tcfg, vocab_size=len(vocab), stage="finetune")
    write_run_info(out, "finetune", config, tcfg.seed,
                   {"checkpoint": args.checkpoint, "labeled": args.labeled, "vocab": args.vocab})
    T.finetune(ck, mcfg, lcfg, tcfg, labeled, len(vocab), out_dir=out, on_step=_progress(args))
    print(out / "checkpoint.bin")
    return EXIT_OK


def cmd_eval(args):
    ck, mcfg, _, _ = _model_from_checkpoint(args.checkpoint)
    corpus = _load(args.manifest)
    per = T.evaluate(ck.params, mcfg, corpus)
    report = {"per": per, "utterances": len(corpus), "checkpoint": str(args.checkpoint),
              "manifest": str(args.manifest)}
    if args.out:
        out = resolve_out(args.out)
        out.mkdir(parents=True, exist_ok=True)
        A.write_summary(out / "eval.json", report)
    print(f"PER {per:.4f}")
    return EXIT_OK


def cmd_analyze(args):
    ck, mcfg, _, _ = _model_from_checkpoint(args.checkpoint)
    corpus = _load(args.manifest, with_frames=True)
    cooc = A.codebook_cooccurrence(ck.params, mcfg, corpus)
    per = None
    if "head.w" in ck.params and all(u.labels is not None for u in corpus):
        if ck.params["head.w"].shape[1] - 1 >= max(int(u.labels.max()) for u in corpus):
            per = T.evaluate(ck.params, mcfg, corpus)
    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    A.write_cooccurrence_csv(out / "cooccurrence.csv", cooc)
    record = A.summary(cooc, per)
    A.write_summary(out / "summary.json", record)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _add_train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="peak_lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", dest="log_every", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="mtspeech", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON corpus spec (as written to spec.json)")
    p.add_argument("--config", help="INI file; the [data] section overrides the spec")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="multitask pretraining")
    p.add_argument("--labeled", required=True, help="manifest of labeled corpus L")
    p.add_argument("--unlabeled", help="manifest of unlabeled corpus M")
    p.add_argument("--vocab", help="vocabulary of the labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(M.PRESETS))
    p.add_argument("--alpha", type=float)
    p.add_argument("--replace-prob", dest="replace_prob", type=float)
    p.add_argument("--mask-prob", dest="mask_prob", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a pretrained model with CTC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="phone error rate on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="codebook co-occurrence diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except L.CTCInfeasibleError as exc:
        print(f"infeasible CTC target: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (D.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except T.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
