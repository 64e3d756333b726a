"""Command-line entry points: ``gen``, ``train``, ``eval``, ``probe`` and ``visualize``.

Configuration is a TOML file with the sections ``[data]``, ``[split]``,
``[train]`` (plus ``[train.arch]``), ``[eval]`` and ``[visualize]``; any key
left out takes the default from ``DEFAULTS``. Each command writes only below
its ``--out`` directory, echoes the resolved config as ``config.toml`` and
records a ``run_manifest.json``.

Exit codes: 0 success, 1 other failure, 2 non-finite loss, 3 bad config.
"""

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .data import (DomainSpec, default_domains, domain_hashes, generate_benchmark, load_dataset,
                   make_split, write_dataset)
from .errors import (ConfigError, InvalidFraction, MissingSample, NonFiniteLoss, SettingMismatch,
                     VMFCompError)
from .eval import (channel_match, evaluate_checkpoint, heart_channels, shared_factor_probe,
                   translation_probe, _activations, _clean)
from .networks import ArchitectureConfig
from .trainers import (SETTINGS, TrainConfig, load_checkpoint, save_checkpoint, train,
                       write_loss_log)

log = logging.getLogger("vmfcomp")

CHECKPOINT_NAME = "checkpoint.ckpt"

DEFAULTS = {
    "data": {"seed": 0, "samples_per_domain": 200, "p_heart": 0.85, "size": [64, 64], "root": ""},
    "split": {"target": "D", "label_fraction": 0.05, "seed": 0},
    "train": {k: v for k, v in TrainConfig().to_dict().items()},
    "eval": {"probes": True, "translation_shift": [4, 0], "translation_seeds": [0, 1, 2]},
    "visualize": {"samples": [0, 1, 2]},
}


# -- config ------------------------------------------------------------------

def _merge(base, override, prefix=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        name = f"{prefix}{k}"
        if k == "domains" and prefix == "data.":
            out[k] = v
            continue
        if k not in base:
            raise ConfigError(name, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(name, "expected a table")
            out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the TOML file, then ``{section: {key: value}}`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "rb") as f:
                cfg = _merge(cfg, tomli.load(f))
        except FileNotFoundError as exc:
            raise ConfigError("--config", f"no such file {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("--config", f"invalid TOML: {exc}") from exc
    for section, values in (overrides or {}).items():
        for k, v in values.items():
            if v is not None:
                cfg[section][k] = v
    validate_config(cfg)
    return cfg


def domain_specs(cfg):
    raw = cfg["data"].get("domains")
    if not raw:
        return default_domains()
    try:
        return [DomainSpec.from_dict(d) for d in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError("data.domains", str(exc)) from exc


def validate_config(cfg):
    d, sp = cfg["data"], cfg["split"]
    if not isinstance(d["samples_per_domain"], int) or d["samples_per_domain"] < 1:
        raise ConfigError("data.samples_per_domain", "must be a positive integer")
    if not 0 <= d["p_heart"] <= 1:
        raise ConfigError("data.p_heart", "must be in [0, 1]")
    if not isinstance(sp["label_fraction"], (int, float)) or not 0 < sp["label_fraction"] <= 1:
        raise ConfigError("split.label_fraction", f"must be in (0, 1], got {sp['label_fraction']}")
    ids = [s.domain_id for s in domain_specs(cfg)]
    if sp["target"] not in ids:
        raise ConfigError("split.target", f"{sp['target']!r} is not one of {ids}")
    train_config(cfg)


def train_config(cfg):
    t = dict(cfg["train"])
    try:
        t["arch"] = ArchitectureConfig.from_dict(dict(t["arch"], input_size=cfg["data"]["size"]))
        return TrainConfig.from_dict(t)
    except SettingMismatch as exc:
        raise ConfigError("train.setting", str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc


def config_text(cfg):
    return tomli_w.dumps(cfg)


# -- run manifest --------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_path: str
    config_hash: str
    seed: int
    dataset_hash: str
    out_dir: str
    started: str
    finished: str = ""

    def write(self, out):
        self.finished = _now()
        (Path(out) / "run_manifest.json").write_text(json.dumps(asdict(self), indent=2))


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _sha(text):
    return hashlib.sha256(text.encode() if isinstance(text, str) else text).hexdigest()


def dataset_digest(hashes):
    return _sha(json.dumps(hashes, sort_keys=True))


def _start(args, cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    text = config_text(cfg)
    (out / "config.toml").write_text(text)
    return RunManifest(args.command, str(args.config or ""), _sha(text), int(cfg["data"]["seed"]),
                       "", str(out), _now())


def get_domains(cfg):
    """Load ``data.root`` if set, else generate the benchmark in memory."""
    d = cfg["data"]
    if d["root"]:
        domains, _ = load_dataset(d["root"])
        return domains
    return generate_benchmark(domain_specs(cfg), n=d["samples_per_domain"], seed=d["seed"],
                              p_heart=d["p_heart"], size=tuple(d["size"]))


# -- commands ----------------------------------------------------------------

def cmd_gen(args, cfg):
    out = Path(args.out)
    d = cfg["data"]
    domains = generate_benchmark(domain_specs(cfg), n=d["samples_per_domain"], seed=d["seed"],
                                 p_heart=d["p_heart"], size=tuple(d["size"]))
    hashes = domain_hashes(domains)
    existing = out / "manifest.json"
    if existing.exists():
        old = json.loads(existing.read_text())
        if old.get("hashes") == hashes:
            print(f"{out}: verified, unchanged")
            return 0
        raise ConfigError("--out", f"{out} holds a different dataset; choose an empty directory")
    man = _start(args, cfg, out)
    write_dataset(out, domains, domain_specs(cfg), d["seed"],
                  extra={"p_heart": d["p_heart"], "size": list(d["size"])})
    man.dataset_hash = dataset_digest(hashes)
    man.write(out)
    print(f"wrote {sum(len(v) for v in domains.values())} samples to {out}")
    return 0


def _split(cfg, domains):
    sp = cfg["split"]
    return make_split(domains, sp["target"], sp["label_fraction"], sp["seed"])


def cmd_train(args, cfg):
    tcfg = train_config(cfg)
    domains = get_domains(cfg)
    split = _split(cfg, domains)
    if tcfg.setting == "baseline":
        samples = split.labeled_samples(domains)
    else:
        samples = split.training_samples(domains)
    if tcfg.setting in ("weak", "vmfweak"):
        samples = [s for s in samples if s.weak is not None]
    resume = load_checkpoint(args.ckpt) if args.ckpt else None
    if resume is not None:
        resume.config = tcfg
    out = Path(args.out)
    man = _start(args, cfg, out)
    man.dataset_hash = dataset_digest(domain_hashes(domains))

    def report(it, row):
        if it % 100 == 0 or it == tcfg.iterations:
            log.info("iter %d %s", it, " ".join(f"{k}={v:.4f}" for k, v in row.items()))

    try:
        ckpt, rows = train(tcfg, samples, resume=resume, callback=report)
    except NonFiniteLoss as exc:
        (out / "failure.json").write_text(json.dumps(
            {"error": str(exc), "iteration": exc.iteration, "batch": exc.batch_id,
             "terms": {k: (None if not math.isfinite(v) else v) for k, v in exc.terms.items()}},
            indent=2))
        raise
    ckpt.extra.update({"split": {"target": split.target_domain,
                                 "label_fraction": split.label_fraction, "seed": split.seed},
                       "data": {k: v for k, v in cfg["data"].items() if k != "domains"}})
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_loss_log(rows, out / "loss_log.csv")
    man.write(out)
    print(f"trained {tcfg.setting} for {ckpt.iteration} iterations -> {out / CHECKPOINT_NAME}")
    return 0


def _need_ckpt(args):
    if not args.ckpt:
        raise ConfigError("--ckpt", "a checkpoint is required for this command")
    return load_checkpoint(args.ckpt)


def cmd_eval(args, cfg):
    ckpt = _need_ckpt(args)
    domains = get_domains(cfg)
    split = _split(cfg, domains)
    out = Path(args.out)
    man = _start(args, cfg, out)
    man.dataset_hash = dataset_digest(domain_hashes(domains))
    report = evaluate_checkpoint(ckpt, domains, split, probes=cfg["eval"]["probes"])
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    man.write(out)
    print(f"target {split.target_domain}: mean Dice {report.mean_dice():.2f}")
    return 0


def cmd_probe(args, cfg):
    ckpt = _need_ckpt(args)
    model = ckpt.build_model().eval()
    if getattr(model, "bank", True) is None:
        raise SettingMismatch("probes need a vMF model; the baseline has no activations")
    domains = get_domains(cfg)
    split = _split(cfg, domains)
    stride = ckpt.config.arch.feature_stride
    target = [s for s in split.target_samples(domains) if s.factor_masks]
    acts = np.concatenate([_activations(model, [s.image for s in target[i:i + 16]])
                           for i in range(0, len(target), 16)])
    matrix, assignment, factors = channel_match(acts, [s.factor_masks for s in target])
    result = {"target_domain": split.target_domain, "factors": factors,
              "channel_match": matrix, "assignment": assignment}
    channels = heart_channels(assignment)
    spec = {s.domain_id: s for s in domain_specs(cfg)}[split.target_domain]
    shift = cfg["eval"]["translation_shift"]
    errs = [translation_probe(model, spec, seed, shift, channels, stride,
                              tuple(cfg["data"]["size"]))
            for seed in cfg["eval"]["translation_seeds"]]
    result["translation"] = {"shift": shift, "channels": channels, "errors": errs,
                             "median": float(np.median(errs))}
    hearts_t = [s for s in target if s.factor_params.get("heart_present")]
    shared = {}
    for d in split.source_domains:
        hearts_s = [s for s in domains[d] if s.factor_params.get("heart_present")]
        pairs = list(zip(hearts_s, hearts_t))[:32]
        shared[d] = shared_factor_probe(model, pairs, "heart", assignment, stride)
    result["shared_factor_heart"] = shared
    out = Path(args.out)
    man = _start(args, cfg, out)
    man.dataset_hash = dataset_digest(domain_hashes(domains))
    (out / "probes.json").write_text(json.dumps(_clean(result), indent=2, sort_keys=True))
    man.write(out)
    print(f"heart channels {channels}, translation error median {result['translation']['median']:.2f}")
    return 0


def cmd_visualize(args, cfg):
    from .visualize import render_sample

    ckpt = _need_ckpt(args)
    model = ckpt.build_model().eval()
    domains = get_domains(cfg)
    split = _split(cfg, domains)
    target = split.target_samples(domains)
    ids = args.samples if args.samples else cfg["visualize"]["samples"]
    for i in ids:
        if not 0 <= i < len(target):
            raise MissingSample(f"sample {i} not in target domain {split.target_domain} "
                                f"({len(target)} samples)")
    out = Path(args.out)
    man = _start(args, cfg, out)
    man.dataset_hash = dataset_digest(domain_hashes(domains))
    for i in ids:
        path = out / f"{split.target_domain}_{i}.png"
        render_sample(model, target[i], path, title=f"{split.target_domain} #{i}")
        print(path)
    man.write(out)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "visualize": cmd_visualize}


def build_parser():
    p = argparse.ArgumentParser(prog="vmfcomp", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="overrides data, split and train seeds")
        s.add_argument("--target", help="held-out target domain")
        s.add_argument("--labels", type=float, help="labeled fraction of each source domain")
        s.add_argument("--data", help="dataset directory written by gen")
        if name == "train":
            s.add_argument("--setting", choices=SETTINGS)
            s.add_argument("--iterations", type=int)
        s.add_argument("--ckpt", help="checkpoint (train: resume from it)")
        if name == "visualize":
            s.add_argument("--samples", type=int, nargs="+", help="target-domain sample ids")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    seed = args.seed
    return {
        "data": {"seed": seed, "root": args.data},
        "split": {"target": args.target, "label_fraction": args.labels, "seed": seed},
        "train": {"seed": seed, "setting": getattr(args, "setting", None),
                  "iterations": getattr(args, "iterations", None)},
    }


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, InvalidFraction, SettingMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (VMFCompError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
