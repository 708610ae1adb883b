"""Run configuration and the staged experiment pipeline.

Stages (each idempotent given identical inputs and seeds) write under the
output directory::

    data/manifest.csv             ingest (toy corpus or an existing dataset)
    data_aug/manifest.csv         augment (optional pitch shifts)
    spectrograms/<rep>/*.spg      spectrogram
    models/<rep>_s<seed>.rnm      train (+ .train.json)
    attacks/<rep>_s<seed>/        attack sweep: outcomes.jsonl, payload.spg, run.json
    transfer/<rep>.json           transfer matrix between seeds
    report.json, report.csv, plots/*.svg
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import attacks as A
from . import eval as E
from . import transforms as T
from .nn import ResNetMiniConfig, TrainHyper, load_checkpoint, save_checkpoint, train
from .nn.model import ShapeError  # noqa: F401  (re-export for callers)
from .signal import (
    PITCH_FACTORS,
    DatasetManifest,
    ManifestEntry,
    augment_dataset,
    load_wav,
    read_manifest,
    resample,
    write_manifest,
)
from .toy import write_toy_corpus

log = logging.getLogger(__name__)

ENV_PREFIX = "SPECATTACK_"

DEFAULT_CONFIG = {
    "dataset": {
        "name": "toy",
        "root": None,
        "toy": True,
        "toy_params": {"n_per_class": 50, "n_classes": 3, "sample_rate_hz": 8000, "seed": 0},
    },
    "augment": {"enabled": False, "factors": list(PITCH_FACTORS)},
    "representations": [
        {
            "name": "mfcc-8k",
            "kind": "mfcc",
            "params": {"sample_rate_hz": 8000, "n_mfcc": 20, "hop": 128, "n_mels": 40, "n_fft": 512},
        }
    ],
    "model": {"stem_channels": 8, "stem_stride": 2, "stages": [[1, 8, 2], [1, 16, 2], [1, 32, 2]]},
    "train": {"learning_rate": 0.02, "max_epochs": 12, "patience": 3, "batch_size": 16},
    "attacks": {
        "samples": 10,
        "batch_size": 10,
        "grid": [
            {"algorithm": "FGSM", "epsilon": [0.5, 1.0, 2.0, 4.0]},
            {"algorithm": "DeepFool", "max_iter": [100, 1000]},
            {"algorithm": "BIM-a", "epsilon": [0.5, 1.0, 2.0, 4.0], "max_iter": 10},
            {"algorithm": "BIM-b", "epsilon": [0.5, 1.0, 2.0, 4.0], "max_iter": 10},
            {"algorithm": "JSMA", "targeted": True, "jsma_scale": [200, 40]},
            {"algorithm": "CWA", "max_iter": 25, "c_search_steps": 1},
            {"algorithm": "CWA", "max_iter": 100, "c_search_steps": 3},
            {"algorithm": "L-BFGS", "targeted": True, "max_iter": [10, 30], "c_search_steps": 3},
        ],
    },
    "transfer": {"models": 2, "spec": {"algorithm": "FGSM", "epsilon": 25.5}},
    "seed": 0,
    "workers": 1,
    "out": None,
}

TRANSFORM_KINDS = {"stft": T.StftConfig, "mfcc": T.MfccConfig, "dwt": T.DwtConfig}


class ConfigError(ValueError):
    """Config validation failure; ``violations`` lists every (field, message)."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.violations))


# ---------------------------------------------------------------------------
# configuration


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None) -> dict:
    """``SPECATTACK_OUT=x`` sets ``out``; ``SPECATTACK_TRAIN__MAX_EPOCHS=5`` sets ``train.max_epochs``.

    Values are parsed as YAML scalars.  ``SPECATTACK_CONFIG`` is reserved for
    the config path and is not treated as an override.
    """
    environ = os.environ if environ is None else environ
    over = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX + "CONFIG":
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = over
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = yaml.safe_load(raw)
    return over


def load_config(path=None, overrides=None, environ=None) -> dict:
    """Defaults <- config file <- environment <- explicit overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError([("config", "top level must be a mapping")])
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, env_overrides(environ))
    return _merge(cfg, overrides or {})


def _expand(entry, n_pixels):
    entry = dict(entry)
    scale = entry.pop("jsma_scale", None)
    if scale is not None:
        entry["max_iter"] = [A.jsma_iterations(n_pixels, entry.get("gamma", A.JSMA_MAX_GAMMA), s)
                             for s in (scale if isinstance(scale, list) else [scale])]
    keys = [k for k, v in entry.items() if isinstance(v, list)]
    combos = itertools.product(*[entry[k] for k in keys]) if keys else [()]
    for combo in combos:
        d = dict(entry)
        d.update(zip(keys, combo))
        yield A.AttackSpec.from_dict(d)


def attack_grid(cfg, n_pixels=T.MODEL_SIZE * T.MODEL_SIZE) -> list:
    """Expand list-valued fields of each grid entry into a cartesian product of specs."""
    specs = []
    for entry in cfg["attacks"]["grid"]:
        specs.extend(_expand(entry, n_pixels))
    return specs


def transform_config(rep):
    return TRANSFORM_KINDS[rep["kind"]](**rep.get("params", {}))


def model_config(cfg, classes, seed) -> ResNetMiniConfig:
    m = cfg["model"]
    return ResNetMiniConfig(
        classes=classes,
        stem_channels=m.get("stem_channels", 16),
        stem_stride=m.get("stem_stride", 1),
        stages=tuple(tuple(s) for s in m.get("stages", ((2, 16, 1), (2, 32, 2), (2, 64, 2)))),
        seed=seed,
    )


def train_hyper(cfg) -> TrainHyper:
    return TrainHyper(**cfg["train"])


def validate(cfg) -> dict:
    """Raise :class:`ConfigError` listing every violation; returns ``cfg``."""
    bad = []
    ds = cfg.get("dataset") or {}
    if not ds.get("toy"):
        root = ds.get("root")
        if not root:
            bad.append(("dataset.root", "required unless dataset.toy is true"))
        elif not Path(root).exists():
            bad.append(("dataset.root", f"path does not exist: {root}"))
    else:
        tp = ds.get("toy_params", {})
        if not 2 <= int(tp.get("n_classes", 3)) <= 4:
            bad.append(("dataset.toy_params.n_classes", "must be in 2..4"))
    aug = cfg.get("augment") or {}
    if aug.get("enabled") and not aug.get("factors"):
        bad.append(("augment.factors", "must be non-empty when augmentation is enabled"))
    reps = cfg.get("representations") or []
    if not reps:
        bad.append(("representations", "at least one representation is required"))
    names = set()
    for i, rep in enumerate(reps):
        f = f"representations[{i}]"
        if rep.get("kind") not in TRANSFORM_KINDS:
            bad.append((f + ".kind", f"must be one of {sorted(TRANSFORM_KINDS)}"))
            continue
        if not rep.get("name"):
            bad.append((f + ".name", "required"))
        elif rep["name"] in names:
            bad.append((f + ".name", "duplicate representation name"))
        names.add(rep.get("name"))
        try:
            transform_config(rep)
        except (TypeError, ValueError) as exc:
            bad.append((f + ".params", str(exc)))
    try:
        model_config(cfg, 2, 0)
    except (TypeError, ValueError) as exc:
        bad.append(("model", str(exc)))
    try:
        allowed = {f.name for f in fields(TrainHyper)}
        extra = set(cfg.get("train", {})) - allowed
        if extra:
            bad.append(("train", f"unknown keys {sorted(extra)}"))
        else:
            train_hyper(cfg)
    except (TypeError, ValueError) as exc:
        bad.append(("train", str(exc)))
    att = cfg.get("attacks") or {}
    if int(att.get("samples", 0)) < 1:
        bad.append(("attacks.samples", "must be >= 1"))
    if int(att.get("batch_size", 0)) < 1:
        bad.append(("attacks.batch_size", "must be >= 1"))
    if not att.get("grid"):
        bad.append(("attacks.grid", "must be non-empty"))
    for i, entry in enumerate(att.get("grid") or []):
        try:
            list(_expand(entry, T.MODEL_SIZE * T.MODEL_SIZE))
        except (TypeError, ValueError) as exc:
            bad.append((f"attacks.grid[{i}]", str(exc)))
    tr = cfg.get("transfer") or {}
    if tr:
        if int(tr.get("models", 1)) < 1:
            bad.append(("transfer.models", "must be >= 1"))
        try:
            A.AttackSpec.from_dict(tr.get("spec", {}))
        except (TypeError, ValueError) as exc:
            bad.append(("transfer.spec", str(exc)))
    if not isinstance(cfg.get("seed"), int):
        bad.append(("seed", "must be an integer"))
    if not isinstance(cfg.get("workers"), int) or cfg["workers"] < 1:
        bad.append(("workers", "must be a positive integer"))
    if not cfg.get("out"):
        bad.append(("out", "output directory is required"))
    if bad:
        raise ConfigError(bad)
    return cfg


def model_seeds(cfg) -> list:
    n = max(1, int((cfg.get("transfer") or {}).get("models", 1)))
    return [cfg["seed"] + i for i in range(n)]


# ---------------------------------------------------------------------------
# stages


def _out(cfg) -> Path:
    return Path(cfg["out"])


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def ingest(cfg) -> Path:
    """Materialize (toy) or validate (existing) the dataset; returns the manifest path."""
    ds = cfg["dataset"]
    dst = _out(cfg) / "data"
    if ds.get("toy"):
        tp = ds.get("toy_params", {})
        write_toy_corpus(
            dst,
            n_per_class=tp.get("n_per_class", 50),
            n_classes=tp.get("n_classes", 3),
            sample_rate_hz=tp.get("sample_rate_hz", 8000),
            seed=tp.get("seed", 0),
        )
        return dst / "manifest.csv"
    root = Path(ds["root"])
    manifest = read_manifest(root) if root.is_file() else scan_directory(root)
    for e in manifest.entries:
        load_wav(manifest.resolve(e))  # raises on unreadable audio
    dst.mkdir(parents=True, exist_ok=True)
    absolute = DatasetManifest(
        [ManifestEntry(str(manifest.resolve(e).resolve()), e.label, e.fold, e.aug) for e in manifest.entries],
        manifest.class_names,
        root=str(dst),
    )
    write_manifest(dst / "manifest.csv", absolute)
    return dst / "manifest.csv"


def scan_directory(root, folds=5) -> DatasetManifest:
    """Class-per-subdirectory layout; folds assigned round-robin within each class."""
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class subdirectories under {root}")
    entries = []
    for label, name in enumerate(classes):
        files = sorted((root / name).glob("*.wav"))
        for i, f in enumerate(files):
            entries.append(ManifestEntry(f"{name}/{f.name}", label, i % folds))
    return DatasetManifest(entries, classes, root=str(root))


def augment(cfg, manifest_path=None) -> Path:
    manifest_path = manifest_path or _out(cfg) / "data" / "manifest.csv"
    if not (cfg.get("augment") or {}).get("enabled"):
        return Path(manifest_path)
    dst = _out(cfg) / "data_aug"
    dst.mkdir(parents=True, exist_ok=True)
    m = augment_dataset(read_manifest(manifest_path), cfg["augment"]["factors"], out_dir=dst, workers=cfg["workers"])
    write_manifest(dst / "manifest.csv", m)
    return dst / "manifest.csv"


def current_manifest(cfg) -> Path:
    aug = _out(cfg) / "data_aug" / "manifest.csv"
    if (cfg.get("augment") or {}).get("enabled") and aug.exists():
        return aug
    return _out(cfg) / "data" / "manifest.csv"


def _spectrogram_job(args):
    path, tcfg, dst = args
    clip = resample(load_wav(path), tcfg.sample_rate_hz)
    T.save_spectrogram(dst, T.transform(clip.samples, tcfg))
    return dst


def spectrograms(cfg, manifest_path=None) -> dict:
    """SPG1 files per representation, in manifest order; returns {rep: [paths]}."""
    manifest = read_manifest(manifest_path or current_manifest(cfg))
    out = {}
    for rep in cfg["representations"]:
        tcfg = transform_config(rep)
        d = _out(cfg) / "spectrograms" / rep["name"]
        d.mkdir(parents=True, exist_ok=True)
        jobs = [(manifest.resolve(e), tcfg, d / f"{i:05d}.spg") for i, e in enumerate(manifest.entries)]
        if cfg["workers"] > 1:
            with ThreadPoolExecutor(cfg["workers"]) as pool:
                paths = list(pool.map(_spectrogram_job, jobs))
        else:
            paths = [_spectrogram_job(j) for j in jobs]
        _write_json(d / "index.json", {
            "representation": rep,
            "config_fingerprint": T._fingerprint(tcfg),
            "files": [p.name for p in paths],
            "labels": manifest.labels().tolist(),
            "groups": [_group_key(e) for e in manifest.entries],
            "class_names": list(manifest.class_names),
        })
        out[rep["name"]] = paths
    return out


def _group_key(entry) -> str:
    """Source-clip key shared by an original and its pitch-shifted copies."""
    # originals are absolutized by augmentation while copies stay relative,
    # so only the label and file stem identify the source reliably
    stem = Path(entry.path).stem
    if entry.aug is not None:
        stem = stem.split("__ps", 1)[0]
    return f"{entry.label}:{stem}"


def load_inputs(cfg, rep_name):
    """(pixels (n,128,128), labels, groups, class_names) for one representation."""
    d = _out(cfg) / "spectrograms" / rep_name
    index = json.loads((d / "index.json").read_text(encoding="utf-8"))
    x = np.stack([T.to_model_input(T.load_spectrogram(d / f)).pixels for f in index["files"]])
    return x, np.array(index["labels"], dtype=int), np.array(index["groups"]), index["class_names"]


def model_path(cfg, rep_name, seed) -> Path:
    return _out(cfg) / "models" / f"{rep_name}_s{seed}.rnm"


def train_models(cfg) -> dict:
    """Train one model per (representation, seed); returns {(rep, seed): train summary}."""
    out = {}
    for rep in cfg["representations"]:
        x, y, groups, names = load_inputs(cfg, rep["name"])
        for seed in model_seeds(cfg):
            model, report = train(model_config(cfg, len(names), seed), x, y, train_hyper(cfg), groups=groups)
            path = model_path(cfg, rep["name"], seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            digest = save_checkpoint(path, model, names)
            summary = {"model_hash": digest, **report.to_dict()}
            _write_json(path.with_suffix(".train.json"), summary)
            out[(rep["name"], seed)] = summary
            log.info("trained %s seed %d: test accuracy %.2f%%", rep["name"], seed, report.final_test_accuracy)
    return out


def attack_inputs(cfg, rep_name, seed):
    """Correctly classified test samples (first ``attacks.samples`` in index order)."""
    model, _ = load_checkpoint(model_path(cfg, rep_name, seed))
    summary = json.loads(model_path(cfg, rep_name, seed).with_suffix(".train.json").read_text(encoding="utf-8"))
    x, y, _, _ = load_inputs(cfg, rep_name)
    idx = np.array(summary["test_index"], dtype=int)
    pred, _ = model.predict(x[idx])
    idx = idx[pred == y[idx]][: int(cfg["attacks"]["samples"])]
    return model, x[idx], y[idx], idx


def _payload_spectrogram(outcomes, kind):
    stack = np.concatenate([o.x_adv for o in outcomes], axis=0) if outcomes else np.zeros((0, T.MODEL_SIZE))
    return T.Spectrogram(stack, kind, 0.0, [], "", meta={"payload": "adversarial", "rows_per_sample": T.MODEL_SIZE})


def write_outcomes(dst, outcomes, kind, manifest: dict):
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "outcomes.jsonl").write_text(A.outcomes_to_jsonl(outcomes), encoding="utf-8")
    T.save_spectrogram(dst / "payload.spg", _payload_spectrogram(outcomes, kind))
    _write_json(dst / "run.json", manifest)


def read_outcomes(dst) -> list:
    dst = Path(dst)
    payload = T.load_spectrogram(dst / "payload.spg").values
    text = (dst / "outcomes.jsonl").read_text(encoding="utf-8")
    n = sum(1 for line in text.splitlines() if line.strip())
    return A.outcomes_from_jsonl(text, payload.reshape(n, T.MODEL_SIZE, T.MODEL_SIZE) if n else None)


def _rep_kind(cfg, rep_name):
    for rep in cfg["representations"]:
        if rep["name"] == rep_name:
            return {"stft": T.Kind.STFT, "mfcc": T.Kind.MFCC, "dwt": T.Kind.DWT}[rep["kind"]]
    raise KeyError(rep_name)


def run_attacks(cfg) -> dict:
    """Full spec grid against the primary model of each representation."""
    specs = attack_grid(cfg)
    seed = cfg["seed"]
    out = {}
    for rep in cfg["representations"]:
        model, x, y, idx = attack_inputs(cfg, rep["name"], seed)
        res = A.run_budget_sweep(model, x, y, specs, seed=seed, batch_size=int(cfg["attacks"]["batch_size"]),
                                 workers=cfg["workers"])
        dst = _out(cfg) / "attacks" / f"{rep['name']}_s{seed}"
        summary = json.loads(model_path(cfg, rep["name"], seed).with_suffix(".train.json").read_text(encoding="utf-8"))
        write_outcomes(dst, res.outcomes, _rep_kind(cfg, rep["name"]), {
            "spec_grid": [s.to_dict() for s in specs],
            "seed": seed,
            "model_hash": summary["model_hash"],
            "sample_index": idx.tolist(),
            "targets": res.targets.tolist(),
            "gradient_meter": res.meter,
        })
        out[rep["name"]] = res.outcomes
    return out


def run_transfer(cfg) -> dict:
    """Transfer matrices among the seeded models of each representation."""
    seeds = model_seeds(cfg)
    if len(seeds) < 2:
        return {}
    spec = A.AttackSpec.from_dict(cfg["transfer"]["spec"])
    out = {}
    for rep in cfg["representations"]:
        models, sources = [], []
        for seed in seeds:
            model, x, y, idx = attack_inputs(cfg, rep["name"], seed)
            res = A.run_budget_sweep(model, x, y, [spec], seed=cfg["seed"],
                                     batch_size=int(cfg["attacks"]["batch_size"]), workers=cfg["workers"])
            dst = _out(cfg) / "attacks" / f"{rep['name']}_s{seed}_transfer"
            write_outcomes(dst, res.outcomes, _rep_kind(cfg, rep["name"]), {
                "spec_grid": [spec.to_dict()], "seed": cfg["seed"], "sample_index": idx.tolist(),
            })
            logged = read_outcomes(dst)
            models.append(model)
            sources.append((
                np.stack([o.x_adv for o in logged]) if logged else np.zeros((0, T.MODEL_SIZE, T.MODEL_SIZE)),
                np.array([o.original_label for o in logged], dtype=int),
                np.array([o.success for o in logged], dtype=bool),
            ))
        tm = E.transfer_matrix(models, sources, names=[f"{rep['name']}_s{s}" for s in seeds])
        _write_json(_out(cfg) / "transfer" / f"{rep['name']}.json", tm.to_dict())
        out[rep["name"]] = tm
    return out


def _public_config(cfg) -> dict:
    """Config snapshot without machine-specific fields, for the report header."""
    c = copy.deepcopy(cfg)
    c.pop("out", None)
    c.pop("workers", None)
    if c.get("dataset", {}).get("root"):
        c["dataset"]["root"] = Path(c["dataset"]["root"]).name
    return c


def build_report(cfg) -> E.RobustnessReport:
    rows, hashes = [], {}
    for rep in cfg["representations"]:
        seed = cfg["seed"]
        summary = json.loads(model_path(cfg, rep["name"], seed).with_suffix(".train.json").read_text(encoding="utf-8"))
        outcomes = read_outcomes(_out(cfg) / "attacks" / f"{rep['name']}_s{seed}")
        hashes[rep["name"]] = summary["model_hash"]
        rows.append(E.ReportRow(
            dataset=cfg["dataset"].get("name") or "dataset",
            representation=rep["kind"].upper(),
            config=rep["name"],
            accuracy=float(summary["final_test_accuracy"]),
            cells=E.attack_cells(outcomes),
        ))
    transfer = {}
    for rep in cfg["representations"]:
        p = _out(cfg) / "transfer" / f"{rep['name']}.json"
        if p.exists() and len(model_seeds(cfg)) > 1:
            transfer[rep["name"]] = json.loads(p.read_text(encoding="utf-8"))
    meta = {
        "auc_definition": E.AUC_DEFINITION,
        "seeds": {"base": cfg["seed"], "models": model_seeds(cfg), "targets": cfg["seed"]},
        "budget_grid": [s.to_dict() for s in attack_grid(cfg)],
        "model_hash": hashes,
        "config": _public_config(cfg),
        "cost_unit": "batch gradient computations",
    }
    return E.RobustnessReport(rows, meta, transfer or None)


def report(cfg) -> list:
    rep = build_report(cfg)
    paths = E.emit_report(rep, _out(cfg))
    paths += E.emit_plots(rep, _out(cfg) / "plots")
    return paths


STAGES = ("ingest", "augment", "spectrogram", "train", "attack", "transfer", "report")


def run_pipeline(cfg, stages=STAGES) -> Path:
    validate(cfg)
    _out(cfg).mkdir(parents=True, exist_ok=True)
    for stage in stages:
        log.info("stage %s", stage)
        {
            "ingest": ingest,
            "augment": augment,
            "spectrogram": spectrograms,
            "train": train_models,
            "attack": run_attacks,
            "transfer": run_transfer,
            "report": report,
        }[stage](cfg)
    return _out(cfg) / "report.json"


def config_digest(cfg) -> str:
    return hashlib.sha256(json.dumps(_public_config(cfg), sort_keys=True).encode()).hexdigest()[:16]
