"""Declarative experiment configs and the attack/defense sweep runner.

A config is an INI-style document with flat sections::

    [experiment]
    schema_version = 1
    seed = 0
    samples = 10
    output_dir = runs/demo
    workers = 1

    [data]
    source = synth          ; or a directory with one sub-directory per class
    kind = blobs            ; synth only: blobs | stripes
    num_classes = 4         ; synth only
    count = 100             ; synth only
    size = 32
    stats = computed        ; computed | melanoma | covid_xray | brain_mri | cifar10 | explicit
    mean =                  ; explicit stats only, comma separated
    std =

    [model]
    name = cnn4             ; cnn4 | mlp | rescnn
    init = uniform          ; uniform | kaiming
    init_seed = 0

    [federation]
    num_clients = 4
    clients_per_round = 2
    lr = 0.1
    local_epochs = 1
    attack_round = 0        ; FedSGD rounds run before the gradients are intercepted

    [defense]
    mechanism = none        ; none | laplace | gaussian | compress
    levels = 0              ; comma separated sweep
    base_unit = 1e-4
    keep_ratio = 1.0

    [attack]
    methods = dlg           ; comma separated sweep over dlg, idlg, cpl, gradinv
    max_iterations =        ; empty keeps the method preset
    init =
    label_mode =
    tv_weight = 1e-6
    restarts = 1
    snapshot_stride = 0
    lr = 0.1
    history_size = 100

Every section and key is optional except ``schema_version``.  Unknown
sections or keys are errors.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as dmod
from .attacks import AttackConfig, run_attack
from .defense import DefenseConfig, perturb
from .federation import FedConfig, client_update, run_rounds
from .metrics import summarize_successful
from .models import build, init_params

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "GRADLEAK_OUTPUT_DIR"
SUMMARY_HEADER = ["method", "noise_level", "n_samples", "asr", "mean_ssim_success",
                  "mean_mse_success", "mean_seconds"]


class ConfigError(ValueError):
    """Malformed or invalid experiment config."""


@dataclass(frozen=True)
class DataSection:
    source: str = "synth"
    kind: str = "blobs"
    num_classes: int = 4
    count: int = 100
    size: int = 32
    stats: str = "computed"
    mean: tuple = ()
    std: tuple = ()


@dataclass(frozen=True)
class ModelSection:
    name: str = "cnn4"
    init: str = "uniform"
    init_seed: int = 0


@dataclass(frozen=True)
class FederationSection:
    num_clients: int = 4
    clients_per_round: int = 2
    lr: float = 0.1
    local_epochs: int = 1
    attack_round: int = 0


@dataclass(frozen=True)
class DefenseSection:
    mechanism: str = "none"
    levels: tuple = (0.0,)
    base_unit: float = 1e-4
    keep_ratio: float = 1.0


@dataclass(frozen=True)
class AttackSection:
    methods: tuple = ("dlg",)
    max_iterations: int | None = None
    init: str | None = None
    label_mode: str | None = None
    tv_weight: float = 1e-6
    restarts: int = 1
    snapshot_stride: int = 0
    lr: float = 0.1
    history_size: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    samples: int = 10
    output_dir: str = "runs/experiment"
    workers: int = 1
    schema_version: int = SCHEMA_VERSION
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    attack: AttackSection = field(default_factory=AttackSection)

    def attack_config(self, method: str, seed: int) -> AttackConfig:
        a = self.attack
        return AttackConfig(method=method, max_iterations=a.max_iterations, init=a.init,
                            label_mode=a.label_mode, tv_weight=a.tv_weight, restarts=a.restarts,
                            seed=seed, snapshot_stride=a.snapshot_stride, lr=a.lr,
                            history_size=a.history_size)

    def defense_config(self, level: float, seed: int) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(d.mechanism, level, d.base_unit, d.keep_ratio, seed)

    def fed_config(self) -> FedConfig:
        f = self.federation
        return FedConfig(f.num_clients, f.clients_per_round, f.lr, f.attack_round,
                         f.local_epochs, self.seed)


_TOP_KEYS = ("schema_version", "seed", "samples", "output_dir", "workers")
_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "federation": FederationSection,
    "defense": DefenseSection,
    "attack": AttackSection,
}


# ------------------------------------------------------------------- parsing


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section:
            k = re.match(r"\s*([^=:;#\s]+)\s*[=:]", line)
            if k and k.group(1).lower() == key:
                return no
    return 0


def _convert(raw: str, kind: str, where: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "opt_int":
            return int(raw) if raw else None
        if kind == "opt_str":
            return raw or None
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    return raw


_KINDS = {
    "int": "int", "float": "float", "str": "str",
    "int | None": "opt_int", "str | None": "opt_str",
}
_TUPLE_KINDS = {"mean": "floats", "std": "floats", "levels": "floats", "methods": "strs"}


def _kind(f) -> str:
    if f.name in _TUPLE_KINDS:
        return _TUPLE_KINDS[f.name]
    return _KINDS[f.type]


def _section(cls, items: dict, text: str, name: str):
    known = {f.name: f for f in fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"line {_line_of(text, name, key)}: unknown key {key!r} in [{name}]")
        values[key] = _convert(raw, _kind(known[key]), f"line {_line_of(text, name, key)}")
    return cls(**values)


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    """Parse and validate a config document.

    Relative data paths are resolved against ``base_dir`` (the config's
    directory when read through :func:`load_config`).
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"line {e.lineno}: duplicate key {e.option!r} in [{e.section}]") from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"line {e.lineno}: duplicate section [{e.section}]") from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"line {e.lineno}: expected a [section] header") from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else 0
        raise ConfigError(f"line {lineno}: cannot parse {e.errors[0][1] if e.errors else ''}") from None

    for sec in cp.sections():
        if sec != "experiment" and sec not in _SECTIONS:
            raise ConfigError(f"line {_line_of(text, sec)}: unknown section [{sec}]")
    top = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    if "schema_version" not in top:
        raise ConfigError("missing required key schema_version in [experiment]")
    kw = {}
    for key, raw in top.items():
        where = f"line {_line_of(text, 'experiment', key)}"
        if key not in _TOP_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r} in [experiment]")
        kw[key] = raw.strip() if key == "output_dir" else _convert(raw, "int", where)
    if kw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {kw['schema_version']} (expected {SCHEMA_VERSION})")
    for name, cls in _SECTIONS.items():
        items = dict(cp[name]) if cp.has_section(name) else {}
        kw[name] = _section(cls, items, text, name)
    cfg = ExperimentConfig(**kw)
    if base_dir is not None and cfg.data.source != "synth":
        src = Path(cfg.data.source)
        if not src.is_absolute():
            cfg = replace(cfg, data=replace(cfg.data, source=str(Path(base_dir) / src)))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    """Raise ConfigError if any field is out of range or inconsistent."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.samples >= 1, "samples must be >= 1")
    need(cfg.workers >= 1, "workers must be >= 1")
    d = cfg.data
    if d.source == "synth":
        need(d.kind in ("blobs", "stripes"), f"unknown synthetic kind {d.kind!r}")
        need(d.num_classes >= 2, "num_classes must be >= 2")
        need(d.count >= d.num_classes, "count must be >= num_classes")
        need(cfg.samples <= d.count, "samples exceeds the dataset size")
    else:
        need(Path(d.source).is_dir(), f"data directory {d.source!r} does not exist")
    need(d.size >= 2, "size must be >= 2")
    need(d.stats in ("computed", "explicit") or d.stats in dmod.KNOWN_STATS,
         f"unknown stats {d.stats!r}; choose computed, explicit or one of {sorted(dmod.KNOWN_STATS)}")
    if d.stats == "explicit":
        need(len(d.mean) == len(d.std) and len(d.mean) in (1, 3), "explicit stats need 1 or 3 means and stds")
        need(all(s > 0 for s in d.std), "explicit std must be positive")
    else:
        need(not d.mean and not d.std, "mean/std are only allowed with stats = explicit")
    need(cfg.model.init in ("uniform", "kaiming"), f"unknown init scheme {cfg.model.init!r}")
    need(len(cfg.defense.levels) > 0, "levels must not be empty")
    need(len(cfg.attack.methods) > 0, "methods must not be empty")
    need(cfg.federation.attack_round >= 0, "attack_round must be >= 0")
    try:
        build(cfg.model.name, 2, (3, d.size, d.size))
        cfg.fed_config()
        for level in cfg.defense.levels:
            cfg.defense_config(level, 0)
        for m in cfg.attack.methods:
            cfg.attack_config(m, 0)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as a config document that parses back to an equal value."""
    out = io.StringIO()
    out.write("[experiment]\n")
    for key in _TOP_KEYS:
        out.write(f"{key} = {_fmt(getattr(cfg, key))}\n")
    for name in _SECTIONS:
        out.write(f"\n[{name}]\n")
        sec = getattr(cfg, name)
        for f in fields(sec):
            out.write(f"{f.name} = {_fmt(getattr(sec, f.name))}\n")
    return out.getvalue()


# ------------------------------------------------------------------- running


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class _Prepared:
    spec: object
    params: object
    stats: dmod.DatasetStats
    samples: list  # (dataset index, ImageSample)
    class_names: list


def prepare(cfg: ExperimentConfig) -> _Prepared:
    d = cfg.data
    if d.source == "synth":
        ds = dmod.synth_dataset(cfg.seed, d.count, d.num_classes, d.kind, size=d.size)
        names = [f"class{k}" for k in range(d.num_classes)]
    else:
        loaded = dmod.load_image_dir(d.source, size=d.size)
        ds, names = loaded.samples, loaded.class_names
        if len(names) < 2:
            raise ConfigError("an image directory needs at least two class sub-directories")
        if cfg.samples > len(ds):
            raise ConfigError(f"samples ({cfg.samples}) exceeds the {len(ds)} readable images")
    if d.stats == "computed":
        stats = dmod.compute_stats(ds)
    elif d.stats == "explicit":
        stats = dmod.DatasetStats(d.mean, d.std)
    else:
        stats = dmod.KNOWN_STATS[d.stats]
    spec = build(cfg.model.name, len(names), (3, d.size, d.size))
    params = init_params(spec, cfg.model.init_seed, cfg.model.init)
    if cfg.federation.attack_round > 0:
        x = np.stack([dmod.normalize(s.pixels, stats) for s in ds])
        y = np.array([s.label for s in ds])
        params = run_rounds(cfg.fed_config(), spec, params, x, y).params
    order = np.random.default_rng(derive_seed(cfg.seed, 0)).permutation(len(ds))[:cfg.samples]
    return _Prepared(spec, params, stats, [(int(i), ds[int(i)]) for i in order], names)


def _attack_cell(job):
    """One (method, level, sample) attack; returns a JSON-ready record and images."""
    cfg, spec, params, stats, method, level, j, (idx, sample) = job
    rec = {"method": method, "noise_level": level, "sample": j, "dataset_index": idx,
           "label": sample.label}
    try:
        x = dmod.normalize(sample.pixels, stats)
        target = client_update(spec, params, x, [sample.label], client_id=j,
                               round=cfg.federation.attack_round)
        # the noise seed depends only on the sample, so every level reuses
        # the same unit-noise draw (common random numbers)
        target = perturb(target, cfg.defense_config(level, derive_seed(cfg.seed, 1, j)))
        acfg = cfg.attack_config(method, derive_seed(cfg.seed, 2, j))
        r = run_attack(spec, params, target, acfg, stats=stats,
                       ground_truth=sample.pixels, label=sample.label)
        rec.update(seed=acfg.seed, status=r.status, iterations=r.iterations,
                   final_objective=r.final_objective, predicted_label=r.label,
                   label_inferred=r.label_inferred, mse=r.mse, ssim=r.ssim, seconds=r.seconds,
                   error=None)
        return rec, r.reconstruction, r.snapshots
    except Exception as e:  # a failed sample is recorded, never fatal
        log.warning("attack %s level %s sample %d failed: %s", method, level, j, e)
        rec.update(seed=None, status="error", iterations=0, final_objective=None,
                   predicted_label=None, label_inferred=False, mse=None, ssim=None,
                   seconds=0.0, error=f"{type(e).__name__}: {e}")
        return rec, None, {}


def _level_name(level: float) -> str:
    return f"{level:g}"


def summary_rows(records, methods, levels) -> list[list]:
    """Table rows (as strings) recomputed from per-attack records."""
    rows = []
    for m in methods:
        for level in levels:
            cell = [r for r in records if r["method"] == m and r["noise_level"] == level]
            s = summarize_successful(cell)
            secs = [r["seconds"] for r in cell]
            rows.append([m, _level_name(level), str(len(cell)), repr(s.asr), _fmt(s.mean_ssim),
                         _fmt(s.mean_mse), repr(float(np.mean(secs))) if secs else ""])
    return rows


@dataclass
class ReportBundle:
    output_dir: Path
    summary_path: Path
    records_path: Path
    records: list
    rows: list


def output_dir_for(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> ReportBundle:
    """Run every (method, noise level, sample) cell and write the report files."""
    validate(cfg)
    out = Path(output_dir) if output_dir is not None else output_dir_for(cfg)
    prep = prepare(cfg)
    jobs = [(cfg, prep.spec, prep.params, prep.stats, m, float(level), j, prep.samples[j])
            for m in cfg.attack.methods for level in cfg.defense.levels
            for j in range(len(prep.samples))]
    log.info("running %d attacks into %s", len(jobs), out)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_attack_cell, jobs))
    else:
        results = [_attack_cell(job) for job in jobs]

    out.mkdir(parents=True, exist_ok=True)
    img_dir = out / "images"
    for j, (_, sample) in enumerate(prep.samples):
        dmod.write_png(img_dir / "original" / f"sample_{j:04d}.png", sample.pixels)
    for (rec, recon, snaps) in results:
        if recon is None:
            continue
        cell = img_dir / rec["method"] / f"level_{_level_name(rec['noise_level'])}"
        dmod.write_png(cell / f"sample_{rec['sample']:04d}.png", recon)
        for it, snap in sorted(snaps.items()):
            dmod.write_png(cell / f"sample_{rec['sample']:04d}_iter_{it:05d}.png", snap)
    for m in cfg.attack.methods:
        for level in cfg.defense.levels:
            pairs = [(prep.samples[rec["sample"]][1].pixels, recon) for rec, recon, _ in results
                     if rec["method"] == m and rec["noise_level"] == float(level) and recon is not None]
            if pairs:
                grid = make_grid([p for pair in pairs for p in pair], ncols=2)
                dmod.write_png(img_dir / m / f"level_{_level_name(float(level))}" / "grid.png", grid)

    records = [rec for rec, _, _ in results]
    records_path = out / "records.jsonl"
    with open(records_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    rows = summary_rows(records, cfg.attack.methods, [float(v) for v in cfg.defense.levels])
    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
    return ReportBundle(out, summary_path, records_path, records, rows)


def make_grid(images, ncols: int, pad: int = 2) -> np.ndarray:
    """Tile (C, H, W) images row-major into one image with a white gap."""
    if not images:
        raise ValueError("no images to tile")
    c, h, w = images[0].shape
    nrows = math.ceil(len(images) / ncols)
    grid = np.ones((c, nrows * (h + pad) - pad, ncols * (w + pad) - pad))
    for i, img in enumerate(images):
        r, k = divmod(i, ncols)
        grid[:, r * (h + pad):r * (h + pad) + h, k * (w + pad):k * (w + pad) + w] = img
    return grid
