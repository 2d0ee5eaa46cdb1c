"""Command line entry point: ``gradleak run | attack-one | stats | validate``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as dmod
from .attacks import run_attack
from .defense import perturb
from .experiment import ConfigError, load_config, make_grid, output_dir_for, run_experiment
from .federation import client_update
from .models import build, init_params

GRAMMAR = """\
usage:
  gradleak run <config> [--seed N]
  gradleak attack-one <image> <config> [--label K] [--method M] [--out DIR] [--seed N]
  gradleak stats <data-dir> [--size S]
  gradleak validate <config>
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: {message}\n{GRAMMAR}")
        raise SystemExit(2)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gradleak", usage=GRAMMAR, add_help=True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    r = sub.add_parser("run", help="run the configured sweep")
    r.add_argument("config")
    r.add_argument("--seed", type=int)

    a = sub.add_parser("attack-one", help="attack a single image and dump snapshots")
    a.add_argument("image")
    a.add_argument("config")
    a.add_argument("--label", type=int, default=0, help="class index of the image (default 0)")
    a.add_argument("--method", help="attack method (default: first in the config)")
    a.add_argument("--out", help="output directory")
    a.add_argument("--seed", type=int)

    s = sub.add_parser("stats", help="per-channel mean/std of an image directory")
    s.add_argument("data_dir")
    s.add_argument("--size", type=int, default=32)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    bundle = run_experiment(cfg)
    print(bundle.summary_path.read_text(), end="")
    print(f"wrote {bundle.summary_path}, {bundle.records_path}")
    return 0


def _cmd_attack_one(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    k = cfg.data.num_classes
    if cfg.data.source != "synth":
        k = len(dmod.load_image_dir(cfg.data.source, size=cfg.data.size).class_names)
    if not 0 <= args.label < k:
        raise ConfigError(f"--label must lie in [0, {k})")
    img = dmod.read_image(args.image)
    img = dmod.resize_bilinear(img, (cfg.data.size, cfg.data.size))
    if cfg.data.stats == "computed":
        stats = dmod.compute_stats([img])
        stats = dmod.DatasetStats(stats.mean, tuple(s if s > 0 else 1.0 for s in stats.std))
    elif cfg.data.stats == "explicit":
        stats = dmod.DatasetStats(cfg.data.mean, cfg.data.std)
    else:
        stats = dmod.KNOWN_STATS[cfg.data.stats]
    spec = build(cfg.model.name, k, (3, cfg.data.size, cfg.data.size))
    params = init_params(spec, cfg.model.init_seed, cfg.model.init)
    target = client_update(spec, params, dmod.normalize(img, stats), [args.label])
    level = cfg.defense.levels[0]
    target = perturb(target, cfg.defense_config(level, cfg.seed))
    method = args.method or cfg.attack.methods[0]
    acfg = cfg.attack_config(method, cfg.seed)
    if acfg.snapshot_stride == 0:
        acfg = replace(acfg, snapshot_stride=max(1, acfg.max_iterations // 10))
    res = run_attack(spec, params, target, acfg, stats=stats, ground_truth=img, label=args.label)

    out = Path(args.out) if args.out else output_dir_for(cfg) / "attack_one"
    out.mkdir(parents=True, exist_ok=True)
    snaps = sorted(res.snapshots.items())
    for it, snap in snaps:
        dmod.write_png(out / f"iter_{it:05d}.png", snap)
    dmod.write_png(out / "original.png", img)
    dmod.write_png(out / "reconstruction.png", res.reconstruction)
    tiles = [s for _, s in snaps] + [res.reconstruction, img]
    dmod.write_png(out / "grid.png", make_grid(tiles, ncols=min(len(tiles), 6)))
    print(f"method={method} label={res.label} status={res.status} iterations={res.iterations} "
          f"objective={res.final_objective:.4g} ssim={res.ssim:.4f} mse={res.mse:.4g} "
          f"seconds={res.seconds:.1f}")
    print(f"wrote {len(snaps)} snapshots to {out}")
    return 0


def _cmd_stats(args) -> int:
    ds = dmod.load_image_dir(args.data_dir, size=args.size)
    st = dmod.compute_stats(ds)
    print(f"images  {len(ds)}  (skipped {ds.warning_count})")
    print("channel  mean    std")
    for c, (m, s) in enumerate(zip(st.mean, st.std)):
        print(f"{'RGB'[c] if len(st.mean) == 3 else c:<8} {m:.4f}  {s:.4f}")
    return 0


def _cmd_validate(args) -> int:
    load_config(args.config)
    print("OK")
    return 0


COMMANDS = {"run": _cmd_run, "attack-one": _cmd_attack_one, "stats": _cmd_stats,
            "validate": _cmd_validate}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.cmd is None:
        sys.stderr.write(GRAMMAR)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
