"""Command-line entry point: train, eval, gradcheck, diagnose, synth."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .config import ConfigError, TrainConfig, dump_config, load_config
from .diagnostics import StatError, export_graph, subgraph_stats
from .graph import EpisodeSkip, resize_mask
from .model import forward, init_model
from .params_io import SnapshotError, load_params, save_params
from .spg import ForwardTrace, k_schedule
from .synth import export_preview, sample_episode
from . import engine as E

log = logging.getLogger("cgraph")

TRAIN_ARTIFACTS = ("config.resolved", "metrics.csv", "params.bin")


class RunError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    config_path: Path | None
    seed: int | None
    out: Path | None
    precision: str | None
    overwrite: bool = False

    def resolve(self, fallback: Path | None = None) -> TrainConfig:
        path = self.config_path or fallback
        cfg = load_config(path) if path is not None else TrainConfig()
        changes = {}
        if self.seed is not None:
            changes["seed"] = self.seed
        if self.precision is not None:
            changes["precision"] = self.precision
        return dataclasses.replace(cfg, **changes)

    def prepare_out(self, artifacts: tuple[str, ...]) -> Path:
        if self.out is None:
            raise RunError(f"{self.command} needs --out")
        self.out.mkdir(parents=True, exist_ok=True)
        existing = [name for name in artifacts if (self.out / name).exists()]
        if existing and not self.overwrite:
            raise RunError(f"{self.out} already holds {', '.join(existing)}; pass --overwrite to replace")
        return self.out


def _run_config(args) -> RunConfig:
    return RunConfig(args.command, args.config, args.seed, args.out,
                     getattr(args, "precision", None), args.overwrite)


def _load_model(params_path: Path, cfg: TrainConfig):
    params = init_model(cfg)
    return load_params(params, params_path)


def _config_beside(params_path: Path) -> Path | None:
    candidate = params_path.parent / "config.resolved"
    return candidate if candidate.is_file() else None


def cmd_train(args) -> int:
    from .training import train_loop

    run = _run_config(args)
    cfg = run.resolve()
    if args.baseline:
        cfg = dataclasses.replace(cfg, decoder="prototype")
    out = run.prepare_out(TRAIN_ARTIFACTS)
    (out / "config.resolved").write_text(dump_config(cfg))
    log.info("train started %s", time.strftime("%Y-%m-%dT%H:%M:%S"))
    with open(out / "metrics.csv", "w", newline="") as fh:
        params, records = train_loop(cfg, metrics_out=fh)
    save_params(params, out / "params.bin")
    print(f"trained {len(records)} iterations; final loss {records[-1].loss_total:.6g}"
          if records else "trained 0 iterations")
    return 0


def cmd_eval(args) -> int:
    from .training import eval_episodes, evaluate_suite

    run = _run_config(args)
    cfg = run.resolve(_config_beside(args.params))
    if args.shots is not None:
        cfg = dataclasses.replace(cfg, shots=args.shots)
    params = _load_model(args.params, cfg)
    episodes = eval_episodes(cfg, args.episodes)
    variants = [("eval.csv", "model", cfg)]
    if args.baseline:
        variants.append(("eval_baseline.csv", "baseline", dataclasses.replace(cfg, decoder="prototype")))
    out = run.prepare_out(tuple(v[0] for v in variants)) if run.out is not None else None
    for filename, label, variant in variants:
        result = evaluate_suite(params, variant, episodes)
        if out is not None:
            (out / filename).write_text(result.csv_text())
        print(f"{label} mean_dsc {result.mean:.6f} over {len(result.rows)} episodes "
              f"(domain {cfg.eval_domain}, class {cfg.eval_class}, shots {cfg.shots})")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    max_coords = None if args.max_coords == 0 else args.max_coords
    results = run_suite(max_coords)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    if args.out is not None:
        out = _run_config(args).prepare_out(("gradcheck.txt",))
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_diagnose(args) -> int:
    from .training import dataset_spec

    run = _run_config(args)
    cfg = run.resolve(_config_beside(args.params))
    params = _load_model(args.params, cfg)
    episode = sample_episode(dataset_spec(cfg), cfg.eval_domain, cfg.eval_class, cfg.shots,
                             args.episode_seed)
    trace = ForwardTrace()
    with E.no_grad(), E.default_dtype(cfg.dtype):
        forward(params, cfg, episode.supports, episode.query_image, trace)
    names = [f"layer{i}.graph" for i in range(1, cfg.depth + 1)]
    out = run.prepare_out((*names, "compactness.csv"))
    gt = resize_mask(episode.query_mask, *cfg.feature_hw)
    rows = []
    for i, (nodes, k) in enumerate(zip(trace.query_nodes[:cfg.depth], k_schedule(cfg.k, cfg.depth)), 1):
        export_graph(nodes, gt, k, i, out / names[i - 1])
        stats = subgraph_stats(nodes, gt)
        rows.append([i, f"{stats.intra:.9g}", f"{stats.inter:.9g}", f"{stats.gap:.9g}"])
    with open(out / "compactness.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "intra", "inter", "gap"])
        writer.writerows(rows)
    print(f"wrote {len(names)} graph exports and compactness.csv to {out}")
    return 0


def cmd_synth(args) -> int:
    from .training import dataset_spec

    run = _run_config(args)
    cfg = run.resolve()
    out = run.prepare_out(("manifest.csv",))
    manifest = export_preview(dataset_spec(cfg), out, patients=args.patients)
    print(f"wrote preview to {manifest}")
    return 0


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgraph", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=False):
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", type=Path, required=needs_out, help="output directory")
        p.add_argument("--overwrite", action="store_true", help="replace existing artifacts")

    p = sub.add_parser("train", help="episodic training run")
    common(p, needs_out=True)
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--baseline", action="store_true", help="train the prototype-matching baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice evaluation of a parameter snapshot")
    p.add_argument("params", type=Path)
    common(p)
    p.add_argument("--shots", type=_positive)
    p.add_argument("--episodes", type=_positive, help="override eval.episodes")
    p.add_argument("--baseline", action="store_true", help="also score prototype matching")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--out", type=Path)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--max-coords", type=int, default=64,
                   help="probed coordinates per parameter tensor in the full-model check (0 = all)")
    p.set_defaults(func=cmd_gradcheck, config=None, seed=None)

    p = sub.add_parser("diagnose", help="per-layer graph exports and compactness")
    p.add_argument("params", type=Path)
    common(p, needs_out=True)
    p.add_argument("--episode-seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="write a dataset preview (PGM images + manifest)")
    common(p, needs_out=True)
    p.add_argument("--patients", type=_positive, default=4)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SnapshotError, RunError, StatError, EpisodeSkip,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
