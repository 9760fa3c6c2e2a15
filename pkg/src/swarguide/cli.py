"""Command-line front end for sampling runs, scheme comparisons, and dump analysis.

Usage:
    swarguide sample --oracle scene --scheme igg --w 1.85 --seeds 10 --out runs/
    swarguide sample --oracle dump --dump logits.swlog --scheme cfg --w 2.0 --mask fg.pgm
    swarguide compare --scheme-a cfg --scheme-b igg --w 1.85 --seeds 50 --mask fg.pgm
    swarguide analyze --dump logits.swlog --mask fg.pgm --scheme igg --w 1.85

Flags may also come from a plain ``key=value`` file via ``--config``;
explicit flags win on conflict.

Exit codes: 0 success, 2 config error, 3 format error, 4 all runs
skipped by the degenerate-mask policy.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RATIO, SCHEDULE_KINDS, ScaleSchedule, SegMask
from .errors import ConfigError, DegenerateMaskError, FormatError, SwarGuideError
from .formats import _format_score, export_heatmaps, read_mask, write_record
from .guidance import GuidanceScheme
from .metrics import divergence_breakdown, weighted_mean_scores
from .sim import (
    SamplerConfig,
    SceneOracle,
    default_scene,
    default_schedule,
    replay_oracle,
    run_sampling,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_SKIPPED = 4

# flag spelling -> scheme kind
_SCHEMES = {
    "none": "none",
    "cfg": "cfg",
    "igg": "igg",
    "igg-window": "igg_windowed",
    "mixed": "mixed",
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully resolved experiment: oracle, scheme, sampler, outputs."""

    oracle: object
    scheme: GuidanceScheme
    schedule: ScaleSchedule
    temperature: float
    top_k: int | None
    condition: int
    seeds: tuple[int, ...]
    mask: SegMask | None
    out: Path | None


def _parse_seeds(text: str) -> tuple[int, ...]:
    """``"10"`` means seeds 0..9; ``"3,7,9"`` means exactly those."""
    text = text.strip()
    try:
        if "," in text:
            seeds = tuple(int(part) for part in text.split(","))
        else:
            count = int(text)
            if count < 1:
                raise ConfigError(f"--seeds count must be >= 1, got {count}")
            seeds = tuple(range(count))
    except ValueError:
        raise ConfigError(f"--seeds expects a count or a comma list of ints, got {text!r}") from None
    if any(s < 0 for s in seeds):
        raise ConfigError(f"seeds must be non-negative, got {text!r}")
    if len(set(seeds)) != len(seeds):
        # output files are seed-keyed, duplicates would silently overwrite
        raise ConfigError(f"duplicate seeds in {text!r}")
    return seeds


def _read_config_file(path: str) -> dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _apply_config_defaults(sub: argparse.ArgumentParser, argv: list[str]) -> None:
    """Turn a ``--config`` file into subparser defaults; explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    actions = {action.dest: action for action in sub._actions}
    defaults = {}
    for key, raw in _read_config_file(known.config).items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r} in {known.config}")
        try:
            value = action.type(raw) if action.type is not None else raw
        except ValueError:
            raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(
                f"config key {key!r} must be one of {sorted(action.choices)}, got {raw!r}"
            )
        defaults[dest] = value
    sub.set_defaults(**defaults)


def _add_shared_flags(sub: argparse.ArgumentParser, default_out: str) -> None:
    sub.add_argument("--config", help="key=value file providing flag defaults")
    sub.add_argument("--oracle", choices=("scene", "dump"), default="scene",
                     help="logit source: synthetic scene or a recorded dump")
    sub.add_argument("--dump", help="logit dump path (required with --oracle dump)")
    sub.add_argument("--mask", help="foreground mask (PGM/PBM) enabling divergence")
    sub.add_argument("--w", type=float, default=1.85, help="guidance weight")
    sub.add_argument("--w2", type=float, default=None,
                     help="secondary guidance weight (mixed scheme)")
    sub.add_argument("--schedule", choices=SCHEDULE_KINDS, default=RATIO,
                     help="per-step weight rule")
    sub.add_argument("--temperature", type=float, default=1.0)
    sub.add_argument("--top-k", type=int, default=None)
    sub.add_argument("--seeds", default="1", help="seed count or comma list")
    sub.add_argument("--out", default=default_out, help="output directory")
    sub.add_argument("--jobs", type=int, default=None,
                     help="worker processes (default: available parallelism)")
    sub.add_argument("--condition", type=int, default=0, help="conditioning class id")
    # scene oracle knobs
    sub.add_argument("--vocab", type=int, default=64)
    sub.add_argument("--classes", type=int, default=6)
    sub.add_argument("--contrast", type=float, default=0.7)
    sub.add_argument("--smoothness", type=float, default=0.06)
    sub.add_argument("--texture", type=float, default=1.4)
    sub.add_argument("--texture-seed", type=int, default=0)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="swarguide",
                                     description="Guided scale-wise sampling experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    sample = commands.add_parser("sample", help="sample runs and write records + heatmaps")
    _add_shared_flags(sample, default_out="runs")
    sample.add_argument("--scheme", choices=sorted(_SCHEMES), default="cfg")
    sample.set_defaults(func=cmd_sample)

    compare = commands.add_parser("compare", help="score two schemes on shared seeds")
    _add_shared_flags(compare, default_out="compare")
    compare.add_argument("--scheme-a", choices=sorted(_SCHEMES), default="cfg")
    compare.add_argument("--scheme-b", choices=sorted(_SCHEMES), default="igg")
    compare.add_argument("--w-a", type=float, default=None, help="override --w for side a")
    compare.add_argument("--w-b", type=float, default=None, help="override --w for side b")
    compare.add_argument("--w2-a", type=float, default=None)
    compare.add_argument("--w2-b", type=float, default=None)
    compare.add_argument("--seeds-a", default=None, help="override --seeds for side a")
    compare.add_argument("--seeds-b", default=None, help="override --seeds for side b")
    compare.set_defaults(func=cmd_compare)

    analyze = commands.add_parser("analyze", help="score a recorded dump and write heatmaps")
    _add_shared_flags(analyze, default_out="analysis")
    analyze.add_argument("--scheme", choices=sorted(_SCHEMES), default="cfg")
    analyze.set_defaults(func=cmd_analyze)

    return parser, {"sample": sample, "compare": compare, "analyze": analyze}


def _build_experiment(args: argparse.Namespace, scheme_flag: str,
                      w: float, w2: float | None, seeds: tuple[int, ...],
                      warn: bool = True) -> ExperimentConfig:
    kind = _SCHEMES[scheme_flag]
    if kind == "mixed" and w2 is None:
        raise ConfigError("--w2 is required for the mixed scheme")
    scheme = GuidanceScheme(kind)
    if args.oracle == "dump":
        if args.dump is None:
            raise ConfigError("--dump is required with --oracle dump")
        oracle = replay_oracle(args.dump)
        schedule = ScaleSchedule(tuple(oracle.steps), w, w2, args.schedule)
    else:
        schedule = default_schedule(w, w2, args.schedule)
        scene = default_scene(
            schedule,
            vocab_size=args.vocab,
            classes=args.classes,
            contrast=args.contrast,
            smoothness=args.smoothness,
            texture=args.texture,
            texture_seed=args.texture_seed,
        )
        oracle = SceneOracle(scene)
    mask = None
    if args.mask is not None:
        mask = read_mask(args.mask, expected_shape=schedule.steps[-1])
    elif warn:
        print("warning: no mask given; divergence skipped", file=sys.stderr)
    out = Path(args.out) if args.out is not None else None
    return ExperimentConfig(
        oracle=oracle,
        scheme=scheme,
        schedule=schedule,
        temperature=args.temperature,
        top_k=args.top_k,
        condition=args.condition,
        seeds=seeds,
        mask=mask,
        out=out,
    )


def _score_run(exp: ExperimentConfig, seed: int):
    """Run one seed; returns (record, per-step scores, skip reason)."""
    sampler = SamplerConfig(exp.scheme, exp.schedule, exp.temperature, exp.top_k, seed)
    record = run_sampling(exp.oracle, sampler, exp.condition)
    skip = None
    steps = None
    if exp.mask is not None:
        try:
            steps = divergence_breakdown(record, exp.mask, seed=seed)
            per_step = {s.k: s.divergence for s in steps if s.divergence is not None}
            _, aggregate = weighted_mean_scores(steps)
            record = record.with_scores(per_step, aggregate)
            if aggregate is None:
                skip = "downsampled mask degenerate at every step"
        except DegenerateMaskError as exc:
            skip = str(exc)
    return record, steps, skip


def _run_and_write(exp: ExperimentConfig, seed: int):
    record, _, skip = _score_run(exp, seed)
    write_record(record, exp.out / f"run_{seed}.swrec")
    export_heatmaps(record, exp.out / "heatmaps" / f"seed_{seed}")
    return seed, record.evenness, record.divergence, skip


def _pool_map(exp: ExperimentConfig, jobs: int | None):
    """Dispatch seeds to workers; results come back in seed order."""
    n = len(exp.seeds)
    if jobs is None:
        jobs = min(os.cpu_count() or 1, n)
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    if jobs == 1 or n == 1:
        return [_run_and_write(exp, seed) for seed in exp.seeds]
    with ProcessPoolExecutor(max_workers=min(jobs, n)) as pool:
        return list(pool.map(_run_and_write, [exp] * n, exp.seeds))


def _mean_line(label: str, values: list[float | None]) -> str:
    present = [v for v in values if v is not None]
    if not present:
        return f"{label} mean=n/a"
    return f"{label} mean={np.mean(present):.6g}"


def cmd_sample(args: argparse.Namespace) -> int:
    exp = _build_experiment(args, args.scheme, args.w, args.w2, _parse_seeds(args.seeds))
    exp.out.mkdir(parents=True, exist_ok=True)
    results = _pool_map(exp, args.jobs)

    lines = [
        f"oracle={args.oracle} scheme={args.scheme} schedule={args.schedule} "
        f"w={args.w:g} w2={_format_score(args.w2)} temperature={args.temperature:g} "
        f"top_k={'n/a' if args.top_k is None else args.top_k} condition={args.condition}"
    ]
    for seed, evenness, divergence, skip in results:
        div_text = f"skipped ({skip})" if skip else _format_score(divergence)
        lines.append(f"seed {seed}: evenness={_format_score(evenness)} divergence={div_text}")
    summary = (
        f"aggregate: {_mean_line('evenness', [r[1] for r in results])} "
        f"{_mean_line('divergence', [r[2] for r in results])} (n={len(results)})"
    )
    lines.append(summary)
    (exp.out / "summary.txt").write_text("\n".join(lines) + "\n")

    print(summary)
    print(f"wrote {len(results)} records to {exp.out}")
    if exp.mask is not None and all(r[3] for r in results):
        return EXIT_SKIPPED
    return EXIT_OK


def _stat_cell(values: list[float | None]) -> str:
    present = [v for v in values if v is not None]
    if not present:
        return "n/a"
    if len(present) == 1:
        return f"{present[0]:.4f} ± n/a"
    return f"{np.mean(present):.4f} ± {np.std(present, ddof=1):.4f}"


def cmd_compare(args: argparse.Namespace) -> int:
    seeds_a = _parse_seeds(args.seeds_a if args.seeds_a is not None else args.seeds)
    seeds_b = _parse_seeds(args.seeds_b if args.seeds_b is not None else args.seeds)
    if seeds_a != seeds_b:
        raise ConfigError(f"seed sets differ: side a {seeds_a}, side b {seeds_b}")

    sides = []
    for tag, scheme_flag, w, w2 in (
        ("a", args.scheme_a, args.w_a, args.w2_a),
        ("b", args.scheme_b, args.w_b, args.w2_b),
    ):
        w = args.w if w is None else w
        w2 = args.w2 if w2 is None else w2
        exp = _build_experiment(args, scheme_flag, w, w2, seeds_a, warn=tag == "a")
        evn, div, per_step = [], [], {}
        skips = 0
        for seed in exp.seeds:
            record, steps, skip = _score_run(exp, seed)
            evn.append(record.evenness)
            div.append(record.divergence)
            skips += bool(skip)
            for k, entry in enumerate(record.entries):
                h, w_ = exp.schedule.steps[k]
                cell = per_step.setdefault(k, {"shape": (h, w_), "evn": [], "div": []})
                cell["evn"].append(entry.evenness)
                cell["div"].append(entry.divergence)
        sides.append((tag, scheme_flag, w, evn, div, per_step, skips))

    n = len(seeds_a)
    print(f"scheme comparison over {n} shared seeds")
    print("side  scheme      w      evenness (mean ± sd)  divergence (mean ± sd)")
    for tag, scheme_flag, w, evn, div, _, _ in sides:
        print(f"{tag}:    {scheme_flag:<10} {w:<6g} {_stat_cell(evn):<21} {_stat_cell(div)}")
    print("per-step breakdown")
    for k in sorted(sides[0][5]):
        cell_a, cell_b = sides[0][5][k], sides[1][5][k]
        h, w_ = cell_a["shape"]
        print(
            f"step {k} ({h}x{w_}): "
            f"evenness a={_stat_cell(cell_a['evn'])} b={_stat_cell(cell_b['evn'])}  "
            f"divergence a={_stat_cell(cell_a['div'])} b={_stat_cell(cell_b['div'])}"
        )
    if args.mask is not None and all(side[6] == n for side in sides):
        return EXIT_SKIPPED
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.dump is None:
        raise ConfigError("analyze requires --dump")
    args.oracle = "dump"
    seeds = _parse_seeds(args.seeds)
    exp = _build_experiment(args, args.scheme, args.w, args.w2, seeds[:1])
    record, steps, skip = _score_run(exp, exp.seeds[0])

    by_k = {s.k: s for s in steps} if steps else {}
    for k, entry in enumerate(record.entries):
        h, w = exp.schedule.steps[k]
        div = by_k[k].divergence if k in by_k else None
        print(
            f"step {k} ({h}x{w}): evenness={_format_score(entry.evenness)} "
            f"divergence={_format_score(div)}"
        )
    if skip:
        print(f"divergence: skipped ({skip})")
        aggregate_div = "n/a"
    else:
        aggregate_div = _format_score(record.divergence)
    print(f"aggregate: evenness={_format_score(record.evenness)} divergence={aggregate_div}")

    exp.out.mkdir(parents=True, exist_ok=True)
    for path in export_heatmaps(record, exp.out):
        print(f"wrote {path}")
    return EXIT_SKIPPED if skip else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subcommands = build_parser()
    try:
        if argv and argv[0] in subcommands:
            _apply_config_defaults(subcommands[argv[0]], argv[1:])
        args = parser.parse_args(argv)
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except SwarGuideError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
