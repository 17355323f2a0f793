"""Command-line entry point: simulate, run, evaluate, plot-data, vocab."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("stereoslam")

VOCAB_STRIDE = 10


class CliError(Exception):
    pass


def _sequence_dirs(root: Path) -> list[Path]:
    if (root / "meta.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists()) if root.is_dir() else []
    if not dirs:
        raise CliError(f"no sequence found under {root}")
    return dirs


def _train_vocabulary(seq_dirs, stride: int, k: int, L: int, seed: int):
    from .place_recognition import build_vocabulary
    from .sim import load_sequence

    docs = []
    for d in seq_dirs:
        seq = load_sequence(d)
        docs.extend(f.descriptors for f in seq.frames[::stride])
    return build_vocabulary(docs, k=k, L=L, seed=seed)


# ------------------------------------------------------------------ commands
def cmd_simulate(args) -> int:
    from .sim import WorldConfig, generate_sequence, save_sequence

    cfg = WorldConfig.load(args.config)
    seq = generate_sequence(cfg)
    out = save_sequence(seq, args.out)
    print(f"wrote {len(seq.frames)} frames to {out}")
    return 0


def cmd_run(args) -> int:
    from .pipeline import Mode, System, SystemConfig
    from .place_recognition import Vocabulary
    from .sim import load_sequence
    from .trajectory import write_kitti, write_tum
    from .worldmap import WorldMap

    seq = load_sequence(args.sequence)
    mode = Mode.LOCALIZATION if args.mode == "localization" else Mode.MAPPING
    if mode == Mode.LOCALIZATION and not args.map:
        raise CliError("--mode localization requires --map")
    cfg = SystemConfig(loop_closing=not args.no_loop)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        # train on the sequence itself
        vocab = _train_vocabulary([Path(args.sequence)], VOCAB_STRIDE, cfg.vocab_k, cfg.vocab_L,
                                  cfg.vocab_seed)
    wm = WorldMap.load(args.map) if args.map else None
    system = System(seq.K, vocab, cfg, mode=mode, wm=wm, threaded=not args.deterministic)
    system.run(seq.frames)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj = system.frame_trajectory()
    write_tum(traj, out / "trajectory_tum.txt")
    write_kitti(traj, out / "trajectory_kitti.txt")
    write_tum(system.keyframe_trajectory(), out / "keyframes_tum.txt")
    system.wm.save(out / "map.json")
    system.write_run_log(out / "run_log.csv")
    system.write_ba_log(out / "ba_log.csv")
    system.timings.write_csv(out / "timings.csv")
    summary = {
        "frames": len(system.records),
        "tracked": sum(r.status == "ok" for r in system.records),
        "keyframes": len(system.wm.keyframes),
        "points": len(system.wm.points),
        "loops": [[e.current, e.matched, e.inliers] for e in system.closer.events],
        "map_sha256": system.wm.digest(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .trajectory import read_trajectory

    est = read_trajectory(args.est, args.format)
    gt = read_trajectory(args.gt, args.format)
    report = evaluate(est, gt, align=not args.no_align)
    print(json.dumps(report.as_dict(), indent=1, sort_keys=True))
    return 0


def cmd_plot_data(args) -> int:
    from .plots import aligned_pairs, render_topdown, write_plot_csv
    from .trajectory import read_trajectory

    est = read_trajectory(args.est, args.format)
    gt = read_trajectory(args.gt, args.format)
    rows = aligned_pairs(est, gt, align=not args.no_align)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_plot_csv(rows, out)
    png = out.with_suffix(".png")
    render_topdown(rows, png, title=Path(args.est).name)
    print(f"wrote {len(rows)} rows to {out} and figure to {png}")
    return 0


def cmd_vocab(args) -> int:
    vocab = _train_vocabulary(_sequence_dirs(Path(args.train)), args.stride, args.k, args.L, args.seed)
    vocab.save(args.out)
    print(f"wrote vocabulary with {vocab.n_words} words to {args.out}")
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereoslam", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic sequence with ground truth")
    s.add_argument("--config", required=True, help="world config (.json or .yaml)")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the pipeline on a sequence")
    r.add_argument("--sequence", required=True)
    r.add_argument("--mode", choices=["slam", "localization"], default="slam")
    r.add_argument("--map", help="map file to start from (required for localization)")
    r.add_argument("--deterministic", action="store_true",
                   help="run all roles in lock-step on one thread")
    r.add_argument("--no-loop", action="store_true", help="disable loop closing")
    r.add_argument("--vocab", help="vocabulary file (default: trained on the sequence)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="absolute and relative trajectory errors")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--format", choices=["tum", "kitti"], default="tum")
    e.add_argument("--no-align", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("plot-data", help="aligned trajectory pairs as CSV plus a PNG figure")
    d.add_argument("--est", required=True)
    d.add_argument("--gt", required=True)
    d.add_argument("--format", choices=["tum", "kitti"], default="tum")
    d.add_argument("--no-align", action="store_true")
    d.add_argument("--out", required=True, help="CSV path; the figure goes next to it as .png")
    d.set_defaults(func=cmd_plot_data)

    v = sub.add_parser("vocab", help="train a vocabulary from sequence descriptors")
    v.add_argument("--train", required=True, help="a sequence directory or a directory of them")
    v.add_argument("--out", required=True)
    v.add_argument("--k", type=int, default=10)
    v.add_argument("--L", type=int, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--stride", type=int, default=VOCAB_STRIDE, help="use every n-th frame")
    v.set_defaults(func=cmd_vocab)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"stereoslam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
