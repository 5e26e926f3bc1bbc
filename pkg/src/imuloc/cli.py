"""Command line entry point (``imuloc`` or ``python -m imuloc``)."""

import argparse
import csv
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import embedding as E
from . import features as F
from . import harness as H

log = logging.getLogger("imuloc")


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="key = value experiment config file")
    for f in fields(H.ExperimentConfig):
        if f.name == "seed":
            continue
        typ = {"int": int, "float": float, "str": str}[str(f.type)]
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=typ, default=None,
                       help=f"default {f.default}")


def _config(args, **extra):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(H.ExperimentConfig)}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if getattr(args, "config", None):
        return H.ExperimentConfig.load(args.config, **overrides)
    return H.ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})


def _check(results):
    """Print one line per check; returns the exit code."""
    ok = True
    for name, passed, detail in results:
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = _config(args, corpus_seed=args.seed)
    entries = H.simulate_corpus(cfg)
    manifest = H.write_corpus(entries, args.out)
    ds = H.build_dataset(entries, cfg)
    rep = ds.report
    print(f"wrote {len(entries)} recordings to {args.out} ({manifest.name})")
    print(f"windows {rep.windows}  samples {rep.samples}  "
          f"filtered {rep.filtered} ({rep.filtered_fraction:.3f})  failures {len(rep.failures)}")
    if args.check:
        lo, hi = 0.15, 0.35
        return _check([("filtered fraction", lo <= rep.filtered_fraction <= hi,
                        f"{rep.filtered_fraction:.3f} in [{lo}, {hi}]")])
    return 0


def cmd_extract(args):
    """Window an external track/IMU pair and list every (window, person) sample."""
    cfg = _config(args)
    tracks = F.read_tracks(args.tracks)
    streams = F.read_imu(args.imu)
    n_frames = args.length or max(int(t.frames[-1]) for t in tracks.values()) + 1
    report = F.WindowReport()
    groups = F.build_windows(args.recording_id, tracks, streams, args.video_start_ns, n_frames,
                             cfg.window, cfg.step, cfg.motion_threshold, cfg.lpf_cutoff_hz,
                             report=report)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["recording_id", "start_frame", "person_id", "observed_frames", "n_parts",
                    "kept"])
        for g in groups:
            for pid in sorted(g.persons):
                pw = g.persons[pid]
                w.writerow([g.recording_id, g.start_frame, pid, int(pw.mask.sum()),
                            len(pw.parts), int(g.keep[pid])])
    finally:
        if out is not sys.stdout:
            out.close()
    for line in report.failures:
        log.warning(line)
    print(f"windows {report.windows}  samples {report.samples}  filtered {report.filtered}  "
          f"failures {len(report.failures)}", file=sys.stderr)
    return 0


def cmd_train(args):
    cfg = _config(args, seed=args.seed)
    entries = H.read_corpus(args.corpus)
    ds = H.build_dataset(entries, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, rep = H.train_model(ds, cfg, progress=print)
    cfg.save(out / "config.txt")
    model.save(out / "model.ckpt")
    H.write_loss_csv(out / "loss.csv", rep)
    H.write_failures(out / "failures.txt", ds.report.failures)
    from . import plotting
    plotting.plot_loss(rep, out / "loss.png")
    print(f"best epoch {rep.best_epoch + 1}; checkpoint {out / 'model.ckpt'}")
    return 0


def _emit(table, out, stem="results", figure=True):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for fmt, suffix in (("csv", "csv"), ("json", "json"), ("text", "txt")):
        H.report(table, out / f"{stem}.{suffix}", fmt)
    if figure:
        from . import plotting
        plotting.plot_rates(table, out / f"{stem}.png")
    print(H.render(table, "text"), end="")


def cmd_eval(args):
    model_dir = Path(args.model)
    cfg = H.ExperimentConfig.load(model_dir / "config.txt")
    model = E.EmbeddingModel.load(model_dir / "model.ckpt")
    ds = H.build_dataset(H.read_corpus(args.corpus), cfg)
    table = H.evaluate_model(model, ds.groups[args.split], cfg)
    table.title = f"Classification rate ({args.split} split)"
    _emit(table, args.out, figure=not args.no_figure)
    return 0


def cmd_baseline(args):
    cfg = _config(args, seed=args.seed)
    ds = H.build_dataset(H.read_corpus(args.corpus), cfg)
    models = H.fit_baselines(ds.groups["train"], cfg)
    table = H.evaluate_baselines(models, ds.groups[args.split], cfg)
    table.title = "Baselines (orientation regressor uses keypoint and box inputs)"
    _emit(table, args.out, "baselines", figure=not args.no_figure)
    return 0


def cmd_ablate(args):
    cfg = _config(args, seed=args.seed)
    dataset = None
    if args.corpus:
        dataset = H.build_dataset(H.read_corpus(args.corpus), cfg)
    fn = {"window": H.ablate_window, "imu": H.ablate_imu_repr, "weights": H.ablate_weights}
    if args.study == "window" and args.corpus:
        log.warning("window ablation rebuilds windows from the simulated corpus config")
    table = fn[args.study](cfg, dataset=dataset, progress=print)
    _emit(table, args.out, f"ablate_{args.study}", figure=not args.no_figure)
    if args.check and args.study == "imu":
        lpf = table.mean_rate(H.IMU_LABELS["lpf"])
        raw = table.mean_rate(H.IMU_LABELS["a_w"])
        return _check([("low-pass >= raw", lpf is not None and raw is not None and lpf >= raw,
                        f"{_r(lpf)} vs {_r(raw)}")])
    return 0


def cmd_report(args):
    table = H.load_table(args.table)
    text = H.render(table, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.figure:
        from . import plotting
        plotting.plot_rates(table, args.figure)
    return 0


def _r(x):
    return "n/a" if x is None else f"{x:.3f}"


def acceptance_checks(result: H.ExperimentResult):
    """End-to-end checks on a default-corpus run: margins over chance, ordering, filtering."""
    t = result.table
    ours = H.OURS_LABEL
    checks = []
    for n, margin in ((2, 0.25), (5, 0.15)):
        r = t.rate(ours, n)
        checks.append((f"N={n} margin over chance", r is not None and r - 1 / n >= margin,
                       f"{_r(r)} - {1 / n:.3f} >= {margin}"))
    mine = t.mean_rate(ours)
    base = [(m, t.mean_rate(m)) for m in t.methods if m not in (ours, H.RANDOM_LABEL)]
    best = max(base, key=lambda mb: mb[1] if mb[1] is not None else -1) if base else (None, None)
    checks.append(("beats every baseline (mean over N)",
                   mine is not None and all(b is None or mine > b for _, b in base),
                   f"{_r(mine)} vs best {best[0]} {_r(best[1])}"))
    if result.window_report is not None:
        ff = result.window_report.filtered_fraction
        checks.append(("filtered fraction", 0.15 <= ff <= 0.35, f"{ff:.3f} in [0.15, 0.35]"))
    return checks


def cmd_run(args):
    cfg = _config(args, seed=args.seed)
    out = Path(args.out)
    entries = None
    if args.corpus:
        entries = H.read_corpus(args.corpus)
    res = H.run_experiment(cfg, out, entries=entries, with_baselines=not args.no_baselines,
                           progress=print, figures=not args.no_figure)
    print(H.render(res.table, "text"), end="")
    for stage, sec in res.timings.items():
        log.info("stage %s %.1f s", stage, sec)
    if args.check:
        return _check(acceptance_checks(res))
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="imuloc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic corpus")
    s.add_argument("--seed", type=int, required=True, help="corpus seed")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--check", action="store_true", help="assert the filtered fraction")
    _add_config_flags(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("extract", help="window an external track/IMU file pair")
    s.add_argument("--tracks", type=Path, required=True)
    s.add_argument("--imu", type=Path, required=True)
    s.add_argument("--video-start-ns", type=int, required=True,
                   help="UTC time of frame 0 (track files carry frame indices only)")
    s.add_argument("--recording-id", default="external")
    s.add_argument("--out", type=Path)
    _add_config_flags(s)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train the embedding model on a corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--corpus", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a trained model per N")
    s.add_argument("--corpus", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True, help="directory written by train")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--split", default="test", choices=H.SPLITS)
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="fit and evaluate the six baselines")
    s.add_argument("--corpus", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test", choices=H.SPLITS)
    s.add_argument("--no-figure", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("ablate", help="window, inertial-representation or weight sweep")
    s.add_argument("study", choices=["window", "imu", "weights"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corpus", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--check", action="store_true")
    s.add_argument("--no-figure", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="re-render a results JSON file")
    s.add_argument("table", type=Path)
    s.add_argument("--format", default="text", choices=["text", "csv", "json"])
    s.add_argument("--out", type=Path)
    s.add_argument("--figure", type=Path, help="also write a bar chart here")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="simulate, train, evaluate and run baselines")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--corpus", type=Path, help="use an existing corpus instead of simulating")
    s.add_argument("--check", action="store_true")
    s.add_argument("--no-baselines", action="store_true")
    s.add_argument("--no-figure", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (F.IngestionError, H.ExperimentError, ValueError, OSError) as exc:
        print(f"imuloc {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
