"""Experiment orchestration: corpus builds, training, per-N evaluation,
ablation sweeps and report emission.

The evaluation unit is one (window, target person) sample. Every method in a
table is scored on the same samples, bucketed by the number of people in the
recording.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import baselines as B
from . import embedding as E
from . import features as F
from . import simulator as S

log = logging.getLogger(__name__)

EVAL_N = (2, 3, 4, 5)
RANDOM_LABEL = "Random Guess"
OURS_LABEL = "Ours"
WINDOW_LENGTHS = (100, 150, 180, 200)
IMU_VARIANTS = ("v_a_w", "a_w", "v_w", "lpf")
WEIGHT_GRID = (0.0, 0.2, 0.5, 0.8, 1.0)
SPLITS = ("train", "val", "test")


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything that determines an experiment; saved as ``key = value`` text."""

    hidden_dim: int = 32
    conv_channels: int = 16
    alpha: float = 0.5
    beta: float = 0.2
    kappa: float = 1.0
    lr: float = 1e-3
    epochs: int = 10
    groups_per_batch: int = 8
    pair_weight: float = 0.0
    distance: str = "block"
    representation: str = "lpf"
    seed: int = 0
    window: int = 150
    step: int = 20
    lpf_cutoff_hz: float = 5.0
    motion_threshold: float = 0.02
    image_height: int = 389
    n_recordings: int = 40
    length: int = 600
    corpus_seed: int = 1000
    baseline_epochs: int = 8

    def __post_init__(self):
        if self.representation not in E.REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.distance not in ("block", "timestep"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.n_recordings < 1 or self.length < self.window:
            raise ValueError("need at least one recording at least one window long")

    def train_config(self):
        return E.TrainConfig(lr=self.lr, epochs=self.epochs, seed=self.seed,
                             groups_per_batch=self.groups_per_batch,
                             pair_weight=self.pair_weight)

    def new_model(self):
        return E.EmbeddingModel(self.hidden_dim, E.REPRESENTATIONS[self.representation][1],
                                self.conv_channels, self.alpha, self.beta, self.kappa,
                                seed=self.seed)

    def dumps(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text, **overrides):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"line {n}: cannot parse {raw!r}")
            values[key] = _coerce(types[key], val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides):
        return cls.loads(Path(path).read_text(encoding="utf-8"), **overrides)


def _coerce(type_name, value):
    t = {"int": int, "float": float, "str": str}[str(type_name)]
    return t(value)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

@dataclass
class RecordingEntry:
    recording_id: str
    n_agents: int
    length: int
    seed: int
    video_start_ns: int
    split: str
    tracks: dict = field(default=None, repr=False)
    streams: dict = field(default=None, repr=False)


def corpus_plan(config: ExperimentConfig):
    """(recording_id, n_agents, seed, split) for every recording.

    Agent counts cycle 2..6. Recordings are grouped in rounds of five; the
    last quarter of the rounds is test, the round before it validation, and
    six-person recordings always go to training (the test buckets are 2..5).
    """
    n_rounds = max(1, -(-config.n_recordings // 5))
    n_test = max(1, n_rounds // 4)
    n_val = 1 if n_rounds > n_test else 0
    plan = []
    for i in range(config.n_recordings):
        n = 2 + i % 5
        r = i // 5
        if n == 6 or r < n_rounds - n_test - n_val:
            split = "train"
        elif r < n_rounds - n_test:
            split = "val"
        else:
            split = "test"
        seed = config.corpus_seed + i
        plan.append((f"rec{i:03d}", n, seed, split))
    return plan


def simulate_corpus(config: ExperimentConfig, sim_config=None):
    entries = []
    for rid, n, seed, split in corpus_plan(config):
        rec = S.generate_scene(n, config.length, seed, sim_config, recording_id=rid,
                               min_length=config.window)
        entries.append(RecordingEntry(rid, n, config.length, seed, rec.video_start_ns, split,
                                      rec.tracks, rec.imu))
    return entries


MANIFEST_COLUMNS = ["recording_id", "n_agents", "length", "seed", "video_start_ns", "split"]


def write_corpus(entries, directory):
    """Track/IMU CSVs per recording plus ``manifest.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            F.write_tracks(d / f"{e.recording_id}_tracks.csv",
                           [e.tracks[k] for k in sorted(e.tracks)])
            F.write_imu(d / f"{e.recording_id}_imu.csv", [e.streams[k] for k in sorted(e.streams)])
            w.writerow([e.recording_id, e.n_agents, e.length, e.seed, e.video_start_ns, e.split])
    return d / "manifest.csv"


def read_corpus(directory):
    d = Path(directory)
    entries = []
    with open(d / "manifest.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rid = row["recording_id"]
            entries.append(RecordingEntry(
                rid, int(row["n_agents"]), int(row["length"]), int(row["seed"]),
                int(row["video_start_ns"]), row["split"],
                F.read_tracks(d / f"{rid}_tracks.csv"), F.read_imu(d / f"{rid}_imu.csv")))
    return entries


@dataclass
class Dataset:
    groups: dict              # split -> list of WindowGroup
    report: F.WindowReport


def build_dataset(entries, config: ExperimentConfig):
    report = F.WindowReport()
    groups = {s: [] for s in SPLITS}
    for e in entries:
        groups[e.split] += F.build_windows(
            e.recording_id, e.tracks, e.streams, e.video_start_ns, e.length, config.window,
            config.step, config.motion_threshold, config.lpf_cutoff_hz, n_people=e.n_agents,
            report=report)
    return Dataset(groups, report)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class Cell:
    correct: float
    evaluated: int

    @property
    def rate(self):
        if self.evaluated <= 0:
            return None
        return self.correct / self.evaluated


class ResultTable:
    """Classification rates keyed by (method, N), in insertion order of methods."""

    def __init__(self, n_values=EVAL_N, title=""):
        self.n_values = tuple(n_values)
        self.title = title
        self.methods = []
        self.cells = {}

    def add(self, method, n, correct, evaluated):
        if method not in self.methods:
            self.methods.append(method)
        self.cells[(method, n)] = Cell(correct, int(evaluated))

    def mark_unavailable(self, method, n):
        self.add(method, n, 0, 0)

    def rate(self, method, n):
        cell = self.cells.get((method, n))
        return cell.rate if cell else None

    def mean_rate(self, method):
        """Unweighted mean over the available N buckets."""
        rates = [self.rate(method, n) for n in self.n_values]
        rates = [r for r in rates if r is not None]
        return float(np.mean(rates)) if rates else None

    def merge(self, other):
        for m in other.methods:
            for n in other.n_values:
                if (m, n) in other.cells:
                    c = other.cells[(m, n)]
                    self.add(m, n, c.correct, c.evaluated)
        return self

    def rows(self):
        for m in self.methods:
            for n in self.n_values:
                if (m, n) in self.cells:
                    yield m, n, self.cells[(m, n)]

    def to_dict(self):
        return {
            "title": self.title,
            "n_values": list(self.n_values),
            "rows": [{"method": m, "n_people": n, "correct": c.correct,
                      "evaluated": c.evaluated} for m, n, c in self.rows()],
        }

    @classmethod
    def from_dict(cls, data):
        table = cls(data["n_values"], data.get("title", ""))
        for row in data["rows"]:
            table.add(row["method"], row["n_people"], row["correct"], row["evaluated"])
        return table

    def __eq__(self, other):
        return isinstance(other, ResultTable) and self.to_dict() == other.to_dict()


def _fmt_rate(r):
    return "n/a" if r is None else f"{r:.3f}"


def render(table: ResultTable, fmt="text"):
    """String form of a table. CSV/JSON are long-format; text is one row per method."""
    if fmt == "json":
        return json.dumps(table.to_dict(), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n_people", "correct", "evaluated", "rate"])
        for m, n, c in table.rows():
            w.writerow([m, n, f"{c.correct:.3f}", c.evaluated, _fmt_rate(c.rate)])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    width = max([len("Method")] + [len(m) for m in table.methods])
    head = f"{'Method':<{width}}" + "".join(f"  N={n:<5d}" for n in table.n_values) + "  Mean"
    lines = [table.title] if table.title else []
    lines += [head, "-" * len(head)]
    for m in table.methods:
        cells = "".join(f"  {_fmt_rate(table.rate(m, n)):<7s}" for n in table.n_values)
        lines.append(f"{m:<{width}}{cells}  {_fmt_rate(table.mean_rate(m))}")
    return "\n".join(lines) + "\n"


def report(table: ResultTable, path, fmt=None):
    """Write ``table`` to ``path``; format from the suffix unless given."""
    path = Path(path)
    fmt = fmt or {".csv": "csv", ".json": "json"}.get(path.suffix, "text")
    path.write_text(render(table, fmt), encoding="utf-8")
    return path


def load_table(path):
    return ResultTable.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def prepare(groups, config: ExperimentConfig):
    return [E.prepare_group(g, config.representation, config.image_height, config.lpf_cutoff_hz)
            for g in groups]


def train_model(dataset: Dataset, config: ExperimentConfig, progress=None):
    model = config.new_model()
    model.fit_stats(dataset.groups["train"], config.representation, config.image_height,
                    config.lpf_cutoff_hz)
    train_p = prepare(dataset.groups["train"], config)
    val_p = prepare(dataset.groups["val"], config) or None
    model, rep = E.train(model, train_p, config.train_config(), val_p, progress)
    return model, rep


def _bucket(n, n_values):
    return n if n in n_values else None


def evaluate_model(model, groups, config: ExperimentConfig, table=None, label=OURS_LABEL,
                   with_random=True):
    """Score the learned matcher per N bucket; optionally add the Random Guess row."""
    table = table or ResultTable()
    counts = {n: [0, 0] for n in table.n_values}
    for pg in prepare(groups, config):
        n = _bucket(pg.group.n_people, table.n_values)
        if n is None:
            continue
        for pid, pred in E.predict_group(model, pg, config.distance).items():
            counts[n][0] += pred == pid
            counts[n][1] += 1
    if with_random:
        for n in table.n_values:
            ev = counts[n][1]
            table.add(RANDOM_LABEL, n, ev / n, ev)
    for n in table.n_values:
        table.add(label, n, *counts[n])
    return table


@dataclass
class BaselineModels:
    ranges: B.HistogramRanges
    orientation: B.SequenceRegressor
    flow: B.SequenceRegressor


def fit_baselines(train_groups, config: ExperimentConfig):
    ranges = B.fit_histogram_ranges(train_groups)
    ori = B.train_orientation_regressor(train_groups, config.image_height, config.hidden_dim,
                                        config.baseline_epochs, config.seed)
    flow = B.train_flow_regressor(train_groups, config.representation, config.hidden_dim,
                                  config.conv_channels, config.baseline_epochs, config.seed,
                                  config.lpf_cutoff_hz)
    return BaselineModels(ranges, ori, flow)


def evaluate_baselines(models: BaselineModels, groups, config: ExperimentConfig, table=None):
    """Run all six baselines on exactly the samples the learned matcher sees."""
    table = table or ResultTable()
    counts = {(k, n): [0, 0] for k in B.BaselineKind for n in table.n_values}
    for g in groups:
        n = _bucket(g.n_people, table.n_values)
        if n is None:
            continue
        cands = [g.persons[p] for p in sorted(g.persons) if g.persons[p].parts
                 and g.persons[p].mask.any()]
        ids = {pw.person_id for pw in cands}
        for pid in g.targets():
            if pid not in ids:
                continue
            for kind in B.BaselineKind:
                reg = {B.BaselineKind.Orientation3D: models.orientation,
                       B.BaselineKind.Flow2D: models.flow}.get(kind)
                pred = B.baseline_match(kind, cands, g.imus[pid], reg, models.ranges,
                                        config.representation, config.image_height,
                                        config.lpf_cutoff_hz)
                counts[(kind, n)][0] += pred == pid
                counts[(kind, n)][1] += 1
    for kind in B.BaselineKind:
        for n in table.n_values:
            table.add(kind.label, n, *counts[(kind, n)])
    return table


def write_loss_csv(path, train_report: E.TrainReport):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_rate"])
        for i, loss in enumerate(train_report.loss_curve):
            val = train_report.val_curve[i] if i < len(train_report.val_curve) else ""
            w.writerow([i + 1, repr(float(loss)), "" if val == "" else repr(float(val))])


def write_failures(path, entries):
    Path(path).write_text("".join(f"{e}\n" for e in entries), encoding="utf-8")


@dataclass
class ExperimentResult:
    table: ResultTable
    model: E.EmbeddingModel = None
    train_report: E.TrainReport = None
    window_report: F.WindowReport = None
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


class _Stages:
    """Records per-stage timings; on failure writes a manifest before re-raising."""

    def __init__(self, out_dir, window_failures):
        self.out = out_dir
        self.timings = {}
        self.window_failures = window_failures

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            if self.out is not None:
                lines = [f"stage {name} failed: {exc!r}"] + traceback.format_exc().splitlines()
                lines += self.window_failures()
                write_failures(self.out / "failures.txt", lines)
            raise ExperimentError(f"stage {name} failed: {exc}") from exc
        finally:
            self.timings[name] = time.perf_counter() - t0


def run_experiment(config: ExperimentConfig, out_dir=None, entries=None, dataset=None,
                   with_baselines=True, progress=None, figures=True):
    """Build the corpus, train, evaluate per N and (optionally) run the baselines.

    Artifacts written to ``out_dir`` when given: config.txt, model.ckpt,
    loss.csv, results.{csv,json,txt}, failures.txt and figures.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")
    holder = {}
    stages = _Stages(out, lambda: holder["ds"].report.failures if "ds" in holder else [])
    if dataset is None:
        if entries is None:
            entries = stages.run("simulate", simulate_corpus, config)
        dataset = stages.run("windows", build_dataset, entries, config)
    holder["ds"] = dataset
    model, train_rep = stages.run("train", train_model, dataset, config, progress)
    table = ResultTable(title=f"Classification rate ({config.representation}, T={config.window})")
    stages.run("evaluate", evaluate_model, model, dataset.groups["test"], config, table)
    if with_baselines:
        base = stages.run("fit_baselines", fit_baselines, dataset.groups["train"], config)
        stages.run("baselines", evaluate_baselines, base, dataset.groups["test"], config, table)
        # learned method goes last, after the baselines
        table.methods.remove(OURS_LABEL)
        table.methods.append(OURS_LABEL)
    result = ExperimentResult(table, model, train_rep, dataset.report, stages.timings)
    if out is not None:
        result.artifacts = write_artifacts(result, out, figures)
    return result


def write_artifacts(result: ExperimentResult, out: Path, figures=True):
    arts = {}
    if result.model is not None:
        arts["checkpoint"] = out / "model.ckpt"
        result.model.save(arts["checkpoint"])
    if result.train_report is not None:
        arts["loss"] = out / "loss.csv"
        write_loss_csv(arts["loss"], result.train_report)
    for fmt, suffix in (("csv", "csv"), ("json", "json"), ("text", "txt")):
        arts[fmt] = report(result.table, out / f"results.{suffix}", fmt)
    if result.window_report is not None:
        arts["failures"] = out / "failures.txt"
        write_failures(arts["failures"], result.window_report.failures)
    if figures:
        from . import plotting
        arts.update(plotting.save_figures(result.table, result.train_report, out))
    return arts


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _sweep(config, cells, base_dataset=None, progress=None):
    """Train and evaluate one model per (label, config) cell.

    Cells sharing window/step/threshold reuse the same windows.
    """
    table = ResultTable()
    datasets = {}
    entries = None
    for label, cfg in cells:
        key = (cfg.window, cfg.step, cfg.motion_threshold, cfg.lpf_cutoff_hz)
        if key not in datasets:
            if base_dataset is not None and key == (config.window, config.step,
                                                    config.motion_threshold,
                                                    config.lpf_cutoff_hz):
                datasets[key] = base_dataset
            else:
                entries = entries or simulate_corpus(config)
                datasets[key] = build_dataset(entries, cfg)
        ds = datasets[key]
        if not ds.groups["train"] or not ds.groups["test"]:
            for n in table.n_values:
                table.mark_unavailable(label, n)
            continue
        log.info("ablation cell %s", label)
        model, _ = train_model(ds, cfg, progress)
        cell = evaluate_model(model, ds.groups["test"], cfg, ResultTable(), label,
                              with_random=False)
        for n in table.n_values:
            c = cell.cells[(label, n)]
            if c.evaluated == 0:
                table.mark_unavailable(label, n)
            else:
                table.add(label, n, c.correct, c.evaluated)
    return table


def ablate_window(config: ExperimentConfig, lengths=WINDOW_LENGTHS, dataset=None,
                  progress=None):
    cells = [(f"T={T}", replace(config, window=T)) for T in lengths]
    table = _sweep(config, cells, dataset, progress)
    table.title = "Window length"
    return table


IMU_LABELS = {"v_a_w": "(v, a, w)", "a_w": "(a, w)", "v_w": "(v, w)", "lpf": "(a_LPF, w_LPF)"}


def ablate_imu_repr(config: ExperimentConfig, variants=IMU_VARIANTS, dataset=None,
                    progress=None, reuse=None):
    """One cell per inertial representation; ``reuse`` maps variant -> ResultTable row source."""
    reuse = reuse or {}
    table = ResultTable(title="Inertial representation")
    for v in variants:
        label = IMU_LABELS[v]
        if v in reuse:
            src_table, src_label = reuse[v]
            for n in table.n_values:
                c = src_table.cells[(src_label, n)]
                table.add(label, n, c.correct, c.evaluated)
            continue
        table.merge(_sweep(config, [(label, replace(config, representation=v))], dataset,
                           progress))
    return table


def ablate_weights(config: ExperimentConfig, grid=WEIGHT_GRID, dataset=None, progress=None,
                   reuse=None):
    """alpha sweep at the default beta, then beta sweep at the default alpha."""
    cells = [(f"alpha={a:.1f}", replace(config, alpha=a)) for a in grid]
    cells += [(f"beta={b:.1f}", replace(config, beta=b)) for b in grid]
    table = ResultTable(title=f"Branch weights (alpha={config.alpha}, beta={config.beta})")
    for label, cfg in cells:
        if reuse is not None and cfg.alpha == config.alpha and cfg.beta == config.beta:
            src_table, src_label = reuse
            for n in table.n_values:
                c = src_table.cells[(src_label, n)]
                table.add(label, n, c.correct, c.evaluated)
            continue
        table.merge(_sweep(config, [(label, cfg)], dataset, progress))
    return table
