"""Corpora, paired constrained/unconstrained attack experiments, and report output."""

import csv
import hashlib
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .attack import AttackConfig, run_attack
from .errors import DimensionMismatchError, EmptyCorpusError, FormatError, IngestionError
from .imaging import Image, read_pnm, write_pnm
from .model import dump_model, predict
from .saliency import SaliencyConfig, susceptibility_set

log = logging.getLogger(__name__)

MANIFEST_NAMES = ("manifest.txt", "manifest.csv")


@dataclass(eq=False)
class Corpus:
    images: List[Image]
    name: str = "corpus"
    source: Optional[str] = None

    def __post_init__(self):
        if not self.images:
            raise EmptyCorpusError(f"corpus {self.name!r} is empty")
        shape = self.images[0].shape
        for i, im in enumerate(self.images):
            if im.shape != shape:
                raise DimensionMismatchError(
                    f"image {i} has shape {im.shape}, expected {shape}", entry=i)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def shape(self):
        return self.images[0].shape

    @property
    def labels(self):
        return np.array([im.label for im in self.images], dtype=np.int64)

    def split(self, fraction):
        """(first, rest) with ``fraction`` of the images in the first part."""
        k = int(round(len(self.images) * fraction))
        return (Corpus(self.images[:k], self.name + "-a", self.source),
                Corpus(self.images[k:], self.name + "-b", self.source))


def _find_manifest(path):
    for name in MANIFEST_NAMES:
        p = os.path.join(path, name)
        if os.path.isfile(p):
            return p
    raise IngestionError(f"no manifest ({' or '.join(MANIFEST_NAMES)}) in {path}", entry=path)


def load_corpus(path, num_classes=None):
    """Load a directory of PPM/PGM images listed in a 'filename,label' manifest.

    Intensities are rescaled to [0, 1]. Blank lines and '#' comments are ignored.
    """
    if not os.path.isdir(path):
        raise IngestionError(f"corpus directory not found: {path}", entry=path)
    manifest = _find_manifest(path)
    images = []
    shape = None
    with open(manifest, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise IngestionError(f"{manifest}:{lineno}: expected 'filename,label'", entry=line)
            fname, label_text = parts
            try:
                label = int(label_text)
            except ValueError:
                raise IngestionError(f"{manifest}:{lineno}: label {label_text!r} is not an integer",
                                     entry=fname) from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise IngestionError(f"{fname}: label {label} out of range", entry=fname)
            fpath = os.path.join(path, fname)
            if not os.path.isfile(fpath):
                raise IngestionError(f"missing image file {fname}", entry=fname)
            try:
                im = read_pnm(fpath, label)
            except FormatError as exc:
                raise IngestionError(f"{fname}: {exc}", entry=fname) from None
            if shape is not None and im.shape != shape:
                raise DimensionMismatchError(f"{fname} has shape {im.shape}, expected {shape}", entry=fname)
            shape = im.shape
            images.append(im)
    return Corpus(images, name=os.path.basename(os.path.normpath(path)), source=path)


def save_corpus(corpus, path):
    """Write ``corpus`` as numbered PPM/PGM files plus manifest.txt."""
    os.makedirs(path, exist_ok=True)
    ext = "ppm" if corpus.shape[2] == 3 else "pgm"
    lines = []
    for i, im in enumerate(corpus):
        fname = f"{i:05d}.{ext}"
        write_pnm(os.path.join(path, fname), im)
        lines.append(f"{fname},{im.label}\n")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.writelines(lines)


# Glyph renderers: each returns an HxW {0,1} mask holding one small glyph of
# side ``GLYPH`` at a random position. Classes differ only inside that glyph.
GLYPH = 3


def _corner(rng, s):
    return rng.integers(1, s - GLYPH, size=2)


def _hbar(rng, s):
    m = np.zeros((s, s))
    y, x = _corner(rng, s)
    m[y + GLYPH // 2, x:x + GLYPH] = 1.0
    return m


def _vbar(rng, s):
    m = np.zeros((s, s))
    y, x = _corner(rng, s)
    m[y:y + GLYPH, x + GLYPH // 2] = 1.0
    return m


def _square(rng, s):
    m = np.zeros((s, s))
    y, x = _corner(rng, s)
    m[y:y + GLYPH, x:x + GLYPH] = 1.0
    return m


def _cross(rng, s):
    m = np.zeros((s, s))
    y, x = _corner(rng, s)
    m[y + GLYPH // 2, x:x + GLYPH] = 1.0
    m[y:y + GLYPH, x + GLYPH // 2] = 1.0
    return m


def _diagonal(rng, s):
    m = np.zeros((s, s))
    y, x = _corner(rng, s)
    for i in range(GLYPH):
        m[y + i, x + i] = 1.0
    return m


SHAPES = (_hbar, _vbar, _square, _cross, _diagonal)


def render_shape(class_index, size, channels, rng, speckles=6, noise=0.05):
    """One synthetic image: a bright glyph for ``class_index`` on a flat grey background.

    ``speckles`` random-coloured single pixels are scattered over the image so
    that a classifier cannot key on isolated bright dots.
    """
    img = np.full((size, size, channels), rng.uniform(0.3, 0.5))
    mask = SHAPES[class_index % len(SHAPES)](rng, size)[:, :, None]
    color = rng.uniform(0.8, 1.0, size=channels)
    img = img * (1.0 - mask) + color * mask
    for _ in range(speckles):
        y, x = rng.integers(0, size, size=2)
        img[y, x] = rng.random(channels)
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_corpus(num_classes, per_class, size, seed, channels=3):
    """Seeded corpus of glyph images (bars, squares, crosses, diagonals), classes interleaved."""
    if per_class < 1:
        raise EmptyCorpusError("per-class count must be >= 1")
    if num_classes < 1 or size < GLYPH + 2:
        raise ValueError(f"need at least one class and image size >= {GLYPH + 2}")
    if num_classes > len(SHAPES):
        raise ValueError(f"the generator knows {len(SHAPES)} shape classes")
    rng = np.random.default_rng(seed)
    images = [Image(render_shape(k, size, channels, rng), k)
              for _ in range(per_class) for k in range(num_classes)]
    return Corpus(images, name=f"synthetic-{num_classes}x{per_class}-{size}px-seed{seed}")


MODES = ("unconstrained", "constrained")
CSV_FIELDS = ("seed", "mode", "total_time_s", "avg_time_s", "avg_iterations", "success_count",
              "attacked_count", "fallback_count", "saliency_time_s")
ABSENT = "-"
# CSV columns that hold wall-clock measurements
TIMING_FIELDS = ("total_time_s", "avg_time_s", "saliency_time_s")


@dataclass
class RunStats:
    """One row of the report: one seed in one mode.

    ``total_time`` is DE time summed over every attacked image; saliency time is
    kept apart in ``saliency_time``. The averages are None when nothing was
    averaged over.
    """

    seed: int
    mode: str
    total_time: float
    avg_time: Optional[float]
    avg_iterations: Optional[float]
    success_count: int
    attacked_count: int
    fallback_count: int = 0
    saliency_time: float = 0.0

    @property
    def combined_time(self):
        return self.total_time + self.saliency_time


@dataclass(eq=False)
class AttackRecord:
    seed: int
    mode: str
    index: int
    result: object
    constraint: object = None
    fallback: bool = False


@dataclass(eq=False)
class ExperimentReport:
    runs: List[RunStats]
    attack_config: AttackConfig
    saliency_config: SaliencyConfig
    model_id: str
    corpus_id: str
    skipped_count: int = 0
    successful_only: bool = False
    records: List[AttackRecord] = field(default_factory=list)

    def pairs(self):
        """(unconstrained, constrained) RunStats per seed, in seed order."""
        by_key = {(r.seed, r.mode): r for r in self.runs}
        seeds = list(dict.fromkeys(r.seed for r in self.runs))
        return [(by_key[(s, "unconstrained")], by_key[(s, "constrained")]) for s in seeds]


def model_id(model):
    return hashlib.sha256(dump_model(model)).hexdigest()[:16]


def image_seed(run_seed, index):
    """Seed material for one image's attack RNG; identical in both modes."""
    return np.random.SeedSequence([run_seed, index])


def saliency_seed(base_seed, run_seed, index):
    return int(np.random.SeedSequence([base_seed, run_seed, index]).generate_state(1)[0])


def _attack_one(model, image, index, run_seed, mode, attack_config, saliency_config):
    label = image.label
    constraint = None
    fallback = False
    sal_time = 0.0
    constrained = mode == "constrained"
    if constrained:
        t0 = time.perf_counter()
        cfg = replace(saliency_config, seed=saliency_seed(saliency_config.seed, run_seed, index))
        _, constraint = susceptibility_set(model, image, label, cfg)
        sal_time = time.perf_counter() - t0
        if len(constraint) == 0:
            log.warning("empty susceptibility set for image %d (seed %d); unconstrained fallback", index, run_seed)
            fallback = True
            constrained = False
    cfg = replace(attack_config, constrained=constrained)
    result = run_attack(model, image, label, cfg, constraint,
                        rng=np.random.default_rng(image_seed(run_seed, index)))
    return AttackRecord(run_seed, mode, index, result, constraint, fallback), sal_time


def _aggregate(seed, mode, records, sal_times, successful_only):
    attacked = len(records)
    successes = [r for r in records if r.result.success]
    total = sum(r.result.elapsed for r in records)
    pool = successes if successful_only else records
    if pool:
        avg_time = sum(r.result.elapsed for r in pool) / len(pool)
        avg_iter = sum(r.result.iterations_used for r in pool) / len(pool)
    else:
        avg_time = avg_iter = None
    return RunStats(seed, mode, total, avg_time, avg_iter, len(successes), attacked,
                    sum(r.fallback for r in records), sum(sal_times))


def run_experiment(model, corpus, attack_config=AttackConfig(), saliency_config=SaliencyConfig(),
                   seeds=(1, 2, 3, 4, 5), successful_only=False, workers=1):
    """Attack every correctly classified corpus image in both modes for each seed.

    Misclassified images are skipped in both modes and counted in
    ``skipped_count``. Each image's attack RNG depends only on (seed, image
    index), so worker count cannot change results. With ``successful_only`` the
    averages cover successful attacks only.
    """
    preds = predict(model, np.stack([im.data for im in corpus]))
    targets = [i for i, im in enumerate(corpus) if preds[i] == im.label]
    skipped = len(corpus) - len(targets)

    runs, records = [], []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for seed in seeds:
            for mode in MODES:
                def job(i, seed=seed, mode=mode):
                    return _attack_one(model, corpus.images[i], i, seed, mode, attack_config, saliency_config)
                outcomes = list(pool.map(job, targets)) if pool else [job(i) for i in targets]
                recs = [rec for rec, _ in outcomes]
                runs.append(_aggregate(seed, mode, recs, [t for _, t in outcomes], successful_only))
                records.extend(recs)
    finally:
        if pool:
            pool.shutdown()
    return ExperimentReport(runs, attack_config, saliency_config, model_id(model), corpus.name,
                            skipped, successful_only, records)


def _fmt(v, digits=2):
    return ABSENT if v is None else f"{v:.{digits}f}"


def format_table(report):
    """Two column groups, Unconstrained | Constrained, one row per seed."""
    cols = ("T (s)", "AVG T (s)", "AVG # itr")
    width = 10
    group = " ".join(c.rjust(width) for c in cols)
    gw = len(group)
    lines = [
        "Unconstrained".center(gw) + " | " + "Constrained".center(gw),
        group + " | " + group,
        "-" * gw + "-+-" + "-" * gw,
    ]
    for u, c in report.pairs():
        cells = [[_fmt(r.total_time), _fmt(r.avg_time), _fmt(r.avg_iterations)] for r in (u, c)]
        lines.append(" | ".join(" ".join(v.rjust(width) for v in cs) for cs in cells))
    lines.append("")
    lines.append("# seeds: " + " ".join(str(u.seed) for u, _ in report.pairs()))
    lines.append("# attacked per seed: " + " ".join(str(u.attacked_count) for u, _ in report.pairs())
                 + f"; skipped (misclassified): {report.skipped_count}")
    lines.append("# successes unconstrained/constrained: "
                 + " ".join(f"{u.success_count}/{c.success_count}" for u, c in report.pairs()))
    lines.append("# constrained saliency time (s): "
                 + " ".join(f"{c.saliency_time:.2f}" for _, c in report.pairs())
                 + "; combined T (s): " + " ".join(f"{c.combined_time:.2f}" for _, c in report.pairs()))
    lines.append("# empty-set fallbacks: " + " ".join(str(c.fallback_count) for _, c in report.pairs()))
    lines.append("# averages over: " + ("successful attacks" if report.successful_only else "all attacked images"))
    return "\n".join(lines) + "\n"


def _csv_value(v):
    if v is None:
        return ABSENT
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_csv(report):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in report.runs:
        writer.writerow([_csv_value(v) for v in (
            r.seed, r.mode, r.total_time, r.avg_time, r.avg_iterations, r.success_count,
            r.attacked_count, r.fallback_count, r.saliency_time)])
    return out.getvalue()


def parse_csv(text):
    """Inverse of :func:`format_csv`."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {header}")

    def num(v):
        return None if v == ABSENT else float(v)

    runs = []
    for row in reader:
        if not row:
            continue
        seed, mode, tt, at, ai, sc, ac, fc, st = row
        runs.append(RunStats(int(seed), mode, float(tt), num(at), num(ai), int(sc), int(ac), int(fc), float(st)))
    return runs


def emit_report(report, format="table"):
    if format == "table":
        return format_table(report)
    if format == "csv":
        return format_csv(report)
    raise ValueError(f"unknown report format {format!r}")
