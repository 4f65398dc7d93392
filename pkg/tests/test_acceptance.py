"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
they are also repeated in the terminal summary.
"""

import numpy as np
import pytest

from guided_onepixel.attack import AttackConfig, apply_perturbation, decode, exhaustive_oracle, run_attack
from guided_onepixel.bench import (CSV_FIELDS, TIMING_FIELDS, Corpus, emit_report, image_seed, parse_csv,
                                   run_experiment, save_corpus)
from guided_onepixel.cli import main
from guided_onepixel.model import (Conv2D, Dense, MaxPool2, Model, ReLU, Softmax, build_desk_model, input_gradient,
                                   logits, predict, save_model)
from guided_onepixel.saliency import SaliencyConfig, smoothgrad

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow


def verdict(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pixels_changed(image, candidate):
    return int(np.any(apply_perturbation(image, candidate).data != image.data, axis=-1).sum())


def non_increasing(trace):
    fits = [t.best_fitness for t in trace]
    return all(b <= a for a, b in zip(fits, fits[1:]))


@pytest.fixture(scope="module")
def directional(glyph_setup):
    model, corpus = glyph_setup
    report = run_experiment(model, corpus, AttackConfig(population_size=100, max_iterations=100),
                            SaliencyConfig(n=20, sigma=0.15, tau=0.5, seed=0), seeds=[1, 2, 3, 4, 5])
    return model, corpus, report


@pytest.fixture(scope="module")
def oracle_runs(gray_setup):
    model, corpus = gray_setup
    grid = [0.0, 0.5, 1.0]
    config = AttackConfig(population_size=64, max_iterations=100, early_stop=False)
    rows = []
    targets = [i for i, im in enumerate(corpus) if predict(model, im) == im.label]
    for i in targets:
        image = corpus.images[i]
        _, best_fit = exhaustive_oracle(model, image, image.label, grid)
        for seed in range(1, 6):
            result = run_attack(model, image, image.label, config, rng=np.random.default_rng(image_seed(seed, i)))
            rows.append((image, result, best_fit))
    return rows


def test_criterion_1_constrained_needs_fewer_iterations(directional):
    _, corpus, report = directional
    attacked = report.runs[0].attacked_count
    by_seed = {}
    for run in report.runs:
        by_seed.setdefault(run.seed, {})[run.mode] = run.avg_iterations
    wins = sum(v["constrained"] < v["unconstrained"] for v in by_seed.values())
    mean_u = np.mean([v["unconstrained"] for v in by_seed.values()])
    mean_c = np.mean([v["constrained"] for v in by_seed.values()])
    pairs = ", ".join(f"{s}: {v['unconstrained']:.2f}->{v['constrained']:.2f}" for s, v in sorted(by_seed.items()))
    ok = attacked >= 50 and wins >= 4 and mean_c < mean_u
    verdict(1, ok, f"{attacked} images, constrained lower in {wins}/5 seeds ({pairs}); "
                   f"mean {mean_u:.2f} vs {mean_c:.2f}")


def _gradient_configs():
    rng = np.random.default_rng(0)
    he = lambda shape, fan: rng.normal(0.0, np.sqrt(2.0 / fan), shape)
    small = lambda shape: rng.normal(0.0, 0.1, shape)
    return {
        "dense": lambda: Model((6, 6, 3), (Dense(he((108, 3), 108), small(3)), Softmax())),
        "conv+dense": lambda: Model((6, 6, 3), (Conv2D(he((4, 3, 3, 3), 27), small(4)),
                                                Dense(he((144, 3), 144), small(3)), Softmax())),
        "conv+relu+dense": lambda: Model((6, 6, 3), (Conv2D(he((4, 3, 3, 3), 27), small(4)), ReLU(),
                                                     Dense(he((144, 3), 144), small(3)), Softmax())),
        "conv+pool+dense": lambda: Model((6, 6, 3), (Conv2D(he((4, 3, 3, 3), 27), small(4)), MaxPool2(),
                                                     Dense(he((36, 3), 36), small(3)), Softmax())),
        "desk rgb": lambda: build_desk_model((8, 8, 3), 3, seed=int(rng.integers(2**31))),
        "desk gray": lambda: build_desk_model((8, 8, 1), 2, seed=int(rng.integers(2**31))),
    }


def _activation_pattern(model, batch):
    """ReLU signs and max-pool winners for every image in ``batch``, flattened per image."""
    parts, a = [], batch
    for layer in model.layers:
        if isinstance(layer, ReLU):
            parts.append((a > 0).reshape(len(a), -1))
        elif isinstance(layer, MaxPool2):
            b, h, w, c = a.shape
            win = a.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, -1, 4)
            parts.append(win.argmax(axis=-1))
        if isinstance(layer, Softmax):
            break
        a = layer.infer(a)
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(batch), 0))


def _finite_difference_check(model, x, cls, h=1e-4):
    """Max relative error, or None when a +-h step changes the activation pattern (a kink)."""
    n = x.size
    eye = np.eye(n).reshape((n,) + x.shape) * h
    up, down = x[None] + eye, x[None] - eye
    centre = _activation_pattern(model, x[None])
    if not (np.all(_activation_pattern(model, up) == centre) and np.all(_activation_pattern(model, down) == centre)):
        return None
    analytic = input_gradient(model, x, cls).ravel()
    numeric = (logits(model, up)[:, cls] - logits(model, down)[:, cls]) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def test_criterion_2_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    worst, kinks = {}, 0
    for name, make in _gradient_configs().items():
        errs = []
        while len(errs) < 20:
            model = make()
            err = _finite_difference_check(model, rng.random(model.input_shape), int(rng.integers(model.num_classes)))
            if err is None:
                kinks += 1
            else:
                errs.append(err)
        worst[name] = max(errs)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, max(worst.values()) < 1e-3,
            f"max relative error per configuration (20 pairs each): {detail}; {kinks} draws straddling a kink redrawn")


def test_criterion_3_single_noiseless_sample_is_plain_gradient():
    rng = np.random.default_rng(3)
    equal = 0
    trials = 12
    for i in range(trials):
        shape = (8, 8, 3) if i % 2 else (8, 8, 1)
        model = build_desk_model(shape, 3, seed=i)
        x = rng.random(shape)
        cls = int(rng.integers(3))
        got = smoothgrad(model, x, cls, SaliencyConfig(n=1, sigma=0.0, seed=i)).values
        want = np.abs(input_gradient(model, x, cls)).max(axis=-1)
        equal += got.dtype == want.dtype and got.tobytes() == want.tobytes()
    verdict(3, equal == trials, f"{equal}/{trials} inputs bit-equal")


def test_criterion_4_de_reaches_grid_oracle(oracle_runs):
    images = len({id(im) for im, _, _ in oracle_runs})
    close = sum(r.final_true_class_probability <= fit + 0.05 for _, r, fit in oracle_runs)
    frac = close / len(oracle_runs)
    verdict(4, images >= 10 and frac >= 0.8,
            f"{close}/{len(oracle_runs)} (image, seed) pairs within oracle + 0.05 over {images} images")


def test_criterion_5_one_pixel_invariant(directional, oracle_runs):
    _, corpus, report = directional
    checked = [(corpus.images[r.index], r.result) for r in report.records]
    checked += [(im, r) for im, r, _ in oracle_runs]
    violations = sum(pixels_changed(im, r.best) > 1 for im, r in checked)
    verdict(5, violations == 0, f"{violations} violations over {len(checked)} attacks")


def test_criterion_6_elitism(directional, oracle_runs):
    traces = [r.result.trace for r in directional[2].records] + [r.trace for _, r, _ in oracle_runs]
    bad = sum(not non_increasing(t) for t in traces)
    verdict(6, bad == 0 and all(traces), f"{len(traces) - bad}/{len(traces)} traces non-increasing")


def test_criterion_7_initial_population_inside_set(directional):
    _, corpus, report = directional
    checked = outside = fallbacks = 0
    for rec in report.records:
        if rec.mode != "constrained":
            continue
        if rec.fallback:
            fallbacks += 1
            continue
        im = corpus.images[rec.index]
        xs, ys, _ = decode(rec.result.initial_members, im.height, im.width)
        checked += len(xs)
        outside += sum((int(x), int(y)) not in rec.constraint for x, y in zip(xs, ys))
    reported = sum(r.fallback_count for r in report.runs if r.mode == "constrained")
    ok = outside == 0 and checked > 0 and reported == fallbacks
    verdict(7, ok, f"{checked - outside}/{checked} generation-0 coordinates in S; "
                   f"{fallbacks} fallbacks, {reported} reported")


def test_criterion_8_bench_is_deterministic(gray_setup, tmp_path, capsys):
    model, corpus = gray_setup
    save_model(model, tmp_path / "m.gopw")
    save_corpus(Corpus(corpus.images[:10]), tmp_path / "corpus")
    args = ["bench", "--model", str(tmp_path / "m.gopw"), str(tmp_path / "corpus"), "--population", "30",
            "--max-iterations", "30", "--format", "csv"]
    outputs = []
    for _ in range(2):
        assert main(args) == 0
        outputs.append(capsys.readouterr().out)
    keep = [i for i, f in enumerate(CSV_FIELDS) if f not in TIMING_FIELDS]
    view = lambda text: [[row.split(",")[i] for i in keep] for row in text.splitlines()]
    rows = len(outputs[0].splitlines()) - 1
    same = view(outputs[0]) == view(outputs[1])
    verdict(8, same and rows == 10, f"two runs, {rows} rows identical outside timing columns: {same}")


def test_criterion_9_report_fidelity(directional):
    report = directional[2]
    lines = emit_report(report, "table").splitlines()
    top, header = lines[0], lines[1]
    groups = [g.split() for g in header.split("|")]
    triplet = ["T", "(s)", "AVG", "T", "(s)", "AVG", "#", "itr"]
    rows = [l for l in lines[3:] if l.strip() and not l.startswith("#")]
    cells_ok = all(len([c for c in r.split() if c != "|"]) == 6 for r in rows)
    shape_ok = (top.index("Unconstrained") < top.index("Constrained") and len(groups) == 2
                and all(g == triplet for g in groups) and len(rows) == 5 and cells_ok)
    text = emit_report(report, "csv")
    roundtrip = parse_csv(text) == report.runs
    verdict(9, shape_ok and roundtrip, f"table {len(rows)} rows x 2 x (T(s), AVG T(s), AVG # itr): {shape_ok}; "
                                       f"CSV round-trip lossless: {roundtrip}")

