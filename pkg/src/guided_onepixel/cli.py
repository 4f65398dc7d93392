"""Command-line entry point: train, saliency, attack, bench, oracle.

Exit codes: 0 success, 1 other failure, 2 usage, 3 attack precondition, 4 oracle budget.

Seeds: each command takes one ``--seed``. ``attack`` spawns two child streams
from ``np.random.SeedSequence(seed)``: the first drives DE, the second seeds
SmoothGrad noise. ``bench`` runs one row pair per ``--seeds`` entry and uses
``--seed`` as the SmoothGrad base seed and the synthetic corpus seed.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import attack as atk
from . import bench
from . import saliency as sal
from .errors import (BudgetExceededError, EmptyCorpusError, FormatError, IngestionError,
                     NotCorrectlyClassifiedError)
from .imaging import read_pnm, write_pnm
from .model import TrainConfig, build_desk_model, load_model, predict, save_model, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PRECONDITION, EXIT_BUDGET = 0, 1, 2, 3, 4


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _synthetic(text):
    vals = _int_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("synthetic spec is CLASSES,PER_CLASS,SIZE")
    return vals


def _add_saliency_flags(p):
    p.add_argument("--n", type=int, default=20, help="SmoothGrad sample count")
    p.add_argument("--sigma", type=float, default=0.15, help="SmoothGrad noise std (intensity units)")
    p.add_argument("--tau", type=float, default=0.5, help="threshold on the normalized map")


def _add_attack_flags(p):
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--F", type=float, default=0.5, dest="weight", help="DE differential weight")
    p.add_argument("--max-iterations", type=int, default=100)


def build_parser():
    parser = argparse.ArgumentParser(prog="guided-onepixel",
                                     description="Saliency-guided one-pixel attacks and benchmarks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the desk-scale CNN and save its weights")
    p.add_argument("corpus", nargs="?", help="corpus directory (manifest + PPM/PGM files)")
    p.add_argument("--synthetic", type=_synthetic, metavar="K,PER,SIZE",
                   help="train on a generated corpus instead of a directory")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3, help="channels for --synthetic")
    p.add_argument("--save-corpus", metavar="DIR", help="also write the --synthetic corpus to DIR")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("saliency", help="SmoothGrad map and susceptibility set for one image")
    p.add_argument("model")
    p.add_argument("image")
    _add_saliency_flags(p)
    p.add_argument("--class", type=int, dest="class_index", help="class to explain (default: predicted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-map", help="normalized map as a text grid")
    p.add_argument("--out-pgm", help="normalized map as an 8-bit PGM")
    p.add_argument("--out-set", help="susceptibility set, one 'x y' per line")

    p = sub.add_parser("attack", help="one-pixel attack on one image")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("--label", type=int, help="true label (default: the model's prediction)")
    p.add_argument("--mode", choices=bench.MODES, default="constrained")
    _add_attack_flags(p)
    _add_saliency_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the perturbed image (PPM/PGM)")
    p.add_argument("--trace", help="write the per-generation trace")
    p.add_argument("--no-early-stop", action="store_true", help="run all generations")

    p = sub.add_parser("bench", help="paired constrained/unconstrained experiment")
    p.add_argument("--model", required=True)
    p.add_argument("corpus", nargs="?", help="corpus directory")
    p.add_argument("--synthetic", type=_synthetic, metavar="K,PER,SIZE")
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--seed", type=int, default=0, help="saliency base seed and synthetic corpus seed")
    _add_attack_flags(p)
    _add_saliency_flags(p)
    p.add_argument("--successful-only", action="store_true", help="average over successful attacks only")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("oracle", help="exhaustive single-pixel search over a colour grid")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("--label", type=int, help="true label (default: the model's prediction)")
    p.add_argument("--grid", type=_float_list, default=[0.0, 0.5, 1.0])
    p.add_argument("--budget", type=int, default=1_000_000, help="maximum fitness evaluations")
    return parser


def _require_file(parser, path, what):
    if not os.path.isfile(path):
        parser.error(f"{what} not found: {path}")


def _load_corpus_arg(parser, args, seed):
    if args.synthetic:
        k, per, size = args.synthetic
        return bench.generate_synthetic_corpus(k, per, size, seed, channels=getattr(args, "channels", 3))
    if not args.corpus:
        parser.error("a corpus directory or --synthetic is required")
    if not os.path.isdir(args.corpus):
        parser.error(f"corpus directory not found: {args.corpus}")
    return bench.load_corpus(args.corpus)


def cmd_train(parser, args):
    corpus = _load_corpus_arg(parser, args, args.seed)
    if args.save_corpus:
        bench.save_corpus(corpus, args.save_corpus)
    k = int(corpus.labels.max()) + 1
    model = build_desk_model(corpus.shape, k, seed=args.seed)
    result = train(model, corpus.images, TrainConfig(args.lr, args.epochs, args.batch, args.seed))
    save_model(result.model, args.out)
    print(f"trained on {len(corpus)} images, {k} classes; final training accuracy {result.accuracy:.4f}")
    print(f"model written to {args.out}")
    return EXIT_OK


def _load_model_and_image(parser, args):
    _require_file(parser, args.model, "model file")
    _require_file(parser, args.image, "image file")
    return load_model(args.model), read_pnm(args.image)


def cmd_saliency(parser, args):
    model, image = _load_model_and_image(parser, args)
    cls = predict(model, image) if args.class_index is None else args.class_index
    cfg = sal.SaliencyConfig(args.n, args.sigma, args.tau, args.seed)
    nmap, sset = sal.susceptibility_set(model, image, cls, cfg)
    if args.out_map:
        with open(args.out_map, "w") as fh:
            fh.write(sal.format_map(nmap))
    if args.out_pgm:
        with open(args.out_pgm, "wb") as fh:
            fh.write(sal.map_to_pgm(nmap))
    if args.out_set:
        with open(args.out_set, "w") as fh:
            fh.write(sal.format_set(sset))
    print(f"class {cls}; {len(sset)} of {nmap.height * nmap.width} pixels above tau={args.tau}")
    if nmap.degenerate:
        print(f"warning: constant sensitivity map for {args.image}")
    if len(sset) == 0:
        print(f"warning: empty susceptibility set for {args.image}")
    return EXIT_OK


def cmd_attack(parser, args):
    model, image = _load_model_and_image(parser, args)
    label = predict(model, image) if args.label is None else args.label
    attack_ss, saliency_ss = np.random.SeedSequence(args.seed).spawn(2)
    constraint = None
    constrained = args.mode == "constrained"
    if constrained:
        cfg = sal.SaliencyConfig(args.n, args.sigma, args.tau, int(saliency_ss.generate_state(1)[0]))
        _, constraint = sal.susceptibility_set(model, image, label, cfg)
        if len(constraint) == 0:
            print(f"warning: empty susceptibility set for {args.image}; falling back to unconstrained")
            constrained = False
    config = atk.AttackConfig(args.population, args.weight, args.max_iterations, constrained,
                              args.seed, early_stop=not args.no_early_stop)
    result = atk.run_attack(model, image, label, config, constraint, rng=np.random.default_rng(attack_ss))
    x, y = result.pixel
    _, _, color = atk.decode(result.best, image.height, image.width)
    print(f"success: {str(result.success).lower()}")
    print(f"iterations: {result.iterations_used}")
    print(f"pixel: ({x}, {y})")
    print("color: " + " ".join(f"{c:.4f}" for c in color[0]))
    print(f"true-class probability: {result.final_true_class_probability:.6f}")
    print(f"adversarial label: {'-' if result.adversarial_label is None else result.adversarial_label}")
    print(f"elapsed: {result.elapsed:.3f} s")
    if args.out:
        write_pnm(args.out, atk.apply_perturbation(image, result.best))
    if args.trace:
        with open(args.trace, "w") as fh:
            fh.write(atk.format_trace(result.trace))
    return EXIT_OK


def cmd_bench(parser, args):
    _require_file(parser, args.model, "model file")
    model = load_model(args.model)
    corpus = _load_corpus_arg(parser, args, args.seed)
    if not args.seeds:
        parser.error("--seeds must name at least one seed")
    report = bench.run_experiment(
        model, corpus,
        atk.AttackConfig(args.population, args.weight, args.max_iterations),
        sal.SaliencyConfig(args.n, args.sigma, args.tau, args.seed),
        seeds=args.seeds, successful_only=args.successful_only, workers=max(1, args.threads))
    sys.stdout.write(bench.emit_report(report, args.format))
    return EXIT_OK


def cmd_oracle(parser, args):
    model, image = _load_model_and_image(parser, args)
    label = predict(model, image) if args.label is None else args.label
    count = atk.oracle_evaluations(image.shape, args.grid)
    try:
        best, fit = atk.exhaustive_oracle(model, image, label, args.grid, budget=args.budget)
    except BudgetExceededError as exc:
        print(f"refusing: {exc.required} evaluations required, budget is {exc.budget}")
        return EXIT_BUDGET
    x, y = int(best[0]), int(best[1])
    print(f"evaluations: {count}")
    print(f"pixel: ({x}, {y})")
    print("color: " + " ".join(f"{c:g}" for c in best[2:]))
    print(f"fitness: {fit:.6f}")
    label_after = predict(model, atk.apply_perturbation(image, best))
    print(f"label after perturbation: {label_after}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "saliency": cmd_saliency, "attack": cmd_attack,
            "bench": cmd_bench, "oracle": cmd_oracle}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](parser, args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except NotCorrectlyClassifiedError:
        print("error: image not correctly classified", file=sys.stderr)
        return EXIT_PRECONDITION
    except (IngestionError, EmptyCorpusError, FormatError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
