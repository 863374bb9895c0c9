"""
Command-line pipeline: ``synth``, ``train``, ``prune``, ``eval``, ``report``.

Every subcommand takes the experiment INI file; all outputs land under its
``output_dir``::

    data/      synthetic images, masks, manifest.txt
    model/     base.ckpt, history.csv, history.png
    prune/<strategy>/<plan>/  ordering_<layer>.csv, pruned.ckpt,
                              retrained.ckpt, retrain_history.csv
    eval/      networks.csv, comparison.csv, prob_*.pgm, seg_*.pgm, segmentation.png
    report/    curves_<layer>.csv, ordering_curves.png, report.csv, report.md

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datalib
from . import evaluation as E
from . import net as netlib
from . import plotting
from . import prune as P
from . import train as TR
from .config import ConfigError, load_config, plan_label
from .errors import FormatError, InputError, NumericError, PruneError

log = logging.getLogger("membrane_prune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# ----------------------------------------------------------------------------
# Paths and shared helpers
# ----------------------------------------------------------------------------

class Layout:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.model = self.root / "model"
        self.prune = self.root / "prune"
        self.eval = self.root / "eval"
        self.report = self.root / "report"

    @property
    def manifest(self):
        return self.data / "manifest.txt"

    @property
    def base(self):
        return self.model / "base.ckpt"

    def plan_dir(self, strategy, plan):
        return self.prune / strategy / plan_label(plan)


def write_csv(path, header, rows, provenance):
    with open(path, "w", newline="") as fh:
        for key in sorted(provenance):
            fh.write(f"# {key}={provenance[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh.read().splitlines() if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _image_seed(seed, split, k):
    return seed * 1000 + (500 if split == "val" else 0) + k


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest {path} not found; run 'synth' first or fix [data] manifest")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or parts[2] not in ("train", "val"):
            raise FormatError(f"{path}:{lineno}: expected 'image mask split seed'")
        image, mask = (Path(p) if Path(p).is_absolute() else path.parent / p for p in parts[:2])
        entries.append((image, mask, parts[2], int(parts[3])))
    return entries


def load_datasets(cfg):
    manifest = Path(cfg.data.manifest) if cfg.data.source == "manifest" else Layout(cfg.output_dir).manifest
    if cfg.data.source == "manifest" and not manifest.is_absolute():
        manifest = cfg.output_dir / manifest
    splits = {"train": [], "val": []}
    for image, mask, split, seed in read_manifest(manifest):
        img = datalib.LabeledImage(datalib.load_image(image), datalib.load_mask(mask))
        per_class = cfg.data.train_per_class if split == "train" else cfg.data.val_per_class
        splits[split].append((img, datalib.extract_patches(img, cfg.network.patch_size, per_class, seed, split)))
    if not splits["train"] or not splits["val"]:
        raise InputError("manifest must list at least one train and one val image")
    train = datalib.PatchDataset.concat([d for _, d in splits["train"]], "train")
    val = datalib.PatchDataset.concat([d for _, d in splits["val"]], "val")
    return train, val, splits["val"][0][0]


def segmentation_image(cfg, val_image):
    s = cfg.eval.image_size
    return val_image.image[:s, :s], val_image.label[:s, :s]


def _load(path):
    if not Path(path).exists():
        raise InputError(f"{path} not found; run the earlier pipeline stages first")
    return netlib.load(path)


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def cmd_synth(cfg):
    out = Layout(cfg.output_dir)
    out.data.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    lines = [
        f"# experiment={cfg.name} seed={cfg.seed}",
        f"# synth width={d.width} height={d.height} curve_count={d.curve_count} "
        f"thickness={d.thickness_min}-{d.thickness_max} noise_sigma={d.noise_sigma}",
    ]
    for split, count in (("train", d.train_images), ("val", d.val_images)):
        for k in range(count):
            seed = _image_seed(cfg.seed, split, k)
            img = datalib.synth_membranes(d.width, d.height, d.curve_count,
                                          (d.thickness_min, d.thickness_max), d.noise_sigma, seed)
            stem = f"{split}_{k:03d}"
            datalib.save_image(img.image, out.data / f"{stem}.pgm")
            datalib.save_mask(img.label, out.data / f"{stem}_mask.pgm")
            lines.append(f"{stem}.pgm {stem}_mask.pgm {split} {seed}")
    out.manifest.write_text("\n".join(lines) + "\n")
    log.info("wrote %d images to %s", d.train_images + d.val_images, out.data)
    return out.manifest


def cmd_train(cfg, resume=False, max_steps=None):
    out = Layout(cfg.output_dir)
    out.model.mkdir(parents=True, exist_ok=True)
    train, val, _ = load_datasets(cfg)
    history_path = out.model / "history.csv"
    state = None
    if resume and out.base.exists():
        net, velocity = netlib.load_with_state(out.base)
        history = TR.read_history(history_path) if history_path.exists() else []
        state = TR.FitResult(net, history, velocity or TR.zero_velocity(net),
                             int(net.meta.get("iteration", 0)), list(net.meta.get("pending_losses", [])))
        log.info("resuming at iteration %d", state.iteration)
        net = state.net
    else:
        net = netlib.build(cfg.network, cfg.seed)

    def checkpoint(result):
        netlib.save(result.net, out.base, velocity=result.velocity)
        TR.write_history(result.history, history_path)

    stop = None
    if max_steps is not None:
        stop = (state.iteration if state else 0) + max_steps
    result = TR.fit(net, train, val, cfg.train, state=state, stop=stop, callback=checkpoint)
    checkpoint(result)
    if result.history:
        plotting.plot_history(result.history, out.model / "history.png", "base network")
    return result


def cmd_prune(cfg):
    out = Layout(cfg.output_dir)
    base = _load(out.base)
    train, val, _ = load_datasets(cfg)
    prov = cfg.provenance()
    results = {}
    for strategy in cfg.prune.strategies:
        first_layer = {}
        for plan_name in cfg.prune.plans:
            plan = cfg.plan(plan_name, strategy)
            where = out.plan_dir(strategy, plan_name)
            where.mkdir(parents=True, exist_ok=True)
            log.info("ordering %s / %s", strategy, plan_name)
            # c1 is ordered before any plan-specific masking, so it is shared
            orderings = P.order_network(base, plan, train, known=first_layer)
            first_layer = {"c1": orderings[0]}
            for ordering in orderings:
                P.write_ordering(ordering, where / f"ordering_{ordering.layer}.csv",
                                 dict(prov, plan=plan_label(plan_name)))
            pruned = P.apply_plan(base, orderings, plan)
            netlib.save(pruned, where / "pruned.ckpt")
            fit = TR.retrain(pruned, train, val, cfg.train,
                             cfg.retrain.lr_factor, cfg.retrain.budget_fraction)
            netlib.save(fit.net, where / "retrained.ckpt")
            TR.write_history(fit.history, where / "retrain_history.csv")
            results[(strategy, plan_name)] = fit.net
    return results


def _networks(cfg, out):
    nets = [("N", _load(out.base))]
    for plan_name in cfg.prune.plans:
        for strategy in cfg.prune.strategies:
            path = out.plan_dir(strategy, plan_name) / "retrained.ckpt"
            nets.append((f"{plan_label(plan_name)}:{strategy}", _load(path)))
    return nets


def cmd_eval(cfg):
    out = Layout(cfg.output_dir)
    out.eval.mkdir(parents=True, exist_ok=True)
    _, val, val_image = load_datasets(cfg)
    image, truth = segmentation_image(cfg, val_image)
    reference = netlib.build(cfg.network, 0)
    reports, panels = [], []
    for name, net in _networks(cfg, out):
        report = E.evaluate(name, net, reference, val, image, cfg.eval.repetitions)
        reports.append(report)
        pmap = E.probability_map(net, image)
        seg = E.threshold_map(pmap, cfg.eval.threshold)
        stem = name.replace(":", "_")
        datalib.save_image(pmap, out.eval / f"prob_{stem}.pgm", bits=16)
        datalib.save_mask(seg, out.eval / f"seg_{stem}.pgm")
        panels.append((name, pmap, seg))
        log.info("%s A=%.4f T=%.3fs dP=%.1f%% M=%dB", name, report.accuracy, report.seconds,
                 100 * report.delta_p, report.memory)

    prov = dict(cfg.provenance(), memory_convention="params+peak adjacent activations, 4 B/value, batch 1")
    write_csv(out.eval / "networks.csv", E.REPORT_FIELDS, [r.row() for r in reports], prov)

    by_name = {r.name: r for r in reports}
    header = ["plan"] + [f"A_{s}" for s in cfg.prune.strategies] + ["deltaP_percent"]
    rows = [["N", *[repr(by_name["N"].accuracy)] * len(cfg.prune.strategies), "0.0000"]]
    for plan_name in cfg.prune.plans:
        label = plan_label(plan_name)
        accs = [repr(by_name[f"{label}:{s}"].accuracy) for s in cfg.prune.strategies]
        dp = by_name[f"{label}:{cfg.prune.strategies[0]}"].delta_p
        rows.append([label, *accs, f"{100 * dp:.4f}"])
    write_csv(out.eval / "comparison.csv", header, rows, cfg.provenance())
    plotting.plot_segmentations(image, panels, out.eval / "segmentation.png")
    return reports


def _random_curves(cfg, base, train, plan_name, greedy, seeds):
    """Mean random-order curve per layer under the greedy plan's upstream masking."""
    plan = cfg.plan(plan_name, "random")
    work = base.copy()
    estimator = plan.estimator(train)
    curves = {}
    for ordering in greedy:
        runs = [P.random_order_layer(work, ordering.layer, estimator, seed).losses for seed in range(seeds)]
        curves[ordering.layer] = np.mean(runs, axis=0)
        work.discard(ordering.layer, ordering.discarded(plan.keep_for(ordering.layer)))
    return curves


def cmd_report(cfg):
    out = Layout(cfg.output_dir)
    out.report.mkdir(parents=True, exist_ok=True)
    base = _load(out.base)
    train, _, _ = load_datasets(cfg)
    prov = cfg.provenance()

    curves = {layer: {} for layer in netlib.PRUNABLE}
    dominance = []
    for plan_name in cfg.prune.plans:
        label = plan_label(plan_name)
        orderings = {}
        for strategy in cfg.prune.strategies:
            where = out.plan_dir(strategy, plan_name)
            orderings[strategy] = [P.read_ordering(where / f"ordering_{layer}.csv") for layer in netlib.PRUNABLE]
            for o in orderings[strategy]:
                curves[o.layer][f"{label}:{strategy}"] = o.losses
        if "loss-greedy" in orderings and cfg.prune.random_seeds > 0:
            random = _random_curves(cfg, base, train, plan_name, orderings["loss-greedy"], cfg.prune.random_seeds)
            for o in orderings["loss-greedy"]:
                curves[o.layer][f"random:{label}"] = list(random[o.layer])
                below = np.asarray(o.losses) <= random[o.layer]
                dominance.append((label, o.layer, float(below.mean())))

    for layer, series in curves.items():
        labels = list(series)
        length = max(len(v) for v in series.values())
        rows = [[step + 1] + [repr(float(series[k][step])) if step < len(series[k]) else "" for k in labels]
                for step in range(length)]
        write_csv(out.report / f"curves_{layer}.csv", ["step"] + labels, rows, dict(prov, layer=layer))
    plotting.plot_ordering_curves(curves, out.report / "ordering_curves.png")

    table = read_csv(out.eval / "networks.csv") if (out.eval / "networks.csv").exists() else []
    comparison = read_csv(out.eval / "comparison.csv") if (out.eval / "comparison.csv").exists() else []
    write_csv(out.report / "report.csv", list(E.REPORT_FIELDS),
              [[r[k] for k in E.REPORT_FIELDS] for r in table], prov)

    hashes = cfg.section_hashes()
    lines = [f"# Experiment report: {cfg.name}", "", f"seed: {cfg.seed}", "", "## Config hashes", ""]
    lines += [f"- {k}: `{v}`" for k, v in sorted(hashes.items())]
    lines += ["", "## Networks", "", "| " + " | ".join(E.REPORT_FIELDS) + " |",
              "|" + "---|" * len(E.REPORT_FIELDS)]
    lines += ["| " + " | ".join(r[k] for k in E.REPORT_FIELDS) + " |" for r in table]
    if comparison:
        cols = list(comparison[0])
        lines += ["", "## Strategy comparison (same keep-counts, same retrain budget)", "",
                  "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        lines += ["| " + " | ".join(r[c] for c in cols) + " |" for r in comparison]
    if dominance:
        lines += ["", "## Greedy vs random ordering", "",
                  "Fraction of steps where the greedy cumulative loss is at or below the "
                  f"mean of {cfg.prune.random_seeds} random orderings:", ""]
        lines += [f"- {plan} {layer}: {frac:.3f}" for plan, layer, frac in dominance]
    lines += ["", "Figures: `ordering_curves.png`, `../eval/segmentation.png`, `../model/history.png`", ""]
    (out.report / "report.md").write_text("\n".join(lines))
    return dominance


# ----------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="membrane-prune", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (
        ("synth", "generate synthetic membrane images and a manifest"),
        ("train", "train the base network"),
        ("prune", "order, prune and retrain per plan and strategy"),
        ("eval", "evaluate networks: accuracy, time, deltaP, memory, maps"),
        ("report", "merge results and render ordering curves"),
        ("all", "run every stage in order"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="experiment INI file")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from model/base.ckpt")
            p.add_argument("--max-steps", type=int, default=None,
                           help="stop after this many steps (resume later)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume, max_steps=args.max_steps)
        elif args.command == "prune":
            cmd_prune(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "report":
            cmd_report(cfg)
        else:
            cmd_synth(cfg)
            cmd_train(cfg)
            cmd_prune(cfg)
            cmd_eval(cfg)
            cmd_report(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PruneError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
