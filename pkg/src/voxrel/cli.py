"""Command-line orchestration of the full experiment protocol.

Every command takes --config/--seed/--out, writes its artifacts into the
run directory, and records a run.json with the resolved config snapshot,
the seed, and sha256 hashes of everything written, so a completed run can
be reproduced and verified byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from voxrel import explain as explain_mod
from voxrel import metrics as metrics_mod
from voxrel.nn.model_io import load_model, save_model
from voxrel.nn.network import build_network, classifier_architecture
from voxrel.nn.training import TrainConfig, fine_tune, load_split_arrays, predict, train
from voxrel.preprocess import (
    DatasetManifest,
    FillParams,
    fill_lesions,
    load_manifest,
    save_manifest,
    split_dataset,
)
from voxrel.render import render_slice, write_ppm
from voxrel.synth import (
    PhantomParams,
    generate_dataset,
    generate_parcellation,
    load_parcellation,
    save_parcellation,
)
from voxrel.volume import load_mask, load_volume, save_volume


def default_config() -> dict:
    return {
        "phantom": PhantomParams().to_dict(),
        "train": asdict(TrainConfig()),
        "arch": {
            "conv_filters": [8, 16, 16, 32],
            "kernel": [3, 3, 3],
            "padding": "same",
            "pool_after": None,
            "elu_alpha": 1.0,
            "l2_lambda": 0.01,
            "l2_conv_layers": [3, 4],
        },
        "synth": {"n_per_class": 100, "regime": "lesion", "holdout_fraction": 0.15},
        "fill": asdict(FillParams()),
        "explain": {"method": "lrp", "epsilon": 0.001, "only_correct": False, "split": "holdout"},
        "evaluate": {"split": "holdout"},
        "trials": 1,
        "regions": {"top_k": 30},
        "render": {"slice": "z:16", "range": 0.03},
        "seed": 0,
    }


def _deep_update(base: dict, override: dict) -> dict:
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ValueError(f"--set expects key.path=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ValueError(f"unknown config section {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        _deep_update(cfg, file_cfg)
    for assignment in getattr(args, "set", None) or []:
        _apply_set(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


class RunDir:
    """Tracks artifacts written under --out and records their hashes."""

    def __init__(self, out_dir, command: str, cfg: dict):
        self.path = Path(out_dir)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.artifacts: list[Path] = []

    def file(self, rel: str) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def finish(self) -> None:
        doc = {
            "command": self.command,
            "seed": self.cfg.get("seed"),
            "config": self.cfg,
            "artifacts": {
                str(p.relative_to(self.path)): sha256_file(p) for p in sorted(set(self.artifacts))
            },
        }
        (self.path / "run.json").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["train"])
    t["rng_seed"] = seed
    return TrainConfig(**t)


def _architecture(cfg: dict, dims):
    a = cfg["arch"]
    return classifier_architecture(
        dims,
        conv_filters=tuple(a["conv_filters"]),
        kernel=tuple(a["kernel"]),
        padding=a["padding"],
        pool_after=tuple(a["pool_after"]) if a["pool_after"] else None,
        dropout_rate=cfg["train"]["dropout_rate"],
        elu_alpha=a["elu_alpha"],
        l2_lambda=a["l2_lambda"],
        l2_conv_layers=tuple(a["l2_conv_layers"]),
    )


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if args.n_per_class is not None:
        cfg["synth"]["n_per_class"] = args.n_per_class
    if args.regime is not None:
        cfg["synth"]["regime"] = args.regime
    if args.holdout_fraction is not None:
        cfg["synth"]["holdout_fraction"] = args.holdout_fraction
    n = int(cfg["synth"]["n_per_class"])
    if n < 1:
        raise ValueError("n-per-class must be >= 1")
    run = RunDir(args.out, "synth", cfg)
    params = PhantomParams.from_dict(cfg["phantom"])
    seed = int(cfg["seed"])
    manifest = generate_dataset(n, cfg["synth"]["regime"], params, seed=seed, out_dir=run.path)
    manifest = split_dataset(manifest, float(cfg["synth"]["holdout_fraction"]), seed=seed)
    save_manifest(manifest, run.file("manifest.json"))
    parc = generate_parcellation(params)
    save_parcellation(parc, run.file("parcellation.vvol"), run.file("parcellation_names.json"))
    for s in manifest.subjects:
        for rel in (s.image_path, s.lesion_mask_path, s.wm_mask_path):
            run.artifacts.append(run.path / rel)
    run.finish()
    print(f"wrote {2 * n} subjects to {run.path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.trials is not None:
        cfg["trials"] = args.trials
    manifest = load_manifest(args.dataset)
    run = RunDir(args.out, "train", cfg)
    seed = int(cfg["seed"])
    trials = int(cfg["trials"])
    if trials < 1:
        raise ValueError("trials must be >= 1")
    best = None
    for trial in range(trials):
        trial_seed = derive_seed(seed, trial)
        tc = _train_config(cfg, trial_seed)
        if args.init:
            net, hist = fine_tune(args.init, manifest, tc)
        else:
            net = build_network(_architecture(cfg, manifest.dims), seed=trial_seed)
            net, hist = train(net, manifest, tc)
        if best is None or hist.best_val_loss < best[1].best_val_loss:
            best = (net, hist, trial)
    net, hist, trial = best
    save_model(net, run.file("model.vnet"), history=hist, seed=derive_seed(seed, trial))
    rows = [
        [e + 1, _fmt(tl), _fmt(vl), _fmt(vb)]
        for e, (tl, vl, vb) in enumerate(zip(hist.train_loss, hist.val_loss, hist.val_balanced_accuracy))
    ]
    _write_csv(run.file("history.csv"), ["epoch", "train_loss", "val_loss", "val_balanced_accuracy"], rows)
    best_bal = (
        hist.val_balanced_accuracy[hist.best_epoch - 1] if hist.best_epoch >= 1 else float("nan")
    )
    _write_csv(
        run.file("val_metrics.csv"),
        ["trial", "best_epoch", "best_val_loss", "val_balanced_accuracy"],
        [[trial, hist.best_epoch, _fmt(hist.best_val_loss), _fmt(best_bal)]],
    )
    run.finish()
    print(f"trained model (trial {trial}, best epoch {hist.best_epoch}) -> {run.path / 'model.vnet'}")
    return 0


def _percent(x) -> str:
    return "" if x is None else metrics_mod.format_percent(x)


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    if args.split is not None:
        cfg["evaluate"]["split"] = args.split
    split = cfg["evaluate"]["split"]
    manifest = load_manifest(args.dataset)
    net = load_model(args.model)
    run = RunDir(args.out, "evaluate", cfg)
    pred = predict(net, manifest, split)
    mets = metrics_mod.classification_metrics(pred["probabilities"], pred["labels"])
    roc = metrics_mod.roc_auc(pred["probabilities"], pred["labels"])
    _write_csv(
        run.file("metrics.csv"),
        ["model", "split", "n", "sensitivity", "specificity", "balanced_accuracy", "accuracy", "auc"],
        [[
            Path(args.model).name,
            split,
            len(pred["labels"]),
            _percent(mets["sensitivity"]),
            _percent(mets["specificity"]),
            _percent(mets["balanced_accuracy"]),
            _percent(mets["accuracy"]),
            _percent(roc["auc"]),
        ]],
    )
    _write_csv(
        run.file("roc.csv"),
        ["fpr", "tpr", "threshold"],
        [[_fmt(fpr), _fmt(tpr), _fmt(thr)] for fpr, tpr, thr in roc["roc_points"]],
    )
    _write_csv(
        run.file("scores.csv"),
        ["id", "label", "probability", "logit"],
        [
            [sid, int(lab), _fmt(prob), _fmt(logit)]
            for sid, lab, prob, logit in zip(pred["ids"], pred["labels"], pred["probabilities"], pred["logits"])
        ],
    )
    run.finish()
    print(f"{split}: balanced accuracy {_percent(mets['balanced_accuracy'])}%, AUC {_percent(roc['auc'])}%")
    return 0


def cmd_explain(args) -> int:
    cfg = resolve_config(args)
    for key, val in (("method", args.method), ("epsilon", args.epsilon), ("split", args.split)):
        if val is not None:
            cfg["explain"][key] = val
    if args.only_correct:
        cfg["explain"]["only_correct"] = True
    method = cfg["explain"]["method"]
    if method not in ("lrp", "sensitivity"):
        raise ValueError(f"unknown explanation method {method!r}")
    split = cfg["explain"]["split"]
    epsilon = float(cfg["explain"]["epsilon"])
    manifest = load_manifest(args.dataset)
    net = load_model(args.model)
    run = RunDir(args.out, "explain", cfg)

    subjects = {s.id: s for s in manifest.split_subjects(split)}
    pred = predict(net, manifest, split)
    rows = []
    heatmaps_by_class: dict[int, list] = {0: [], 1: []}
    from voxrel.volume import Volume  # local alias for clarity

    for sid, label, prob in zip(pred["ids"], pred["labels"], pred["probabilities"]):
        correct = int((prob >= 0.5) == bool(label))
        emit = bool(correct) or not cfg["explain"]["only_correct"]
        rel_sum = ""
        lesion_share = ""
        if emit:
            s = subjects[sid]
            vol = load_volume(manifest.resolve(s.image_path))
            if method == "lrp":
                h = explain_mod.lrp(net, vol, epsilon=epsilon)
            else:
                h = explain_mod.sensitivity(net, vol)
            explain_mod.save_heatmap(h, run.file(f"heatmaps/{sid}.vvol"))
            heatmaps_by_class[int(label)].append(h)
            rel_sum = _fmt(explain_mod.relevance_sum(h))
            if s.lesion_mask_path is not None:
                m = load_mask(manifest.resolve(s.lesion_mask_path))
                lesion_share = _fmt(explain_mod.relevance_share_in_mask(h, m))
        rows.append([sid, int(label), _fmt(prob), correct, int(emit), rel_sum, lesion_share])

    _write_csv(
        run.file("summary.csv"),
        ["id", "label", "probability", "correct", "heatmap", "relevance_sum", "lesion_positive_share"],
        rows,
    )
    for label, name in ((1, "average_patient.vvol"), (0, "average_control.vvol")):
        if heatmaps_by_class[label]:
            avg = explain_mod.average_heatmap(heatmaps_by_class[label])
            explain_mod.save_heatmap(avg, run.file(name))
    run.finish()
    n_out = sum(len(v) for v in heatmaps_by_class.values())
    print(f"wrote {n_out} {method} heatmaps to {run.path}")
    return 0


def cmd_fill_lesions(args) -> int:
    cfg = resolve_config(args)
    for key, val in (
        ("initial_radius", args.initial_radius),
        ("max_radius", args.max_radius),
        ("min_samples", args.min_samples),
    ):
        if val is not None:
            cfg["fill"][key] = val
    if args.no_noise:
        cfg["fill"]["noise"] = False
    manifest = load_manifest(args.dataset)
    run = RunDir(args.out, "fill-lesions", cfg)
    params = FillParams(**cfg["fill"])
    seed = int(cfg["seed"])
    new_subjects = []
    for index, s in enumerate(manifest.subjects):
        vol = load_volume(manifest.resolve(s.image_path))
        has_lesions = s.lesion_mask_path is not None and s.wm_mask_path is not None
        if has_lesions:
            lesions = load_mask(manifest.resolve(s.lesion_mask_path))
            wm = load_mask(manifest.resolve(s.wm_mask_path))
            vol = fill_lesions(vol, lesions, wm, params, seed=derive_seed(seed, index))
        save_volume(vol, run.file(s.image_path))
        for rel in (s.lesion_mask_path, s.wm_mask_path):
            if rel is not None:
                dst = run.file(rel)
                dst.write_bytes(manifest.resolve(rel).read_bytes())
        new_subjects.append(s)
    filled = DatasetManifest(
        manifest.name + "-filled", manifest.dims, manifest.seed, new_subjects, run.path
    )
    save_manifest(filled, run.file("manifest.json"))
    run.finish()
    print(f"filled dataset -> {run.path}")
    return 0


def cmd_regions(args) -> int:
    cfg = resolve_config(args)
    if args.top_k is not None:
        cfg["regions"]["top_k"] = args.top_k
    heat_dir = Path(args.heatmaps)
    names_path = args.names or str(Path(args.parcellation).with_name("parcellation_names.json"))
    parc = load_parcellation(args.parcellation, names_path)
    run = RunDir(args.out, "regions", cfg)

    summary = heat_dir / "summary.csv"
    if not summary.is_file():
        raise ValueError(f"{heat_dir} has no summary.csv (expected an explain output directory)")
    tables_by_class: dict[int, list] = {}
    with open(summary, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["heatmap"] != "1":
                continue
            h = explain_mod.load_heatmap(heat_dir / "heatmaps" / f"{row['id']}.vvol")
            table = metrics_mod.region_relevance(h.data, parc.labels, parc.names)
            tables_by_class.setdefault(int(row["label"]), []).append(table)
    if not tables_by_class:
        raise ValueError("no heatmaps found to aggregate")
    class_tables = {c: metrics_mod.mean_region_table(ts) for c, ts in tables_by_class.items()}
    class_names = {0: "control", 1: "patient"}
    for label, table in sorted(class_tables.items()):
        rows = [
            [class_names.get(label, label), r.region, _fmt(r.relevance_sum), _fmt(r.relevance_mean), r.voxel_count]
            for r in table.rows + [table.background]
        ]
        _write_csv(
            run.file(f"regions_{class_names.get(label, label)}.csv"),
            ["class", "region", "relevance_sum", "relevance_mean", "voxel_count"],
            rows,
        )
    ranked = metrics_mod.top_regions(class_tables, k=int(cfg["regions"]["top_k"]))
    _write_csv(
        run.file("ranked_regions.csv"),
        ["rank", "region", "rank_key"] + [f"mean_{class_names.get(c, c)}" for c in sorted(class_tables)],
        [
            [i + 1, r["region"], _fmt(r["rank_key"])] + [_fmt(r["means"][c]) for c in sorted(class_tables)]
            for i, r in enumerate(ranked)
        ],
    )
    run.finish()
    print(f"region tables -> {run.path}")
    return 0


def cmd_render(args) -> int:
    cfg = resolve_config(args)
    if args.slice is not None:
        cfg["render"]["slice"] = args.slice
    if args.range is not None:
        cfg["render"]["range"] = args.range
    spec = cfg["render"]["slice"]
    try:
        axis, index_s = spec.split(":")
        index = int(index_s)
    except ValueError:
        raise ValueError(f"--slice expects axis:index (e.g. z:16), got {spec!r}") from None
    vol = load_volume(args.volume)
    heatmap = explain_mod.load_heatmap(args.heatmap) if args.heatmap else None
    run = RunDir(args.out, "render", cfg)
    content = render_slice(vol, heatmap, axis, index, float(cfg["render"]["range"]))
    out_path = run.file(f"slice_{axis}{index}.ppm")
    write_ppm(out_path, content)
    run.finish()
    print(f"rendered {out_path}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--seed", type=int, help="master RNG seed")
    p.add_argument("--out", required=True, help="run directory for artifacts")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted path)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxrel",
        description="Train, evaluate and explain 3D volumetric classifiers on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset and parcellation")
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--regime", choices=["lesion", "atrophy"])
    p.add_argument("--holdout-fraction", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a classifier on a dataset manifest")
    p.add_argument("dataset", help="path to manifest.json")
    p.add_argument("--init", help="checkpoint to fine-tune from")
    p.add_argument("--trials", type=int, help="repeat training, keep the best-validation model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="classification metrics and ROC on a split")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["train", "holdout"])
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="per-subject relevance heatmaps")
    p.add_argument("model")
    p.add_argument("dataset")
    p.add_argument("--method", choices=["lrp", "sensitivity"])
    p.add_argument("--epsilon", type=float)
    p.add_argument("--only-correct", action="store_true")
    p.add_argument("--split", choices=["train", "holdout"])
    _add_common(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("fill-lesions", help="replace lesions with NAWM-like intensities")
    p.add_argument("dataset")
    p.add_argument("--initial-radius", type=int)
    p.add_argument("--max-radius", type=int)
    p.add_argument("--min-samples", type=int)
    p.add_argument("--no-noise", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_fill_lesions)

    p = sub.add_parser("regions", help="aggregate heatmap relevance per atlas region")
    p.add_argument("heatmaps", help="explain output directory")
    p.add_argument("parcellation", help="parcellation label volume (.vvol)")
    p.add_argument("--names", help="region name table (defaults to sibling parcellation_names.json)")
    p.add_argument("--top-k", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("render", help="render a slice with a relevance overlay")
    p.add_argument("volume")
    p.add_argument("--heatmap")
    p.add_argument("--slice", help="axis:index, e.g. z:16")
    p.add_argument("--range", type=float, help="relevance clamp range")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"voxrel: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
