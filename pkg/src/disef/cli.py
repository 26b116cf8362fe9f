"""``disef`` command line: split, caption, generate, train, eval, sweep (and make-toy).

Exit codes: 0 success, 2 config/data error, 3 backend failure, 4 generation exhausted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import Config, load_config, version_stamp
from .data import ShotSpec, base_new_split, sample_k_shot
from .errors import BackendError, DisefError, GenerationExhaustedError
from .evaluator import emit_report, evaluate_base_new, evaluate_default, predict, top1
from .sap import caption_support_set, run_sap, write_manifest
from .toydata import make_toy_dataset
from .trainer import grid_search

log = logging.getLogger("disef")


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "k_shots", None) is not None:
        cfg.run.k_shots = args.k_shots
    if getattr(args, "k_syn", None) is not None:
        cfg.run.k_syn = args.k_syn
    cfg.run.validate()
    return cfg


def _stamp(cfg: Config, **extra) -> dict:
    return {"version": version_stamp(), "config": cfg.resolved(), **extra}


# ---------------------------------------------------------------- commands


def cmd_make_toy(args):
    m = make_toy_dataset(args.out, args.classes, args.train_per_class, args.val_per_class, args.test_per_class, seed=args.seed or 0)
    print(f"wrote {len(m.samples)} samples over {m.num_classes} classes to {Path(args.out) / 'manifest.json'}")


def cmd_split(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    out = Path(args.out)
    seeds = args.seeds if args.seeds else [cfg.run.seed]
    for seed in seeds:
        support = sample_k_shot(manifest, ShotSpec(cfg.run.k_shots, seed))
        _write_json(out / P.shot_filename(cfg.run.k_shots, seed), P.shots_document(manifest, support, cfg.run.k_shots, seed))
    base, new = base_new_split(manifest)
    _write_json(out / "base_new.json", {"dataset": manifest.name, "base": base, "new": new})
    print(f"wrote {len(seeds)} shot file(s) and base_new.json to {out}")


def _support(args, cfg, manifest, classes=None):
    return P.default_support(cfg, manifest, args.shots, classes)


def cmd_caption(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    support = _support(args, cfg, manifest)
    captioner, _ = P.make_backend(args.backend or cfg.sap["backend"], cfg, manifest.class_names)
    out = Path(args.out)
    caps = caption_support_set(captioner, support, out / "caption_cache", manifest.name, manifest.root)
    _write_json(out / "captions.json", {str(k): v for k, v in sorted(caps.by_class.items())})
    print(f"captioned {len(caps)} support samples")


def cmd_generate(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    support = _support(args, cfg, manifest)
    sc = P.sap_config(cfg)
    if args.dry_run:
        n = len(support.class_names)
        print(f"planned: {n} classes x k_syn {sc.k_syn}; at most {n * sc.attempt_cap} generation jobs (cap {sc.attempt_factor} x k_syn per class)")
        return 0
    out = Path(args.out)
    captioner, generator = P.make_backend(args.backend or cfg.sap["backend"], cfg, manifest.class_names)
    try:
        caps = caption_support_set(captioner, support, out / "caption_cache", manifest.name, manifest.root)
        filter_fn = P.make_filter(cfg, manifest, support, manifest.root)
        manifest_path = out / "synthetic.jsonl"
        meta = _stamp(cfg, shots=str(args.shots) if args.shots else None, manifest=manifest_path.name)

        def persist(samples, status):
            write_manifest(samples, manifest_path, out / "synthetic_images")
            _write_json(out / "synthetic.meta.json", {**meta, "status": status, "count": len(samples)})

        samples = run_sap(support, caps, generator, filter_fn, sc, root=manifest.root, on_partial=lambda s: persist(s, "exhausted"))
        persist(samples, "complete")
    finally:
        if hasattr(generator, "close"):
            generator.close()
    print(f"kept {len(samples)} synthetic samples -> {manifest_path}")
    return 0


def _classes_for(cfg, manifest, protocol):
    return P.split_classes(manifest, protocol)[0] if protocol == "base_new" else None


def cmd_train(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    protocol = args.protocol or cfg.eval["protocol"]
    classes = _classes_for(cfg, manifest, protocol)
    support = _support(args, cfg, manifest, classes)
    synthetic = []
    if args.synthetic and not args.no_synth:
        synthetic = P.load_synthetic(args.synthetic, manifest.class_names, classes)
    out = Path(args.out)
    _, result = P.run_training(cfg, manifest, support, synthetic, out_dir=out)
    _write_json(
        out / "run.json",
        _stamp(
            cfg,
            seed=cfg.run.seed,
            protocol=protocol,
            class_names=list(support.class_names),
            shots=str(args.shots) if args.shots else None,
            synthetic=None if args.no_synth or not args.synthetic else str(args.synthetic),
            steps=result.state.step,
            best_val=result.state.best_metric,
            final_loss=result.losses[-1] if result.losses else None,
        ),
    )
    print(f"trained {result.state.step} steps; adapters -> {out / 'adapters.npz'}")


def _checkpoint_seed(ckpt, default):
    run = Path(ckpt).parent / "run.json"
    if run.exists():
        return json.loads(run.read_text()).get("seed", default)
    return default


def cmd_eval(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    protocol = args.protocol or cfg.eval["protocol"]
    ckpts = args.checkpoint or [None]
    models = {}
    for i, ck in enumerate(ckpts):
        seed = _checkpoint_seed(ck, cfg.run.seed + i) if ck else cfg.run.seed + i
        models[seed] = P.load_trained(cfg, manifest, ck)
    test = manifest.split(args.split)
    if not test:
        raise DisefError(f"no samples in split {args.split!r}")
    images = np.stack([s.load(manifest.root) for s in test])
    labels = [s.label for s in test]
    template = cfg.run.prompt_template
    if protocol == "base_new":
        base, new = base_new_split(manifest)
        report = evaluate_base_new(models, images, labels, manifest.class_names, base, new, template)
    else:
        report = evaluate_default(models, images, labels, manifest.class_names, template)
    report.meta = _stamp(cfg, checkpoints=[str(c) if c else None for c in ckpts], split=args.split)
    out = Path(args.out)
    emit_report(report, out / "report.json", "json")
    emit_report(report, out / "report.csv", "csv")
    print(json.dumps(report.mean, sort_keys=True))


def cmd_sweep(args):
    cfg = _load(args)
    manifest = P.load_dataset(cfg, args.data_root)
    sweep = dict(cfg.sweep)
    mode = sweep.pop("mode", "joint")
    budget = sweep.pop("budget", None)
    space = {k: list(v) for k, v in sweep.items()}
    support_full = _support(args, cfg, manifest)
    synthetic = []
    if args.synthetic and not args.no_synth:
        synthetic = P.load_synthetic(args.synthetic, manifest.class_names)
    val = manifest.split("val")
    if val:
        support = support_full
    else:
        support, val = P.carve_validation(support_full, cfg.run.val_fraction)
    if not val:
        raise DisefError("sweep needs a validation split (manifest 'val' or val_fraction > 0 with K >= 2)")
    v_imgs = np.stack([s.load(manifest.root) for s in val])
    v_labels = [s.label for s in val]

    def evaluate(run):
        sub = Config(run, cfg.data, cfg.model, cfg.sap, {}, cfg.eval)
        model, _ = P.run_training(sub, manifest, support, synthetic, use_val=False)
        return 100.0 * top1(predict(model, v_imgs, manifest.class_names, run.prompt_template), v_labels)

    ranked = grid_search(cfg.run, space, evaluate, mode=mode, budget=budget)
    keys = list(space)
    rows = [{"rank": i + 1, "score": score, **{k: getattr(c, k) for k in keys}} for i, (c, score) in enumerate(ranked)]
    out = Path(args.out)
    _write_json(out / "sweep.json", _stamp(cfg, mode=mode, results=rows, best=ranked[0][0].to_dict()))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["rank", "score", *keys], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"evaluated {len(rows)} configs; best score {rows[0]['score']:.2f}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disef", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, shots=True):
        sp.add_argument("--config", required=True, help="TOML run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--data-root", help="dataset root (beats DISEF_DATA_ROOT and config)")
        sp.add_argument("--k-shots", type=int, help="shots per class")
        if shots:
            sp.add_argument("--shots", help="shot file from 'split' (default: sample from the manifest)")

    sp = sub.add_parser("make-toy", help="write a small synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--train-per-class", type=int, default=24)
    sp.add_argument("--val-per-class", type=int, default=0)
    sp.add_argument("--test-per-class", type=int, default=12)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_toy)

    sp = sub.add_parser("split", help="seeded K-shot files and the base/new class split")
    common(sp, shots=False)
    sp.add_argument("--seeds", type=int, nargs="+", help="one shot file per seed")
    sp.set_defaults(func=cmd_split)

    for name, func, helptext in (("caption", cmd_caption, "caption the support set"), ("generate", cmd_generate, "run the synthetic augmentation pipeline")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--backend", help="mock | external:<command>")
        sp.add_argument("--k-syn", type=int, help="kept synthetic samples per class")
        sp.add_argument("--dry-run", action="store_true", help="print the planned job bound and exit")
        sp.set_defaults(func=func)

    for name, func, helptext in (("train", cmd_train, "fine-tune adapters"), ("sweep", cmd_sweep, "grid search on the validation split")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--synthetic", help="synthetic manifest (JSON lines) from 'generate'")
        sp.add_argument("--no-synth", action="store_true", help="train on real shots only")
        sp.add_argument("--k-syn", type=int)
        if name == "train":
            sp.add_argument("--protocol", choices=("default", "base_new"))
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="evaluate checkpoints on a split")
    common(sp, shots=False)
    sp.add_argument("--checkpoint", action="append", help="adapters.npz (repeat for several seeds); omit for the raw backbone")
    sp.add_argument("--protocol", choices=("default", "base_new"))
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except GenerationExhaustedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except DisefError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
