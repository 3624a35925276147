"""Command-line entry point: gen-data, split, train, eval, infer, few-shot,
text-infer, report.

Exit codes: 0 success, 1 usage error, 2 data or format error. Diagnostics go
to stderr; machine-readable output goes only to the declared files.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import coco, evaluator, owsplit, promptops, shapeworld
from .errors import OwsegError
from .trainer import Trainer, TrainConfig, load_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="owseg", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-known", type=int, default=6)
    p.add_argument("--n-seen", type=int, default=4)
    p.add_argument("--n-unseen", type=int, default=4)
    p.add_argument("--min-instances", type=int, default=2)
    p.add_argument("--max-instances", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="rebuild known/seen/unseen splits from COCO files")
    p.add_argument("--train-ann", required=True)
    p.add_argument("--test-ann", required=True)
    p.add_argument("--known", required=True, help="file with one known class id per line")
    p.add_argument("--unseen", help="file with one unseen class id per line")
    p.add_argument("--unseen-ratio", type=float, help="pick rarest classes removing ~this image fraction")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model on an exported dataset")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key=value file overriding training defaults")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--embeddings", help="text-embedding JSON; enables text-prompt training")

    p = sub.add_parser("eval", help="evaluate a predictions file")
    p.add_argument("--pred", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", help="write report.json here")

    p = sub.add_parser("infer", help="run class-agnostic inference over a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="predictions JSON")
    p.add_argument("--score-threshold", type=float, default=0.0)

    p = sub.add_parser("few-shot", help="segment with a prompt extracted from support masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--supports", required=True, help="dir of NNN_image.npy / NNN_mask.npy pairs")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order-averaged", action="store_true")

    p = sub.add_parser("text-infer", help="segment classes named by text embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="tabulate run manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", help="write the table here as well")
    p.add_argument("--plot", help="write a loss-curve plot (needs matplotlib)")

    return parser


def read_id_file(path):
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError as exc:
                raise coco.FormatError(f"line {ln}: expected an integer class id", path=str(path)) from exc
    return out


def read_config_file(path):
    """key=value lines; ints, floats, and booleans are auto-converted."""
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise coco.FormatError(f"line {ln}: expected key=value", path=str(path))
            key, val = (part.strip() for part in line.split("=", 1))
            if val.lower() in ("true", "false"):
                out[key] = val.lower() == "true"
            else:
                try:
                    out[key] = int(val)
                except ValueError:
                    try:
                        out[key] = float(val)
                    except ValueError:
                        out[key] = val
    return out


def cmd_gen_data(args):
    cfg = shapeworld.ShapeworldConfig(
        image_size=args.image_size,
        min_instances=args.min_instances,
        max_instances=args.max_instances,
        n_known=args.n_known,
        n_seen=args.n_seen,
        n_unseen=args.n_unseen,
        seed=args.seed,
    )
    taxonomy, train, test = shapeworld.generate_dataset(cfg, args.n_train, args.n_test)
    os.makedirs(args.out_dir, exist_ok=True)
    shapeworld.export_coco(train, taxonomy, os.path.join(args.out_dir, "train.json"),
                           os.path.join(args.out_dir, "images_train.npz"))
    shapeworld.export_coco(test, taxonomy, os.path.join(args.out_dir, "test.json"),
                           os.path.join(args.out_dir, "images_test.npz"))
    shapeworld.export_taxonomy(taxonomy, os.path.join(args.out_dir, "taxonomy.json"))
    print(f"wrote {len(train)} train / {len(test)} test scenes to {args.out_dir}", file=sys.stderr)
    return 0


def cmd_split(args):
    if (args.unseen is None) == (args.unseen_ratio is None):
        raise UsageError("give exactly one of --unseen or --unseen-ratio")
    train_doc = coco.load_coco(args.train_ann)
    test_doc = coco.load_coco(args.test_ann)
    known = read_id_file(args.known)
    if args.unseen is not None:
        unseen = read_id_file(args.unseen)
    else:
        unseen = owsplit.select_unseen_by_ratio(train_doc, known, args.unseen_ratio)
    train_out, test_out, plan = owsplit.rebuild_splits(train_doc, test_doc, known, unseen)
    os.makedirs(args.out_dir, exist_ok=True)
    coco.save_json(train_out, os.path.join(args.out_dir, "train.json"))
    coco.save_json(test_out, os.path.join(args.out_dir, "test.json"))
    category_ids = {c["id"] for c in train_out["categories"]}
    seen = sorted(category_ids - set(known) - set(unseen))
    names = {c["id"]: c.get("name", str(c["id"])) for c in train_out["categories"]}
    shapeworld.export_taxonomy(
        shapeworld.CategoryTaxonomy(set(known), set(seen), set(unseen), names),
        os.path.join(args.out_dir, "taxonomy.json"),
    )
    with open(os.path.join(args.out_dir, "stats.tsv"), "w") as fh:
        fh.write(owsplit.stats_tsv(plan.stats))
    print(
        f"moved {len(plan.removed_train_images)} train images; "
        f"{len(unseen)} unseen classes",
        file=sys.stderr,
    )
    return 0


def cmd_train(args):
    overrides = read_config_file(args.config) if args.config else {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic is not None:
        overrides["deterministic"] = args.deterministic
    config = TrainConfig.from_dict(overrides)
    taxonomy, train_records, test_records = load_dataset(args.data_dir)
    text_table = None
    if args.embeddings:
        table = promptops.TextEmbeddingTable.load(args.embeddings)
        universe = sorted(taxonomy.known | taxonomy.seen) if config.use_weak_labels else sorted(taxonomy.known)
        text_table = np.stack([table.get(taxonomy.names[c]) for c in universe])
    trainer = Trainer(config, taxonomy, train_records, test_records, text_table=text_table)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = trainer.train(args.out_dir)
    metrics = manifest.get("final_metrics") or {}
    print(f"trained {manifest['steps_run']} steps; ar_all={metrics.get('ar_all')}", file=sys.stderr)
    return 0


def load_predictions(path):
    doc = coco.load_json(path)
    if not isinstance(doc, dict) or "predictions" not in doc:
        raise coco.FormatError("predictions file needs a 'predictions' array", path=str(path), json_path="$")
    return doc["predictions"]


def cmd_eval(args):
    preds = load_predictions(args.pred)
    ann = coco.load_coco(args.ann)
    taxonomy = shapeworld.taxonomy_from_json(coco.load_taxonomy_json(args.taxonomy))
    gt_by_image = {}
    for a in ann["annotations"]:
        gt_by_image.setdefault(a["image_id"], []).append(a)
    samples = []
    for img in ann["images"]:
        entry = next((p for p in preds if p["image_id"] == img["id"]), None)
        masks = [coco.rle_decode(r) for r in entry["masks"]] if entry else []
        scores = entry["scores"] if entry else []
        gts = gt_by_image.get(img["id"], [])
        samples.append(
            evaluator.make_sample(
                img["id"],
                masks,
                scores,
                [coco.rle_decode(a["segmentation"]) for a in gts],
                [a["category_id"] for a in gts],
                image_area=img["width"] * img["height"],
            )
        )
    report = evaluator.evaluate(samples, taxonomy)
    lines = [evaluator.REPORT_HEADER, evaluator.format_report_row(os.path.basename(args.pred), report)]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
    return 0


def _predictions_to_json(entries):
    return {
        "predictions": [
            {
                "image_id": int(image_id),
                "masks": [coco.rle_encode(m) for m in masks],
                "scores": [float(s) for s in scores],
            }
            for image_id, masks, scores in entries
        ]
    }


def cmd_infer(args):
    trainer = Trainer.resume(args.checkpoint)
    _, _, test_records = load_dataset(args.data_dir)
    entries = []
    for image_id, masks, scores in trainer.predict_records(test_records):
        keep = scores > args.score_threshold
        entries.append((image_id, [m for m, k in zip(masks, keep) if k], scores[keep]))
    with open(args.out, "w") as fh:
        json.dump(_predictions_to_json(entries), fh)
    print(f"wrote predictions for {len(entries)} images", file=sys.stderr)
    return 0


def load_support_dir(path):
    items = []
    names = sorted(os.listdir(path))
    for name in names:
        if not name.endswith("_image.npy"):
            continue
        stem = name[: -len("_image.npy")]
        mask_path = os.path.join(path, stem + "_mask.npy")
        if not os.path.exists(mask_path):
            raise coco.FormatError(f"support {stem} has no mask file", path=mask_path)
        pixels = np.load(os.path.join(path, name))
        mask = np.load(mask_path).astype(bool)
        items.append((pixels, mask))
    if not items:
        raise coco.FormatError("no *_image.npy files found", path=str(path))
    return promptops.SupportSet(items=items)


def cmd_few_shot(args):
    trainer = Trainer.resume(args.checkpoint)
    supports = load_support_dir(args.supports)
    prompt = promptops.few_shot_extract(
        trainer.model, supports, momentum=trainer.config.momentum, order_averaged=args.order_averaged
    )
    _, _, test_records = load_dataset(args.data_dir)
    entries = []
    for rec in test_records:
        masks, scores = promptops.prompt_infer(trainer.model, rec.pixels, prompt)
        entries.append((rec.image_id, list(masks), scores))
    with open(args.out, "w") as fh:
        json.dump(_predictions_to_json(entries), fh)
    print(f"few-shot predictions for {len(entries)} images", file=sys.stderr)
    return 0


def cmd_text_infer(args):
    trainer = Trainer.resume(args.checkpoint)
    table = promptops.TextEmbeddingTable.load(args.embeddings)
    names = [n for n in args.classes.split(",") if n]
    _, _, test_records = load_dataset(args.data_dir)
    out = {}
    for rec in test_records:
        per_class = promptops.text_prompt_infer(trainer.model, rec.pixels, table, names)
        out[str(rec.image_id)] = {
            name: {
                "masks": [coco.rle_encode(m) for m in masks],
                "scores": [float(s) for s in scores],
            }
            for name, (masks, scores) in per_class.items()
        }
    with open(args.out, "w") as fh:
        json.dump(out, fh)
    print(f"text-prompt predictions for {len(out)} images", file=sys.stderr)
    return 0


def cmd_report(args):
    rows = []
    for path in args.manifests:
        doc = coco.load_json(path)
        metrics = doc.get("final_metrics")
        if not metrics:
            raise coco.FormatError("manifest has no final_metrics", path=str(path), json_path="$.final_metrics")
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        rows.append((label, metrics, os.path.dirname(os.path.abspath(path))))
    rows.sort(key=lambda r: -(r[1].get("ar_all") or 0.0))
    lines = [evaluator.REPORT_HEADER]
    for label, metrics, _ in rows:
        rep = evaluator.ARReport(
            ar_all=metrics.get("ar_all"),
            ar_known=metrics.get("ar_known"),
            ar_seen=metrics.get("ar_seen"),
            ar_unseen=metrics.get("ar_unseen"),
            ar_s=metrics.get("ar_s"),
            ar_m=metrics.get("ar_m"),
            ar_l=metrics.get("ar_l"),
        )
        lines.append(evaluator.format_report_row(label[:24], rep))
    table = "\n".join(lines) + "\n"
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    if args.plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError as exc:
            raise OwsegError(f"--plot needs matplotlib: {exc}") from exc
        fig, ax = plt.subplots(figsize=(7, 4))
        for label, _, run_dir in rows:
            loss_path = os.path.join(run_dir, "loss.tsv")
            if not os.path.exists(loss_path):
                continue
            data = np.genfromtxt(loss_path, names=True, delimiter="\t")
            ax.plot(np.atleast_1d(data["step"]), np.atleast_1d(data["total"]), label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("total loss")
        ax.legend()
        fig.savefig(args.plot, bbox_inches="tight")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "few-shot": cmd_few_shot,
    "text-infer": cmd_text_infer,
    "report": cmd_report,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except OwsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
