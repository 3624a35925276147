"""End-to-end training: three-branch forward, summed losses, cache
maintenance, checkpointing, and final recall evaluation.

Disabling the prompt branch and example supervision yields the pure
class-agnostic baseline used for head-to-head comparisons.
"""

import dataclasses
import json
import os
import zipfile
from dataclasses import dataclass

import numpy as np
import torch

from . import coco, evaluator, shapeworld
from .decoder import DecoderConfig, PromptCache, Segmenter
from .errors import OwsegError, VersionMismatchError
from .matching import (
    LossBreakdown,
    class_agnostic_point_loss,
    example_point_terms,
    objectness_loss,
    prompt_branch_point_loss,
)

CHECKPOINT_VERSION = 1


class NanLossError(OwsegError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    seed: int = 0
    freeze_encoder: bool = False
    enable_example_supervision: bool = True
    enable_prompt_branch: bool = True
    use_weak_labels: bool = False
    eval_every: int = 0  # 0 means checkpoints only at the end
    deterministic: bool = True
    # decoder shape
    width: int = 64
    mask_dim: int = 16
    n_heads: int = 4
    n_layers: int = 3
    n_queries: int = 100
    c_max: int = 30
    k_per_class: int = 10
    momentum: float = 0.9

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def decoder_config(self):
        return DecoderConfig(
            width=self.width,
            mask_dim=self.mask_dim,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            n_queries=self.n_queries,
            c_max=self.c_max,
            k_per_class=self.k_per_class,
            momentum=self.momentum,
        )

    @staticmethod
    def from_dict(d):
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in d.items() if k in fields})


def load_dataset(data_dir):
    """Read train.json / test.json / taxonomy.json plus the pixel archives."""
    taxonomy = shapeworld.taxonomy_from_json(coco.load_taxonomy_json(os.path.join(data_dir, "taxonomy.json")))
    npz_paths = [
        os.path.join(data_dir, name)
        for name in sorted(os.listdir(data_dir))
        if name.startswith("images") and name.endswith(".npz")
    ]
    splits = {}
    for split in ("train", "test"):
        path = os.path.join(data_dir, f"{split}.json")
        if os.path.exists(path):
            splits[split] = shapeworld.import_records(coco.load_coco(path), npz_paths, split)
        else:
            splits[split] = []
    return taxonomy, splits["train"], splits["test"]


class Trainer:
    def __init__(self, config: TrainConfig, taxonomy, train_records, test_records=None, text_table=None, universe=None):
        self.config = config
        self.taxonomy = taxonomy
        self.train_records = train_records
        self.test_records = test_records or []
        if config.deterministic:
            torch.set_num_threads(1)
        torch.manual_seed(config.seed)
        if universe is not None:
            self.universe = [int(c) for c in universe]
        elif config.use_weak_labels:
            # only seen classes that actually carry labels join the prompt
            # universe, so a dataset without any reduces to standard training
            labeled = {c for rec in train_records for c in rec.weak_labels}
            self.universe = sorted(taxonomy.known | (taxonomy.seen & labeled))
        else:
            self.universe = sorted(taxonomy.known)
        self.model = Segmenter(config.decoder_config(), self.universe, text_table=text_table)
        if config.freeze_encoder:
            for p in self.model.encoder.parameters():
                p.requires_grad_(False)
        self.cache = PromptCache(self.universe, config.width, config.momentum)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=config.lr,
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self.step_count = 0
        self.loss_rows = []
        self._epoch_order = []

    # -- data ----------------------------------------------------------------

    def _next_batch_indices(self):
        n = len(self.train_records)
        take = min(self.config.batch_size, n)
        while len(self._epoch_order) < take:
            self._epoch_order.extend(self.rng.permutation(n).tolist())
        batch, self._epoch_order = self._epoch_order[:take], self._epoch_order[take:]
        return batch

    def _build_batch(self, indices):
        pixels = torch.from_numpy(np.stack([self.train_records[i].pixels for i in indices]))
        gts = []
        for i in indices:
            rec = self.train_records[i]
            # unannotated (seen-class) instances are invisible to every loss
            visible = [inst for inst in rec.instances if inst.annotated]
            if visible:
                masks = torch.from_numpy(np.stack([inst.mask for inst in visible]))
                classes = [inst.class_id for inst in visible]
            else:
                h, w = rec.pixels.shape[:2]
                masks = torch.zeros(0, h, w, dtype=torch.bool)
                classes = []
            gt = {"masks": masks, "classes": classes}
            if self.config.use_weak_labels:
                gt["weak_labels"] = list(rec.weak_labels)
            gts.append(gt)
        return pixels, gts

    # -- loss ----------------------------------------------------------------

    def _check_finite(self, state):
        tensors = list(state.baseline.mask_logits) + list(state.baseline.scores)
        if state.prompt is not None:
            tensors += list(state.prompt.mask_logits) + list(state.prompt.scores)
        for ex in state.example or []:
            if ex is not None:
                tensors += list(ex.mask_logits) + list(ex.scores)
        for t in tensors:
            if not torch.isfinite(t).all():
                raise NanLossError(
                    f"non-finite branch outputs at step {self.step_count + 1}"
                )

    def compute_loss(self, state, gts):
        zero = torch.zeros((), dtype=torch.float32)
        obj = dice = pix = zero
        ex_obj = ex_dice = ex_pix = zero
        b = len(gts)

        for point in range(len(state.baseline.mask_logits)):
            for i in range(b):
                o, d, p = class_agnostic_point_loss(
                    state.baseline.mask_logits[point][i],
                    state.baseline.scores[point][i],
                    gts[i]["masks"],
                )
                obj, dice, pix = obj + o, dice + d, pix + p

        if state.prompt is not None:
            for point in range(len(state.prompt.mask_logits)):
                for i in range(b):
                    classes = state.prompt_classes[i]
                    k = self.config.k_per_class
                    query_classes = [c for c in classes for _ in range(k)]
                    gt_masks, gt_classes = gts[i]["masks"], gts[i]["classes"]
                    gts_by_class = {}
                    for c in set(gt_classes):
                        rows = [j for j, cc in enumerate(gt_classes) if cc == c]
                        gts_by_class[int(c)] = gt_masks[rows]
                    weak = set(gts[i].get("weak_labels", [])) if self.config.use_weak_labels else set()
                    o, d, p = prompt_branch_point_loss(
                        state.prompt.mask_logits[point][i],
                        state.prompt.scores[point][i],
                        query_classes,
                        gts_by_class,
                        k,
                        weak_positives=weak,
                    )
                    obj, dice, pix = obj + o, dice + d, pix + p

        if self.config.enable_example_supervision:
            for i in range(b):
                ex = state.example[i] if state.example else None
                if ex is None:
                    continue
                own_masks = gts[i]["masks"][ex.instance_idx]
                for point in range(len(ex.mask_logits)):
                    d, p = example_point_terms(ex.mask_logits[point], own_masks)
                    ones = torch.ones(ex.scores[point].shape[0], dtype=torch.float32)
                    ex_obj = ex_obj + objectness_loss(ex.scores[point], ones)
                    ex_dice, ex_pix = ex_dice + d, ex_pix + p

        # report per-image means so curves are comparable across batch sizes
        obj, dice, pix = obj / b, dice / b, pix / b
        ex_obj, ex_dice, ex_pix = ex_obj / b, ex_dice / b, ex_pix / b
        total = LossBreakdown.weighted_total(obj, dice, pix, ex_obj, ex_dice, ex_pix)
        breakdown = LossBreakdown(
            objectness=float(obj.detach()),
            dice=float(dice.detach()),
            pixel=float(pix.detach()),
            example_objectness=float(ex_obj.detach()),
            example_dice=float(ex_dice.detach()),
            example_pixel=float(ex_pix.detach()),
            total=float(total.detach()),
        )
        return total, breakdown

    # -- steps ---------------------------------------------------------------

    def train_step(self):
        run_prompt = self.config.enable_prompt_branch
        run_example = run_prompt or self.config.enable_example_supervision
        indices = self._next_batch_indices()
        pixels, gts = self._build_batch(indices)
        state = self.model.forward_three_branch(
            pixels,
            gts,
            self.cache,
            "train",
            rng=self.rng,
            class_universe=self.universe,
            run_example=run_example,
            run_prompt=run_prompt,
        )
        self._check_finite(state)
        total, breakdown = self.compute_loss(state, gts)
        if not torch.isfinite(total):
            raise NanLossError(
                f"non-finite loss at step {self.step_count + 1}: {breakdown}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        if run_example:
            for ex in state.example:
                if ex is None:
                    continue
                updated = set()
                for j, c in enumerate(ex.classes):
                    if c in updated or c not in self.cache.index:
                        continue
                    self.cache.update(c, ex.queries[j])
                    updated.add(c)
        self.step_count += 1
        self.loss_rows.append(breakdown)
        return breakdown

    def train(self, out_dir=None):
        checkpoints = []
        for _ in range(self.config.steps):
            self.train_step()
            if (
                out_dir
                and self.config.eval_every
                and self.step_count % self.config.eval_every == 0
                and self.step_count < self.config.steps
            ):
                path = os.path.join(out_dir, f"checkpoint_{self.step_count:06d}.owz")
                self.save_checkpoint(path)
                checkpoints.append(path)
        final_metrics = None
        if self.test_records:
            final_metrics = self.evaluate(self.test_records).to_json()
        manifest = {
            "config": dataclasses.asdict(self.config),
            "steps_run": self.step_count,
            "loss_first": self.loss_rows[0].total if self.loss_rows else None,
            "loss_last": self.loss_rows[-1].total if self.loss_rows else None,
            "checkpoints": checkpoints,
            "final_metrics": final_metrics,
        }
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            final = os.path.join(out_dir, "checkpoint_final.owz")
            self.save_checkpoint(final)
            manifest["checkpoints"] = checkpoints + [final]
            with open(os.path.join(out_dir, "loss.tsv"), "w") as fh:
                fh.write("step\tobjectness\tdice\tpixel\tex_objectness\tex_dice\tex_pixel\ttotal\n")
                for i, row in enumerate(self.loss_rows):
                    fh.write(
                        f"{i + 1}\t{row.objectness:.6f}\t{row.dice:.6f}\t{row.pixel:.6f}"
                        f"\t{row.example_objectness:.6f}\t{row.example_dice:.6f}"
                        f"\t{row.example_pixel:.6f}\t{row.total:.6f}\n"
                    )
            with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2)
        return manifest

    # -- evaluation ------------------------------------------------------------

    @torch.no_grad()
    def predict_records(self, records, chunk=16):
        """Class-agnostic inference over records: boolean masks plus scores."""
        self.model.eval()
        out = []
        for lo in range(0, len(records), chunk):
            part = records[lo : lo + chunk]
            pixels = torch.from_numpy(np.stack([r.pixels for r in part]))
            mask_logits, score_logits = self.model.forward_infer(pixels)
            masks = (mask_logits > 0).cpu().numpy()
            scores = torch.sigmoid(score_logits).cpu().numpy()
            for r, m, s in zip(part, masks, scores):
                out.append((r.image_id, m, s))
        self.model.train()
        return out

    def evaluate(self, records) -> evaluator.ARReport:
        samples = []
        for (image_id, masks, scores), rec in zip(self.predict_records(records), records):
            gt_masks = [inst.mask for inst in rec.instances]
            gt_classes = [inst.class_id for inst in rec.instances]
            samples.append(
                evaluator.make_sample(
                    image_id, list(masks), scores, gt_masks, gt_classes,
                    image_area=rec.pixels.shape[0] * rec.pixels.shape[1],
                )
            )
        return evaluator.evaluate(samples, self.taxonomy)

    # -- checkpointing -----------------------------------------------------------

    def save_checkpoint(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        arrays = {"meta/version": np.array([CHECKPOINT_VERSION], dtype=np.int64)}
        for name, p in self.model.state_dict().items():
            arrays[f"param/{name}"] = p.detach().cpu().numpy().astype(np.float64)
        opt_state = self.optimizer.state_dict()
        for pid, st in opt_state["state"].items():
            for key, val in st.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                arrays[f"opt/{pid}/{key}"] = arr.astype(np.float64)
        arrays["cache/vectors"] = self.cache.vectors.numpy().astype(np.float64)
        arrays["cache/counts"] = self.cache.counts.numpy()
        arrays["rng/torch"] = torch.get_rng_state().numpy()
        meta = {
            "config": dataclasses.asdict(self.config),
            "universe": self.universe,
            "taxonomy": {
                "known": sorted(self.taxonomy.known),
                "seen": sorted(self.taxonomy.seen),
                "unseen": sorted(self.taxonomy.unseen),
                "names": {str(k): v for k, v in self.taxonomy.names.items()},
            },
            "numpy_rng": self.rng.bit_generator.state,
            "epoch_order": list(self._epoch_order),
            "step_count": self.step_count,
            "text_mode": self.model.text_mode,
        }
        arrays["meta/json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @staticmethod
    def read_checkpoint(path):
        try:
            data = np.load(path, allow_pickle=False)
            if "meta/version" not in data:
                raise VersionMismatchError(f"{path}: not a checkpoint (missing version)")
            version = int(data["meta/version"][0])
            if version != CHECKPOINT_VERSION:
                raise VersionMismatchError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
            meta = json.loads(bytes(data["meta/json"]).decode())
            return data, meta
        except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
            raise VersionMismatchError(f"{path}: unreadable checkpoint ({exc})") from exc

    @classmethod
    def resume(cls, path, train_records=None, test_records=None, text_table=None):
        data, meta = cls.read_checkpoint(path)
        config = TrainConfig.from_dict(meta["config"])
        taxonomy = shapeworld.taxonomy_from_json(meta["taxonomy"])
        if meta.get("text_mode"):
            # text-mode checkpoints are self-contained
            text_table = data["param/text_table"]
        trainer = cls(
            config, taxonomy, train_records or [], test_records,
            text_table=text_table, universe=meta["universe"],
        )
        reference = trainer.model.state_dict()
        model_state = {}
        for key in data.files:
            if key.startswith("param/"):
                name = key[len("param/") :]
                ref = reference[name]
                model_state[name] = torch.from_numpy(data[key]).to(ref.dtype).reshape(ref.shape)
        trainer.model.load_state_dict(model_state)
        opt_state = trainer.optimizer.state_dict()
        state = {}
        for key in data.files:
            if key.startswith("opt/"):
                _, pid, name = key.split("/", 2)
                entry = state.setdefault(int(pid), {})
                arr = data[key]
                if name == "step":
                    entry[name] = torch.tensor(float(arr))
                else:
                    params = [p for p in trainer.model.parameters() if p.requires_grad]
                    entry[name] = torch.from_numpy(arr).to(params[int(pid)].dtype).reshape(params[int(pid)].shape)
        opt_state["state"] = state
        trainer.optimizer.load_state_dict(opt_state)
        trainer.cache.vectors = torch.from_numpy(data["cache/vectors"]).to(trainer.cache.vectors.dtype)
        trainer.cache.counts = torch.from_numpy(data["cache/counts"])
        torch.set_rng_state(torch.from_numpy(data["rng/torch"].copy()))
        trainer.rng = np.random.default_rng()
        trainer.rng.bit_generator.state = meta["numpy_rng"]
        trainer._epoch_order = list(meta["epoch_order"])
        trainer.step_count = meta["step_count"]
        return trainer
