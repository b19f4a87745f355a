"""Training loop, per-epoch evaluation, checkpoints and the ablation runner."""
from __future__ import annotations

import csv
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import HOIDataset
from .denoising import DNPadded, build_dn_queries, collate_dn
from .evaluation import evaluate_map, rare_classes_from_counts, records_to_triplets
from .matching import LOSS_NAMES, compute_losses, dn_losses
from .model import SOVSTG, Vocabulary, prediction_records
from .structures import instances_to_targets

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_TAG = "# sovstg-metrics v1"
METRIC_COLUMNS = (["epoch", "lr", "loss_total"] + [f"loss_{n}" for n in LOSS_NAMES]
                  + ["loss_dn_total", "full", "rare", "non_rare"])


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def vocabulary_of(dataset: HOIDataset) -> Vocabulary:
    return Vocabulary(list(dataset.object_names), list(dataset.verb_names), list(dataset.hoi_classes))


def build_model(cfg: RunConfig, vocab: Vocabulary) -> SOVSTG:
    seed_everything(cfg.seed)
    return SOVSTG(cfg, vocab)


def score_mode(cfg: RunConfig) -> str:
    if cfg.score_mode != "auto":
        return cfg.score_mode
    return "hoi" if cfg.use_vla else "verb"


def batch_targets(model: SOVSTG, instances) -> list[dict]:
    return [instances_to_targets(inst, model.vocab.num_verbs, model.vocab.hoi_index) for inst in instances]


def make_dn(model: SOVSTG, targets: list[dict], generator: torch.Generator) -> DNPadded | None:
    """DN batch for the current step, or None when STG is off."""
    if not model.cfg.use_stg:
        return None
    blocks = [build_dn_queries(t, model.priors, model.cfg.dn, generator) for t in targets]
    return collate_dn(blocks, model.cfg.num_queries, model.cfg.d_model)


def step_losses(model: SOVSTG, images, targets, dn: DNPadded | None):
    pred = model(images, dn)
    w = model.cfg.loss_weights
    losses = compute_losses(pred.inference(), targets, w)
    if pred.dn is not None:
        dnl = dn_losses(pred.denoising(), targets, pred.dn.gt_index, w)
        losses["dn_total"] = dnl["total"]
        losses["total"] = losses["total"] + dnl["total"]
    else:
        losses["dn_total"] = losses["total"].new_zeros(())
    return pred, losses


@torch.no_grad()
def predict(model: SOVSTG, dataset: HOIDataset, batch_size: int = 64) -> list[dict]:
    was_training = model.training
    model.eval()
    records = []
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        records += prediction_records(model(images), dataset.image_ids[start:start + batch_size])
    model.train(was_training)
    return records


def evaluate_records(records, dataset: HOIDataset, cfg: RunConfig, rare: set[int], setting="default") -> dict:
    ecfg = cfg.eval_config
    if setting != ecfg.setting:
        from dataclasses import replace
        ecfg = replace(ecfg, setting=setting)
    triplets = records_to_triplets(records, dataset.hoi_classes, score_mode(cfg), ecfg.top_k)
    return evaluate_map(triplets, dataset.ground_truths(), dataset.hoi_classes, rare, ecfg)


def evaluate_model(model: SOVSTG, dataset: HOIDataset, rare: set[int], setting="default") -> dict:
    return evaluate_records(predict(model, dataset), dataset, model.cfg, rare, setting)


# checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: SOVSTG, optimizer=None, scheduler=None, epoch: int = 0, extra=None):
    state = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state(), "python": random.getstate()},
        "epoch": epoch,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def read_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version!r}")
    return state


def load_checkpoint(path, restore_rng: bool = False) -> tuple[SOVSTG, dict]:
    """Rebuild the model stored in a checkpoint. Returns (model, raw state)."""
    state = read_checkpoint(path)
    cfg = RunConfig.from_dict(state["config"])
    model = SOVSTG(cfg, Vocabulary.from_dict(state["vocab"]))
    model.load_state_dict(state["model"])
    if restore_rng:
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
        random.setstate(state["rng"]["python"])
    return model, state


def init_from_checkpoint(model: SOVSTG, path) -> list[str]:
    """Copy every parameter whose name and shape match; returns the names left at init."""
    src = read_checkpoint(path)["model"]
    own = model.state_dict()
    shared = {k: v for k, v in src.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(shared, strict=False)
    return sorted(set(own) - set(shared))


def vla_finetune_config(cfg: RunConfig) -> RunConfig:
    """Half the learning rate, batch size and epochs, for fine-tuning from a SOV-STG checkpoint."""
    return cfg.replace(lr=cfg.lr / 2, batch_size=max(1, cfg.batch_size // 2), epochs=max(1, cfg.epochs // 2))


# training ----------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list[dict]
    metrics_path: Path
    checkpoints: list[Path] = field(default_factory=list)
    model: SOVSTG | None = None

    def best(self) -> dict:
        scored = [r for r in self.rows if not math.isnan(r["full"])]
        return max(scored, key=lambda r: (r["full"], -r["epoch"])) if scored else self.rows[-1]


def write_metrics(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_TAG + "\n")
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(v):
    if isinstance(v, int):
        return str(v)
    return f"{v:.6f}"


def _dump_batch(out_dir: Path, epoch, step, image_ids, images, targets, losses) -> Path:
    path = out_dir / f"nonfinite_epoch{epoch}_step{step}.pt"
    torch.save({"epoch": epoch, "step": step, "image_ids": image_ids, "images": images,
                "targets": targets, "losses": {k: float(v.detach()) for k, v in losses.items()}}, path)
    return path


def train(cfg: RunConfig, data_dir, out_dir, init_from=None, train_set: HOIDataset | None = None,
          test_set: HOIDataset | None = None, epoch_hook=None) -> TrainResult:
    """Train ``cfg`` on the corpus in ``data_dir``; writes ``metrics.csv`` and checkpoints to ``out_dir``.

    ``epoch_hook(epoch, row, model)`` may return True to stop early.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = train_set or HOIDataset(data_dir, "train", cfg.max_train_images)
    test_set = test_set or HOIDataset(data_dir, "test", cfg.max_test_images)
    rare = rare_classes_from_counts(train_set.class_counts(), cfg.rare_threshold)

    model = build_model(cfg, vocabulary_of(train_set))
    if init_from is not None:
        fresh = init_from_checkpoint(model, init_from)
        log.info("initialized from %s; %d tensors left at init", init_from, len(fresh))
    elif cfg.use_vla:
        log.warning("VLA model trained jointly from scratch; pass init_from to fine-tune a SOV-STG checkpoint")
    model.train()

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_drop_epoch, gamma=cfg.lr_drop_factor)
    order_gen = torch.Generator().manual_seed(cfg.seed)
    dn_gen = torch.Generator().manual_seed(cfg.seed + 1)

    rows, ckpts = [], []
    metrics_path = out / "metrics.csv"
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = optimizer.param_groups[0]["lr"]
        perm = torch.randperm(n, generator=order_gen)
        sums = {k: 0.0 for k in ["total", *LOSS_NAMES, "dn_total"]}
        steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size].tolist()
            images = train_set.images[idx]
            targets = batch_targets(model, [train_set.instances[i] for i in idx])
            dn = make_dn(model, targets, dn_gen)
            _, losses = step_losses(model, images, targets, dn)
            if not torch.isfinite(losses["total"]):
                ids = [train_set.image_ids[i] for i in idx]
                dump = _dump_batch(out, epoch, step, ids, images, targets, losses)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step} "
                                         f"(images {ids[:4]}...); batch dumped to {dump}", dump)
            optimizer.zero_grad()
            losses["total"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            for k in sums:
                sums[k] += float(losses[k].detach())
            steps += 1
        scheduler.step()

        row = {"epoch": epoch, "lr": lr, **{f"loss_{k}": v / steps for k, v in sums.items()}}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            res = evaluate_model(model, test_set, rare)
            row.update(full=res["full"], rare=res["rare"], non_rare=res["non_rare"])
        else:
            row.update(full=float("nan"), rare=float("nan"), non_rare=float("nan"))
        rows.append(row)
        write_metrics(rows, metrics_path)
        log.info("epoch %d  loss %.4f  full %.4f  (%.1fs)", epoch, row["loss_total"], row["full"],
                 time.perf_counter() - t0)
        if epoch % cfg.checkpoint_every == 0:
            ckpts.append(save_checkpoint(out / f"checkpoint_{epoch:04d}.pt", model, optimizer, scheduler, epoch))
        if epoch_hook is not None and epoch_hook(epoch, row, model):
            break

    ckpts.append(save_checkpoint(out / "last.pt", model, optimizer, scheduler, rows[-1]["epoch"]))
    return TrainResult(rows, metrics_path, ckpts, model)


# ablations ---------------------------------------------------------------

ABLATION_COLUMNS = ["variant", "full", "rare", "non_rare", "best_full", "epochs_to_best"]


def run_ablation(cfg: RunConfig, variants: dict[str, dict], data_dir, out_dir) -> Path:
    """Train every variant with the shared seed; one comparison row per variant.

    VLA variants fine-tune from their SOV-STG counterpart (the same switches
    with the advisor off), trained once per distinct counterpart.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = {name: cfg.replace(**ov) for name, ov in variants.items()}   # validate all up front
    train_set = HOIDataset(data_dir, "train", cfg.max_train_images)
    test_set = HOIDataset(data_dir, "test", cfg.max_test_images)
    bases: dict[tuple, Path] = {}
    rows = []
    for name, vcfg in configs.items():
        init = None
        if vcfg.use_vla:
            base_cfg = vcfg.replace(use_vla=False)
            key = tuple(sorted(base_cfg.to_dict().items()))
            if key not in bases:
                res = train(base_cfg, data_dir, out / f"{name}_base", train_set=train_set, test_set=test_set)
                bases[key] = res.checkpoints[-1]
            init, vcfg = bases[key], vla_finetune_config(vcfg)
        res = train(vcfg, data_dir, out / name, init_from=init, train_set=train_set, test_set=test_set)
        last, best = res.rows[-1], res.best()
        rows.append({"variant": name, "full": last["full"], "rare": last["rare"], "non_rare": last["non_rare"],
                     "best_full": best["full"], "epochs_to_best": best["epoch"]})
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) if not isinstance(v, str) else v for k, v in r.items()})
    return path
