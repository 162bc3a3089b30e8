"""Transfer fine-tuning of pretrained checkpoints on labeled phantoms.

Classification (lesion present?) reuses the pretrained encoder plus a fresh
linear head; segmentation (lesion mask) reuses encoder and decoder trunk
plus a fresh 1x1 conv head.  Every transferred parameter stays trainable.

``finetune`` repeats the experiment ``runs`` times with seeds
``base_seed + run_index`` (fresh head init, fresh early-stop split, fresh
batch order; the label-fraction subset itself is fixed by the base seed),
then reports per-run metrics with mean and std, writes a result JSON, and
appends one row per run to a shared results ledger CSV.
"""

from __future__ import annotations

import copy
import fcntl
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from dira import checkpoints
from dira.augment import resize_image
from dira.config import ModelConfig
from dira.datasets import (DatasetManifest, ManifestRecord, SplitSpec, load_images,
                           load_masks, select_fraction, train_test_ids)
from dira.metrics import metric_auc, metric_dice, metric_iou
from dira.networks import Decoder, Encoder

_FT_INIT_SALT = 0xF17E
_FT_ORDER_SALT = 0xF08D

LEDGER_COLUMNS = ("method", "task", "metric", "fraction", "run", "value", "checkpoint")

TASK_KINDS = ("classification", "segmentation")
_DEFAULT_METRIC = {"classification": "auc", "segmentation": "dice"}
_DEFAULT_LR = {"classification": 2e-4, "segmentation": 1e-3}


@dataclass(frozen=True)
class DownstreamTask:
    kind: str
    dataset_dir: str
    fraction: float = 1.0
    metric: str = ""              # "" = task default (auc / dice)
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"task fraction must lie in (0, 1], got {self.fraction}")
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.resolved_metric() not in ("auc", "dice", "iou"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.kind == "classification" and self.resolved_metric() != "auc":
            raise ValueError("classification reports auc")
        if self.kind == "segmentation" and self.resolved_metric() == "auc":
            raise ValueError("segmentation reports dice or iou")

    def resolved_metric(self) -> str:
        return self.metric or _DEFAULT_METRIC[self.kind]


@dataclass(frozen=True)
class FineTuneConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float | None = None       # None = 2e-4 classification, 1e-3 segmentation
    betas: tuple[float, float] = (0.9, 0.999)
    patience: int = 10
    val_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr is not None and self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


class ClassificationModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig):
        super().__init__()
        self.model_cfg = model_cfg
        self.encoder = Encoder(model_cfg.encoder_spec())
        self.head = nn.Linear(model_cfg.feature_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(x).y).squeeze(1)

    def forward_with_activations(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits plus the last encoder feature map (the layer localization
        attributes against)."""
        feats = self.encoder(x)
        return self.head(feats.y).squeeze(1), feats.final_map


class SegmentationModel(nn.Module):
    def __init__(self, model_cfg: ModelConfig):
        super().__init__()
        self.model_cfg = model_cfg
        self.encoder = Encoder(model_cfg.encoder_spec())
        self.decoder = Decoder(model_cfg.encoder_spec())
        self.head = nn.Conv2d(model_cfg.stage_channels[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.encoder(x)
        return self.head(self.decoder.trunk(feats.final_map, feats.skips)).squeeze(1)


def build_transfer_model(kind: str, model_cfg: ModelConfig, init_seed: int | None = None) -> nn.Module:
    if init_seed is not None:
        torch.manual_seed(int(init_seed))
    if kind == "classification":
        return ClassificationModel(model_cfg)
    if kind == "segmentation":
        return SegmentationModel(model_cfg)
    raise ValueError(f"unknown task kind {kind!r}")


def init_from_checkpoint(checkpoint: str | Path | None, kind: str,
                         model_config: ModelConfig | None = None,
                         init_seed: int | None = None) -> tuple[nn.Module, list[str]]:
    """Build a downstream model.  With a checkpoint, the encoder (and the
    decoder for segmentation) is copied bit-exactly from the stored arrays
    and the head stays freshly initialized; without one, everything is a
    random-init baseline.  Returns (model, names of loaded arrays)."""
    if checkpoint is None:
        if model_config is None:
            raise ValueError("model_config is required for random-init models")
        return build_transfer_model(kind, model_config, init_seed), []

    arrays, meta = checkpoints.load_checkpoint(checkpoint)
    if model_config is None:
        try:
            model_config = ModelConfig.from_dict(meta["config"]["model"])
        except KeyError as e:
            raise ValueError(f"checkpoint metadata lacks a model config ({e})") from e
    model = build_transfer_model(kind, model_config, init_seed)

    submodules = [("encoder", model.encoder)]
    if kind == "segmentation":
        submodules.append(("decoder", model.decoder))

    loaded: list[str] = []
    mismatched: list[str] = []
    for prefix, module in submodules:
        sd = module.state_dict()
        new_sd = {}
        for key, tensor in sd.items():
            name = f"model.{prefix}.{key}"
            arr = arrays.get(name)
            if arr is None or tuple(arr.shape) != tuple(tensor.shape):
                mismatched.append(name if arr is None else
                                  f"{name} (checkpoint {arr.shape}, model {tuple(tensor.shape)})")
                continue
            new_sd[key] = torch.from_numpy(np.array(arr)).to(tensor.dtype)
            loaded.append(name)
        if mismatched:
            continue
        module.load_state_dict(new_sd)
    if mismatched:
        raise ValueError("checkpoint does not fit the requested model; mismatched arrays: "
                         + ", ".join(sorted(mismatched)))
    return model, loaded


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class _TaskData:
    images: dict[str, np.ndarray]      # id -> [H, W, 1]
    labels: dict[str, float]           # classification targets
    masks: dict[str, np.ndarray] | None
    train_ids: list[str]               # after label-fraction subsetting
    test_ids: list[str]
    records: dict[str, ManifestRecord]


def load_task_data(task: DownstreamTask, base_seed: int, input_size: int) -> _TaskData:
    task.validate()
    manifest = DatasetManifest.load(task.dataset_dir)
    all_ids = manifest.ids()
    images = load_images(task.dataset_dir, manifest=manifest)
    if images.shape[1] != input_size or images.shape[2] != input_size:
        images = np.stack([resize_image(im, input_size) for im in images])
    by_id = {r.image_id: r for r in manifest.records}

    masks = None
    if task.kind == "segmentation":
        raw = load_masks(task.dataset_dir, manifest=manifest)
        if raw.shape[1] != input_size or raw.shape[2] != input_size:
            raw = np.stack([
                (resize_image(m[..., None], input_size)[..., 0] > 0.5).astype(np.float32)
                for m in raw])
        masks = {i: raw[k] for k, i in enumerate(all_ids)}

    train_pool, test_ids = train_test_ids(manifest, task.test_fraction)
    pool_records = [by_id[i] for i in train_pool]
    train_ids = select_fraction(pool_records, SplitSpec(task.fraction, seed=base_seed))

    return _TaskData(
        images={i: images[k] for k, i in enumerate(all_ids)},
        labels={i: float(by_id[i].lesion_present) for i in all_ids},
        masks=masks,
        train_ids=train_ids,
        test_ids=test_ids,
        records=by_id,
    )


def _batch_tensor(data: _TaskData, ids: list[str]) -> torch.Tensor:
    arr = np.stack([data.images[i] for i in ids]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def _target_tensor(data: _TaskData, ids: list[str], kind: str) -> torch.Tensor:
    if kind == "classification":
        return torch.tensor([data.labels[i] for i in ids], dtype=torch.float32)
    return torch.from_numpy(np.stack([data.masks[i] for i in ids]))


def _soft_dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    probs = torch.sigmoid(logits)
    num = 2.0 * (probs * target).sum(dim=(1, 2)) + 1.0
    den = probs.sum(dim=(1, 2)) + target.sum(dim=(1, 2)) + 1.0
    return (1.0 - num / den).mean()


def _task_loss(logits: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    """Plain BCE for classification; BCE + soft Dice for segmentation, since
    lesions cover a few percent of the pixels and pixel-frequency-weighted
    BCE alone pulls every run toward the empty mask first."""
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="mean")
    if kind == "segmentation":
        return bce + _soft_dice_loss(logits, target)
    return bce


def _eval_loss(model: nn.Module, data: _TaskData, ids: list[str], kind: str,
               batch_size: int) -> float:
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(ids), batch_size):
            chunk = ids[s:s + batch_size]
            logits = model(_batch_tensor(data, chunk))
            target = _target_tensor(data, chunk, kind)
            total += float(_task_loss(logits, target, kind)) * len(chunk)
            n += len(chunk)
    model.train()
    return total / max(n, 1)


def evaluate_metrics(model: nn.Module, data: _TaskData, ids: list[str], kind: str,
                     batch_size: int = 64) -> dict[str, float]:
    """Test-split metrics: AUC for classification; mean per-image Dice and
    IoU at threshold 0.5 for segmentation."""
    model.eval()
    out: dict[str, float] = {}
    with torch.no_grad():
        if kind == "classification":
            scores, labels = [], []
            for s in range(0, len(ids), batch_size):
                chunk = ids[s:s + batch_size]
                scores.append(torch.sigmoid(model(_batch_tensor(data, chunk))).numpy())
                labels.extend(data.labels[i] for i in chunk)
            out["auc"] = metric_auc(np.concatenate(scores), np.asarray(labels))
        else:
            dices, ious = [], []
            for s in range(0, len(ids), batch_size):
                chunk = ids[s:s + batch_size]
                probs = torch.sigmoid(model(_batch_tensor(data, chunk))).numpy()
                for k, i in enumerate(chunk):
                    pred = probs[k] > 0.5
                    dices.append(metric_dice(pred, data.masks[i]))
                    ious.append(metric_iou(pred, data.masks[i]))
            out["dice"] = float(np.mean(dices))
            out["iou"] = float(np.mean(ious))
    return out


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

def _seed_int(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def _train_val_split(data: _TaskData, kind: str, val_fraction: float, run_seed: int) -> tuple[list[str], list[str]]:
    records = [data.records[i] for i in data.train_ids]
    if len(records) < 3:
        raise ValueError(f"labeled subset of {len(records)} samples is too small to fine-tune")
    stratify = "lesion_present" if kind == "classification" else "none"
    val_ids = select_fraction(records, SplitSpec(val_fraction, seed=run_seed, stratify_on=stratify))
    val_set = set(val_ids)
    train_ids = [i for i in data.train_ids if i not in val_set]
    if kind == "classification":
        labels = {data.labels[i] for i in train_ids}
        if len(labels) < 2:
            raise ValueError("degenerate split: fine-tuning train set holds a single class")
    return train_ids, val_ids


def _finetune_one_run(checkpoint, task: DownstreamTask, data: _TaskData, cfg: FineTuneConfig,
                      base_seed: int, run: int, model_config: ModelConfig | None) -> tuple[nn.Module, float, dict[str, float]]:
    run_seed = base_seed + run
    train_ids, val_ids = _train_val_split(data, task.kind, cfg.val_fraction, run_seed)
    model, _ = init_from_checkpoint(checkpoint, task.kind, model_config,
                                    init_seed=_seed_int(_FT_INIT_SALT, base_seed, run))
    lr = cfg.lr if cfg.lr is not None else _DEFAULT_LR[task.kind]
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=tuple(cfg.betas))

    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    model.train()
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(
            [_FT_ORDER_SALT, int(base_seed), int(run), int(epoch)]))
        order = [train_ids[j] for j in rng.permutation(len(train_ids))]
        for s in range(0, len(order), cfg.batch_size):
            chunk = order[s:s + cfg.batch_size]
            if len(chunk) < 2 and len(order) > 1:
                continue
            opt.zero_grad(set_to_none=True)
            logits = model(_batch_tensor(data, chunk))
            loss = _task_loss(logits, _target_tensor(data, chunk, task.kind), task.kind)
            loss.backward()
            opt.step()
        val = _eval_loss(model, data, val_ids, task.kind, cfg.batch_size)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    model.load_state_dict(best_state)
    metrics = evaluate_metrics(model, data, data.test_ids, task.kind)
    return model, best_val, metrics


@dataclass
class FineTuneResult:
    task: str
    metric: str
    fraction: float
    checkpoint: str
    method: str
    values: list[float]
    mean: float
    std: float
    per_run_metrics: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "metric": self.metric, "fraction": self.fraction,
            "checkpoint": self.checkpoint, "method": self.method,
            "values": self.values, "mean": self.mean, "std": self.std,
            "per_run_metrics": self.per_run_metrics,
        }


def append_ledger(path: str | Path, rows: list[dict]) -> None:
    """Append result rows to the shared CSV, creating it (with header) on
    first use.  The file is locked for the append so concurrent experiment
    processes interleave whole rows, never bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = ""
    for row in rows:
        payload += ",".join(str(row[c]) for c in LEDGER_COLUMNS) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            if fh.tell() == 0 and os.fstat(fh.fileno()).st_size == 0:
                fh.write(",".join(LEDGER_COLUMNS) + "\n")
            fh.write(payload)
            fh.flush()
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def method_label_from_checkpoint(checkpoint: str | Path | None) -> str:
    """Experiment label like ``moco-dira`` recovered from checkpoint
    metadata; ``random`` for the no-checkpoint baseline."""
    if checkpoint is None:
        return "random"
    _, meta = checkpoints.load_checkpoint(checkpoint)
    cfg = meta.get("config", {})
    name = cfg.get("method", {}).get("name", "unknown")
    ablation = cfg.get("ablation", "dira")
    return f"{name}-{ablation}"


def finetune(checkpoint: str | Path | None, task: DownstreamTask, runs: int = 10,
             seed: int = 0, train_cfg: FineTuneConfig | None = None,
             out_dir: str | Path | None = None, ledger_path: str | Path | None = None,
             method_label: str | None = None,
             model_config: ModelConfig | None = None) -> FineTuneResult:
    """Fine-tune ``runs`` times and aggregate the primary metric.  Saves the
    best run's model (for evaluation/localization) plus a result JSON when
    ``out_dir`` is given, and appends per-run rows to ``ledger_path``."""
    task.validate()
    cfg = train_cfg or FineTuneConfig()
    cfg.validate()
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if checkpoint is None and model_config is None:
        model_config = ModelConfig()
    input_size = (model_config or ModelConfig.from_dict(
        checkpoints.load_checkpoint(checkpoint)[1]["config"]["model"])).input_size
    data = load_task_data(task, base_seed=seed, input_size=input_size)

    label = method_label or method_label_from_checkpoint(checkpoint)
    primary = task.resolved_metric()
    values: list[float] = []
    all_metrics: list[dict] = []
    best_run, best_value, best_model = -1, -float("inf"), None
    for run in range(runs):
        model, _, run_metrics = _finetune_one_run(checkpoint, task, data, cfg, seed, run, model_config)
        values.append(run_metrics[primary])
        all_metrics.append(run_metrics)
        if run_metrics[primary] > best_value:
            best_run, best_value, best_model = run, run_metrics[primary], model

    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    result = FineTuneResult(
        task=task.kind, metric=primary, fraction=task.fraction,
        checkpoint=str(checkpoint) if checkpoint is not None else "none",
        method=label, values=[float(v) for v in values], mean=mean, std=std,
        per_run_metrics=all_metrics,
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(
            json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        mc = best_model.model_cfg
        checkpoints.save_checkpoint(
            out / "model",
            {f"model.{k}": v.detach().cpu().numpy() for k, v in best_model.state_dict().items()},
            {"kind": "model", "task": task.kind, "model_config": mc.to_dict(),
             "metric": primary, "value": best_value, "run": best_run, "method": label},
        )

    if ledger_path is not None:
        append_ledger(ledger_path, [
            {"method": label, "task": task.kind, "metric": primary, "fraction": task.fraction,
             "run": r, "value": format(v, ".10g"),
             "checkpoint": result.checkpoint}
            for r, v in enumerate(values)
        ])
    return result


def load_transfer_model(model_dir: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild a fine-tuned model saved by :func:`finetune`.  Accepts either
    the model checkpoint directory or the run directory containing it."""
    root = Path(model_dir)
    if not (root / "manifest.json").is_file() and (root / "model" / "manifest.json").is_file():
        root = root / "model"
    arrays, meta = checkpoints.load_checkpoint(root)
    if meta.get("kind") != "model" or "task" not in meta:
        raise ValueError(f"{model_dir} does not hold a fine-tuned task model")
    model_cfg = ModelConfig.from_dict(meta["model_config"])
    model = build_transfer_model(meta["task"], model_cfg)
    sd = {}
    for key, tensor in model.state_dict().items():
        name = f"model.{key}"
        if name not in arrays:
            raise ValueError(f"model checkpoint is missing array {name!r}")
        sd[key] = torch.from_numpy(np.array(arrays[name])).to(tensor.dtype)
    model.load_state_dict(sd)
    model.eval()
    return model, meta


def evaluate_model(model_dir: str | Path, dataset_dir: str | Path,
                   test_fraction: float = 0.2) -> dict[str, float]:
    """Test-split metrics of a saved fine-tuned model on a dataset."""
    model, meta = load_transfer_model(model_dir)
    task = DownstreamTask(kind=meta["task"], dataset_dir=str(dataset_dir),
                          test_fraction=test_fraction)
    data = load_task_data(task, base_seed=0, input_size=model.model_cfg.input_size)
    return evaluate_metrics(model, data, data.test_ids, task.kind)
