"""Staged joint pretraining.

One model couples three branches: a discrimination branch (one of four
recipes: ``moco``, ``simsiam``, ``barlow``, ``classwise``), a restoration
decoder trained with MSE against the undistorted input, and an adversarial
critic on restored images.  Training proceeds in stages: discrimination
only, then + restoration, then + adversary, with the total generator-side
objective

    L = lambda_dis * L_dis + lambda_res * L_res + lambda_adv * L_adv.

Determinism contract: every random choice after model init derives from
``(config.seed, salt, epoch, sample index)`` via SeedSequence, and torch's
global RNG is touched only at build time.  Checkpoints therefore capture the
full training state, and resuming reproduces an uninterrupted run bit for
bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from dira import checkpoints
from dira.augment import make_view_pair
from dira.config import ExperimentConfig, MethodConfig, ModelConfig, OptimizerConfig
from dira.datasets import DatasetManifest, load_images
from dira.networks import (Adversary, Decoder, Encoder, MLPHead, TwinCoupling,
                           batch_stats_forward, l2_normalize, make_momentum_copy,
                           twin_update)
from dira import objectives
from dira.objectives import LossBundle, NegativeQueue

_VAL_SPLIT_SALT = 0xA11D
_ORDER_SALT = 0x0BDE
_VIEW_SALT = 0x51EE
_VAL_VIEW_SALT = 0x7A1D
_QUEUE_SALT = 0x9E6A

METRICS_COLUMNS = ("epoch", "stage", "loss_dis", "loss_res", "loss_adv_gen",
                   "loss_adv_disc", "loss_total", "val_loss", "per_dim_std",
                   "effective_rank", "wall_seconds")


class DivergenceError(RuntimeError):
    """Raised when training leaves the trainable regime (non-finite loss, or
    the critic saturates to zero loss for several epochs running)."""


class LossToggles(NamedTuple):
    res: bool
    adv: bool


def effective_toggles(stage_idx: int, ablation: str) -> LossToggles:
    """Stage schedule masked by the experiment-level ablation."""
    res_on = stage_idx >= 2
    adv_on = stage_idx >= 3
    if ablation == "di":
        return LossToggles(False, False)
    if ablation == "dir":
        return LossToggles(res_on, False)
    return LossToggles(res_on, adv_on)


def stage_label(toggles: LossToggles) -> str:
    if toggles.res and toggles.adv:
        return "dira"
    if toggles.res:
        return "dir"
    return "di"


# --------------------------------------------------------------------------
# model container
# --------------------------------------------------------------------------

class DiraModel(nn.Module):
    """Encoder + decoder + method-specific heads + adversary, plus the twin
    branch when the method wants one. Momentum twins are frozen copies and
    never appear in optimizer parameter lists."""

    def __init__(self, model_cfg: ModelConfig, method: MethodConfig,
                 n_pseudo_classes: int | None = None):
        super().__init__()
        model_cfg.validate()
        method.validate()
        spec = model_cfg.encoder_spec()
        self.method_name = method.name
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)
        self.adversary = Adversary(model_cfg.in_channels, tuple(model_cfg.adversary_channels))

        d_y, d_z = model_cfg.feature_dim, model_cfg.projection_dim
        self.projector: MLPHead | None = None
        self.predictor: MLPHead | None = None
        self.classifier: MLPHead | None = None
        self.target_encoder: Encoder | None = None
        self.target_projector: MLPHead | None = None

        if method.name == "moco":
            # two-layer projector, no batchnorm, momentum twin + queue
            self.projector = MLPHead(d_y, [model_cfg.projector_hidden, d_z], batchnorm=False)
            self.coupling = TwinCoupling("momentum", method.ema_momentum)
            self.target_encoder = make_momentum_copy(self.encoder)
            self.target_projector = make_momentum_copy(self.projector)
        elif method.name == "simsiam":
            # three-layer projector + two-layer bottleneck predictor, shared twin
            self.projector = MLPHead(
                d_y, [model_cfg.projector_hidden, model_cfg.projector_hidden, d_z], batchnorm=True)
            self.predictor = MLPHead(d_z, [model_cfg.predictor_hidden, d_z], batchnorm=True)
            self.coupling = TwinCoupling("shared")
        elif method.name == "barlow":
            self.projector = MLPHead(
                d_y, [model_cfg.projector_hidden, model_cfg.projector_hidden, d_z], batchnorm=True)
            self.coupling = TwinCoupling("shared")
        elif method.name == "classwise":
            if n_pseudo_classes is None or n_pseudo_classes < 2:
                raise ValueError("classwise method needs n_pseudo_classes >= 2")
            self.classifier = MLPHead(d_y, [model_cfg.classifier_hidden, n_pseudo_classes],
                                      batchnorm=True)
            self.coupling = TwinCoupling("none")
        else:
            raise ValueError(f"unknown method {method.name!r}")
        self.n_pseudo_classes = n_pseudo_classes

    def main_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.encoder, self.decoder]
        for m in (self.projector, self.predictor, self.classifier):
            if m is not None:
                mods.append(m)
        return mods

    def named_main_parameters(self) -> list[tuple[str, torch.Tensor]]:
        names = {id(m): n for n, m in (("encoder", self.encoder), ("decoder", self.decoder),
                                       ("projector", self.projector), ("predictor", self.predictor),
                                       ("classifier", self.classifier)) if m is not None}
        out = []
        for mod in self.main_modules():
            prefix = names[id(mod)]
            out.extend((f"{prefix}.{pn}", p) for pn, p in mod.named_parameters())
        return out

    def momentum_pairs(self) -> list[tuple[nn.Module, nn.Module]]:
        if self.coupling.mode != "momentum":
            return []
        return [(self.encoder, self.target_encoder), (self.projector, self.target_projector)]

    def diagnostic_embedding(self, y: torch.Tensor) -> torch.Tensor:
        """L2-normalized embeddings used for collapse monitoring.  The
        projection head runs on the batch's own statistics (see
        :func:`dira.networks.batch_stats_forward`); methods without a
        projector are monitored on the encoder features directly."""
        with torch.no_grad():
            if self.projector is not None and y.shape[0] >= 2:
                z = batch_stats_forward(self.projector, y)
            elif self.projector is not None:
                z = self.projector(y)
            else:
                z = y
            return l2_normalize(z)


def build_optimizer(cfg: OptimizerConfig, params) -> torch.optim.Optimizer:
    cfg.validate()
    params = list(params)
    if cfg.family == "sgd_momentum":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas),
                            weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------------
# train state
# --------------------------------------------------------------------------

@dataclass
class SegmentProgress:
    """Best-checkpoint tracking inside one contiguous stage-label segment.
    Resets when the enabled-loss set changes, because the composite
    validation loss is only comparable within a segment."""

    label: str = ""
    best_val: float = float("inf")
    best_epoch: int = -1
    since_best: int = 0


@dataclass
class TrainState:
    config: ExperimentConfig
    model: DiraModel
    opt_main: torch.optim.Optimizer
    opt_adv: torch.optim.Optimizer
    queue: NegativeQueue | None
    epoch: int = 0
    segment: SegmentProgress = field(default_factory=SegmentProgress)
    metrics: list[dict] = field(default_factory=list)
    low_disc_epochs: int = 0

    @property
    def named_main(self) -> list[tuple[str, torch.Tensor]]:
        return self.model.named_main_parameters()


def init_train_state(config: ExperimentConfig, n_pseudo_classes: int | None = None) -> TrainState:
    """Fresh state: seeded model init, per-method optimizers, and (for moco)
    a queue pre-filled with seeded random unit vectors so the contrastive
    loss is well-defined from the first step."""
    config.validate()
    torch.manual_seed(int(config.seed))
    model = DiraModel(config.model, config.method, n_pseudo_classes)
    main_cfg, adv_cfg = config.optimizers.resolved(config.method.name, config.schedule.batch_size)
    opt_main = build_optimizer(main_cfg, (p for _, p in model.named_main_parameters()))
    opt_adv = build_optimizer(adv_cfg, model.adversary.parameters())

    queue = None
    if config.method.name == "moco":
        queue = NegativeQueue(config.method.queue_size, config.model.projection_dim)
        rng = np.random.default_rng(np.random.SeedSequence([_QUEUE_SALT, int(config.seed)]))
        init = rng.standard_normal((config.method.queue_size, config.model.projection_dim))
        init /= np.linalg.norm(init, axis=1, keepdims=True)
        queue.enqueue(torch.from_numpy(init.astype(np.float32)))
    return TrainState(config=config, model=model, opt_main=opt_main, opt_adv=opt_adv, queue=queue)


# --------------------------------------------------------------------------
# one optimization step
# --------------------------------------------------------------------------

def _discrimination_loss(state: TrainState, batch: dict) -> tuple[torch.Tensor, dict]:
    """Method dispatch. Returns the loss and a dict of tensors the caller
    may need afterwards (queue update, shared encoder features for the
    restoration branch)."""
    model = state.model
    method = state.config.method
    feats1 = model.encoder(batch["view1"])
    extras: dict = {"feats1": feats1}

    if method.name == "moco":
        z1 = l2_normalize(model.projector(feats1.y))
        with torch.no_grad():
            y2 = model.target_encoder(batch["view2"]).y
            z2 = l2_normalize(model.target_projector(y2))
        loss = objectives.loss_infonce(z1, z2, state.queue, tau=method.temperature)
        extras["enqueue"] = z2
        extras["z"] = z1
    elif method.name == "simsiam":
        z1 = model.projector(feats1.y)
        z2 = model.projector(model.encoder(batch["view2"]).y)
        p1, p2 = model.predictor(z1), model.predictor(z2)
        loss = objectives.loss_simsiam(p1, p2, z1, z2, stop_gradient=method.stop_gradient)
        extras["z"] = l2_normalize(z1)
    elif method.name == "barlow":
        za = model.projector(feats1.y)
        zb = model.projector(model.encoder(batch["view2"]).y)
        loss = objectives.loss_barlow(za, zb, lambda_bt=method.lambda_bt)
        extras["z"] = l2_normalize(za)
    else:  # classwise
        logits1 = model.classifier(feats1.y)
        logits2 = model.classifier(model.encoder(batch["view2"]).y)
        labels = batch["pseudo"]
        loss = 0.5 * (objectives.loss_classwise(logits1, labels)
                      + objectives.loss_classwise(logits2, labels))
        extras["z"] = l2_normalize(feats1.y)
    return loss, extras


def train_step(state: TrainState, batch: dict, toggles: LossToggles) -> LossBundle:
    """One generator step (and one critic step when the adversary is on).
    Mutates ``state`` in place and returns the detached loss bundle.

    Disabled branches stay untouched: their bundle entries are exactly zero
    and no gradient reaches their parameters.
    """
    if toggles.adv and not toggles.res:
        raise ValueError("adversarial loss requires the restoration branch (no restored image without it)")
    model = state.model
    lam = state.config.lambdas
    model.train()

    state.opt_main.zero_grad(set_to_none=True)
    dis, extras = _discrimination_loss(state, batch)

    res: torch.Tensor | float = 0.0
    adv_gen: torch.Tensor | float = 0.0
    restored = None
    if toggles.res:
        feats1 = extras["feats1"]
        restored = model.decoder(feats1.final_map, feats1.skips)
        res = objectives.loss_restoration(batch["target1"], restored)
    if toggles.adv:
        adv_gen = objectives.loss_adversary_gen(
            model.adversary(restored), saturating=state.config.method.saturating_adversary)

    bundle = objectives.combine(dis, res, adv_gen,
                                lambda_dis=lam.dis, lambda_res=lam.res, lambda_adv=lam.adv)
    total = bundle.total
    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite total loss at epoch {state.epoch}: {float(total.detach())!r}")
    total.backward()
    state.opt_main.step()

    adv_disc: torch.Tensor | float = 0.0
    if toggles.adv:
        state.opt_adv.zero_grad(set_to_none=True)  # drops critic grads leaked by the generator pass
        logits_real = model.adversary(batch["target1"])
        logits_fake = model.adversary(restored.detach())
        adv_disc = objectives.loss_adversary_disc(logits_real, logits_fake)
        if not torch.isfinite(adv_disc):
            raise DivergenceError(f"non-finite critic loss at epoch {state.epoch}")
        adv_disc.backward()
        state.opt_adv.step()

    for online, target in model.momentum_pairs():
        twin_update(model.coupling, online, target)
    if state.queue is not None and "enqueue" in extras:
        state.queue.enqueue(extras["enqueue"])

    bundle.adv_disc = adv_disc
    return bundle.detached()


# --------------------------------------------------------------------------
# collapse diagnostics
# --------------------------------------------------------------------------

def collapse_diagnostics(z: np.ndarray | torch.Tensor) -> tuple[float, float]:
    """(per_dim_std, effective_rank) of an embedding batch.

    per_dim_std: mean over dimensions of the per-dimension std over the
    batch.  effective_rank: exp of the spectral entropy of the batch's
    second-moment matrix; 1.0 for a fully collapsed batch, d for embeddings
    spread evenly over d orthogonal directions.
    """
    if torch.is_tensor(z):
        z = z.detach().cpu().numpy()
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"embeddings must be [batch, dim], got {z.shape}")
    per_dim_std = float(z.std(axis=0).mean())
    m = z.T @ z / z.shape[0]
    eig = np.clip(np.linalg.eigvalsh(m), 0.0, None)
    total = eig.sum()
    if total <= 1e-24:
        return per_dim_std, 1.0
    p = eig / total
    entropy = float(-(p[p > 0] * np.log(p[p > 0])).sum())
    return per_dim_std, float(np.exp(entropy))


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

@dataclass
class PretrainData:
    images: np.ndarray                 # [N, H, W, 1] float32
    pseudo: np.ndarray | None          # [N] int64 template ids, classwise only
    train_idx: np.ndarray
    val_idx: np.ndarray
    n_pseudo_classes: int | None


def load_pretrain_data(config: ExperimentConfig) -> PretrainData:
    if not config.dataset.path:
        raise ValueError("config.dataset.path is required for pretraining")
    manifest = DatasetManifest.load(config.dataset.path)
    images = load_images(config.dataset.path, manifest=manifest)

    pseudo = None
    n_classes = None
    if config.method.name == "classwise":
        raw = [r.pseudo_class for r in manifest.records]
        if any(c is None for c in raw):
            raise ValueError("classwise method requires pseudo_class for every manifest record")
        pseudo = np.asarray(raw, dtype=np.int64)
        n_classes = int(manifest.K_templates)
        if pseudo.max() >= n_classes:
            raise ValueError(f"pseudo_class {int(pseudo.max())} out of range for "
                             f"K_templates={n_classes}")

    n = len(manifest.records)
    rng = np.random.default_rng(np.random.SeedSequence([_VAL_SPLIT_SALT, int(config.seed)]))
    perm = rng.permutation(n)
    n_val = max(1, int(np.floor(config.dataset.val_fraction * n + 0.5)))
    n_val = min(n_val, n - 1) if n > 1 else 0
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return PretrainData(images=images, pseudo=pseudo, train_idx=train_idx, val_idx=val_idx,
                        n_pseudo_classes=n_classes)


def _to_nchw(batch_hwc: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(batch_hwc.transpose(0, 3, 1, 2)))


def _build_batch(data: PretrainData, config: ExperimentConfig, idx: np.ndarray,
                 epoch: int | None) -> dict:
    """Augmented view pairs for the given sample indices.  ``epoch=None``
    marks validation: its view draws depend only on (seed, index), so the
    validation loss is comparable across epochs."""
    v1, v2, t1 = [], [], []
    for i in idx:
        if epoch is None:
            parts = [_VAL_VIEW_SALT, int(config.seed), int(i)]
        else:
            parts = [_VIEW_SALT, int(config.seed), int(epoch), int(i)]
        pair = make_view_pair(data.images[i], data.images[i], config.augment,
                              np.random.SeedSequence(parts))
        v1.append(pair.view1)
        v2.append(pair.view2)
        t1.append(pair.target1)
    batch = {
        "view1": _to_nchw(np.stack(v1)),
        "view2": _to_nchw(np.stack(v2)),
        "target1": _to_nchw(np.stack(t1)),
    }
    if data.pseudo is not None:
        batch["pseudo"] = torch.from_numpy(data.pseudo[idx])
    return batch


def _epoch_batches(train_idx: np.ndarray, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; singleton leftovers are dropped because the
    batch-statistics losses need at least two samples."""
    rng = np.random.default_rng(np.random.SeedSequence([_ORDER_SALT, int(seed), int(epoch)]))
    perm = train_idx[rng.permutation(len(train_idx))]
    out = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    return [b for b in out if len(b) >= 2]


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def _validate(state: TrainState, data: PretrainData, toggles: LossToggles) -> tuple[float, float, float]:
    """Composite validation loss under the current toggles plus collapse
    diagnostics of the online embeddings.  Deterministic: fixed view seeds,
    eval-mode heads."""
    model = state.model
    lam = state.config.lambdas
    model.eval()
    bs = state.config.schedule.batch_size
    total, weight = 0.0, 0
    ys = []
    with torch.no_grad():
        for start in range(0, len(data.val_idx), bs):
            idx = data.val_idx[start:start + bs]
            if len(idx) < 2 and len(data.val_idx) > 1:
                continue
            batch = _build_batch(data, state.config, idx, epoch=None)
            dis, extras = _discrimination_loss(state, batch)
            val = lam.dis * float(dis)
            if toggles.res:
                feats1 = extras["feats1"]
                restored = model.decoder(feats1.final_map, feats1.skips)
                val += lam.res * float(objectives.loss_restoration(batch["target1"], restored))
                if toggles.adv:
                    val += lam.adv * float(objectives.loss_adversary_gen(
                        model.adversary(restored),
                        saturating=state.config.method.saturating_adversary))
            total += val * len(idx)
            weight += len(idx)
            ys.append(extras["feats1"].y)
    model.train()
    if weight == 0:
        raise ValueError("validation set is empty (or all batches degenerate)")
    # diagnostics run on the whole validation set as one batch, so the
    # batch-statistics normalization inside sees a stable population
    per_dim_std, erank = collapse_diagnostics(model.diagnostic_embedding(torch.cat(ys)))
    return total / weight, per_dim_std, erank


# --------------------------------------------------------------------------
# checkpoint plumbing
# --------------------------------------------------------------------------

def _optimizer_arrays(opt: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]],
                      prefix: str) -> dict[str, np.ndarray]:
    by_id = {id(p): name for name, p in named_params}
    arrays: dict[str, np.ndarray] = {}
    for p, st in opt.state.items():
        name = by_id.get(id(p))
        if name is None:
            raise ValueError("optimizer holds a parameter outside the named set")
        for key, val in st.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}.{name}.{key}"] = val.detach().cpu().numpy()
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, named_params: list[tuple[str, torch.Tensor]],
                       prefix: str, arrays: dict[str, np.ndarray]) -> None:
    bundle = f"{prefix}."
    by_name = dict(named_params)
    per_param: dict[str, dict[str, np.ndarray]] = {}
    for full, arr in arrays.items():
        if not full.startswith(bundle):
            continue
        pname, key = full[len(bundle):].rsplit(".", 1)
        per_param.setdefault(pname, {})[key] = arr
    for pname, st in per_param.items():
        p = by_name.get(pname)
        if p is None:
            raise ValueError(f"optimizer state references unknown parameter {pname!r}")
        opt.state[p] = {k: torch.from_numpy(np.array(v)) for k, v in st.items()}


def _model_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def _restore_model(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    sd = model.state_dict()
    loaded = {}
    for k, v in sd.items():
        full = f"model.{k}"
        if full not in arrays:
            raise ValueError(f"checkpoint is missing model array {full!r}")
        arr = arrays[full]
        if tuple(arr.shape) != tuple(v.shape):
            raise ValueError(f"shape mismatch for {full!r}: {arr.shape} vs {tuple(v.shape)}")
        loaded[k] = torch.from_numpy(np.array(arr)).to(v.dtype)
    model.load_state_dict(loaded)


def save_train_checkpoint(state: TrainState, path: Path, extra_meta: dict) -> Path:
    arrays = _model_arrays(state.model)
    arrays.update(_optimizer_arrays(state.opt_main, state.named_main, "optim.main"))
    arrays.update(_optimizer_arrays(
        state.opt_adv, list(state.model.adversary.named_parameters()), "optim.adversary"))
    if state.queue is not None:
        qs = state.queue.state()
        arrays["queue.buffer"] = qs["buffer"].numpy()
        arrays["queue.meta"] = np.array([qs["ptr"], qs["fill"]], dtype=np.int64)
    cfg = state.config.to_dict()
    meta = {
        "kind": "train_state",
        "epoch": state.epoch,
        "config": cfg,
        "config_hash": checkpoints.config_hash(cfg),
        "rng_state": {"base_seed": state.config.seed, "next_epoch": state.epoch},
        "n_pseudo_classes": state.model.n_pseudo_classes,
        "segment": {"label": state.segment.label, "best_val": state.segment.best_val,
                    "best_epoch": state.segment.best_epoch, "since_best": state.segment.since_best},
        "low_disc_epochs": state.low_disc_epochs,
        "metrics": state.metrics,
    }
    meta.update(extra_meta)
    return checkpoints.save_checkpoint(path, arrays, meta)


def save_model_checkpoint(state: TrainState, path: Path, extra_meta: dict) -> Path:
    cfg = state.config.to_dict()
    meta = {
        "kind": "model",
        "config": cfg,
        "config_hash": checkpoints.config_hash(cfg),
        "rng_state": {"base_seed": state.config.seed},
        "n_pseudo_classes": state.model.n_pseudo_classes,
    }
    meta.update(extra_meta)
    return checkpoints.save_checkpoint(path, _model_arrays(state.model), meta)


def load_train_checkpoint(path: Path, config: ExperimentConfig) -> TrainState:
    """Rebuild a full training state.  The stored config must hash-match the
    one passed in; resuming under a different configuration is refused."""
    arrays, meta = checkpoints.load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path} is a {meta.get('kind')!r} checkpoint, not a resumable train state")
    if meta["config_hash"] != checkpoints.config_hash(config.to_dict()):
        raise ValueError("checkpoint config does not match the requested config; refusing to resume")
    state = init_train_state(config, n_pseudo_classes=meta.get("n_pseudo_classes"))
    _restore_model(state.model, arrays)
    _restore_optimizer(state.opt_main, state.named_main, "optim.main", arrays)
    _restore_optimizer(state.opt_adv, list(state.model.adversary.named_parameters()),
                       "optim.adversary", arrays)
    if state.queue is not None:
        ptr, fill = (int(v) for v in arrays["queue.meta"])
        state.queue.load_state({"buffer": torch.from_numpy(np.array(arrays["queue.buffer"])),
                                "ptr": ptr, "fill": fill})
    state.epoch = int(meta["epoch"])
    seg = meta["segment"]
    state.segment = SegmentProgress(label=seg["label"], best_val=float(seg["best_val"]),
                                    best_epoch=int(seg["best_epoch"]),
                                    since_best=int(seg["since_best"]))
    state.low_disc_epochs = int(meta["low_disc_epochs"])
    state.metrics = list(meta["metrics"])
    return state


# --------------------------------------------------------------------------
# metrics CSV
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".10g")


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in METRICS_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# the full run
# --------------------------------------------------------------------------

def run_pretraining(config: ExperimentConfig, resume_from: str | Path | None = None,
                    record_timing: bool = False, stop_after_epoch: int | None = None) -> Path:
    """Execute the staged schedule and return the path of the kept (lowest
    validation loss within the final stage) checkpoint.

    ``resume_from`` continues bit-exactly from a ``last`` train-state
    checkpoint.  ``stop_after_epoch`` ends the run early after that many
    total epochs have been executed (used to exercise resumption).
    ``record_timing`` fills the wall_seconds metrics column; it is off by
    default so outputs stay byte-deterministic.
    """
    config.validate()
    if not config.output_dir:
        raise ValueError("config.output_dir is required")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.effective.json")

    data = load_pretrain_data(config)
    if resume_from is not None:
        state = load_train_checkpoint(Path(resume_from), config)
    else:
        state = init_train_state(config, n_pseudo_classes=data.n_pseudo_classes)

    sched = config.schedule
    total_epochs = sched.total_epochs()
    ckpt_dir = out / "checkpoints"
    best_path = ckpt_dir / "best"
    last_path = ckpt_dir / "last"

    executed = 0
    while state.epoch < total_epochs:
        toggles = effective_toggles(sched.stage_of(state.epoch), config.ablation)
        label = stage_label(toggles)
        if label != state.segment.label:
            state.segment = SegmentProgress(label=label)
            state.low_disc_epochs = 0

        t0 = time.perf_counter()
        sums = {"dis": 0.0, "res": 0.0, "adv_gen": 0.0, "adv_disc": 0.0, "total": 0.0}
        weight = 0
        for idx in _epoch_batches(data.train_idx, sched.batch_size, config.seed, state.epoch):
            batch = _build_batch(data, config, idx, epoch=state.epoch)
            bundle = train_step(state, batch, toggles)
            for key, val in (("dis", bundle.dis), ("res", bundle.res),
                             ("adv_gen", bundle.adv_gen), ("adv_disc", bundle.adv_disc),
                             ("total", bundle.total)):
                sums[key] += val * len(idx)
            weight += len(idx)
        if weight == 0:
            raise ValueError("no usable training batches (need at least 2 samples per batch)")

        val_loss, per_dim_std, erank = _validate(state, data, toggles)
        wall = time.perf_counter() - t0 if record_timing else 0.0
        row = {
            "epoch": state.epoch, "stage": label,
            "loss_dis": sums["dis"] / weight, "loss_res": sums["res"] / weight,
            "loss_adv_gen": sums["adv_gen"] / weight, "loss_adv_disc": sums["adv_disc"] / weight,
            "loss_total": sums["total"] / weight, "val_loss": val_loss,
            "per_dim_std": per_dim_std, "effective_rank": erank, "wall_seconds": wall,
        }
        state.metrics.append(row)

        if toggles.adv:
            mean_disc = sums["adv_disc"] / weight
            state.low_disc_epochs = state.low_disc_epochs + 1 if abs(mean_disc) < 1e-4 else 0
            if state.low_disc_epochs >= 5:
                write_metrics_csv(out / "metrics.csv", state.metrics)
                raise DivergenceError(
                    f"critic loss stuck below 1e-4 for {state.low_disc_epochs} consecutive epochs "
                    f"(epoch {state.epoch}); the critic has saturated")

        if val_loss < state.segment.best_val:
            state.segment.best_val = val_loss
            state.segment.best_epoch = state.epoch
            state.segment.since_best = 0
            save_model_checkpoint(state, best_path,
                                  {"epoch": state.epoch, "stage": label, "val_loss": val_loss})
        else:
            state.segment.since_best += 1

        state.epoch += 1
        executed += 1
        save_train_checkpoint(state, last_path, {"stage": label})
        write_metrics_csv(out / "metrics.csv", state.metrics)

        if sched.patience is not None and state.segment.since_best >= sched.patience:
            nxt = state.epoch
            while (nxt < total_epochs
                   and stage_label(effective_toggles(sched.stage_of(nxt), config.ablation)) == label):
                nxt += 1
            state.epoch = nxt
            save_train_checkpoint(state, last_path, {"stage": label})
        if stop_after_epoch is not None and executed >= stop_after_epoch:
            break

    if not best_path.is_dir():
        raise RuntimeError("run produced no checkpoint (schedule executed zero epochs)")
    return best_path
