"""Training objectives: the four instance/prototype discrimination losses,
restoration MSE, both adversarial sides, and the weighted combination

    L = lambda_dis * L_dis + lambda_res * L_res + lambda_adv * L_adv

with default weights (1, 10, 0.001).

All loss functions are dtype-agnostic (float64 in, float64 out), reduce to
scalar means over the batch, and raise ValueError on violated preconditions
rather than propagating NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_LAMBDA_DIS = 1.0
DEFAULT_LAMBDA_RES = 10.0
DEFAULT_LAMBDA_ADV = 0.001


def _check_unit_rows(z: torch.Tensor, name: str, atol: float = 1e-4) -> None:
    if z.shape[0] == 0:
        return
    norms = z.detach().norm(dim=1)
    worst = (norms - 1.0).abs().max()
    if worst > atol:
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {worst:.3e})")


def _check_2d(z: torch.Tensor, name: str) -> None:
    if z.dim() != 2:
        raise ValueError(f"{name} must be [batch, dim], got shape {tuple(z.shape)}")


class NegativeQueue:
    """Fixed-capacity FIFO of past embeddings, stored row-wise.

    ``tensor()`` returns entries oldest first.  Enqueueing a batch larger
    than the capacity keeps only its newest ``capacity`` rows.  Entries must
    arrive unit-normalized; the queue never re-normalizes.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = torch.zeros(capacity, dim, dtype=dtype)
        self._ptr = 0          # next write slot once full
        self._fill = 0

    @property
    def fill(self) -> int:
        return self._fill

    def enqueue(self, z: torch.Tensor) -> None:
        _check_2d(z, "queue entries")
        if z.shape[1] != self.dim:
            raise ValueError(f"entry dim {z.shape[1]} does not match queue dim {self.dim}")
        _check_unit_rows(z, "queue entries", atol=1e-3)
        z = z.detach().to(self._buf.dtype)
        k = z.shape[0]
        if k == 0:
            return
        if k >= self.capacity:
            self._buf.copy_(z[-self.capacity:])
            self._ptr = 0
            self._fill = self.capacity
            return
        end = self._ptr + k
        if end <= self.capacity:
            self._buf[self._ptr:end] = z
        else:
            first = self.capacity - self._ptr
            self._buf[self._ptr:] = z[:first]
            self._buf[:end - self.capacity] = z[first:]
        self._ptr = end % self.capacity
        self._fill = min(self.capacity, self._fill + k)

    def tensor(self) -> torch.Tensor:
        """Snapshot [fill, dim], oldest entry first."""
        if self._fill < self.capacity:
            return self._buf[:self._fill].clone()
        return torch.cat([self._buf[self._ptr:], self._buf[:self._ptr]], dim=0)

    def state(self) -> dict:
        return {"buffer": self._buf.clone(), "ptr": self._ptr, "fill": self._fill}

    def load_state(self, state: dict) -> None:
        buf = state["buffer"]
        if tuple(buf.shape) != (self.capacity, self.dim):
            raise ValueError(f"queue state shape {tuple(buf.shape)} does not match "
                             f"({self.capacity}, {self.dim})")
        self._buf.copy_(buf)
        self._ptr = int(state["ptr"])
        self._fill = int(state["fill"])


def loss_infonce(z1: torch.Tensor, z2: torch.Tensor, queue: NegativeQueue,
                 tau: float = 0.2) -> torch.Tensor:
    """Contrastive loss with one positive and the queue as negatives:

        -log  exp(z1.z2 / tau) / (exp(z1.z2 / tau) + sum_n exp(z1.k_n / tau))

    averaged over the batch.  z2 and the queue act as constants (detached);
    gradients flow through z1 only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    _check_2d(z1, "z1")
    _check_2d(z2, "z2")
    if z1.shape != z2.shape:
        raise ValueError(f"z1 {tuple(z1.shape)} and z2 {tuple(z2.shape)} must match")
    _check_unit_rows(z1, "z1")
    _check_unit_rows(z2, "z2")
    if queue.fill < 1:
        raise ValueError("queue must hold at least one negative")

    z2 = z2.detach()
    negatives = queue.tensor().to(z1.dtype)
    pos = (z1 * z2).sum(dim=1, keepdim=True)
    neg = z1 @ negatives.t()
    logits = torch.cat([pos, neg], dim=1) / tau
    return -F.log_softmax(logits, dim=1)[:, 0].mean()


def _neg_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    an = a.norm(dim=1)
    bn = b.norm(dim=1)
    if (an < 1e-12).any() or (bn < 1e-12).any():
        raise ValueError("zero-norm embedding in cosine similarity")
    return -((a * b).sum(dim=1) / (an * bn)).mean()


def loss_simsiam(p1: torch.Tensor, p2: torch.Tensor,
                 y1: torch.Tensor, y2: torch.Tensor,
                 stop_gradient: bool = True) -> torch.Tensor:
    """Symmetrized negative cosine between predictor outputs p and projector
    outputs y:  0.5*D(p1, sg(y2)) + 0.5*D(p2, sg(y1)).  The stop-gradient is
    the collapse-prevention mechanism; disabling it is for diagnostics only.
    """
    for name, t in (("p1", p1), ("p2", p2), ("y1", y1), ("y2", y2)):
        _check_2d(t, name)
    if stop_gradient:
        y1 = y1.detach()
        y2 = y2.detach()
    return 0.5 * _neg_cosine(p1, y2) + 0.5 * _neg_cosine(p2, y1)


def cross_correlation(za: torch.Tensor, zb: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Batch-normalized cross-correlation matrix C [d, d]:
    C_ij = (1/B) sum_b zhat_a[b,i] * zhat_b[b,j] where zhat is the batch
    z-score with biased std and an ``eps`` floor on the denominator."""
    _check_2d(za, "za")
    _check_2d(zb, "zb")
    if za.shape != zb.shape:
        raise ValueError(f"za {tuple(za.shape)} and zb {tuple(zb.shape)} must match")
    b = za.shape[0]
    if b < 2:
        raise ValueError(f"batch of at least 2 required, got {b}")

    def zscore(z: torch.Tensor) -> torch.Tensor:
        mean = z.mean(dim=0, keepdim=True)
        std = z.std(dim=0, unbiased=False, keepdim=True)
        return (z - mean) / (std + eps)

    return zscore(za).t() @ zscore(zb) / b


def loss_barlow(za: torch.Tensor, zb: torch.Tensor, lambda_bt: float = 0.005,
                eps: float = 1e-5) -> torch.Tensor:
    """Redundancy-reduction loss: sum_i (1 - C_ii)^2 + lambda * sum_{i!=j} C_ij^2."""
    if lambda_bt < 0:
        raise ValueError(f"lambda_bt must be >= 0, got {lambda_bt}")
    c = cross_correlation(za, zb, eps=eps)
    d = c.shape[0]
    on_diag = torch.diagonal(c)
    off_mask = ~torch.eye(d, dtype=torch.bool, device=c.device)
    return ((1.0 - on_diag) ** 2).sum() + lambda_bt * (c[off_mask] ** 2).sum()


def loss_classwise(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy against integer pseudo labels in [0, K)."""
    _check_2d(logits, "logits")
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError(f"labels must be [batch], got {tuple(labels.shape)} "
                         f"for logits {tuple(logits.shape)}")
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def loss_restoration(x: torch.Tensor, x_restored: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel of the batch."""
    if x.shape != x_restored.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_restored.shape)}")
    return ((x - x_restored) ** 2).mean()


def loss_adversary_disc(logits_real: torch.Tensor, logits_fake: torch.Tensor) -> torch.Tensor:
    """Critic side: -E[log sigmoid(real)] - E[log(1 - sigmoid(fake))],
    computed through softplus for stability."""
    if logits_real.dim() != 1 or logits_fake.dim() != 1:
        raise ValueError("adversary logits must be one per image, shape [batch]")
    return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()


def loss_adversary_gen(logits_fake: torch.Tensor, saturating: bool = False) -> torch.Tensor:
    """Generator side.  Non-saturating default: -E[log sigmoid(fake)].
    Saturating variant: +E[log(1 - sigmoid(fake))], kept for completeness."""
    if logits_fake.dim() != 1:
        raise ValueError("adversary logits must be one per image, shape [batch]")
    if saturating:
        return (-F.softplus(logits_fake)).mean()
    return F.softplus(-logits_fake).mean()


@dataclass
class LossBundle:
    """Per-step loss values plus the weights used to combine them.  ``total``
    is the training objective; ``adv_disc`` is logged alongside but optimized
    by the critic's own step."""

    dis: torch.Tensor | float
    res: torch.Tensor | float
    adv_gen: torch.Tensor | float
    total: torch.Tensor | float
    weights: tuple[float, float, float]
    adv_disc: torch.Tensor | float = 0.0

    def detached(self) -> "LossBundle":
        def f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)
        return LossBundle(dis=f(self.dis), res=f(self.res), adv_gen=f(self.adv_gen),
                          total=f(self.total), weights=self.weights, adv_disc=f(self.adv_disc))


def combine(dis, res, adv_gen,
            lambda_dis: float = DEFAULT_LAMBDA_DIS,
            lambda_res: float = DEFAULT_LAMBDA_RES,
            lambda_adv: float = DEFAULT_LAMBDA_ADV) -> LossBundle:
    """Weighted sum of the three generator-side terms.  Works on tensors
    (training) and plain floats (logging/tests) alike."""
    for name, lam in (("lambda_dis", lambda_dis), ("lambda_res", lambda_res),
                      ("lambda_adv", lambda_adv)):
        if lam < 0:
            raise ValueError(f"{name} must be >= 0, got {lam}")
    total = lambda_dis * dis + lambda_res * res + lambda_adv * adv_gen
    return LossBundle(dis=dis, res=res, adv_gen=adv_gen, total=total,
                      weights=(lambda_dis, lambda_res, lambda_adv))
