"""Differentiable building blocks shared by all learned modules.

Tensors are torch float64 throughout; torch supplies autograd, while
:func:`check_gradients` provides an independent central-finite-difference
oracle used to verify every learned block.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn as tnn

DTYPE = torch.float64

EMBED_SIZE = 128
HIDDEN_SIZE = 256
NUM_HEADS = 4

# Added inside logarithms to avoid -inf on exact zeros.
LOG_EPSILON = 1e-12

CHECKPOINT_FORMAT = "crossview-checkpoint-v1"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    embedding_size: int = EMBED_SIZE
    hidden_size: int = HIDDEN_SIZE
    num_heads: int = NUM_HEADS

    def __post_init__(self):
        if self.embedding_size % self.num_heads != 0:
            raise ShapeError("embedding_size must be divisible by num_heads")


def init_parameters(module: tnn.Module):
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases.

    Deterministic under torch.manual_seed.
    """
    for m in module.modules():
        if isinstance(m, tnn.Linear):
            tnn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                tnn.init.zeros_(m.bias)


class MLP(tnn.Module):
    """Two affine layers with a ReLU between, hidden width 256 by default."""

    def __init__(self, d_in: int, d_out: int, hidden: int = HIDDEN_SIZE):
        super().__init__()
        self.fc1 = tnn.Linear(d_in, hidden, dtype=DTYPE)
        self.fc2 = tnn.Linear(hidden, d_out, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ShapeError(
                f"expected trailing dim {self.fc1.in_features}, got {x.shape[-1]}"
            )
        return self.fc2(torch.relu(self.fc1(x)))


def dot_product_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    if k.shape[-2] == 0:
        raise ShapeError("attention requires at least one key")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("key/value row counts differ")
    d_k = q.shape[-1]
    logits = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1) @ v


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row softmax with excluded positions (mask False) set to -inf before
    normalization; fully masked rows yield all-zero weights, not NaN."""
    neg = torch.finfo(logits.dtype).min
    filled = logits.masked_fill(~mask, neg)
    weights = torch.softmax(filled, dim=-1)
    any_valid = mask.any(dim=-1, keepdim=True)
    return torch.where(any_valid, weights, torch.zeros_like(weights))


class MultiHeadAttention(tnn.Module):
    """Per-head projected dot-product attention, heads concatenated and
    output-projected. Masked keys are excluded before the softmax."""

    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        self.spec = spec or BlockSpec()
        d = self.spec.embedding_size
        self.wq = tnn.Linear(d, d, dtype=DTYPE)
        self.wk = tnn.Linear(d, d, dtype=DTYPE)
        self.wv = tnn.Linear(d, d, dtype=DTYPE)
        self.wo = tnn.Linear(d, d, dtype=DTYPE)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        # (..., L, D) -> (..., H, L, D/H)
        h = self.spec.num_heads
        return x.reshape(*x.shape[:-1], h, x.shape[-1] // h).transpose(-2, -3)

    def head_logits(self, q: torch.Tensor, k: torch.Tensor, scaled: bool = True) -> torch.Tensor:
        """Per-head attention logits, shape (..., H, L_q, L_k)."""
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        logits = qh @ kh.transpose(-1, -2)
        if scaled:
            logits = logits / math.sqrt(qh.shape[-1])
        return logits

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """q: (..., L_q, D); k, v: (..., L_k, D).

        key_mask: boolean, broadcastable to (..., L_q, L_k); False excludes
        the key. Rows with every key masked produce zero output.
        """
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError("key/value row counts differ")
        logits = self.head_logits(q, k)
        vh = self._split(self.wv(v))
        if key_mask is None:
            weights = torch.softmax(logits, dim=-1)
        else:
            mask = key_mask
            if mask.dim() == logits.dim() - 2:
                mask = mask.unsqueeze(-2)  # shared across queries
            if mask.dim() == logits.dim() - 1:
                mask = mask.unsqueeze(-3)  # broadcast over heads
            weights = masked_softmax(logits, mask)
        out = weights @ vh  # (..., H, L_q, D/H)
        out = out.transpose(-2, -3).reshape(*q.shape)
        return self.wo(out)


class FeedForward(tnn.Module):
    """Two-layer feed-forward block mapping the embedding onto itself."""

    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        spec = spec or BlockSpec()
        self.mlp = MLP(spec.embedding_size, spec.embedding_size, spec.hidden_size)

    def forward(self, x):
        return self.mlp(x)


class TransformerLayer(tnn.Module):
    """Multi-head attention, feed-forward network and layer normalization
    with a residual connection around the block."""

    def __init__(self, spec: BlockSpec | None = None):
        super().__init__()
        self.spec = spec or BlockSpec()
        self.attn = MultiHeadAttention(self.spec)
        self.ffn = FeedForward(self.spec)
        self.norm = tnn.LayerNorm(self.spec.embedding_size, dtype=DTYPE)

    def forward(self, q, k, v, key_mask=None):
        return self.norm(q + self.ffn(self.attn(q, k, v, key_mask=key_mask)))


def max_pool_agg(x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """Componentwise max over valid rows of (n, d)."""
    if valid is not None:
        if not bool(valid.any()):
            raise ShapeError("max_pool_agg needs at least one valid row")
        x = x[valid]
    elif x.shape[0] == 0:
        raise ShapeError("max_pool_agg needs at least one row")
    return x.max(dim=0).values


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def cross_entropy(pred_probs: torch.Tensor, target_probs: torch.Tensor) -> torch.Tensor:
    """-sum(target * log(pred + eps)); targets must be a distribution."""
    if bool((target_probs < 0).any()):
        raise ValueError("negative target probabilities")
    total = float(target_probs.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"target probabilities sum to {total}, expected 1")
    return -(target_probs * torch.log(pred_probs + LOG_EPSILON)).sum()


# --- gradient verification --------------------------------------------------


@dataclass
class GradientReport:
    max_rel_error: float
    per_parameter: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> str:
        name = max(self.per_parameter, key=self.per_parameter.get)
        return f"{name}: {self.per_parameter[name]:.3e}"


def check_gradients(
    loss_fn,
    parameters,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries_per_param: int | None = 24,
    seed: int = 0,
) -> GradientReport:
    """Compare autograd gradients against central finite differences.

    loss_fn: nullary callable returning a scalar tensor built from the given
    parameters. For large tensors a deterministic random subset of entries
    is probed. Relative error uses max(|g_a|, |g_fd|, 1e-6) as denominator.
    """
    params = list(parameters)
    if params and not isinstance(params[0], tuple):
        params = [(f"param_{i}", p) for i, p in enumerate(params)]

    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()

    rng = torch.Generator().manual_seed(seed)
    # Central differences carry cancellation noise of roughly eps * |f| / h
    # from the two loss evaluations; discrepancies within that budget are
    # indistinguishable from roundoff and do not count against the check.
    noise_floor = 16.0 * torch.finfo(loss.dtype).eps * abs(float(loss.detach())) / h
    per_param: dict[str, float] = {}
    for name, p in params:
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)  # shared storage so perturbations stick
        n = flat.numel()
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = torch.randperm(n, generator=rng)[:max_entries_per_param]
        else:
            idx = torch.arange(n)
        worst = 0.0
        with torch.no_grad():
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(loss_fn())
                flat[i] = orig - h
                f_minus = float(loss_fn())
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * h)
                g_a = float(analytic.reshape(-1)[i])
                diff = max(0.0, abs(g_a - g_fd) - noise_floor)
                denom = max(abs(g_a), abs(g_fd), 1e-6)
                worst = max(worst, diff / denom)
        per_param[name] = worst
    max_err = max(per_param.values(), default=0.0)
    return GradientReport(max_rel_error=max_err, per_parameter=per_param, tolerance=tolerance)


# --- checkpoints ------------------------------------------------------------


def state_dict_to_obj(module: tnn.Module) -> dict:
    out = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().to(DTYPE).contiguous()
        out[name] = {
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.numpy().tobytes()).decode("ascii"),
        }
    return out


def state_dict_from_obj(obj: dict) -> dict:
    import numpy as np

    state = {}
    for name, rec in obj.items():
        buf = base64.b64decode(rec["data"])
        arr = np.frombuffer(buf, dtype="<f8").reshape(rec["shape"]).copy()
        state[name] = torch.from_numpy(arr)
    return state


def save_checkpoint(path, module: tnn.Module, extra: dict | None = None):
    """Single JSON document: format tag, parameter path -> shape + values
    (float64 little-endian, base64), plus caller metadata."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "extra": extra or {},
        "params": state_dict_to_obj(module),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (state_dict, extra)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return state_dict_from_obj(doc["params"]), doc.get("extra", {})
