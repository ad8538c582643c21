"""Losses, learning-rate schedule, momentum SGD and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from tat import autodiff as ad
from tat.autodiff import Tensor
from tat.data import make_batches, split_domains
from tat.model import ModelConfig, TagState, TatModel, forward, update_tag_state

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_total", "loss_clc", "loss_dis", "loss_pat", "lr", "mean_score")


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; ``diagnostics`` describes the step."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.01
    grl_lambda: float = 1.0
    base_lr: float = 0.06
    warmup_steps: int = 500
    total_steps: int = 3000
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    batch_size: int = 16
    seed: int = 0
    tag_momentum: float = 0.9
    use_local: bool = True
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    depth: int = 6
    mlp_ratio: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.tag_momentum <= 1.0:
            raise ValueError("tag_momentum must lie in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, n_nodes: int, patch_size: int) -> ModelConfig:
        model_seed = int(np.random.SeedSequence(self.seed).generate_state(1)[0])
        return ModelConfig(
            n_nodes=n_nodes,
            patch_size=patch_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_head=self.d_head,
            depth=self.depth,
            mlp_ratio=self.mlp_ratio,
            grl_lambda=self.grl_lambda,
            use_local=self.use_local,
            dtype=self.dtype,
            seed=model_seed,
        )


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def loss_clc(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of the CN/MCI head over the source batch."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 1):
        raise ValueError(f"classification labels must be CN (0) or MCI (1), got {sorted(set(labels.tolist()))}")
    return ad.cross_entropy(logits, labels)


def loss_dis(global_probs: Tensor, macro_labels) -> Tensor:
    """Binary cross-entropy of the class-token domain discriminator (1 = source)."""
    return ad.binary_cross_entropy(global_probs, macro_labels)


def loss_pat(patch_probs: Tensor, macro_labels) -> Tensor:
    """Binary cross-entropy of the patch discriminator averaged over all B*P patches.

    Each patch inherits its sample's macro label.
    """
    y = np.asarray(macro_labels, dtype=patch_probs.dtype)[:, None]
    return ad.binary_cross_entropy(patch_probs, y)


def total_loss(l_clc, l_dis, l_pat, alpha: float, beta: float):
    """``l_clc + alpha * l_dis + beta * l_pat``; works on tensors or floats."""
    if isinstance(l_clc, Tensor):
        return l_clc + ad.scale(l_dis, alpha) + ad.scale(l_pat, beta)
    return l_clc + alpha * l_dis + beta * l_pat


# --------------------------------------------------------------------------
# schedule and optimiser
# --------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, base_lr: float = 0.06, warmup_steps: int = 500) -> float:
    """Linear warm-up from 0 to ``base_lr`` then cosine decay to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return base_lr * step / warmup_steps if warmup_steps else base_lr
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the new dict and the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm or not math.isfinite(norm):
        return grads, norm
    f = max_norm / norm
    return {k: (g * f).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


@dataclass
class OptimizerState:
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float, momentum: float):
    """Classical momentum: ``v <- momentum * v + g``; ``p <- p - lr * v``. In place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter has {p.shape}")
        v = momentum * v + g
        state.velocities[name] = v
        p.data -= (lr * v).astype(p.dtype, copy=False)
    state.step += 1


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TatModel
    tag_state: TagState
    optimizer: OptimizerState
    log: list[dict]
    config: TrainConfig


def train(config: TrainConfig, dataset, n_nodes=None, patch_size=16, progress_every=0) -> TrainResult:
    """Joint adversarial training on labelled source and unlabelled target samples.

    When ``alpha == beta == 0`` target samples cannot influence any loss, so
    only source batches are forwarded (the source-only baseline).
    """
    src, tgt = split_domains(dataset)
    if not src or not tgt:
        raise ValueError("training needs both source and target samples")
    n_nodes = n_nodes or src[0].matrix.shape[0]
    model = TatModel(config.model_config(n_nodes, patch_size))
    dt = model.config.np_dtype
    tag = TagState.neutral(model.config.n_patches, config.tag_momentum)
    opt = OptimizerState()
    batch_seed = int(np.random.SeedSequence(config.seed).generate_state(2)[1])
    batches = make_batches(dataset, config.batch_size, batch_seed, dtype=dt)
    params = dict(model.named_parameters())
    b = config.batch_size
    macro = np.concatenate([np.ones(b), np.zeros(b)])
    source_only = config.alpha == 0 and config.beta == 0
    log = []
    for step in range(config.total_steps):
        s_batch, t_batch = next(batches)
        x = s_batch.matrices if source_only else np.concatenate([s_batch.matrices, t_batch.matrices])
        try:
            out = forward(model, tag, x)
        except (ad.DomainError, ad.NumericError) as exc:
            raise TrainingDiverged(f"non-finite forward pass at step {step}: {exc}",
                                   {"step": step, "source_ids": s_batch.ids, "target_ids": t_batch.ids}) from exc
        l_clc = loss_clc(out.logits[:b], s_batch.labels)
        if source_only:
            l_dis = loss_dis(out.global_probs, np.ones(b))
            l_pat = loss_pat(out.patch_probs, np.ones(b))
        else:
            l_dis = loss_dis(out.global_probs, macro)
            l_pat = loss_pat(out.patch_probs, macro)
        loss = total_loss(l_clc, l_dis, l_pat, config.alpha, config.beta)
        row = {
            "step": step,
            "loss_total": float(loss.data),
            "loss_clc": float(l_clc.data),
            "loss_dis": float(l_dis.data),
            "loss_pat": float(l_pat.data),
            "lr": lr_at(step, config.total_steps, config.base_lr, config.warmup_steps),
            "mean_score": float(out.scores.mean()),
        }
        if not all(math.isfinite(row[k]) for k in ("loss_total", "loss_clc", "loss_dis", "loss_pat")):
            raise TrainingDiverged(f"non-finite loss at step {step}", {"row": row, "source_ids": s_batch.ids, "target_ids": t_batch.ids})
        log.append(row)
        model.zero_grad()
        loss.backward()
        grads, gnorm = clip_gradients({k: p.grad for k, p in params.items()}, config.grad_clip)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient at step {step}", {"row": row, "source_ids": s_batch.ids, "target_ids": t_batch.ids})
        sgd_step(params, grads, opt, row["lr"], config.momentum)
        tag = update_tag_state(tag, out.a_batch)
        if progress_every and step % progress_every == 0:
            logger.info("step %d loss %.4f clc %.4f dis %.4f pat %.4f score %.4f",
                        step, row["loss_total"], row["loss_clc"], row["loss_dis"], row["loss_pat"], row["mean_score"])
    return TrainResult(model, tag, opt, log, config)


def write_log(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
