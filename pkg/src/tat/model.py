"""Full transferability-aware transformer, TAG state and checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tat import autodiff as ad
from tat.autodiff import Tensor
from tat.layers import (
    ConfigError,
    Linear,
    LayerNorm,
    Mlp,
    Module,
    PatchEmbedding,
    TransformerBlock,
    pad_adjacency,
)

N_CLASSES = 2  # CN, MCI


@dataclass
class ModelConfig:
    n_nodes: int = 160
    patch_size: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_head: int = 16
    depth: int = 6
    mlp_ratio: int = 4
    grl_lambda: float = 1.0
    use_local: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.n_nodes % self.patch_size:
            raise ConfigError(f"n_nodes {self.n_nodes} not divisible by patch_size {self.patch_size}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype}")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")

    @property
    def n_patches(self) -> int:
        return (self.n_nodes // self.patch_size) ** 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Discriminator(Module):
    """Binary domain classifier ``d -> d -> 1`` with GELU and a sigmoid output."""

    def __init__(self, d_model, rng, dtype):
        self.mlp = Mlp(d_model, d_model, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        logits = self.mlp(x)
        return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


class TatModel(Module):
    """Patch embedding, ``depth - 1`` graph-guided blocks, one final
    transferability-aware block, classifier head and two discriminators."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        dt = c.np_dtype
        self.embed = PatchEmbedding(c.n_nodes, c.patch_size, c.d_model, rng, dt)
        kinds = ["tag_guided"] * (c.depth - 1) + ["tat_final"]
        self.blocks = [TransformerBlock(c.d_model, c.n_heads, c.d_head, rng, k, c.mlp_ratio, dt) for k in kinds]
        self.norm = LayerNorm(c.d_model, dt)
        self.head = Linear(c.d_model, N_CLASSES, rng, dt)
        self.local_disc = Discriminator(c.d_model, rng, dt)
        self.global_disc = Discriminator(c.d_model, rng, dt)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing tensor {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {name}: shape {arr.shape} does not match model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def freeze_local_disc_at_half(self):
        """Zero the last local-discriminator layer so it outputs exactly 0.5."""
        fc2 = self.local_disc.mlp.fc2
        fc2.weight.data[...] = 0.0
        fc2.bias.data[...] = 0.0


@dataclass
class TagState:
    """Moving-average transferability adjacency shared across steps."""

    a: np.ndarray
    momentum: float = 0.9
    step: int = 0

    @classmethod
    def neutral(cls, n_patches: int, momentum: float = 0.9, dtype=np.float64) -> "TagState":
        return cls(np.ones((n_patches, n_patches), dtype=dtype), momentum, 0)

    def validate(self):
        a = self.a
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"TAG adjacency must be square, got {a.shape}")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("TAG adjacency entries must lie in [0, 1]")
        if np.abs(a - a.T).max() > 1e-12:
            raise ValueError("TAG adjacency must be symmetric")


@dataclass
class ForwardOutput:
    logits: Tensor  # [B, 2]
    cls_token: Tensor  # [B, d_model]
    patch_probs: Tensor | None  # [B, P]
    scores: np.ndarray  # [B, P]
    a_batch: np.ndarray  # [P, P]
    global_probs: Tensor | None  # [B]


def compute_tag(scores, n_heads: int) -> np.ndarray:
    """Batch-and-head mean of the score outer products ``C_i^T C_i``.

    Scores are shared by every head, so the head average just replicates
    each term ``n_heads`` times and cancels. The result is a constant.
    """
    c = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    b = c.shape[0]
    total = (c.T @ c) * n_heads
    a = total / (b * n_heads)
    return 0.5 * (a + a.T)


def update_tag_state(state: TagState, a_batch: np.ndarray) -> TagState:
    """``A <- m A + (1 - m) A_batch``, returned as a new state."""
    m = state.momentum
    if m == 0.0:
        a = np.array(a_batch, dtype=state.a.dtype)
    elif m == 1.0:
        a = state.a.copy()
    else:
        a = m * state.a + (1.0 - m) * np.asarray(a_batch, dtype=state.a.dtype)
        a = np.clip(0.5 * (a + a.T), 0.0, 1.0)
    return TagState(a, m, state.step + 1)


def forward(model: TatModel, tag_state: TagState, sc_batch, plain: bool = False, fixed_scores=None) -> ForwardOutput:
    """Run the model on ``[B, N, N]`` matrices.

    ``plain=True`` runs every block with vanilla attention and skips both
    discriminators: an ordinary pre-norm ViT on the same parameters.
    ``fixed_scores`` replaces the computed transferability scores (which are
    constants to autodiff anyway); finite-difference checks use it to hold
    the stop-gradient path still.
    """
    c = model.config
    x = model.embed(sc_batch)
    b = x.shape[0]
    n_patches = c.n_patches
    dt = c.np_dtype

    if plain:
        for blk in model.blocks:
            x = blk(x, kind="plain")
        cls = model.norm(x)[:, 0, :]
        ones = np.ones((b, n_patches), dtype=dt)
        return ForwardOutput(model.head(cls), cls, None, ones, np.ones((n_patches, n_patches)), None)

    a_full = pad_adjacency(np.asarray(tag_state.a, dtype=dt))
    for blk in model.blocks[:-1]:
        x = blk(x, kind="tag_guided", a_full=a_full)

    captured = {}

    def score_fn(patch_tokens):
        probs = model.local_disc(ad.grad_reverse(patch_tokens, c.grl_lambda))
        if fixed_scores is not None:
            scores = np.asarray(fixed_scores, dtype=dt)
        elif c.use_local:
            # computed from raw values: scores never carry gradient
            scores = ad.binary_entropy(ad.stop_gradient(probs).data).astype(dt)
        else:
            scores = np.ones((b, n_patches), dtype=dt)
        captured.update(probs=probs, scores=scores)
        return scores

    x = model.blocks[-1](x, kind="tat_final", score_fn=score_fn)
    cls = model.norm(x)[:, 0, :]
    logits = model.head(cls)
    gprobs = model.global_disc(ad.grad_reverse(cls, c.grl_lambda))
    probs, scores = captured["probs"], captured["scores"]
    return ForwardOutput(logits, cls, probs, scores, compute_tag(scores, c.n_heads), gprobs)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"TATCKPT1"
MAGIC_PREFIX = b"TATCKPT"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: TatModel
    tag_state: TagState
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: TatModel, tag_state: TagState, velocities=None, step: int = 0, extra=None):
    """Write magic, a u64-length-prefixed JSON header, then float64 LE payloads."""
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [(f"param/{k}", v) for k, v in model.state_dict().items()]
    tensors.append(("tag/a", tag_state.a))
    for k, v in (velocities or {}).items():
        tensors.append((f"velocity/{k}", v))
    table = []
    offset = 0
    for name, arr in tensors:
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 8
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": 1,
        "model_config": asdict(model.config),
        "tag": {"momentum": tag_state.momentum, "step": tag_state.step},
        "step": int(step),
        "extra": extra or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, model: TatModel | None = None) -> Checkpoint:
    """Read a checkpoint. When ``model`` is given its configuration wins and
    tensor shapes are checked against it; otherwise a model is rebuilt."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: file too short ({len(raw)} bytes)")
    magic = raw[:8]
    if magic != MAGIC:
        if magic.startswith(MAGIC_PREFIX):
            raise CheckpointVersionError(f"{path}: unsupported checkpoint version {magic!r}")
        raise CheckpointFormatError(f"{path}: bad magic bytes {magic!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointTruncatedError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != 1:
        raise CheckpointVersionError(f"{path}: unsupported format_version {header.get('format_version')}")
    body = raw[16 + hlen :]
    arrays = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise CheckpointTruncatedError(f"{path}: payload for {entry['name']} is truncated")
        chunk = body[entry["offset"] : end]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()

    if model is None:
        model = TatModel(ModelConfig(**header["model_config"]))
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointShapeError(f"{path}: tensor {name} missing from checkpoint")
        if tuple(arrays[key].shape) != p.shape:
            raise CheckpointShapeError(
                f"{path}: tensor {name} has shape {tuple(arrays[key].shape)}, model expects {p.shape}"
            )
    for name, p in expected.items():
        p.data = arrays[f"param/{name}"].astype(p.dtype)
    a = arrays["tag/a"]
    if a.shape != (model.config.n_patches, model.config.n_patches):
        raise CheckpointShapeError(f"{path}: tensor tag/a has shape {a.shape}")
    tag = TagState(a, header["tag"]["momentum"], header["tag"]["step"])
    velocities = {k[len("velocity/") :]: v for k, v in arrays.items() if k.startswith("velocity/")}
    return Checkpoint(model, tag, velocities, header["step"], header.get("extra", {}))
