"""Connectivity samples: synthetic generation, file I/O, normalisation, batching.

On disk a dataset is a directory with ``manifest.csv`` (header
``id,path,domain,label``), one plain-text matrix per sample (N lines of N
space-separated ``%.17g`` literals) and, for generated data,
``ground_truth.json``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CLASSES = ("CN", "MCI", "LBD")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
DOMAINS = ("source", "target")
SOURCE_LABELS = ("CN", "MCI")
TARGET_LABELS = ("CN", "MCI", "LBD", "unknown")
SYMMETRY_TOL = 1e-9


class DataError(ValueError):
    """Base class for dataset problems."""


class DataConfigError(DataError):
    pass


class MissingFileError(DataError):
    pass


class MatrixError(DataError):
    """Matrix is not square, not symmetric, has a non-zero diagonal or negatives."""


class LabelError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass
class ScSample:
    matrix: np.ndarray
    domain: str
    label: str
    id: str

    def validate(self, where: str = "") -> None:
        where = where or self.id
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise MatrixError(f"{where}: matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise MatrixError(f"{where}: matrix has non-finite entries")
        if np.abs(m - m.T).max() > SYMMETRY_TOL:
            raise MatrixError(f"{where}: matrix is not symmetric (max |m - m^T| = {np.abs(m - m.T).max():.3g})")
        if np.any(np.diag(m) != 0):
            raise MatrixError(f"{where}: diagonal must be zero")
        if m.min() < 0:
            raise MatrixError(f"{where}: entries must be non-negative")
        if self.domain not in DOMAINS:
            raise LabelError(f"{where}: unknown domain {self.domain!r}")
        allowed = SOURCE_LABELS if self.domain == "source" else TARGET_LABELS
        if self.label not in allowed:
            raise LabelError(f"{where}: label {self.label!r} is not valid for the {self.domain} domain")


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic two-site benchmark.

    Default counts mirror the cohort sizes of the motivating study
    (source 282 CN + 149 MCI, target 23 CN + 6 MCI + 77 LBD).
    """

    n_nodes: int = 160
    patch_size: int = 16
    source_cn: int = 282
    source_mci: int = 149
    target_cn: int = 23
    target_mci: int = 6
    target_lbd: int = 77
    rho: float = 0.5  # fraction of patch pairs that carry class signal and no shift
    signal: float = 1.0  # class-signal amplitude s
    shift: float = 1.0  # domain-shift amplitude delta
    noise: float = 1.0  # entry-level Gaussian noise sigma
    seed: int = 0

    def validate(self) -> None:
        counts = (self.source_cn, self.source_mci, self.target_cn, self.target_mci, self.target_lbd)
        if any(int(c) <= 0 for c in counts):
            raise DataConfigError("all per-class counts must be positive")
        if not 0.0 < self.rho < 1.0:
            raise DataConfigError(f"rho must lie strictly between 0 and 1, got {self.rho}")
        if self.patch_size <= 0 or self.n_nodes % self.patch_size:
            raise DataConfigError(f"n_nodes {self.n_nodes} must be divisible by patch_size {self.patch_size}")
        if self.signal < 0 or self.shift < 0 or self.noise < 0:
            raise DataConfigError("signal, shift and noise must be non-negative")
        n_pairs = self.n_pairs
        n_tr = self.n_transferable_pairs
        if n_tr < 2 or n_tr >= n_pairs:
            raise DataConfigError(
                f"rho={self.rho} gives {n_tr} transferable of {n_pairs} patch pairs; need 2 <= k < {n_pairs}"
            )

    @property
    def grid(self) -> int:
        return self.n_nodes // self.patch_size

    @property
    def n_pairs(self) -> int:
        g = self.grid
        return g * (g + 1) // 2

    @property
    def n_transferable_pairs(self) -> int:
        return int(round(self.rho * self.n_pairs))

    def counts(self) -> list[tuple[str, str, int]]:
        return [
            ("source", "CN", self.source_cn),
            ("source", "MCI", self.source_mci),
            ("target", "CN", self.target_cn),
            ("target", "MCI", self.target_mci),
            ("target", "LBD", self.target_lbd),
        ]


def _pair_mask(pairs, grid, patch_size) -> np.ndarray:
    """Boolean N x N mask covering the given (row-block, col-block) pairs and their mirrors."""
    n = grid * patch_size
    mask = np.zeros((n, n), dtype=bool)
    for a, b in pairs:
        ra = slice(a * patch_size, (a + 1) * patch_size)
        rb = slice(b * patch_size, (b + 1) * patch_size)
        mask[ra, rb] = True
        mask[rb, ra] = True
    return mask


def _sym_field(rng, n, draw) -> np.ndarray:
    upper = np.triu(draw(size=(n, n)), 1)
    return upper + upper.T


def _sym_noise(rng, n, sigma) -> np.ndarray:
    z = rng.normal(0.0, sigma, size=(n, n))
    upper = np.triu(z, 1)
    return upper + upper.T


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[ScSample], set[int]]:
    """Generate a labelled two-site dataset and the set of transferable patch indices.

    Every subject is ``template + s * class pattern + noise``. The template is
    drawn once from U(2, 4). Class patterns are fixed standard-normal fields
    supported only on the transferable patches; LBD (target only) uses the
    midpoint of the CN and MCI patterns, so a two-class head sees it as
    ambiguous. Target subjects also carry a site distortion on every other
    patch: their deviation from the template is scaled by a per-patch gain
    ``1 + shift * U(0, 0.5)`` and a fixed bias of amplitude ``shift`` is
    added, copied from the MCI-minus-CN contrast of a random transferable
    patch. Matrices are symmetric with a zero diagonal and clipped at zero.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    g, p, n = cfg.grid, cfg.patch_size, cfg.n_nodes
    pairs = [(a, b) for a in range(g) for b in range(a, g)]
    chosen = rng.permutation(len(pairs))[: cfg.n_transferable_pairs]
    tr_pairs = [pairs[i] for i in sorted(chosen)]
    tr_set = set(tr_pairs)
    shifted_pairs = [pr for pr in pairs if pr not in tr_set]
    tr_mask = _pair_mask(tr_pairs, g, p)

    template = 2.0 + _sym_field(rng, n, lambda size: rng.uniform(0.0, 2.0, size=size))
    cn = tr_mask * _sym_field(rng, n, rng.standard_normal)
    mci = tr_mask * _sym_field(rng, n, rng.standard_normal)
    patterns = {"CN": cfg.signal * cn, "MCI": cfg.signal * mci, "LBD": 0.5 * cfg.signal * (cn + mci)}

    gain = np.ones((n, n))
    for a, b in shifted_pairs:
        gval = 1.0 + cfg.shift * rng.uniform(0.0, 0.5)
        for r, c in ((a, b), (b, a)):
            gain[r * p : (r + 1) * p, c * p : (c + 1) * p] = gval
    # the site bias on each shifted patch copies the MCI-minus-CN contrast of a
    # random transferable patch: an acquisition artefact that mimics disease
    contrast = (mci - cn) / np.sqrt(2.0)
    bias = np.zeros((n, n))
    donors = rng.integers(0, len(tr_pairs), size=len(shifted_pairs))
    for (a, b), k in zip(shifted_pairs, donors):
        ka, kb = tr_pairs[k]
        bias[a * p : (a + 1) * p, b * p : (b + 1) * p] = contrast[ka * p : (ka + 1) * p, kb * p : (kb + 1) * p]
    bias = np.triu(bias, 1)
    bias = cfg.shift * (bias + bias.T)

    samples: list[ScSample] = []
    for domain, label, count in cfg.counts():
        prefix = "src" if domain == "source" else "tgt"
        for i in range(count):
            dev = patterns[label] + _sym_noise(rng, n, cfg.noise)
            if domain == "target":
                dev = gain * dev + bias
            m = template + dev
            np.fill_diagonal(m, 0.0)
            np.clip(m, 0.0, None, out=m)
            samples.append(ScSample(m, domain, label, f"{prefix}_{label}_{i:04d}"))

    truth = set()
    for a, b in tr_pairs:
        truth.add(a * g + b)
        truth.add(b * g + a)
    return samples, truth


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def write_matrix(path, m: np.ndarray) -> None:
    np.savetxt(path, m, fmt="%.17g", delimiter=" ")


def read_matrix(path) -> np.ndarray:
    m = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return m


def write_dataset(out_dir, samples, ground_truth=None, config: SyntheticConfig | None = None) -> Path:
    out = Path(out_dir)
    (out / "matrices").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        rel = f"matrices/{s.id}.txt"
        write_matrix(out / rel, s.matrix)
        rows.append((s.id, rel, s.domain, s.label))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "domain", "label"])
        w.writerows(rows)
    if ground_truth is not None:
        payload = {
            "transferable_patches": sorted(int(i) for i in ground_truth),
            "config": asdict(config) if config is not None else None,
        }
        (out / "ground_truth.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return out


def read_ground_truth(data_dir) -> set[int]:
    payload = json.loads((Path(data_dir) / "ground_truth.json").read_text())
    return set(payload["transferable_patches"])


def load_dataset(manifest_path) -> list[ScSample]:
    """Load and validate every row of a manifest. Accepts the CSV or its directory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.csv"
    if not manifest_path.exists():
        raise MissingFileError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    seen = set()
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "path", "domain", "label"]:
            raise DataError(f"{manifest_path}: header must be id,path,domain,label, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{manifest_path}:{lineno}"
            if row["id"] in seen:
                raise DataError(f"{where}: duplicate id {row['id']!r}")
            seen.add(row["id"])
            if row["domain"] not in DOMAINS:
                raise LabelError(f"{where}: unknown domain {row['domain']!r}")
            allowed = SOURCE_LABELS if row["domain"] == "source" else TARGET_LABELS
            if row["label"] not in allowed:
                raise LabelError(f"{where}: label {row['label']!r} is not valid for the {row['domain']} domain")
            path = root / row["path"]
            if not path.exists():
                raise MissingFileError(f"{where}: matrix file not found: {path}")
            sample = ScSample(read_matrix(path), row["domain"], row["label"], row["id"])
            sample.validate(where)
            samples.append(sample)
    if not samples:
        raise EmptyDatasetError(f"{manifest_path}: manifest has no rows")
    return samples


# --------------------------------------------------------------------------
# normalisation and batching
# --------------------------------------------------------------------------


def normalize(sc: np.ndarray) -> np.ndarray:
    """Standardise off-diagonal entries to zero mean, unit variance; diagonal stays 0.

    A matrix with constant off-diagonal entries maps to all zeros.
    """
    m = np.asarray(sc, dtype=np.float64)
    n = m.shape[0]
    off = ~np.eye(n, dtype=bool)
    vals = m[off]
    mu = vals.mean()
    sd = vals.std()
    out = np.zeros_like(m)
    if sd > 0:
        out[off] = (vals - mu) / sd
    return out


@dataclass
class Batch:
    matrices: np.ndarray  # [B, N, N], normalised
    labels: np.ndarray | None  # class indices, source only
    ids: list[str] = field(default_factory=list)


def split_domains(samples):
    src = [s for s in samples if s.domain == "source"]
    tgt = [s for s in samples if s.domain == "target"]
    return src, tgt


class _Cycler:
    """Draws indices from reshuffled permutations, continuing across epochs."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def stack_normalized(samples, dtype=np.float64) -> np.ndarray:
    return np.stack([normalize(s.matrix) for s in samples]).astype(dtype)


def make_batches(dataset, batch_size: int, seed: int, dtype=np.float64) -> Iterator[tuple[Batch, Batch]]:
    """Endless stream of paired (source, target) batches of ``batch_size`` each.

    Each domain walks its own seeded permutation and reshuffles when exhausted,
    so the smaller domain repeats within a pass over the larger one. Target
    batches never expose labels.
    """
    src, tgt = split_domains(dataset)
    if not src or not tgt:
        raise DataConfigError("batching needs both a source and a target domain")
    if batch_size <= 0:
        raise DataConfigError("batch_size must be positive")
    src_x = stack_normalized(src, dtype)
    tgt_x = stack_normalized(tgt, dtype)
    src_y = np.array([CLASS_INDEX[s.label] for s in src], dtype=np.int64)
    ss = np.random.SeedSequence(seed)
    rs, rt = (np.random.default_rng(c) for c in ss.spawn(2))
    cs, ct = _Cycler(len(src), rs), _Cycler(len(tgt), rt)
    while True:
        i = cs.take(batch_size)
        j = ct.take(batch_size)
        yield (
            Batch(src_x[i], src_y[i], [src[k].id for k in i]),
            Batch(tgt_x[j], None, [tgt[k].id for k in j]),
        )
