"""Datasets: raw toy modalities, synthetic generation, 8:1:1 splits and the
on-disk directory format.

Directory layout (all ids 0-based decimal):

    meta.json          num_users, num_items, vocab_size, P, C
    interactions.tsv   user_id<TAB>item_id
    images.bin         float32 little-endian, item-major, each item P×P×C row-major
    texts.tsv          item_id<TAB>space-separated token ids
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DataFormatError, ReferentialIntegrityError

logger = logging.getLogger(__name__)

META_FILE = "meta.json"
INTERACTIONS_FILE = "interactions.tsv"
IMAGES_FILE = "images.bin"
TEXTS_FILE = "texts.tsv"


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(eq=False)
class Dataset:
    """Users, items, observed interactions and each item's raw image and text."""
    num_users: int
    num_items: int
    vocab_size: int
    interactions: np.ndarray          # (n, 2) int64 rows of (user_id, item_id)
    item_images: np.ndarray           # (num_items, P, P, C) float64 in [0, 1]
    item_texts: List[np.ndarray]      # per item, int64 token ids

    def __post_init__(self) -> None:
        self.interactions = np.asarray(self.interactions, dtype=np.int64).reshape(-1, 2)
        self.item_images = np.asarray(self.item_images, dtype=np.float64)
        self.item_texts = [np.asarray(t, dtype=np.int64).reshape(-1) for t in self.item_texts]
        self.validate()

    @property
    def image_size(self) -> int:
        return int(self.item_images.shape[1])

    @property
    def channels(self) -> int:
        return int(self.item_images.shape[3])

    @property
    def max_text_len(self) -> int:
        return max((len(t) for t in self.item_texts), default=0)

    def validate(self) -> None:
        if self.num_users < 0 or self.num_items < 0 or self.vocab_size < 1:
            raise DataFormatError("counts must be non-negative and vocab_size ≥ 1")
        inter = self.interactions
        if inter.size:
            if inter.min() < 0:
                raise ReferentialIntegrityError("negative id in interactions")
            if inter[:, 0].max() >= self.num_users:
                raise ReferentialIntegrityError(f"user id {int(inter[:, 0].max())} ≥ num_users {self.num_users}")
            if inter[:, 1].max() >= self.num_items:
                raise ReferentialIntegrityError(f"item id {int(inter[:, 1].max())} ≥ num_items {self.num_items}")
            if len(np.unique(inter, axis=0)) != len(inter):
                raise DataFormatError("interaction pairs must be unique")
        imgs = self.item_images
        if imgs.ndim != 4 or imgs.shape[0] != self.num_items or imgs.shape[1] != imgs.shape[2]:
            raise DataFormatError(f"item_images must be (num_items, P, P, C), got {imgs.shape}")
        if len(self.item_texts) != self.num_items:
            raise DataFormatError(f"expected {self.num_items} texts, got {len(self.item_texts)}")
        for item, text in enumerate(self.item_texts):
            if text.size and (text.min() < 0 or text.max() >= self.vocab_size):
                raise ReferentialIntegrityError(f"item {item} has a token outside [0, {self.vocab_size})")

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"{self.num_users},{self.num_items},{self.vocab_size}".encode())
        digest.update(self.interactions.tobytes())
        digest.update(self.item_images.astype("<f4").tobytes())
        for text in self.item_texts:
            digest.update(text.astype("<i8").tobytes() + b"|")
        return digest.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.num_users, self.num_items, self.vocab_size) == (other.num_users, other.num_items, other.vocab_size)
            and np.array_equal(self.interactions, other.interactions)
            and np.array_equal(self.item_images, other.item_images)
            and len(self.item_texts) == len(other.item_texts)
            and all(np.array_equal(a, b) for a, b in zip(self.item_texts, other.item_texts))
        )


@dataclass
class SplitReport:
    forced_train_users: List[int] = field(default_factory=list)   # fewer than 3 interactions
    dropped_users: List[int] = field(default_factory=list)        # had val/test but no train


@dataclass(eq=False)
class SplitDataset:
    dataset: Dataset
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    report: SplitReport = field(default_factory=SplitReport)

    @property
    def num_users(self) -> int:
        return self.dataset.num_users

    @property
    def num_items(self) -> int:
        return self.dataset.num_items

    def positives(self, part: str = "train") -> Dict[int, set]:
        """user id → set of item ids for one part ("train", "validation", "test")."""
        pairs = {"train": self.train, "validation": self.validation, "test": self.test}[part]
        out: Dict[int, set] = {}
        for u, i in pairs.tolist():
            out.setdefault(u, set()).add(i)
        return out


@dataclass
class PatchSequence:
    patches: np.ndarray      # (num_patches, patch_size² · C)
    positions: np.ndarray    # (num_patches,)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    positions: np.ndarray


# =============================================================================
# RAW MODALITIES
# =============================================================================

def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut a P×P×C image into non-overlapping raster-order patches, each
    flattened in (row, column, channel) order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    size, width, channels = image.shape
    if size != width:
        raise DataFormatError(f"images must be square, got {size}×{width}")
    if patch_size < 1 or size % patch_size:
        raise DataFormatError(f"image size {size} is not divisible by patch size {patch_size}")
    grid = size // patch_size
    patches = (
        image.reshape(grid, patch_size, grid, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid * grid, patch_size * patch_size * channels)
    )
    return PatchSequence(patches=patches.copy(), positions=np.arange(grid * grid))


def unpatchify(sequence: PatchSequence, image_size: int, channels: int) -> np.ndarray:
    count, dim = sequence.patches.shape
    grid = int(round(count ** 0.5))
    patch_size = image_size // grid if grid else 0
    if grid * grid != count or patch_size * grid != image_size or patch_size * patch_size * channels != dim:
        raise DataFormatError(f"{count} patches of length {dim} do not tile a {image_size}×{image_size}×{channels} image")
    return (
        sequence.patches.reshape(grid, grid, patch_size, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(image_size, image_size, channels)
    )


def tokenize(text: np.ndarray, vocab_size: int) -> TokenSequence:
    tokens = np.asarray(text, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise DataFormatError(f"token id outside [0, {vocab_size})")
    return TokenSequence(tokens=tokens, positions=np.arange(tokens.size))


# =============================================================================
# SYNTHETIC GENERATOR
# =============================================================================

def _calibrate(affinity: np.ndarray, target: float) -> np.ndarray:
    """Scale c so that Σ min(1, c·affinity) hits `target` (bisection)."""
    total = affinity.size
    if target >= total:
        return np.ones_like(affinity)
    lo, hi = 0.0, 1.0
    while np.minimum(1.0, hi * affinity).sum() < target:
        hi *= 2.0
        if hi > 1e300:
            break
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * affinity).sum() < target:
            lo = mid
        else:
            hi = mid
    return np.minimum(1.0, hi * affinity)


def generate_synthetic(
    num_users: int,
    num_items: int,
    latent_dim: int,
    density: float,
    seed: int,
    image_size: int = 16,
    channels: int = 3,
    vocab_size: int = 256,
    max_text_len: int = 16,
    latent_scale: float = 2.0,
    pixel_noise: float = 0.05,
) -> Dataset:
    """Toy dataset whose preferences follow latent factors that both
    modalities render.

    How it works:
    1. Every item gets z_i ~ N(0, I); every user gets w_u ~ N(0, I).
    2. The image is sigmoid of a fixed random image basis weighted by z_i,
       plus pixel noise, clipped to [0, 1] and rounded to float32.
    3. The text draws tokens from softmax(T·z_i) for a fixed random T.
    4. (u, i) is observed with probability min(1, c·σ(s·w_uᵀz_i/√k)), c chosen
       so the expected count is density·|U|·|I|.
    """
    if num_users < 1 or num_items < 1:
        raise ConfigurationError(f"need at least one user and one item, got {num_users} × {num_items}")
    if not 0.0 < density <= 1.0:
        raise ConfigurationError(f"density must lie in (0, 1], got {density}")
    if latent_dim < 1:
        raise ConfigurationError(f"latent_dim must be ≥ 1, got {latent_dim}")
    if image_size < 1 or vocab_size < 1 or max_text_len < 1:
        raise ConfigurationError("image_size, vocab_size and max_text_len must be ≥ 1")
    rng = np.random.default_rng(seed)

    item_latent = rng.standard_normal((num_items, latent_dim))
    user_latent = rng.standard_normal((num_users, latent_dim))

    basis = rng.standard_normal((latent_dim, image_size * image_size * channels))
    logits = item_latent @ basis / np.sqrt(latent_dim)
    pixels = 1.0 / (1.0 + np.exp(-logits))
    pixels = pixels + pixel_noise * rng.standard_normal(pixels.shape)
    images = np.clip(pixels, 0.0, 1.0).astype(np.float32).astype(np.float64)
    images = images.reshape(num_items, image_size, image_size, channels)

    token_basis = rng.standard_normal((vocab_size, latent_dim))
    min_len = max(1, max_text_len // 2)
    texts: List[np.ndarray] = []
    for z in item_latent:
        scores = 2.0 * token_basis @ z
        probs = np.exp(scores - scores.max())
        probs /= probs.sum()
        length = int(rng.integers(min_len, max_text_len + 1)) if max_text_len > 0 else 0
        texts.append(rng.choice(vocab_size, size=length, p=probs).astype(np.int64))

    affinity = latent_scale * (user_latent @ item_latent.T) / np.sqrt(latent_dim)
    affinity = 1.0 / (1.0 + np.exp(-affinity))
    probability = _calibrate(affinity, density * num_users * num_items)
    observed = rng.random((num_users, num_items)) < probability
    users, items = np.nonzero(observed)
    interactions = np.stack([users, items], axis=1).astype(np.int64)

    logger.info(f"Generated {num_users} users × {num_items} items with {len(interactions)} interactions (seed={seed})")
    return Dataset(
        num_users=num_users,
        num_items=num_items,
        vocab_size=vocab_size,
        interactions=interactions,
        item_images=images,
        item_texts=texts,
    )


# =============================================================================
# 8:1:1 SPLIT
# =============================================================================

def _allocate(quotas: np.ndarray, caps: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    """Integer counts near `quotas` that sum to `target` where caps allow
    (largest remainder, random tie-break)."""
    counts = np.minimum(np.floor(quotas).astype(np.int64), caps)
    remaining = target - int(counts.sum())
    if remaining <= 0:
        return counts
    remainders = quotas - np.floor(quotas)
    order = np.lexsort((rng.random(len(quotas)), -remainders))
    for idx in np.concatenate([order, order]):
        if remaining == 0:
            break
        if counts[idx] < caps[idx]:
            counts[idx] += 1
            remaining -= 1
    return counts


def split(dataset: Dataset, ratios: Sequence[int] = (8, 1, 1), seed: int = 0) -> SplitDataset:
    """Random train/validation/test split, per user where possible.

    Users with at least three interactions contribute to validation and
    test; everyone else keeps all interactions in train. Global counts are
    round(n·r_val) and round(n·r_test) whenever the eligible users can absorb
    them.
    """
    if len(dataset.interactions) == 0:
        raise DataFormatError("cannot split an empty dataset")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigurationError(f"ratios must be three non-negative numbers, got {ratios}")
    rng = np.random.default_rng(seed)
    total = sum(ratios)
    frac_val, frac_test = ratios[1] / total, ratios[2] / total

    by_user: Dict[int, List[int]] = {}
    for u, i in dataset.interactions.tolist():
        by_user.setdefault(u, []).append(i)
    users = sorted(by_user)
    report = SplitReport()

    eligible = [u for u in users if len(by_user[u]) >= 3]
    report.forced_train_users = [u for u in users if len(by_user[u]) < 3]
    n_all = len(dataset.interactions)
    n_eligible = sum(len(by_user[u]) for u in eligible)

    val_counts = np.zeros(len(eligible), dtype=np.int64)
    test_counts = np.zeros(len(eligible), dtype=np.int64)
    if eligible:
        sizes = np.array([len(by_user[u]) for u in eligible], dtype=np.float64)
        scale = n_all / n_eligible
        target_val = int(np.floor(n_all * frac_val + 0.5))
        target_test = int(np.floor(n_all * frac_test + 0.5))
        caps = (sizes - 1).astype(np.int64)
        val_counts = _allocate(sizes * frac_val * scale, caps, target_val, rng)
        test_counts = _allocate(sizes * frac_test * scale, caps - val_counts, target_test, rng)

    train, validation, test = [], [], []
    eligible_index = {u: k for k, u in enumerate(eligible)}
    for u in users:
        items = np.array(sorted(by_user[u]), dtype=np.int64)
        if u not in eligible_index:
            train.extend((u, int(i)) for i in items)
            continue
        k = eligible_index[u]
        items = items[rng.permutation(len(items))]
        nv, nt = int(val_counts[k]), int(test_counts[k])
        validation.extend((u, int(i)) for i in items[:nv])
        test.extend((u, int(i)) for i in items[nv:nv + nt])
        train.extend((u, int(i)) for i in items[nv + nt:])

    train_users = {u for u, _ in train}
    report.dropped_users = sorted({u for u, _ in validation + test} - train_users)
    if report.dropped_users:
        logger.warning(f"Dropping {len(report.dropped_users)} users without training interactions from val/test")
        validation = [p for p in validation if p[0] in train_users]
        test = [p for p in test if p[0] in train_users]
    if report.forced_train_users:
        logger.info(f"{len(report.forced_train_users)} users with < 3 interactions kept entirely in train")

    def as_array(pairs):
        return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)

    return SplitDataset(dataset, as_array(train), as_array(validation), as_array(test), report)


# =============================================================================
# ON-DISK FORMAT
# =============================================================================

def save(dataset: Dataset, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "vocab_size": dataset.vocab_size,
        "P": dataset.image_size,
        "C": dataset.channels,
    }
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"{u}\t{i}\n" for u, i in dataset.interactions.tolist()]
    (out / INTERACTIONS_FILE).write_text("".join(lines), encoding="utf-8")
    (out / IMAGES_FILE).write_bytes(dataset.item_images.astype("<f4").tobytes(order="C"))
    text_lines = [f"{item}\t{' '.join(str(t) for t in text.tolist())}\n" for item, text in enumerate(dataset.item_texts)]
    (out / TEXTS_FILE).write_text("".join(text_lines), encoding="utf-8")
    return out


def _parse_ints(line: str, expected: int, path: Path, lineno: int) -> List[int]:
    parts = line.split("\t")
    if len(parts) != expected:
        raise DataFormatError(f"expected {expected} tab-separated fields, got {len(parts)}", path, lineno)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise DataFormatError(f"non-integer field in {line!r}", path, lineno) from None


def load(path: Union[str, Path]) -> Dataset:
    """Read a dataset directory, checking every line and every id."""
    root = Path(path)
    meta_path = root / META_FILE
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        num_users, num_items = int(meta["num_users"]), int(meta["num_items"])
        vocab_size, size, channels = int(meta["vocab_size"]), int(meta["P"]), int(meta["C"])
    except FileNotFoundError:
        raise DataFormatError("missing meta.json", meta_path) from None
    except UnicodeDecodeError:
        raise DataFormatError("meta.json is not valid UTF-8", meta_path) from None
    except (ValueError, KeyError, TypeError) as e:
        raise DataFormatError(f"malformed meta.json ({e})", meta_path) from None

    inter_path = root / INTERACTIONS_FILE
    pairs: List[Tuple[int, int]] = []
    seen = set()
    for lineno, raw in enumerate(_read_lines(inter_path), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        u, i = _parse_ints(line, 2, inter_path, lineno)
        if not 0 <= u < num_users or not 0 <= i < num_items:
            raise ReferentialIntegrityError(f"pair ({u}, {i}) outside {num_users} users × {num_items} items", inter_path, lineno)
        if (u, i) in seen:
            raise DataFormatError(f"duplicate interaction ({u}, {i})", inter_path, lineno)
        seen.add((u, i))
        pairs.append((u, i))

    image_path = root / IMAGES_FILE
    expected = num_items * size * size * channels
    try:
        blob = image_path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError("missing images.bin", image_path) from None
    if len(blob) != 4 * expected:
        raise DataFormatError(f"expected {4 * expected} bytes of float32 pixels, found {len(blob)}", image_path)
    images = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(num_items, size, size, channels)

    text_path = root / TEXTS_FILE
    texts: List[Optional[np.ndarray]] = [None] * num_items
    for lineno, raw in enumerate(_read_lines(text_path), start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        head, sep, body = line.partition("\t")
        if not sep:
            raise DataFormatError("expected item_id<TAB>tokens", text_path, lineno)
        item = _parse_ints(head, 1, text_path, lineno)[0]
        try:
            tokens = [int(t) for t in body.split()]
        except ValueError:
            raise DataFormatError(f"non-integer token in {body!r}", text_path, lineno) from None
        if not 0 <= item < num_items:
            raise ReferentialIntegrityError(f"text for item {item} ≥ num_items {num_items}", text_path, lineno)
        if any(not 0 <= t < vocab_size for t in tokens):
            raise ReferentialIntegrityError(f"token outside [0, {vocab_size})", text_path, lineno)
        if texts[item] is not None:
            raise DataFormatError(f"second text for item {item}", text_path, lineno)
        texts[item] = np.array(tokens, dtype=np.int64)
    missing = [k for k, t in enumerate(texts) if t is None]
    if missing:
        raise DataFormatError(f"items without text: {missing[:5]}", text_path)

    return Dataset(
        num_users=num_users,
        num_items=num_items,
        vocab_size=vocab_size,
        interactions=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        item_images=images,
        item_texts=texts,
    )


def _read_lines(path: Path) -> List[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines(keepends=True)
    except FileNotFoundError:
        raise DataFormatError("missing file", path) from None
    except UnicodeDecodeError as e:
        raise DataFormatError(f"not valid UTF-8 text (byte {e.start})", path) from None
