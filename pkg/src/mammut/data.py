"""Synthetic image-caption corpus, toy tokenizer, patchifier, and the
cropped positional-embedding transform.

Everything here is a pure function of (seed, config): scenes place colored
shapes on a grid and caption them deterministically, so corpus generation
is reproducible bit-for-bit and the caption vocabulary is closed.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (1.0, 0.95, 0.1),
    "cyan": (0.1, 0.9, 0.9),
    "magenta": (0.95, 0.1, 0.9),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}

SHAPES = ("circle", "square", "triangle")

MOTION_WORDS = ("moving", "holding", "still", "left", "right", "up", "down")

# disjoint seed ranges per split; admission is additionally filtered by the
# caption bucket so no caption string can leak across splits
SPLIT_SEED_BASE = {"train": 0, "val": 1 << 33, "test": 1 << 34}
SPLIT_BUCKETS = {"train": range(0, 90), "val": range(90, 95), "test": range(95, 100)}

_OBJECT_SALT = 0x51C3
_CROP_SALT = 0xC209


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class TokenizeError(ValueError):
    """Text contains a word outside the frozen vocabulary."""


@dataclass(frozen=True)
class SceneConfig:
    """Scene layout plus the image pipeline geometry derived from it."""

    canvas_size: int = 48
    grid_size: int = 3
    min_objects: int = 1
    max_objects: int = 3
    margin_frac: float = 0.125  # outer border holding no objects
    patch_size: int = 24
    resize_to: int | None = None  # train-time resize before random crop
    crop_to: int | None = None

    def __post_init__(self):
        if self.max_objects > self.grid_size ** 2:
            raise ConfigError(
                f"max_objects={self.max_objects} exceeds grid capacity "
                f"{self.grid_size}**2")
        if self.min_objects < 1 or self.min_objects > self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")

    @property
    def train_resize(self) -> int:
        return self.resize_to if self.resize_to is not None else self.canvas_size

    @property
    def image_size(self) -> int:
        return self.crop_to if self.crop_to is not None else self.canvas_size

    @property
    def patch_grid(self) -> int:
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide "
                              f"image size {self.image_size}")
        return self.image_size // self.patch_size

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2

    @property
    def caption_token_len(self) -> int:
        # bos + "a C S" (and "a C S")*  + eos
        return self.tokens_for_objects(self.max_objects)

    @staticmethod
    def tokens_for_objects(n: int) -> int:
        return 2 + 4 * n - 1


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major grid cell index


@dataclass
class SyntheticScene:
    canvas: np.ndarray  # H x W x 3 in [0, 1]
    objects: tuple[SceneObject, ...]
    caption: str


def caption_for(objects) -> str:
    parts = [f"a {o.color} {o.shape}" for o in sorted(objects, key=lambda o: o.cell)]
    return " and ".join(parts)


@functools.lru_cache(maxsize=1 << 16)
def scene_objects(seed: int, config: SceneConfig) -> tuple[SceneObject, ...]:
    rng = np.random.default_rng([seed, _OBJECT_SALT])
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.grid_size ** 2, size=n, replace=False)
    colors = list(PALETTE)
    objs = [SceneObject(shape=SHAPES[int(rng.integers(len(SHAPES)))],
                        color=colors[int(rng.integers(len(colors)))],
                        cell=int(c))
            for c in cells]
    return tuple(sorted(objs, key=lambda o: o.cell))


def _cell_center(cell: int, config: SceneConfig) -> tuple[float, float]:
    g = config.grid_size
    m = config.margin_frac * config.canvas_size
    span = config.canvas_size - 2 * m
    row, col = divmod(cell, g)
    return (m + (row + 0.5) * span / g, m + (col + 0.5) * span / g)


def render_objects_at(objects, centers, config: SceneConfig) -> np.ndarray:
    """Draw objects at explicit (row, col) centers on a black canvas."""
    size = config.canvas_size
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    coords = np.arange(size, dtype=np.float64) + 0.5
    span = size * (1 - 2 * config.margin_frac)
    r = 0.38 * span / config.grid_size
    for o, (cy, cx) in zip(objects, centers):
        # draw only inside the object's bounding box
        y0, y1 = max(0, int(cy - r - 1)), min(size, int(cy + r + 2))
        x0, x1 = max(0, int(cx - r - 1)), min(size, int(cx + r + 2))
        dy = (coords[y0:y1] - cy)[:, None]
        dx = (coords[x0:x1] - cx)[None, :]
        if o.shape == "circle":
            mask = dy * dy + dx * dx <= r * r
        elif o.shape == "square":
            mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        else:  # upward triangle: width grows from apex to base
            mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
        canvas[y0:y1, x0:x1][mask] = PALETTE[o.color]
    return canvas


def render_scene(objects, config: SceneConfig) -> np.ndarray:
    return render_objects_at(objects,
                             [_cell_center(o.cell, config) for o in objects],
                             config)


def synthesize_pair(seed: int, config: SceneConfig) -> SyntheticScene:
    """Deterministic scene + caption for (seed, config)."""
    objects = scene_objects(seed, config)
    return SyntheticScene(canvas=render_scene(objects, config),
                          objects=objects, caption=caption_for(objects))


# ---------------------------------------------------------------------------
# splits


def caption_bucket(caption: str) -> int:
    digest = hashlib.blake2b(caption.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % 100


def split_of_caption(caption: str) -> str:
    b = caption_bucket(caption)
    for split, buckets in SPLIT_BUCKETS.items():
        if b in buckets:
            return split
    raise AssertionError("unreachable")


def split_seeds(split: str, config: SceneConfig, count: int) -> list[int]:
    """First `count` seeds of the split's seed range whose caption belongs
    to the split's bucket. Keeps caption strings disjoint across splits."""
    if split not in SPLIT_SEED_BASE:
        raise ConfigError(f"unknown split {split!r}")
    base = SPLIT_SEED_BASE[split]
    out: list[int] = []
    seed = base
    limit = base + (1 << 32)
    while len(out) < count:
        if seed >= limit:
            raise ConfigError(f"seed range for split {split!r} exhausted")
        objects = scene_objects(seed, config)
        if split_of_caption(caption_for(objects)) == split:
            out.append(seed)
        seed += 1
    return out


def seeds_by_object_count(seeds, config: SceneConfig) -> dict[int, np.ndarray]:
    """Partition corpus seeds by scene object count (training buckets short
    captions together so most steps run shorter decoder sequences)."""
    buckets: dict[int, list[int]] = {}
    for seed in seeds:
        n = len(scene_objects(int(seed), config))
        buckets.setdefault(n, []).append(int(seed))
    return {n: np.asarray(v) for n, v in buckets.items()}


# ---------------------------------------------------------------------------
# manifest / vocabulary files


def write_manifest(path, config: SceneConfig, seeds) -> None:
    """One record per line: seed, semicolon-joined shape:color:cell, caption
    (tab-separated)."""
    with open(path, "w") as fh:
        for seed in seeds:
            objs = scene_objects(seed, config)
            desc = ";".join(f"{o.shape}:{o.color}:{o.cell}" for o in objs)
            fh.write(f"{seed}\t{desc}\t{caption_for(objs)}\n")


def read_manifest(path) -> list[tuple[int, tuple[SceneObject, ...], str]]:
    records = []
    with open(path) as fh:
        for line in fh:
            seed_s, desc, caption = line.rstrip("\n").split("\t")
            objs = tuple(SceneObject(*p.split(":")[:2], cell=int(p.split(":")[2]))
                         for p in desc.split(";"))
            records.append((int(seed_s), objs, caption))
    return records


class Vocabulary:
    """Frozen word-level vocabulary; line number == id in the on-disk form."""

    PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
    _SPECIALS = (PAD, BOS, EOS)

    def __init__(self, words):
        self.tokens = list(self._SPECIALS) + sorted(set(words) - set(self._SPECIALS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[self.PAD]

    @property
    def bos_id(self) -> int:
        return self.index[self.BOS]

    @property
    def eos_id(self) -> int:
        return self.index[self.EOS]

    @classmethod
    def canonical(cls, config: SceneConfig, include_motion: bool = True):
        """The closed caption grammar's word set; independent of corpus size."""
        words = {"a", "and"} | set(PALETTE) | set(SHAPES)
        if include_motion:
            words |= set(MOTION_WORDS)
        return cls(words)

    @classmethod
    def from_captions(cls, captions):
        words = set()
        for c in captions:
            words.update(c.split())
        return cls(words)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        vocab = cls.__new__(cls)
        vocab.tokens = tokens
        vocab.index = {t: i for i, t in enumerate(tokens)}
        return vocab

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise TokenizeError(f"word {word!r} not in vocabulary")
            ids.append(self.index[word])
        return ids

    def decode(self, ids) -> str:
        drop = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.tokens[i] for i in ids if i not in drop)


@dataclass
class TokenBatch:
    """Padded token rows; valid positions form a prefix and start with bos."""

    ids: np.ndarray  # [B, T] int64
    valid: np.ndarray  # [B, T] bool
    bos_id: int
    eos_id: int
    pad_id: int

    def __post_init__(self):
        if self.ids.shape != self.valid.shape:
            raise T.ShapeError(f"ids {self.ids.shape} vs mask {self.valid.shape}")
        if not (self.ids[:, 0] == self.bos_id).all():
            raise ConfigError("every row must start with bos")
        lengths = self.valid.sum(axis=1)
        prefix = np.arange(self.ids.shape[1])[None, :] < lengths[:, None]
        if not (prefix == self.valid).all():
            raise ConfigError("valid positions must form a row prefix")

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]


def tokenize(texts, vocab: Vocabulary, max_len: int | None) -> TokenBatch:
    """bos + words + eos per row, padded to max_len (None pads to the
    longest row in the batch)."""
    if isinstance(texts, str):
        texts = [texts]
    rows = []
    for text in texts:
        ids = [vocab.bos_id] + vocab.encode(text) + [vocab.eos_id]
        if max_len is not None and len(ids) > max_len:
            raise TokenizeError(f"caption needs {len(ids)} tokens, max_len={max_len}")
        rows.append(ids)
    if max_len is None:
        max_len = max(len(r) for r in rows)
    B = len(rows)
    ids = np.full((B, max_len), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((B, max_len), dtype=bool)
    for b, row in enumerate(rows):
        ids[b, :len(row)] = row
        valid[b, :len(row)] = True
    return TokenBatch(ids=ids, valid=valid, bos_id=vocab.bos_id,
                      eos_id=vocab.eos_id, pad_id=vocab.pad_id)


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize on corpus captions: drops specials, stops at eos."""
    out = []
    for i in ids:
        if i == vocab.eos_id:
            break
        if i in (vocab.pad_id, vocab.bos_id):
            continue
        out.append(vocab.tokens[i])
    return " ".join(out)


# ---------------------------------------------------------------------------
# image pipeline


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """Split H x W x 3 into row-major patches, each flattened in
    (row, col, channel) order -> [(H/p)*(W/p), 3p^2]."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"patch {patch} does not divide image {h}x{w}")
    x = image.reshape(h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(-1, patch * patch * c))


def unpatchify(tokens: np.ndarray, patch: int, size: int) -> np.ndarray:
    g = size // patch
    x = tokens.reshape(g, g, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(size, size, 3))


def resize_random_crop(image: np.ndarray, resize_to: int, crop_to: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Bilinear resize to resize_to, then a uniform random crop_to crop."""
    if crop_to > resize_to:
        raise ConfigError(f"crop_to {crop_to} exceeds resize_to {resize_to}")
    resized = bilinear_resize_image(image, resize_to)
    dy = int(rng.integers(0, resize_to - crop_to + 1))
    dx = int(rng.integers(0, resize_to - crop_to + 1))
    return np.ascontiguousarray(resized[dy:dy + crop_to, dx:dx + crop_to])


def bilinear_resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return T.bilinear_resize_array(image, size, size)


# ---------------------------------------------------------------------------
# cropped positional embedding


def sample_crop_rect(upsample_to: int, rng: np.random.Generator,
                     scale_range=(0.3, 1.0),
                     aspect_range=(0.75, 4.0 / 3.0)) -> tuple[int, int, int, int]:
    """(y0, x0, h, w) with uniform linear scale, aspect, and position."""
    s = rng.uniform(*scale_range)
    a = np.sqrt(rng.uniform(*aspect_range))
    h = int(np.clip(round(upsample_to * s * a), 1, upsample_to))
    w = int(np.clip(round(upsample_to * s / a), 1, upsample_to))
    y0 = int(rng.integers(0, upsample_to - h + 1))
    x0 = int(rng.integers(0, upsample_to - w + 1))
    return y0, x0, h, w


def cropped_positional_embedding(grid: Tensor, upsample_to: int,
                                 crop_rect: tuple[int, int, int, int],
                                 out_size: int) -> Tensor:
    """Upsample the G x G x d grid, take a crop, resize back to out_size.

    Differentiable end to end, so the learned grid trains through the crop.
    """
    g = grid.shape[0]
    if upsample_to < g:
        raise ConfigError(f"upsample_to {upsample_to} < grid size {g}")
    y0, x0, h, w = crop_rect
    if h <= 0 or w <= 0:
        raise ConfigError(f"degenerate crop rect {crop_rect}")
    if y0 < 0 or x0 < 0 or y0 + h > upsample_to or x0 + w > upsample_to:
        raise ConfigError(f"crop rect {crop_rect} outside {upsample_to}^2")
    up = T.resize_bilinear(grid, upsample_to, upsample_to)
    crop = T.narrow(T.narrow(up, 0, y0, h), 1, x0, w)
    return T.resize_bilinear(crop, out_size, out_size)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    patches: np.ndarray  # [B, P, patch_dim] in the active precision
    tokens: TokenBatch
    captions: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)


def scene_image(scene: SyntheticScene, config: SceneConfig,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Training view (resize + random crop) when rng is given; otherwise the
    deterministic eval view (center crop of the same resize, so train and
    eval see objects at the same scale)."""
    if config.train_resize > config.image_size:
        if rng is not None:
            return resize_random_crop(scene.canvas, config.train_resize,
                                      config.image_size, rng)
        resized = bilinear_resize_image(scene.canvas, config.train_resize)
        off = (config.train_resize - config.image_size) // 2
        out = config.image_size
        return np.ascontiguousarray(resized[off:off + out, off:off + out])
    return bilinear_resize_image(scene.canvas, config.image_size)


def batch_patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """patchify for a stack of images: [B, H, W, 3] -> [B, P, 3p^2]."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"patch {patch} does not divide image {h}x{w}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, -1, patch * patch * c))


def make_batch(config: SceneConfig, vocab: Vocabulary, seeds,
               max_text_len: int | None, rng: np.random.Generator | None = None) -> Batch:
    captions, canvases = [], []
    for seed in seeds:
        objects = scene_objects(int(seed), config)
        captions.append(caption_for(objects))
        canvases.append(render_scene(objects, config))
    stack = np.stack(canvases).astype(T.dtype(), copy=False)
    out = config.image_size
    if config.train_resize > out:
        if stack.shape[1] != config.train_resize:
            stack = T.bilinear_resize_array(stack, config.train_resize,
                                            config.train_resize)
        if rng is not None:
            hi = config.train_resize - out + 1
            offs = rng.integers(0, hi, size=(len(canvases), 2))
        else:
            center = (config.train_resize - out) // 2
            offs = np.full((len(canvases), 2), center)
        imgs = np.stack([stack[b, dy:dy + out, dx:dx + out]
                         for b, (dy, dx) in enumerate(offs)])
    elif stack.shape[1] != out:
        imgs = T.bilinear_resize_array(stack, out, out)
    else:
        imgs = stack
    return Batch(patches=batch_patchify(imgs, config.patch_size),
                 tokens=tokenize(captions, vocab, max_text_len),
                 captions=captions, seeds=[int(s) for s in seeds])
