"""Scene loading, tiling, scene-level splits, and a synthetic flood generator.

A scene is a co-registered pre/post image pair with a per-pixel damage
label raster. On disk a dataset is a directory of scene folders::

    <root>/<scene_id>/pre.png     8-bit RGB
    <root>/<scene_id>/post.png    8-bit RGB
    <root>/<scene_id>/label.png   8-bit grayscale, values 0-3
    <root>/dataset.json           manifest (scene list, digests, generator config)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

FLOOD_CLASS_RATIOS = (0.9170, 0.0428, 0.0368, 0.0033)
TRAIN_STRIDE = 128
EVAL_STRIDE = 256
LABEL_RATIOS = (0.05, 0.10, 0.20, 0.50, 1.0)


@dataclass
class ScenePair:
    pre: np.ndarray  # [C0, H, W] uint8
    post: np.ndarray
    label: np.ndarray  # [H, W] uint8, values 0..3
    scene_id: str

    def __post_init__(self):
        if self.pre.shape != self.post.shape or self.pre.shape[1:] != self.label.shape:
            raise DataError(
                f"{self.scene_id}: raster shapes differ "
                f"(pre {self.pre.shape}, post {self.post.shape}, label {self.label.shape})"
            )
        if self.label.size and self.label.max() > 3:
            raise DataError(f"{self.scene_id}: label value {int(self.label.max())} outside 0..3")

    @property
    def extent(self) -> tuple[int, int]:
        return self.label.shape

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.pre, self.post, self.label):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class Tile:
    pre: np.ndarray
    post: np.ndarray
    label: np.ndarray
    origin: tuple[int, int]
    scene_id: str


def tiles_per_axis(extent: int, tile: int, stride: int) -> int:
    return (extent - tile) // stride + 1


def tile_scene(scene: ScenePair, tile: int = 256, stride: int = TRAIN_STRIDE) -> list[Tile]:
    """Crop a scene into ``tile`` x ``tile`` blocks on a regular ``stride`` grid.

    Trailing rows/columns that do not fill a whole tile are dropped.
    """
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    H, W = scene.extent
    if tile > H or tile > W:
        raise DataError(f"{scene.scene_id}: tile {tile} larger than scene {H}x{W}")
    out = []
    for r in range(0, H - tile + 1, stride):
        for c in range(0, W - tile + 1, stride):
            out.append(
                Tile(
                    pre=scene.pre[:, r:r + tile, c:c + tile],
                    post=scene.post[:, r:r + tile, c:c + tile],
                    label=scene.label[r:r + tile, c:c + tile],
                    origin=(r, c),
                    scene_id=scene.scene_id,
                )
            )
    return out


@dataclass
class TileSet:
    """Stacked tiles ready for batching."""

    pre: np.ndarray  # [N, C0, h, w] uint8
    post: np.ndarray
    labels: np.ndarray  # [N, h, w] uint8
    scene_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "TileSet":
        index = np.asarray(index, dtype=np.int64)
        return TileSet(self.pre[index], self.post[index], self.labels[index], [self.scene_ids[i] for i in index])

    @classmethod
    def from_tiles(cls, tiles: Sequence[Tile]) -> "TileSet":
        if not tiles:
            raise DataError("no tiles to stack")
        return cls(
            np.stack([t.pre for t in tiles]),
            np.stack([t.post for t in tiles]),
            np.stack([t.label for t in tiles]),
            [t.scene_id for t in tiles],
        )

    @classmethod
    def from_scenes(cls, scenes: Sequence[ScenePair], tile: int, stride: int) -> "TileSet":
        return cls.from_tiles([t for s in scenes for t in tile_scene(s, tile, stride)])


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    label_ratio: float = 1.0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or not math.isclose(sum(self.ratios), 1.0):
            raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {self.ratios}")
        if not 0 < self.label_ratio <= 1:
            raise ConfigError(f"label_ratio must lie in (0, 1], got {self.label_ratio}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_scenes(scenes: Sequence[ScenePair], spec: SplitSpec = SplitSpec()):
    """Partition scenes (never tiles) into train/val/test.

    Validation and test sizes are rounded to nearest; train takes the rest.
    The shuffle depends only on the seed and the sorted scene ids.
    """
    if len(scenes) < 5:
        raise DataError(f"need at least 5 scenes to split, got {len(scenes)}")
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    perm = np.random.default_rng(spec.seed).permutation(len(ordered))
    n = len(ordered)
    n_val = _round_half_up(spec.ratios[1] * n)
    n_test = _round_half_up(spec.ratios[2] * n)
    n_train = n - n_val - n_test
    picked = [ordered[i] for i in perm]
    return picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:]


def sample_labeled(train_items: Sequence, label_ratio: float, seed: int = 0):
    """Split training items into labeled and unlabeled pools by scene.

    ``train_items`` can be scenes or tiles; anything with a ``scene_id``.
    At least one scene is labeled.
    """
    if not 0 < label_ratio <= 1:
        raise ConfigError(f"label_ratio must lie in (0, 1], got {label_ratio}")
    ids = sorted({item.scene_id for item in train_items})
    if not ids:
        return [], []
    n_labeled = min(len(ids), max(1, _round_half_up(label_ratio * len(ids))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    chosen = {ids[i] for i in perm[:n_labeled]}
    labeled = [it for it in train_items if it.scene_id in chosen]
    unlabeled = [it for it in train_items if it.scene_id not in chosen]
    return labeled, unlabeled


# ---------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    scenes: int = 40
    size: int = 1024
    channels: int = 3
    class_ratios: tuple[float, float, float, float] = FLOOD_CLASS_RATIOS
    building_coverage: float = 0.22
    building_min: int | None = None  # side length in pixels; default size // 32
    building_max: int | None = None  # default size // 10
    flood_fraction: float = 0.12

    def __post_init__(self):
        r = tuple(float(x) for x in self.class_ratios)
        # published percentages are rounded and may miss 100% by a few hundredths
        if len(r) != 4 or any(x < 0 for x in r) or not math.isclose(sum(r), 1.0, abs_tol=1e-3):
            raise ConfigError(f"class_ratios must be 4 non-negative values summing to 1, got {r}")
        r = tuple(x / sum(r) for x in r)
        object.__setattr__(self, "class_ratios", r)
        if self.scenes < 1:
            raise ConfigError("scenes must be at least 1")
        if self.size < 16:
            raise ConfigError("size must be at least 16 pixels")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        damaged = 1.0 - r[0]
        if not 0 < self.building_coverage < 1 or damaged > 0.9 * self.building_coverage:
            raise ConfigError(
                f"building_coverage {self.building_coverage} cannot host damaged fraction {damaged:.4f}"
            )
        lo, hi = self.side_range
        if not 2 <= lo <= hi < self.size // 2:
            raise ConfigError(f"building side range {lo}..{hi} invalid for size {self.size}")
        total = self.scenes * self.size * self.size
        for c in (1, 2, 3):
            if 0 < r[c] * total < lo * lo:
                raise ConfigError(
                    f"class_ratios[{c}]={r[c]} needs {r[c] * total:.0f} pixels over the whole set, "
                    f"less than one building ({lo * lo} px); add scenes or enlarge them"
                )

    @property
    def side_range(self) -> tuple[int, int]:
        lo = self.building_min if self.building_min is not None else max(3, self.size // 32)
        hi = self.building_max if self.building_max is not None else max(lo, self.size // 10)
        return lo, hi


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear-upsampled random grid in [0, 1]."""
    grid = rng.random((cells + 1, cells + 1))
    x = np.linspace(0, cells, size, endpoint=False)
    i = x.astype(int)
    f = x - i
    rows = grid[i] * (1 - f)[:, None] + grid[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _layout(rng: np.random.Generator, cfg: SynthConfig) -> list[tuple[int, int, int, int]]:
    """Non-overlapping axis-aligned rectangles (r, c, h, w) with a 2 px gap."""
    size = cfg.size
    lo, hi = cfg.side_range
    occupied = np.zeros((size, size), dtype=bool)
    target = cfg.building_coverage * size * size
    covered = 0
    rects = []
    for _ in range(50 * max(1, int(target // (lo * lo)))):
        if covered >= target:
            break
        h, w = rng.integers(lo, hi + 1, size=2)
        r = int(rng.integers(1, size - h))
        c = int(rng.integers(1, size - w))
        if occupied[max(r - 2, 0):r + h + 2, max(c - 2, 0):c + w + 2].any():
            continue
        occupied[r:r + h, c:c + w] = True
        rects.append((r, c, int(h), int(w)))
        covered += h * w
    return rects


def _assign_classes(rects, counts: np.ndarray, total_pixels: int, ratios) -> list[int]:
    """Greedy class choice keeping cumulative pixel shares on target."""
    out = []
    for (_, _, h, w) in rects:
        area = h * w
        deficits = [ratios[c] * total_pixels - counts[c] for c in (1, 2, 3)]
        best = int(np.argmax(deficits))
        cls = best + 1 if deficits[best] >= area / 2 else 0
        counts[cls] += area
        out.append(cls)
    return out


def _render(rng: np.random.Generator, cfg: SynthConfig, rects, classes, label: np.ndarray):
    size, C = cfg.size, cfg.channels
    base = np.array([96.0, 112.0, 72.0])[:C] if C == 3 else np.array([100.0])
    low = _smooth_noise(rng, size, 8)
    mid = _smooth_noise(rng, size, 32)
    pre = base[:, None, None] + 40.0 * (low - 0.5) + 20.0 * (mid - 0.5)
    pre = pre + rng.normal(0.0, 4.0, size=(C, size, size))

    roofs = []
    for (r, c, h, w) in rects:
        roof = rng.uniform(150, 225) + rng.uniform(-15, 15, size=C)
        patch = roof[:, None, None] + rng.normal(0.0, 5.0, size=(C, h, w))
        pre[:, r:r + h, c:c + w] = patch
        roofs.append(roof)
    pre = np.clip(np.rint(pre), 0, 255).astype(np.uint8)
    post = pre.astype(np.float64)

    # flood water over part of the open ground; buildings are handled below
    if cfg.flood_fraction > 0:
        water = _smooth_noise(rng, size, 6) < cfg.flood_fraction
        water &= label == 0
        for (r, c, h, w) in rects:
            water[r:r + h, c:c + w] = False
        tint = np.array([70.0, 80.0, 95.0])[:C] if C == 3 else np.array([80.0])
        post[:, water] = tint[:, None] + rng.normal(0.0, 3.0, size=(C, int(water.sum())))

    mud = np.array([120.0, 100.0, 70.0])[:C] if C == 3 else np.array([100.0])
    for (r, c, h, w), cls in zip(rects, classes):
        if cls == 0:
            continue
        region = post[:, r:r + h, c:c + w]
        strength = (0.2, 0.45, 0.75)[cls - 1]
        noise = rng.normal(0.0, 12.0 * cls, size=region.shape)
        region[:] = (1 - strength) * region + strength * mud[:, None, None] + noise
        band = min(cls - 1, (min(h, w) - 1) // 2)
        if band > 0:
            ring = np.ones((h, w), dtype=bool)
            ring[band:h - band, band:w - band] = False
            region[:, ring] = mud[:, None] * 0.8 + rng.normal(0.0, 6.0, size=(C, int(ring.sum())))
    post = np.clip(np.rint(post), 0, 255).astype(np.uint8)

    # every damaged building pixel must change
    damaged = label > 0
    same = damaged & (post == pre).all(axis=0)
    if same.any():
        ch0 = post[0]
        ch0[same] = np.where(pre[0][same] < 255, pre[0][same] + 1, pre[0][same] - 1)
    return pre, post


def iter_synthetic(config: SynthConfig = SynthConfig(), seed: int = 0, render: bool = True) -> Iterator[ScenePair]:
    """Yield synthetic scenes one at a time.

    Layouts and labels come from a random stream independent of the
    rendering stream, so ``render=False`` yields the same labels with
    empty image rasters (useful for cheap ratio audits).
    """
    root = np.random.SeedSequence(seed)
    counts = np.zeros(4)
    total = 0
    for i, child in enumerate(root.spawn(config.scenes)):
        layout_seq, render_seq = child.spawn(2)
        rects = _layout(np.random.default_rng(layout_seq), config)
        total += config.size * config.size
        classes = _assign_classes(rects, counts, total, config.class_ratios)
        label = np.zeros((config.size, config.size), dtype=np.uint8)
        for (r, c, h, w), cls in zip(rects, classes):
            label[r:r + h, c:c + w] = cls
        if render:
            pre, post = _render(np.random.default_rng(render_seq), config, rects, classes, label)
        else:
            pre = post = np.zeros((config.channels, config.size, config.size), dtype=np.uint8)
        yield ScenePair(pre, post, label, f"synth_{seed}_{i:05d}")


def generate_synthetic(config: SynthConfig = SynthConfig(), seed: int = 0) -> list[ScenePair]:
    return list(iter_synthetic(config, seed))


def class_ratios(labels) -> np.ndarray:
    """Pixel share of each class over one or many label rasters."""
    counts = np.zeros(4, dtype=np.int64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=4)[:4]
    return counts / counts.sum()


def dataset_digest(scenes: Sequence[ScenePair]) -> str:
    h = hashlib.sha256()
    for s in scenes:
        h.update(s.scene_id.encode())
        h.update(s.digest().encode())
    return h.hexdigest()


# ---------------------------------------------------------------- disk layout


def _to_image(arr: np.ndarray) -> Image.Image:
    if arr.ndim == 2:
        return Image.fromarray(arr, mode="L")
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    if arr.shape[0] == 3:
        return Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB")
    raise DataError(f"cannot store {arr.shape[0]}-channel raster as PNG")


def write_scene_dir(root: str | Path, scenes: Sequence[ScenePair], generator: dict | None = None) -> dict:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in scenes:
        d = root / s.scene_id
        d.mkdir(exist_ok=True)
        _to_image(s.pre).save(d / "pre.png")
        _to_image(s.post).save(d / "post.png")
        _to_image(s.label).save(d / "label.png")
        entries.append({"scene_id": s.scene_id, "digest": s.digest(), "shape": list(s.pre.shape)})
    manifest = {"scenes": entries, "digest": dataset_digest(scenes), "generator": generator}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def _read_png(path: Path, channels: int | None) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit raster, got {arr.dtype}")
    if channels is None:
        return arr
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] == 4:
        arr = arr[:3]
    return np.ascontiguousarray(arr)


def load_scene_dir(path: str | Path, strict: bool = True) -> list[ScenePair]:
    """Load every scene folder under ``path``, sorted by scene id.

    Malformed scenes raise :class:`DataError` naming the scene in strict
    mode, and are logged and skipped otherwise.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: dataset directory not found")
    scenes = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            missing = [n for n in ("pre.png", "post.png", "label.png") if not (d / n).is_file()]
            if missing:
                raise DataError(f"{d.name}: missing {', '.join(missing)}")
            pre = _read_png(d / "pre.png", 3)
            post = _read_png(d / "post.png", 3)
            label = _read_png(d / "label.png", None)
            if label.ndim != 2:
                raise DataError(f"{d.name}: label.png must be single-channel")
            scenes.append(ScenePair(pre, post, label, d.name))
        except DataError as exc:
            msg = str(exc) if str(exc).startswith(d.name) else f"{d.name}: {exc}"
            if strict:
                raise DataError(msg) from None
            log.warning("skipping scene %s", msg)
    if not scenes:
        log.warning("no scenes found under %s", root)
    return scenes


def synth_config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
