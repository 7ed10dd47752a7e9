"""
Desk-scale source/target tasks.

A task pair is materialized once under TaskPairSettings.data_dir:

    pair-<hash>/
        pair.json               shift descriptor + both manifests' names
        source/manifest.json    DatasetManifest (JSON)
        source/train.bin        float32 LE images [n, C, H, W], then int32 LE labels [n]
        source/eval.bin
        target/...

Images are stored raw in [0, 1]; normalization constants (train-split
per-channel mean/std) live in the manifest and are applied at load time.

Synthetic classes come from parametric generators (shape, colours,
orientation, texture frequency) keyed by (seed, generator_id). The target
task reuses round(overlap * K) source generator ids and draws fresh ids for
the rest, then applies its appearance shift (hue rotation, elastic warp).
"""

import hashlib
import json
import logging
import queue
import threading
from pathlib import Path
from typing import Any, Iterator, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from adafilter_config import TaskPairSettings, stable_hash
from adafilter_errors import DatasetError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "adafilter.dataset/1"
SPLITS = ("train", "eval")
SHAPES = ("disk", "square", "ring", "cross", "stripes", "checker", "triangle", "diamond")
_ROLE_CODES = {"source": 1, "target": 2, "ingested": 3}
_SPLIT_CODES = {"train": 11, "eval": 12}


# ============================================================================
# Manifest models
# ============================================================================

class SplitInfo(BaseModel):
    file: str
    count: int = Field(..., ge=1)
    per_class: list[int]
    sha256: str


class GeneratorInfo(BaseModel):
    """How a synthetic split was produced; enough to regenerate it bit-for-bit."""
    role: Literal["source", "target"]
    generator_ids: list[int]
    hue_shift: float = 0.0
    warp_strength: float = 0.0
    noise: float = 0.05


class DatasetManifest(BaseModel):
    format: str = DATASET_FORMAT
    name: str
    image_shape: tuple[int, int, int]
    num_classes: int = Field(..., ge=1)
    splits: dict[str, SplitInfo]
    normalization_mean: list[float]
    normalization_std: list[float]
    seed: int = 0
    generator: Optional[GeneratorInfo] = None
    path: Optional[str] = Field(None, exclude=True, description="Directory the manifest was read from.")

    @property
    def directory(self) -> Path:
        if self.path is None:
            raise DatasetError(f"Manifest '{self.name}' is not bound to a directory")
        return Path(self.path)


class TransferTaskPair(BaseModel):
    source: DatasetManifest
    target: DatasetManifest
    shift: dict[str, Any]
    path: Optional[str] = None


# ============================================================================
# Synthetic generators
# ============================================================================

def _class_template(seed: int, generator_id: int) -> dict[str, Any]:
    rng = np.random.default_rng([seed, generator_id, 0x7E3])
    fg = rng.uniform(0.2, 0.95, 3)
    bg = (fg + rng.uniform(0.35, 0.65, 3)) % 1.0
    return {
        "kind": SHAPES[generator_id % len(SHAPES)],
        "fg": fg,
        "bg": bg,
        "size": rng.uniform(0.45, 0.7),
        "angle": rng.uniform(0.0, np.pi),
        "freq": rng.uniform(2.0, 4.5),
    }


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, size: float, freq: float) -> np.ndarray:
    r = np.sqrt(u ** 2 + v ** 2)
    box = np.maximum(np.abs(u), np.abs(v))
    if kind == "disk":
        return r < size
    if kind == "square":
        return box < size * 0.85
    if kind == "ring":
        return np.abs(r - size * 0.8) < 0.16
    if kind == "cross":
        return ((np.abs(u) < 0.18) | (np.abs(v) < 0.18)) & (box < size)
    if kind == "stripes":
        return (np.sin(freq * np.pi * u) > 0) & (r < size * 1.2)
    if kind == "checker":
        return (np.sin(freq * np.pi * u) * np.sin(freq * np.pi * v) > 0) & (box < size)
    if kind == "triangle":
        return (v > -size * 0.6) & (np.abs(u) < (size - v) * 0.6)
    return np.abs(u) + np.abs(v) < size


def render_example(template: dict[str, Any], rng: np.random.Generator, size: int, channels: int,
                   noise: float) -> np.ndarray:
    """One [C, size, size] image in [0, 1] drawn from a class template."""
    coords = np.linspace(-1.0, 1.0, size)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, 2)
    theta = template["angle"] + rng.normal(0.0, 0.2)
    scale = template["size"] * rng.uniform(0.85, 1.15)
    x0, y0 = xs - cx, ys - cy
    u = np.cos(theta) * x0 + np.sin(theta) * y0
    v = -np.sin(theta) * x0 + np.cos(theta) * y0
    mask = _shape_mask(template["kind"], u, v, scale, template["freq"]).astype(np.float64)
    fg = template["fg"] * rng.uniform(0.9, 1.1)
    bg = template["bg"]
    if channels == 1:
        fg, bg = fg.mean(keepdims=True), bg.mean(keepdims=True)
    else:
        fg, bg = fg[:channels], bg[:channels]
    image = bg[:, None, None] * (1.0 - mask) + fg[:, None, None] * mask
    image = image + noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0)


def hue_rotate(images: np.ndarray, shift: float) -> np.ndarray:
    """Rotate RGB colours about the grey axis by shift * 360 degrees."""
    if shift == 0.0 or images.shape[1] != 3:
        return images
    angle = 2.0 * np.pi * shift
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    cross = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
    rotation = cos_a * np.eye(3) + (1.0 - cos_a) / 3.0 * np.ones((3, 3)) + np.sqrt(1.0 / 3.0) * sin_a * cross
    return np.clip(np.einsum("ij,njhw->nihw", rotation, images), 0.0, 1.0)


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    src = np.linspace(0.0, coarse.shape[0] - 1, size)
    rows = np.stack([np.interp(src, np.arange(coarse.shape[1]), row) for row in coarse])
    return np.stack([np.interp(src, np.arange(coarse.shape[0]), col) for col in rows.T], axis=1)


def elastic_warp(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Bilinear resampling of [C, H, W] along a smooth random displacement field (pixels)."""
    if strength == 0.0:
        return image
    _, h, w = image.shape
    dy = _upsample(rng.normal(0.0, strength, (4, 4)), h)
    dx = _upsample(rng.normal(0.0, strength, (4, 4)), w)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy = np.clip(ys + dy, 0, h - 1)
    sx = np.clip(xs + dx, 0, w - 1)
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = sy - y0, sx - x0
    top = image[:, y0, x0] * (1 - wx) + image[:, y0, x1] * wx
    bottom = image[:, y1, x0] * (1 - wx) + image[:, y1, x1] * wx
    return top * (1 - wy) + bottom * wy


def target_generator_ids(num_classes: int, overlap: float) -> list[int]:
    """First round(overlap*K) ids are shared with the source (0..K-1); the rest are fresh (K, K+1, ...)."""
    shared = int(round(overlap * num_classes))
    return list(range(shared)) + list(range(num_classes, num_classes + num_classes - shared))


def generate_split(seed: int, generator: GeneratorInfo, split: str, per_class: int, size: int,
                   channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Images [K*per_class, C, H, W] float32 (class-major order) and int32 labels."""
    role = _ROLE_CODES[generator.role]
    images, labels = [], []
    for label, generator_id in enumerate(generator.generator_ids):
        template = _class_template(seed, generator_id)
        rng = np.random.default_rng([seed, role, _SPLIT_CODES[split], label])
        for _ in range(per_class):
            image = render_example(template, rng, size, channels, generator.noise)
            images.append(elastic_warp(image, generator.warp_strength, rng))
            labels.append(label)
    stacked = hue_rotate(np.stack(images), generator.hue_shift)
    return stacked.astype(np.float32), np.asarray(labels, dtype=np.int32)


# ============================================================================
# On-disk format
# ============================================================================

def _split_bytes(images: np.ndarray, labels: np.ndarray) -> bytes:
    return images.astype("<f4").tobytes() + labels.astype("<i4").tobytes()


def _channel_moments(images: np.ndarray) -> tuple[list[float], list[float]]:
    mean = images.astype(np.float64).mean(axis=(0, 2, 3))
    std = np.maximum(images.astype(np.float64).std(axis=(0, 2, 3)), 1e-6)
    return mean.tolist(), std.tolist()


def write_dataset(out_dir: Union[str, Path], name: str, splits: dict[str, tuple[np.ndarray, np.ndarray]],
                  num_classes: int, seed: int = 0, generator: Optional[GeneratorInfo] = None) -> DatasetManifest:
    """Write split files plus manifest.json; normalization comes from the train split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    infos = {}
    shape = None
    for split, (images, labels) in splits.items():
        if len(labels) == 0:
            raise DatasetError(f"Dataset '{name}': split '{split}' is empty")
        shape = tuple(int(d) for d in images.shape[1:])
        blob = _split_bytes(images, labels)
        file_name = f"{split}.bin"
        (out / file_name).write_bytes(blob)
        infos[split] = SplitInfo(
            file=file_name,
            count=len(labels),
            per_class=np.bincount(labels, minlength=num_classes).astype(int).tolist(),
            sha256=hashlib.sha256(blob).hexdigest(),
        )
    mean, std = _channel_moments(splits["train"][0])
    manifest = DatasetManifest(name=name, image_shape=shape, num_classes=num_classes, splits=infos,
                               normalization_mean=mean, normalization_std=std, seed=seed,
                               generator=generator, path=str(out))
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    logger.debug(f"Wrote dataset '{name}' to {out} ({', '.join(f'{k}={v.count}' for k, v in infos.items())})")
    return manifest


def read_manifest(directory: Union[str, Path]) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"Dataset manifest not found: {path}")
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DatasetError(f"Dataset manifest {path} is invalid: {e.errors()[0].get('msg')}") from e
    if manifest.format != DATASET_FORMAT:
        raise DatasetError(f"{path}: unsupported dataset format {manifest.format!r}")
    return manifest.model_copy(update={"path": str(Path(directory))})


def read_split(manifest: DatasetManifest, split: str, verify_checksum: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Raw images [n, C, H, W] float32 and int64 labels for one split."""
    if split not in manifest.splits:
        raise DatasetError(f"Dataset '{manifest.name}' has no split '{split}'")
    info = manifest.splits[split]
    path = manifest.directory / info.file
    if not path.is_file():
        raise DatasetError(f"Dataset file missing: {path}")
    blob = path.read_bytes()
    if verify_checksum and hashlib.sha256(blob).hexdigest() != info.sha256:
        raise DatasetError(f"Checksum mismatch for {path}; regenerate or re-import the dataset")
    c, h, w = manifest.image_shape
    n_values = info.count * c * h * w
    if len(blob) != n_values * 4 + info.count * 4:
        raise DatasetError(f"{path} holds {len(blob)} bytes, expected {n_values * 4 + info.count * 4}")
    images = np.frombuffer(blob, dtype="<f4", count=n_values).reshape(info.count, c, h, w)
    labels = np.frombuffer(blob, dtype="<i4", count=info.count, offset=n_values * 4).astype(np.int64)
    return images.astype(np.float32), labels


# ============================================================================
# Task pairs
# ============================================================================

def _check_shift(shift: TaskPairSettings) -> None:
    if shift.num_classes < 1:
        raise DatasetError("Task pair needs at least one class")
    counts = [shift.source_train_per_class, shift.source_eval_per_class,
              shift.target_train_per_class, shift.target_eval_per_class]
    if min(counts) < 1:
        raise DatasetError(f"Task pair has an empty split (per-class counts {counts})")
    if not 0.0 <= shift.overlap <= 1.0:
        raise DatasetError(f"overlap must lie in [0, 1], got {shift.overlap}")


def synth_task_generate(seed: int, shift: TaskPairSettings, out_dir: Union[str, Path]) -> TransferTaskPair:
    """Materialize a synthetic source/target pair; identical bytes for identical (seed, shift)."""
    _check_shift(shift)
    out = Path(out_dir)
    k = shift.num_classes
    size, channels = shift.image_size, shift.channels
    source_gen = GeneratorInfo(role="source", generator_ids=list(range(k)), noise=shift.noise)
    target_gen = GeneratorInfo(role="target", generator_ids=target_generator_ids(k, shift.overlap),
                               hue_shift=shift.hue_shift, warp_strength=shift.warp_strength, noise=shift.noise)
    manifests = {}
    for role, gen, (n_train, n_eval) in (
        ("source", source_gen, (shift.source_train_per_class, shift.source_eval_per_class)),
        ("target", target_gen, (shift.target_train_per_class, shift.target_eval_per_class)),
    ):
        splits = {
            "train": generate_split(seed, gen, "train", n_train, size, channels),
            "eval": generate_split(seed, gen, "eval", n_eval, size, channels),
        }
        manifests[role] = write_dataset(out / role, f"synthetic-{role}", splits, k, seed, gen)
    descriptor = shift.model_dump(mode="json", exclude={"data_dir", "source_path", "target_path"})
    descriptor["seed"] = seed
    pair = TransferTaskPair(source=manifests["source"], target=manifests["target"], shift=descriptor, path=str(out))
    (out / "pair.json").write_text(json.dumps(descriptor, indent=2, sort_keys=True))
    logger.info(f"Generated task pair in {out}: {k} classes, overlap {shift.overlap}, "
                f"{len(set(source_gen.generator_ids) & set(target_gen.generator_ids))} shared generators")
    return pair


def pair_directory(settings: TaskPairSettings) -> Path:
    return Path(settings.data_dir) / f"pair-{stable_hash(settings.model_dump(mode='json', exclude={'data_dir'}))}"


def resolve_task_pair(settings: TaskPairSettings) -> TransferTaskPair:
    """Explicit dataset paths when given, otherwise the cached (or freshly generated) synthetic pair."""
    if settings.source_path or settings.target_path:
        if not (settings.source_path and settings.target_path):
            raise DatasetError("Both task.source_path and task.target_path are required for ingested datasets")
        source, target = read_manifest(settings.source_path), read_manifest(settings.target_path)
        return TransferTaskPair(source=source, target=target, shift={"ingested": True})
    directory = pair_directory(settings)
    if (directory / "source" / "manifest.json").is_file() and (directory / "target" / "manifest.json").is_file():
        logger.debug(f"Reusing task pair at {directory}")
        descriptor = json.loads((directory / "pair.json").read_text()) if (directory / "pair.json").is_file() else {}
        return TransferTaskPair(source=read_manifest(directory / "source"), target=read_manifest(directory / "target"),
                                shift=descriptor, path=str(directory))
    return synth_task_generate(settings.seed, settings, directory)


# ============================================================================
# Verification and ingestion
# ============================================================================

class VerifyReport(BaseModel):
    name: str
    ok: bool
    problems: list[str] = Field(default_factory=list)
    counts: dict[str, int] = Field(default_factory=dict)
    per_class: dict[str, list[int]] = Field(default_factory=dict)
    disjoint: Optional[bool] = None
    regenerated: Optional[bool] = None

    def format(self) -> str:
        status = "OK" if self.ok else "FAILED"
        lines = [f"Dataset '{self.name}': {status}"]
        for split, count in self.counts.items():
            lines.append(f"  {split}: {count} examples, per class {self.per_class.get(split)}")
        if self.disjoint is not None:
            lines.append(f"  train/eval disjoint: {self.disjoint}")
        if self.regenerated is not None:
            lines.append(f"  regeneration matches: {self.regenerated}")
        lines.extend(f"  problem: {p}" for p in self.problems)
        return "\n".join(lines)


def _example_hashes(images: np.ndarray) -> set[str]:
    return {hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest() for img in images}


def verify_dataset(directory: Union[str, Path], regenerate: bool = True) -> VerifyReport:
    """Checksums, declared sizes and per-class counts, split disjointness and (synthetic) regeneration."""
    manifest = read_manifest(directory)
    report = VerifyReport(name=manifest.name, ok=True)
    loaded = {}
    for split, info in manifest.splits.items():
        try:
            images, labels = read_split(manifest, split)
        except DatasetError as e:
            report.problems.append(str(e))
            continue
        loaded[split] = (images, labels)
        per_class = np.bincount(labels, minlength=manifest.num_classes).astype(int).tolist()
        report.counts[split] = len(labels)
        report.per_class[split] = per_class
        if per_class != info.per_class:
            report.problems.append(f"{split}: per-class counts {per_class} differ from manifest {info.per_class}")
        if labels.size and (labels.min() < 0 or labels.max() >= manifest.num_classes):
            report.problems.append(f"{split}: labels outside [0, {manifest.num_classes})")
    if "train" in loaded and "eval" in loaded:
        overlap = _example_hashes(loaded["train"][0]) & _example_hashes(loaded["eval"][0])
        report.disjoint = not overlap
        if overlap:
            report.problems.append(f"{len(overlap)} eval examples also appear in train")
    if regenerate and manifest.generator is not None:
        c, h, _ = manifest.image_shape
        matches = True
        for split, info in manifest.splits.items():
            per_class = info.per_class[0] if info.per_class else 0
            images, labels = generate_split(manifest.seed, manifest.generator, split, per_class, h, c)
            if hashlib.sha256(_split_bytes(images, labels)).hexdigest() != info.sha256:
                matches = False
                report.problems.append(f"{split}: regenerating from seed {manifest.seed} gives different content")
        report.regenerated = matches
    report.ok = not report.problems
    return report


def ingest_arrays(name: str, images: np.ndarray, labels: np.ndarray, out_dir: Union[str, Path],
                  eval_fraction: float = 0.2, seed: int = 0) -> DatasetManifest:
    """Stratified train/eval split of a small labelled image set into the on-disk format."""
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DatasetError(f"Expected images [N, C, H, W], got shape {images.shape}")
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) == 0:
        raise DatasetError("No examples to ingest")
    if labels.min() < 0:
        raise DatasetError("Labels must be nonnegative class ids")
    if not 0.0 < eval_fraction < 1.0:
        raise DatasetError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    if np.issubdtype(images.dtype, np.integer):
        images = images.astype(np.float32) / 255.0
    images = images.astype(np.float32)
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng([seed, _ROLE_CODES["ingested"]])
    train_idx, eval_idx = [], []
    for label in range(num_classes):
        members = np.flatnonzero(labels == label)
        if len(members) < 2:
            raise DatasetError(f"Class {label} has {len(members)} examples; each class needs at least 2")
        members = rng.permutation(members)
        n_eval = min(max(1, int(round(eval_fraction * len(members)))), len(members) - 1)
        eval_idx.extend(members[:n_eval].tolist())
        train_idx.extend(members[n_eval:].tolist())
    train_idx, eval_idx = np.sort(train_idx), np.sort(eval_idx)
    splits = {
        "train": (images[train_idx], labels[train_idx].astype(np.int32)),
        "eval": (images[eval_idx], labels[eval_idx].astype(np.int32)),
    }
    return write_dataset(out_dir, name, splits, num_classes, seed)


def ingest_npz(path: Union[str, Path], out_dir: Union[str, Path], name: Optional[str] = None,
               eval_fraction: float = 0.2, seed: int = 0) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Archive not found: {path}")
    with np.load(path) as archive:
        missing = {"images", "labels"} - set(archive.files)
        if missing:
            raise DatasetError(f"{path} lacks arrays {sorted(missing)} (needs 'images' and 'labels')")
        images, labels = archive["images"], archive["labels"]
    return ingest_arrays(name or path.stem, images, labels, out_dir, eval_fraction, seed)


# ============================================================================
# Batch streams
# ============================================================================

_END = object()


class BatchStream:
    """
    Normalized (images, labels) batches for one split.

    epoch(e) shuffles with a generator seeded by (seed, e), applies the
    optional flip/crop augmentation and keeps the final partial batch.
    epoch_fixed() yields the split in stored order without augmentation.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int, batch_size: int, seed: int = 0,
                 shuffle: bool = True, flip: bool = False, crop_padding: int = 0, prefetch: bool = False,
                 prefetch_depth: int = 4, dtype=np.float32, name: str = "stream"):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.images = images.astype(dtype)
        self.labels = labels.astype(np.int64)
        self.num_classes = num_classes
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.flip = flip
        self.crop_padding = crop_padding
        self.prefetch = prefetch
        self.prefetch_depth = prefetch_depth
        self.name = name

    @property
    def size(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return -(-self.size // self.batch_size)

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return self.epoch(0)

    def _augment(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.flip:
            flips = rng.random(len(images)) < 0.5
            images = np.where(flips[:, None, None, None], images[..., ::-1], images)
        if self.crop_padding:
            p = self.crop_padding
            padded = np.pad(images, ((0, 0), (0, 0), (p, p), (p, p)))
            h, w = images.shape[2:]
            offsets = rng.integers(0, 2 * p + 1, size=(len(images), 2))
            images = np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)])
        return images

    def _batches(self, epoch: Optional[int]) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if epoch is None:
            order, rng = np.arange(self.size), None
        else:
            rng = np.random.default_rng([self.seed, epoch])
            order = rng.permutation(self.size) if self.shuffle else np.arange(self.size)
        for start in range(0, self.size, self.batch_size):
            idx = order[start:start + self.batch_size]
            images = self.images[idx]
            if rng is not None:
                images = self._augment(images, rng)
            yield np.ascontiguousarray(images), self.labels[idx]

    def _prefetched(self, source: Iterator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Produce batches on a background thread through a bounded queue (order unchanged)."""
        buffer: queue.Queue = queue.Queue(maxsize=self.prefetch_depth)
        stop = threading.Event()

        def put(item) -> bool:
            # False once the consumer has stopped.
            while not stop.is_set():
                try:
                    buffer.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce() -> None:
            try:
                for item in source:
                    if not put(item):
                        return
                put(_END)
            except BaseException as e:  # forwarded to the consumer
                put(e)

        worker = threading.Thread(target=produce, name=f"prefetch-{self.name}", daemon=True)
        worker.start()
        try:
            while True:
                item = buffer.get()
                if item is _END:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join(timeout=1.0)

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        batches = self._batches(epoch)
        return self._prefetched(batches) if self.prefetch else batches

    def epoch_fixed(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        batches = self._batches(None)
        return self._prefetched(batches) if self.prefetch else batches


def normalize(images: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    mean = np.asarray(manifest.normalization_mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(manifest.normalization_std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images.astype(np.float64) - mean) / std)


def load_dataset(manifest: Union[DatasetManifest, str, Path], split: str, batch_size: int, seed: int = 0,
                 shuffle: Optional[bool] = None, flip: bool = False, crop_padding: int = 0,
                 prefetch: bool = False, dtype=np.float32) -> BatchStream:
    """
    Checksum-verified, normalized batch stream for one split.

    Train splits shuffle by default; eval splits keep stored order.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    images, labels = read_split(manifest, split)
    return BatchStream(
        normalize(images, manifest), labels, manifest.num_classes, batch_size, seed,
        shuffle=(split == "train") if shuffle is None else shuffle,
        flip=flip, crop_padding=crop_padding, prefetch=prefetch, dtype=dtype,
        name=f"{manifest.name}-{split}",
    )
