"""File formats, dataset manifests, augmentation, batching and synthetic data.

TensorFile layout (all little-endian)::

    magic "VLXT" | version u8 = 1 | dtype u8 (0 f32, 1 f64) | rank u8 | reserved u8 = 0
    extents: rank x u32 | payload: row-major scalars

Checkpoint layout::

    magic "VLXC" | version u8 = 1 | model id (u16 len + UTF-8) | preset (u16 len + UTF-8)
    entry count u32 | entries: name (u16 len + UTF-8) + embedded TensorFile
"""

from __future__ import annotations

import colorsys
import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"VLXT"
CHECKPOINT_MAGIC = b"VLXC"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

SAMPLE_SHAPE = (3, 256, 256)
CROP = 224
SPLITS = ("train", "val", "test")


# -- tensor files ---------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    dt = np.dtype(t.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise DataError(f"cannot serialize dtype {t.dtype}")
    if not 1 <= t.ndim <= 4:
        raise DataError(f"rank must be 1-4, got {t.ndim}")
    header = TENSOR_MAGIC + struct.pack("<BBBB", VERSION, _DTYPE_CODES[dt], t.ndim, 0)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype=dt).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TensorFile at ``offset``; returns the tensor and the end offset."""
    if len(buf) - offset < 8:
        raise DataError(f"truncated tensor header at byte {offset}")
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {buf[offset:offset + 4]!r} at byte {offset}")
    version, code, rank, reserved = struct.unpack_from("<BBBB", buf, offset + 4)
    if version != VERSION:
        raise DataError(f"unsupported tensor version {version} at byte {offset + 4}")
    if code not in _CODE_DTYPES:
        raise DataError(f"unknown dtype code {code} at byte {offset + 5}")
    if not 1 <= rank <= 4:
        raise DataError(f"invalid rank {rank} at byte {offset + 6}")
    if reserved != 0:
        raise DataError(f"reserved byte must be 0 at byte {offset + 7}")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise DataError(f"truncated extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    if 0 in shape:
        raise DataError(f"zero extent in {shape} at byte {offset + 8}")
    dt = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(buf) - pos < nbytes:
        raise DataError(f"truncated payload at byte {pos}: need {nbytes}, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing tensor file {path}") from None
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after payload at byte {end}")
    return arr


# -- checkpoints ----------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError("string too long for u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    if len(buf) - pos < 2:
        raise DataError(f"truncated string length at byte {pos}")
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if len(buf) - pos < n:
        raise DataError(f"truncated string at byte {pos}")
    try:
        return buf[pos:pos + n].decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise DataError(f"invalid UTF-8 at byte {pos}") from exc


def checkpoint_to_bytes(model_id: str, preset: str, entries: dict[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<B", VERSION), _pack_str(model_id), _pack_str(preset),
           struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        out.append(_pack_str(name))
        out.append(tensor_to_bytes(arr))
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes) -> tuple[str, str, dict[str, np.ndarray]]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    if len(buf) < 5 or buf[4] != VERSION:
        raise DataError("unsupported checkpoint version at byte 4")
    model_id, pos = _unpack_str(buf, 5)
    preset, pos = _unpack_str(buf, pos)
    if len(buf) - pos < 4:
        raise DataError(f"truncated entry count at byte {pos}")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    entries = {}
    for _ in range(count):
        name, pos = _unpack_str(buf, pos)
        entries[name], pos = tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise DataError(f"trailing bytes after checkpoint entries at byte {pos}")
    return model_id, preset, entries


def save_checkpoint(path, model) -> None:
    """Write all parameters and normalization buffers of ``model``."""
    Path(path).write_bytes(checkpoint_to_bytes(model.graph.model_id(), model.graph.preset,
                                               model.state_dict()))


def load_checkpoint(path):
    """Rebuild the model described by a checkpoint and restore its state."""
    from .models import Model, graph_from_id

    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {path}") from None
    model_id, preset, entries = checkpoint_from_bytes(buf)
    graph = graph_from_id(model_id, preset)
    dtype = next(iter(entries.values())).dtype if entries else np.float32
    model = Model(graph, dtype=dtype)
    model.load_state_dict(entries)
    return model


# -- manifests ------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int, str]]
    mean: np.ndarray
    std: np.ndarray

    @property
    def classes(self) -> int:
        return max(label for _, label, _ in self.entries) + 1

    def split(self, name: str) -> list[tuple[str, int]]:
        return [(p, label) for p, label, s in self.entries if s == name]

    def has_split(self, name: str) -> bool:
        return any(s == name for _, _, s in self.entries)


def write_manifest(root, entries, mean, std) -> DatasetManifest:
    root = Path(root)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        w.writerows(entries)
    with open(root / "stats.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "mean", "std"])
        for c in range(3):
            w.writerow([c, repr(float(mean[c])), repr(float(std[c]))])
    return DatasetManifest(root, list(entries), np.asarray(mean, np.float64), np.asarray(std, np.float64))


def _read_csv(path: Path, header: list[str]) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != header:
                raise DataError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
            return list(reader)
    except FileNotFoundError:
        raise DataError(f"missing {path}") from None


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    entries = []
    for i, row in enumerate(_read_csv(root / "manifest.csv", ["path", "label", "split"]), start=2):
        try:
            label = int(row["label"])
        except ValueError:
            raise DataError(f"manifest.csv line {i}: label {row['label']!r} is not an integer") from None
        if row["split"] not in SPLITS:
            raise DataError(f"manifest.csv line {i}: split {row['split']!r} not in {SPLITS}")
        if label < 0:
            raise DataError(f"manifest.csv line {i}: negative label")
        entries.append((row["path"], label, row["split"]))
    if not entries:
        raise DataError(f"{root / 'manifest.csv'} has no rows")
    labels = {label for _, label, _ in entries}
    if labels != set(range(max(labels) + 1)):
        raise DataError(f"labels must be dense in [0, K); found {sorted(labels)}")
    stats = _read_csv(root / "stats.csv", ["channel", "mean", "std"])
    if [int(r["channel"]) for r in stats] != [0, 1, 2]:
        raise DataError("stats.csv must list channels 0, 1, 2")
    mean = np.array([float(r["mean"]) for r in stats])
    std = np.array([float(r["std"]) for r in stats])
    if not (std > 0).all():
        raise DataError("stats.csv: std must be positive per channel")
    return DatasetManifest(root, entries, mean, std)


def load_sample(manifest: DatasetManifest, rel_path: str) -> np.ndarray:
    path = manifest.root / rel_path
    if not path.is_file():
        raise DataError(f"missing sample file {path}")
    x = load_tensor(path)
    if x.shape != SAMPLE_SHAPE or x.dtype != np.float32:
        raise DataError(f"{path}: expected float32 {SAMPLE_SHAPE}, got {x.dtype} {x.shape}")
    return x


# -- augmentation and batching -------------------------------------------

def augment(sample: np.ndarray, mode: str, rng: np.random.Generator | None, mean, std,
            crop: int = CROP) -> np.ndarray:
    """Crop to ``crop`` x ``crop``, optionally flip, then normalize per channel.

    Train mode draws the crop offset uniformly and flips with probability
    0.5; eval mode takes the centre crop and never flips.
    """
    c, h, w = sample.shape
    if h < crop or w < crop:
        raise DataError(f"sample {h}x{w} smaller than crop {crop}")
    if mode == "train":
        oy = int(rng.integers(0, h - crop + 1))
        ox = int(rng.integers(0, w - crop + 1))
        flip = bool(rng.random() < 0.5)
    elif mode == "eval":
        oy, ox, flip = (h - crop) // 2, (w - crop) // 2, False
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = sample[:, oy:oy + crop, ox:ox + crop]
    if flip:
        out = out[:, :, ::-1]
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    return ((out - mean) / std).astype(np.float32)


def batches(manifest: DatasetManifest, split: str, batch_size: int = 32, shuffle: bool = False,
            rng: np.random.Generator | None = None, augment_mode: str = "eval"):
    """Yield ``(x, labels)`` covering ``split`` exactly once; the last batch may be short."""
    items = manifest.split(split)
    if not items:
        raise DataError(f"split {split!r} is empty or missing")
    order = np.arange(len(items))
    if shuffle:
        order = (rng if rng is not None else np.random.default_rng()).permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = [items[i] for i in order[start:start + batch_size]]
        x = np.stack([augment(load_sample(manifest, p), augment_mode, rng, manifest.mean, manifest.std)
                      for p, _ in chunk])
        yield x, np.array([label for _, label in chunk], dtype=np.int64)


# -- synthetic data -------------------------------------------------------

def class_color(k: int, classes: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(k / classes, 0.7, 0.6)
    return np.array([r, g, b], dtype=np.float32)


def synth_image(k: int, classes: int, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """Base colour of class ``k`` plus ``k`` bright axis-aligned rectangles plus noise."""
    c, h, w = SAMPLE_SHAPE
    img = np.broadcast_to(class_color(k, classes)[:, None, None], SAMPLE_SHAPE).copy()
    for _ in range(k):
        rh, rw = rng.integers(24, 72, size=2)
        y0, x0 = rng.integers(0, h - rh), rng.integers(0, w - rw)
        img[:, y0:y0 + rh, x0:x0 + rw] = 1.0
    img += rng.normal(0.0, noise, size=SAMPLE_SHAPE).astype(np.float32)
    return img.astype(np.float32)


def split_counts(per_class: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * per_class))
    n_val = int(round(0.1 * per_class))
    return n_train, n_val, per_class - n_train - n_val


def synth_dataset(out_dir, classes: int = 5, per_class: int = 8, seed: int = 0) -> DatasetManifest:
    """Write a class-separable dataset with an 80/10/10 split per class."""
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    n_train, n_val, _ = split_counts(per_class)
    entries = []
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for k in range(classes):
        for i in range(per_class):
            img = synth_image(k, classes, rng)
            rel = f"samples/c{k}_{i:04d}.vlxt"
            save_tensor(out / rel, img)
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            entries.append((rel, k, split))
            if split == "train":
                x = img.astype(np.float64)
                total += x.sum(axis=(1, 2))
                total_sq += (x * x).sum(axis=(1, 2))
                count += x.shape[1] * x.shape[2]
    mean = total / max(count, 1)
    std = np.sqrt(np.maximum(total_sq / max(count, 1) - mean ** 2, 0.0))
    std[std == 0] = 1.0
    return write_manifest(out, entries, mean, std)
