"""Samples, datasets, subset rules, image preparation and the dataset file.

Datasets are immutable; every operation returns a new one. Subsets are taken
before splitting.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import EmptyDatasetError, InvalidArgumentError, MalformedFileError, ShapeError
from src.io_schemas import SplitSpec
from src.stats import ANNOTATION_COLUMNS, AnnotationRecord, Records, as_frame
from src.tensor import Tensor, bytes_remaining, make_rng, read_tensor, write_tensor

DATASET_MAGIC = b"DSETv001"
# tensor magic, rank, one dim, one value, sample header, frame index
MIN_SAMPLE_BYTES = 8 + 4 + 4 + 8 + 4 + 4

Provenance = Literal["full", "reduced", "low", "high", "low_vs_high", "synthetic"]
Box = Tuple[int, int, int, int]  # top, left, height, width

# height x width
ALIGNED_SHAPE = (285, 378)
MOUTH_BOX_SIZE = (128, 104)
PART_SHAPES: Dict[str, Tuple[int, int]] = {"mouth": (85, 69), "face": (95, 121)}

# AU12 intensity marginal 0..5 over all annotated frames
DISFA_AU12_HISTOGRAM = (99996, 13942, 6868, 7233, 2577, 172)
DISFA_VIDEOS = 27
DISFA_FRAMES_PER_VIDEO = 4844
DISFA_NEUTRAL_FRAMES = 48612
# frames with the AU set, for every action unit except AU12
DISFA_OTHER_AU_COUNTS: Dict[str, int] = {
    "AU1": 8778,
    "AU2": 7364,
    "AU4": 24595,
    "AU5": 2729,
    "AU6": 19484,
    "AU9": 7132,
    "AU15": 7862,
    "AU17": 12930,
    "AU20": 4532,
    "AU25": 46052,
    "AU26": 24976,
}


@dataclass(frozen=True, eq=False)
class Sample:
    image: Tensor
    au12_intensity: int
    any_au_set: bool
    video_id: str
    frame_index: int
    label: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.au12_intensity <= 5:
            raise InvalidArgumentError(f"AU12 intensity must be in 0..5, got {self.au12_intensity}")
        if self.au12_intensity > 0 and not self.any_au_set:
            raise InvalidArgumentError(f"{self.video_id}/{self.frame_index}: AU12 set but any_au_set is false")
        if self.frame_index < 0:
            raise InvalidArgumentError(f"frame index must be >= 0, got {self.frame_index}")
        if self.label is None:
            object.__setattr__(self, "label", int(self.au12_intensity > 0))

    def with_image(self, image: Tensor) -> "Sample":
        return Sample(image, self.au12_intensity, self.any_au_set, self.video_id, self.frame_index, self.label)


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: Tuple[Sample, ...] = field(default_factory=tuple)
    provenance: Provenance = "full"

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            return
        shape = self.samples[0].image.shape
        seen = set()
        for s in self.samples:
            if s.image.shape != shape:
                raise ShapeError(f"{s.video_id}/{s.frame_index}: image shape {s.image.shape} != {shape}")
            key = (s.video_id, s.frame_index)
            if key in seen:
                raise InvalidArgumentError(f"duplicate frame {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def image_shape(self) -> Optional[Tuple[int, ...]]:
        return self.samples[0].image.shape if self.samples else None

    def take(self, indices: Sequence[int], provenance: Optional[Provenance] = None) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), provenance or self.provenance)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def intensities(self) -> np.ndarray:
        return np.array([s.au12_intensity for s in self.samples], dtype=np.int64)


def to_arrays(dataset: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """(images [N,1,H,W], labels [N])."""
    if not dataset.samples:
        raise EmptyDatasetError("dataset has no samples")
    images = np.stack([s.image for s in dataset.samples]).astype(np.float64, copy=False)
    return images[:, np.newaxis], dataset.labels()


def _floor(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 1e-9))


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle then contiguous 60/20/20 cut (floor sizes, remainder to test)."""
    n = len(dataset)
    if n < 5:
        raise InvalidArgumentError(f"need at least 5 samples to split, got {n}")
    order = make_rng(spec.seed).permutation(n)
    n_train = _floor(spec.train_frac, n)
    n_val = _floor(spec.val_frac, n)
    return (
        dataset.take(order[:n_train]),
        dataset.take(order[n_train : n_train + n_val]),
        dataset.take(order[n_train + n_val :]),
    )


def reduce_neutral(dataset: Dataset, keep_fraction: float = 0.30, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Keeps every AU-set sample and floor(keep_fraction * #neutral) neutral ones."""
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidArgumentError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    flags = np.array([s.any_au_set for s in dataset.samples], dtype=bool)
    neutral = np.flatnonzero(~flags)
    keep = _floor(keep_fraction, neutral.size)
    if keep == neutral.size:
        return Dataset(dataset.samples, "reduced")
    rng = rng if rng is not None else make_rng(0)
    chosen = rng.choice(neutral, size=keep, replace=False)
    mask = flags.copy()
    mask[chosen] = True
    return dataset.take(np.flatnonzero(mask), "reduced")


_BAND_DROPS = {"low": {3, 4, 5}, "high": {1, 2, 3}}


def filter_intensity_band(dataset: Dataset, band: Literal["low", "high"]) -> Dataset:
    """Drops smiles outside the band; neutral and AU12-unset samples stay."""
    if band not in _BAND_DROPS:
        raise InvalidArgumentError(f"band must be 'low' or 'high', got {band!r}")
    dropped = _BAND_DROPS[band]
    kept = [i for i, s in enumerate(dataset.samples) if s.au12_intensity not in dropped]
    return dataset.take(kept, band)


def select_low_vs_high(dataset: Dataset) -> Dataset:
    """Smiles of intensity 1-2 (class 0) against 4-5 (class 1)."""
    kept = tuple(
        Sample(s.image, s.au12_intensity, s.any_au_set, s.video_id, s.frame_index, label=int(s.au12_intensity >= 4))
        for s in dataset.samples
        if s.au12_intensity in (1, 2, 4, 5)
    )
    if not kept:
        raise EmptyDatasetError("no samples with AU12 intensity in {1, 2, 4, 5}")
    return Dataset(kept, "low_vs_high")


SubsetName = Literal["full", "reduced", "low", "high", "low-vs-high"]


def subset(
    dataset: Dataset,
    selector: SubsetName,
    keep_fraction: float = 0.30,
    rng: Optional[np.random.Generator] = None,
) -> Dataset:
    """Applies a named experiment subset; the intensity bands also thin neutrals."""
    if selector == "full":
        return dataset
    if selector == "reduced":
        return reduce_neutral(dataset, keep_fraction, rng)
    if selector in ("low", "high"):
        banded = filter_intensity_band(dataset, selector)
        return Dataset(reduce_neutral(banded, keep_fraction, rng).samples, selector)
    if selector == "low-vs-high":
        return select_low_vs_high(dataset)
    raise InvalidArgumentError(f"unknown subset {selector!r}")


def crop(image: Tensor, box: Box) -> Tensor:
    top, left, height, width = box
    h, w = image.shape
    if height < 1 or width < 1 or top < 0 or left < 0 or top + height > h or left + width > w:
        raise InvalidArgumentError(f"box {box} outside {h}x{w} image")
    return image[top : top + height, left : left + width].copy()


def _sample_grid(n_in: int, n_out: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: Tensor, out_height: int, out_width: int) -> Tensor:
    """Bilinear resampling with corner-aligned source coordinates."""
    if out_height < 1 or out_width < 1:
        raise InvalidArgumentError(f"output size must be >= 1, got {out_height}x{out_width}")
    h, w = image.shape
    y0, y1, wy = _sample_grid(h, out_height)
    x0, x1, wx = _sample_grid(w, out_width)
    wy = wy[:, None]
    rows = image[y0] * (1.0 - wy) + image[y1] * wy
    return rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx


def default_mouth_box(image_shape: Tuple[int, int] = ALIGNED_SHAPE, size: Tuple[int, int] = MOUTH_BOX_SIZE) -> Box:
    """Horizontally centred box in the lower part of an aligned face."""
    h, w = image_shape
    bh, bw = size
    return (h - bh - (h - bh) // 8, (w - bw) // 2, bh, bw)


def extract_part(
    dataset: Dataset,
    part: Literal["mouth", "face"],
    box: Optional[Box] = None,
) -> Dataset:
    """Mouth: crop the box then scale by 2/3. Face: resize to 95x121.

    Images already at the part's shape are returned unchanged.
    """
    if part not in PART_SHAPES:
        raise InvalidArgumentError(f"part must be 'mouth' or 'face', got {part!r}")
    target = PART_SHAPES[part]
    shape = dataset.image_shape
    if shape is None or shape == target:
        return dataset
    if shape != ALIGNED_SHAPE:
        raise ShapeError(f"cannot extract {part} from {shape[0]}x{shape[1]} images; expected {ALIGNED_SHAPE}")
    if part == "face":
        return Dataset(tuple(s.with_image(resize_bilinear(s.image, *target)) for s in dataset), dataset.provenance)
    box = box or default_mouth_box(shape)
    out_h, out_w = (box[2] * 2) // 3, (box[3] * 2) // 3
    return Dataset(
        tuple(s.with_image(resize_bilinear(crop(s.image, box), out_h, out_w)) for s in dataset),
        dataset.provenance,
    )


def resize_dataset(dataset: Dataset, shape: Tuple[int, int]) -> Dataset:
    if dataset.image_shape in (None, tuple(shape)):
        return dataset
    return Dataset(tuple(s.with_image(resize_bilinear(s.image, *shape)) for s in dataset), dataset.provenance)


def _normalise_histogram(histogram: Sequence[float]) -> np.ndarray:
    weights = np.asarray(histogram, dtype=np.float64)
    if weights.shape != (6,):
        raise InvalidArgumentError(f"intensity histogram needs 6 entries (levels 0..5), got {weights.shape}")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidArgumentError(f"intensity histogram must be non-negative with positive mass, got {list(histogram)}")
    return weights / weights.sum()


def render_face(
    intensity: int,
    image_shape: Tuple[int, int],
    rng: np.random.Generator,
    noise_sigma: float = 0.05,
    max_shift: int = 3,
) -> Tensor:
    """One procedural grayscale face; the mouth stroke widens, thickens and curves with intensity."""
    h, w = image_shape
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = 0.5 * h + dy, 0.5 * w + dx
    image = np.full((h, w), 0.1)
    head = ((xx - cx) / (0.42 * w)) ** 2 + ((yy - cy) / (0.46 * h)) ** 2 <= 1.0
    image[head] = 0.5
    eye_r = 0.06 * min(h, w)
    for side in (-1.0, 1.0):
        eye = (yy - (0.38 * h + dy)) ** 2 + (xx - (cx + side * 0.17 * w)) ** 2 <= eye_r**2
        image[eye] = 0.1
    half_width = (0.12 + 0.04 * intensity) * w
    thickness = (0.05 + 0.025 * intensity) * h
    curvature = 0.03 * intensity * h
    u = (xx - cx) / half_width
    arc = (0.64 * h + dy) + curvature * (1.0 - u**2)
    mouth = (np.abs(u) <= 1.0) & (np.abs(yy - arc) <= thickness / 2.0)
    image[mouth] = 0.95
    image += rng.normal(0.0, noise_sigma, size=(h, w))
    return np.clip(image, 0.0, 1.0)


def synth_generate(
    n: int,
    image_shape: Tuple[int, int],
    intensity_distribution: Sequence[float],
    rng: np.random.Generator,
    noise_sigma: float = 0.05,
    max_shift: int = 3,
) -> Dataset:
    """Synthetic smile benchmark labelled from the drawn AU12 intensity.

    ``intensity_distribution`` holds six non-negative weights for levels 0..5
    and is normalised. Every sample is its own frame of video ``synth``.
    """
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    probs = _normalise_histogram(intensity_distribution)
    intensities = rng.choice(6, size=n, p=probs)
    samples = tuple(
        Sample(
            image=render_face(int(i), image_shape, rng, noise_sigma, max_shift),
            au12_intensity=int(i),
            any_au_set=bool(i > 0),
            video_id="synth",
            frame_index=k,
        )
        for k, i in enumerate(intensities)
    )
    return Dataset(samples, "synthetic")


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(dataset)))
        for s in dataset:
            write_tensor(f, s.image)
            vid = s.video_id.encode("utf-8")
            f.write(struct.pack("<BBH", s.au12_intensity, int(s.any_au_set), len(vid)))
            f.write(vid)
            f.write(struct.pack("<I", s.frame_index))


def _read(f, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise MalformedFileError(f"truncated {what}: expected {n} bytes, got {len(buf)}", offset)
    return buf


def load_dataset(path: Union[str, Path], provenance: Provenance = "full") -> Dataset:
    """Samples from a DSETv001 file.

    Labels are not stored: they follow the intensity, or the 4-5 vs 1-2 rule
    when ``provenance`` is ``"low_vs_high"``.
    """
    with open(path, "rb") as f:
        magic = _read(f, len(DATASET_MAGIC), "dataset magic")
        if magic != DATASET_MAGIC:
            raise MalformedFileError(f"bad dataset magic {magic!r}", 0)
        (count,) = struct.unpack("<I", _read(f, 4, "sample count"))
        left = bytes_remaining(f)
        if left is not None and count * MIN_SAMPLE_BYTES > left:
            raise MalformedFileError(f"sample count {count} exceeds the {left} bytes left", len(DATASET_MAGIC))
        samples: List[Sample] = []
        shape = None
        for _ in range(count):
            offset = f.tell()
            image = read_tensor(f)
            if image.ndim != 2:
                raise MalformedFileError(f"sample image must be rank 2, got shape {image.shape}", offset)
            if shape is None:
                shape = image.shape
            elif image.shape != shape:
                raise MalformedFileError(f"image shape {image.shape} differs from {shape}", offset)
            meta_offset = f.tell()
            intensity, flag, vid_len = struct.unpack("<BBH", _read(f, 4, "sample header"))
            video_id = _read(f, vid_len, "video id").decode("utf-8")
            (frame,) = struct.unpack("<I", _read(f, 4, "frame index"))
            try:
                label = int(intensity >= 4) if provenance == "low_vs_high" else None
                samples.append(Sample(image, intensity, bool(flag), video_id, frame, label))
            except InvalidArgumentError as e:
                raise MalformedFileError(str(e), meta_offset) from e
        trailing = f.read(1)
        if trailing:
            raise MalformedFileError("trailing bytes after last sample", f.tell() - 1)
    return Dataset(tuple(samples), provenance)


def write_pgm(image: Tensor, path: Union[str, Path]) -> None:
    """Binary PGM (P5, maxval 255) of an image with values in [0, 1]."""
    if image.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D image, got shape {image.shape}")
    h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes(order="C"))


def dataset_from_annotations(records: Records, image_shape: Tuple[int, int] = (1, 1)) -> Dataset:
    """One sample per annotated frame with a shared blank image.

    The AU12 row gives the intensity; any AU above 0 sets ``any_au_set``.
    """
    df = as_frame(records)
    keys = ["video_id", "frame"]
    any_set = df.groupby(keys, sort=True)["intensity"].max() > 0
    au12 = df[df["au"] == "AU12"].groupby(keys)["intensity"].max()
    au12 = au12.reindex(any_set.index, fill_value=0)
    blank = np.zeros(image_shape, dtype=np.float64)
    samples = tuple(
        Sample(blank, int(i), bool(flag), str(video), int(frame))
        for (video, frame), flag, i in zip(any_set.index, any_set.to_numpy(), au12.to_numpy())
    )
    return Dataset(samples, "full")


def annotations_for(dataset: Dataset) -> List[AnnotationRecord]:
    """One AU12 record per sample."""
    return [AnnotationRecord(s.video_id, s.frame_index, "AU12", s.au12_intensity) for s in dataset]


def disfa_count_fixture(seed: int = 0) -> pd.DataFrame:
    """Annotation table matching the published DISFA aggregate counts.

    Every frame gets an AU12 row; other action units appear only where set.
    Which frame carries which status is a seeded permutation, so only the
    aggregate counts are meaningful.
    """
    n_frames = DISFA_VIDEOS * DISFA_FRAMES_PER_VIDEO
    # slots: AU12 smiles, then AU-set frames without AU12, then neutral frames
    au12 = np.repeat(np.arange(6), DISFA_AU12_HISTOGRAM)[::-1].copy()
    n_smile = int(sum(DISFA_AU12_HISTOGRAM[1:]))
    n_set = n_frames - DISFA_NEUTRAL_FRAMES
    if au12.size != n_frames or n_set < n_smile:
        raise InvalidArgumentError("inconsistent fixture constants")

    # other AUs fill AU-set slots cyclically, non-AU12 frames first
    order = np.concatenate([np.arange(n_smile, n_set), np.arange(n_smile)])
    slots: List[np.ndarray] = []
    names: List[str] = []
    levels: List[np.ndarray] = []
    start = 0
    for au, count in DISFA_OTHER_AU_COUNTS.items():
        positions = (start + np.arange(count)) % n_set
        slots.append(order[positions])
        names.append(au)
        levels.append(1 + np.arange(count) % 5)
        start += count
    if start < n_set - n_smile:
        raise InvalidArgumentError("other action units cannot cover every AU-set frame")

    frame_of_slot = make_rng(seed).permutation(n_frames)
    videos = np.array([f"{v:03d}" for v in range(1, DISFA_VIDEOS + 1)])

    def rows(slot_ids: np.ndarray, au: str, intensity: np.ndarray) -> pd.DataFrame:
        frame_ids = frame_of_slot[slot_ids]
        return pd.DataFrame(
            {
                "video_id": videos[frame_ids // DISFA_FRAMES_PER_VIDEO],
                "frame": (frame_ids % DISFA_FRAMES_PER_VIDEO).astype(np.int64),
                "au": au,
                "intensity": intensity.astype(np.int64),
            }
        )

    parts = [rows(np.arange(n_frames), "AU12", au12)]
    parts += [rows(s, au, lv) for s, au, lv in zip(slots, names, levels)]
    df = pd.concat(parts, ignore_index=True)
    return df.sort_values(["video_id", "frame", "au"], kind="mergesort", ignore_index=True)[ANNOTATION_COLUMNS]
