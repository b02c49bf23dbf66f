"""
Datasets: Synthetic Tasks, Shifts and CSV I/O

Provides:
- Dataset with split provenance (train / val / test)
- Synthetic generators: gaussians (blobs on a circle), moons, rings
- Test-time shifts: rotate, translate, scale, feature noise
- CSV load/save with a fixed header x0..x{d-1},label
"""

import logging
import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_blobs, make_moons
from sklearn.model_selection import train_test_split

from laplace_lora.core.errors import (
    BadConfig,
    DimMismatch,
    LabelOutOfRange,
    ParseError,
    SplitLeakage,
)

logger = logging.getLogger("laplace-lora.data")

CENTER_RADIUS = 3.0
RING_GAP = 1.5


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class Dataset:
    """
    Labelled feature matrix with split provenance

    Attributes:
        features: N x d real features, no NaN
        labels: N class indices in [0, n_classes)
        n_classes: Number of classes
        split: Which split the rows belong to
        name: Human-readable tag used in reports
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: Split = Split.TRAIN
    name: str = ""

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DimMismatch(
                f"features {features.shape} and labels {labels.shape} do not line up"
            )
        if not np.all(np.isfinite(features)):
            raise ValueError("Features contain NaN or infinite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise LabelOutOfRange(f"Labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def with_split(self, split: Split) -> "Dataset":
        return replace(self, split=split)

    def subset(self, index: np.ndarray, split: Optional[Split] = None) -> "Dataset":
        return Dataset(
            features=self.features[index],
            labels=self.labels[index],
            n_classes=self.n_classes,
            split=split or self.split,
            name=self.name,
        )


def ensure_tuning_split(data) -> None:
    """Refuse test data in anything that fits hyperparameters"""
    if getattr(data, "split", None) == Split.TEST:
        raise SplitLeakage("Tuning received a dataset tagged as test data")


def _circle_centers(n_classes: int, input_dim: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, input_dim))
    centers[:, 0] = CENTER_RADIUS * np.cos(angles)
    centers[:, 1] = CENTER_RADIUS * np.sin(angles)
    return centers


def _rings(
    n_per_class: int, n_classes: int, noise: float, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    features, labels = [], []
    for c in range(n_classes):
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n_per_class)
        radius = 1.0 + RING_GAP * c + 0.25 * noise * rng.standard_normal(n_per_class)
        features.append(np.column_stack([radius * np.cos(theta), radius * np.sin(theta)]))
        labels.append(np.full(n_per_class, c))
    x = np.vstack(features)
    y = np.concatenate(labels)
    order = rng.permutation(x.shape[0])
    return x[order], y[order]


def gen_synthetic(
    name: str,
    n_per_class: int,
    n_classes: int = 4,
    noise: float = 1.0,
    seed: int = 0,
    input_dim: int = 2,
    split: Split = Split.TRAIN,
) -> Dataset:
    """
    Generate a class-balanced synthetic task

    Args:
        name: gaussians, moons or rings
        n_per_class: Points per class
        n_classes: Classes (moons is always 2)
        noise: Cluster std (gaussians), moon noise, or radial jitter scale (rings)
        seed: Generator seed; equal seeds give identical data
        input_dim: Feature dimension (gaussians only; extra dims carry noise)
        split: Split tag attached to the result
    """
    if n_per_class < 1 or n_classes < 2 or noise < 0:
        raise BadConfig("Synthetic task needs n_per_class >= 1, n_classes >= 2, noise >= 0")

    if name == "gaussians":
        x, y = make_blobs(
            n_samples=[n_per_class] * n_classes,
            n_features=input_dim,
            centers=_circle_centers(n_classes, input_dim),
            cluster_std=noise,
            shuffle=True,
            random_state=seed,
        )
    elif name == "moons":
        if n_classes != 2:
            raise BadConfig("moons has exactly 2 classes")
        x, y = make_moons(
            n_samples=(n_per_class, n_per_class), noise=noise, shuffle=True, random_state=seed
        )
    elif name == "rings":
        x, y = _rings(n_per_class, n_classes, noise, seed)
    else:
        raise BadConfig(f"Unknown synthetic task '{name}'")

    ds = Dataset(features=x, labels=y, n_classes=n_classes, split=split, name=name)
    logger.debug(f"Generated {name}: N={ds.size} C={n_classes} seed={seed}")
    return ds


class ShiftKind(str, Enum):
    ROTATE = "rotate"
    TRANSLATE = "translate"
    SCALE = "scale"
    NOISE = "noise"


@dataclass(frozen=True)
class Shift:
    """One feature transform; params are degrees, a vector, a factor or a std"""

    kind: ShiftKind
    params: Tuple[float, ...]

    @property
    def label(self) -> str:
        return f"{self.kind.value}:{','.join('%g' % p for p in self.params)}"


SHIFT_RE = re.compile(r"^(rotate|translate|scale|noise):(.+)$")


def parse_shift(spec: str) -> List[Shift]:
    """Parse 'rotate:90' or a '+'-joined composition like 'rotate:90+noise:0.5'"""
    shifts = []
    for part in spec.split("+"):
        match = SHIFT_RE.match(part.strip())
        if not match:
            raise BadConfig(f"Invalid shift '{part}'")
        try:
            params = tuple(float(v) for v in match.group(2).split(","))
        except ValueError as e:
            raise BadConfig(f"Invalid shift parameters in '{part}'") from e
        kind = ShiftKind(match.group(1))
        if kind != ShiftKind.TRANSLATE and len(params) != 1:
            raise BadConfig(f"Shift '{kind.value}' takes one parameter")
        shifts.append(Shift(kind, params))
    return shifts


def apply_shift(ds: Dataset, shift: Shift, seed: int = 0) -> Dataset:
    """Transform features; labels and split are preserved"""
    x = ds.features.copy()
    if shift.kind == ShiftKind.ROTATE:
        angle = math.radians(shift.params[0])
        c, s = math.cos(angle), math.sin(angle)
        x[:, :2] = x[:, :2] @ np.array([[c, s], [-s, c]])
    elif shift.kind == ShiftKind.TRANSLATE:
        v = np.asarray(shift.params)
        if v.size == 1:
            v = np.full(ds.input_dim, v[0])
        if v.size != ds.input_dim:
            raise DimMismatch(f"Translation of dim {v.size} for {ds.input_dim}-d features")
        x = x + v
    elif shift.kind == ShiftKind.SCALE:
        x = x * shift.params[0]
    else:
        sigma = shift.params[0]
        if sigma < 0:
            raise BadConfig("Feature noise std must be non-negative")
        x = x + sigma * np.random.default_rng(seed).standard_normal(x.shape)
    return replace(ds, features=x)


def apply_shifts(ds: Dataset, spec: str, seed: int = 0) -> Dataset:
    """Apply a composed shift spec left to right"""
    out = ds
    for i, shift in enumerate(parse_shift(spec)):
        out = apply_shift(out, shift, seed + i)
    return out


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Carve a validation split; stratified when every class has two members"""
    index = np.arange(ds.size)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    stratify = ds.labels if counts.min() >= 2 else None
    train_idx, val_idx = train_test_split(
        index, test_size=val_fraction, random_state=seed, stratify=stratify
    )
    return (
        ds.subset(np.sort(train_idx), Split.TRAIN),
        ds.subset(np.sort(val_idx), Split.VAL),
    )


_LINE_RE = re.compile(r"line (\d+)")


def load_csv(
    path: Union[str, Path],
    n_classes: Optional[int] = None,
    split: Split = Split.TRAIN,
) -> Dataset:
    """
    Read a dataset CSV with header x0..x{d-1},label

    Raises:
        ParseError: Bad header or cell; carries the 1-based file line
        LabelOutOfRange: Negative label or label >= n_classes
    """
    source = Path(path)
    try:
        frame = pd.read_csv(
            source, dtype=str, keep_default_na=False, skip_blank_lines=False
        )
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise ParseError(str(e), int(match.group(1)) if match else None) from e
    except (pd.errors.EmptyDataError, FileNotFoundError) as e:
        raise ParseError(f"Cannot read {source}: {e}", 1) from e

    columns = list(frame.columns)
    expected = [f"x{i}" for i in range(len(columns) - 1)] + ["label"]
    if len(columns) < 2 or columns != expected:
        raise ParseError(f"Header must be x0..x{{d-1}},label, got {','.join(columns)}", 1)

    d = len(columns) - 1
    features = np.zeros((len(frame), d))
    labels = np.zeros(len(frame), dtype=np.int64)
    for row, values in enumerate(frame.itertuples(index=False, name=None)):
        line = row + 2
        for col, cell in enumerate(values):
            if not isinstance(cell, str) or not cell.strip():
                raise ParseError(f"missing value in column '{columns[col]}'", line)
        try:
            features[row] = [float(v) for v in values[:d]]
        except ValueError as e:
            raise ParseError(f"bad feature value: {e}", line) from e
        if not np.all(np.isfinite(features[row])):
            raise ParseError("non-finite feature value", line)
        try:
            labels[row] = int(values[d])
        except ValueError as e:
            raise ParseError(f"bad label '{values[d]}'", line) from e
        if labels[row] < 0 or (n_classes is not None and labels[row] >= n_classes):
            raise LabelOutOfRange(f"line {line}: label {labels[row]} out of range")

    classes = n_classes if n_classes is not None else int(labels.max()) + 1 if labels.size else 2
    return Dataset(
        features=features, labels=labels, n_classes=max(classes, 2), split=split, name=source.stem
    )


def save_csv(ds: Dataset, path: Union[str, Path]) -> Path:
    """Write features with 17 significant digits so load_csv restores them exactly"""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(ds.features, columns=[f"x{i}" for i in range(ds.input_dim)])
    frame["label"] = ds.labels
    frame.to_csv(target, index=False, float_format="%.17g")
    return target

