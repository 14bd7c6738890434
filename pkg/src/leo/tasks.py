"""Episodic task sampling.

Three task sources: the noisy sine/line 5-shot regression distribution, a
synthetic-embedding N-way K-shot classification distribution (standing in
for precomputed image features), and ingestion of embedding files produced
elsewhere.
"""

import dataclasses
import math
import struct

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"

SINE = "sine"
LINE = "line"

INPUT_RANGE = (-5.0, 5.0)


class TaskError(ValueError):
    pass


class InvalidSizeError(TaskError):
    """Dataset construction parameters out of range."""


class InsufficientSamplesError(TaskError):
    """Not enough classes or per-class samples for the requested episode."""


class EmbeddingFormatError(TaskError):
    """Embedding file malformed."""


class BadMagicError(EmbeddingFormatError):
    pass


class TruncatedFileError(EmbeddingFormatError):
    pass


class DimensionMismatchError(EmbeddingFormatError):
    pass


@dataclasses.dataclass
class RegressionTaskParams:
    """Ground truth of one regression episode; clean() is the noiseless f."""

    mode: str
    amplitude: float = 0.0
    phase: float = 0.0
    slope: float = 0.0
    intercept: float = 0.0
    noise_std: float = 0.3

    def clean(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.mode == SINE:
            return self.amplitude * np.sin(x + self.phase)
        return self.slope * x + self.intercept


@dataclasses.dataclass
class Episode:
    """One task instance: a small train set and a validation set.

    Classification rows are label-major: K consecutive train rows (and
    val-per-class consecutive val rows) per episode label 0..N-1.
    """

    task_kind: str
    way: int
    shot: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    regression_params: RegressionTaskParams = None

    def __post_init__(self):
        if self.task_kind == CLASSIFICATION:
            expect = np.repeat(np.arange(self.way), self.shot)
            if not np.array_equal(self.train_y, expect):
                raise TaskError("train labels must be label-major blocks of K")
        elif self.task_kind == REGRESSION:
            if self.way != 1:
                raise TaskError("regression episodes are single-task")
        else:
            raise TaskError("unknown task kind %r" % (self.task_kind,))

    @property
    def val_per_class(self):
        return self.val_x.shape[0] // self.way


def sample_regression_episode(rng, shot=5, val_size=50, noise_std=0.3):
    """Draw one sine-or-line episode with noisy targets.

    Mode is sine or line with probability 1/2 each; amplitude ~ U[0.1, 5],
    phase ~ U[0, pi], slope and intercept ~ U[-3, 3]. Inputs are uniform on
    [-5, 5]; train and val targets get independent N(0, noise_std^2) noise.
    """
    if shot < 1:
        raise InvalidSizeError("shot must be >= 1")
    lo, hi = INPUT_RANGE
    if rng.random() < 0.5:
        params = RegressionTaskParams(
            mode=SINE,
            amplitude=float(rng.uniform(0.1, 5.0)),
            phase=float(rng.uniform(0.0, math.pi)),
            noise_std=noise_std,
        )
    else:
        params = RegressionTaskParams(
            mode=LINE,
            slope=float(rng.uniform(-3.0, 3.0)),
            intercept=float(rng.uniform(-3.0, 3.0)),
            noise_std=noise_std,
        )
    train_x = rng.uniform(lo, hi, (shot, 1))
    train_y = params.clean(train_x) + noise_std * rng.standard_normal((shot, 1))
    val_x = rng.uniform(lo, hi, (val_size, 1))
    val_y = params.clean(val_x) + noise_std * rng.standard_normal((val_size, 1))
    return Episode(
        task_kind=REGRESSION,
        way=1,
        shot=shot,
        train_x=train_x,
        train_y=train_y,
        val_x=val_x,
        val_y=val_y,
        regression_params=params,
    )


@dataclasses.dataclass
class EmbeddingDataset:
    """Per-class feature vectors; values are float32-representable so file
    round trips are bitwise lossless."""

    n_x: int
    classes: dict

    def __post_init__(self):
        for cid, vecs in self.classes.items():
            vecs = np.asarray(vecs, dtype=np.float64)
            if vecs.ndim != 2 or vecs.shape[1] != self.n_x:
                raise DimensionMismatchError(
                    "class %d vectors have shape %s, expected [*, %d]"
                    % (cid, vecs.shape, self.n_x)
                )
            self.classes[cid] = vecs

    @property
    def class_ids(self):
        return sorted(self.classes)

    @property
    def class_count(self):
        return len(self.classes)


@dataclasses.dataclass(frozen=True)
class MetaSplit:
    """Disjoint class-id pools for meta-train / meta-validation / meta-test."""

    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise TaskError("meta-split sets must be pairwise disjoint")

    def classes_for(self, name):
        try:
            return getattr(self, name)
        except AttributeError:
            raise TaskError("unknown meta-set %r" % (name,)) from None


def make_meta_split(class_ids, train_count, val_count, test_count):
    """Partition sorted class ids into three contiguous pools covering all."""
    ids = sorted(int(c) for c in class_ids)
    if train_count + val_count + test_count != len(ids):
        raise InvalidSizeError(
            "split sizes %d+%d+%d must cover %d classes"
            % (train_count, val_count, test_count, len(ids))
        )
    if min(train_count, val_count, test_count) <= 0:
        raise InvalidSizeError("every meta-set needs at least one class")
    a = tuple(ids[:train_count])
    b = tuple(ids[train_count : train_count + val_count])
    c = tuple(ids[train_count + val_count :])
    return MetaSplit(train=a, validation=b, test=c)


def generate_synthetic_embeddings(rng, class_count, samples_per_class, n_x,
                                  cluster_spread):
    """Gaussian class clusters: mean_c ~ N(0, I), samples ~ N(mean_c, s^2 I).

    Values are quantized to float32 precision at creation so that saving and
    reloading reproduces them exactly.
    """
    if class_count < 15:
        raise InvalidSizeError(
            "need >= 15 classes for a disjoint 5-way meta-split"
        )
    if samples_per_class < 1 or n_x < 1:
        raise InvalidSizeError("samples-per-class and n_x must be positive")
    if cluster_spread < 0:
        raise InvalidSizeError("cluster-spread must be non-negative")
    classes = {}
    for cid in range(class_count):
        mean = rng.standard_normal(n_x)
        noise = rng.standard_normal((samples_per_class, n_x))
        vecs = mean + cluster_spread * noise
        classes[cid] = vecs.astype(np.float32).astype(np.float64)
    return EmbeddingDataset(n_x=n_x, classes=classes)


def sample_classification_episode(rng, dataset, split_classes, n_way, k_shot,
                                  val_per_class):
    """Draw an N-way K-shot episode from the given class pool.

    Classes are drawn without replacement and relabeled 0..N-1 in draw order
    (a uniformly random assignment); per class, K+val samples are drawn
    without replacement, so train and val never share a sample.
    """
    pool = sorted(int(c) for c in split_classes)
    if len(pool) < n_way:
        raise InsufficientSamplesError(
            "pool has %d classes, need %d" % (len(pool), n_way)
        )
    chosen = rng.choice(np.asarray(pool), size=n_way, replace=False)
    train_rows, val_rows = [], []
    for cid in chosen:
        vecs = dataset.classes.get(int(cid))
        if vecs is None:
            raise InsufficientSamplesError("class %d not in dataset" % cid)
        need = k_shot + val_per_class
        if vecs.shape[0] < need:
            raise InsufficientSamplesError(
                "class %d has %d samples, need %d" % (cid, vecs.shape[0], need)
            )
        idx = rng.choice(vecs.shape[0], size=need, replace=False)
        train_rows.append(vecs[idx[:k_shot]])
        val_rows.append(vecs[idx[k_shot:]])
    train_x = np.ascontiguousarray(np.concatenate(train_rows, axis=0))
    val_x = np.ascontiguousarray(np.concatenate(val_rows, axis=0))
    return Episode(
        task_kind=CLASSIFICATION,
        way=n_way,
        shot=k_shot,
        train_x=train_x,
        train_y=np.repeat(np.arange(n_way), k_shot),
        val_x=val_x,
        val_y=np.repeat(np.arange(n_way), val_per_class),
    )


# ---------------------------------------------------------------------------
# embedding file format
#
# little-endian: magic "LEOE"; u32 version=1; u32 class-count; u32 dimension;
# per class: u32 class-id, u32 sample-count, sample-count*dimension float32.

EMBEDDING_MAGIC = b"LEOE"
EMBEDDING_VERSION = 1


def save_embedding_file(dataset, path):
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(
            struct.pack("<III", EMBEDDING_VERSION, dataset.class_count, dataset.n_x)
        )
        for cid in dataset.class_ids:
            vecs = dataset.classes[cid]
            fh.write(struct.pack("<II", cid, vecs.shape[0]))
            fh.write(np.ascontiguousarray(vecs, dtype="<f4").tobytes())


def load_embedding_file(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != EMBEDDING_MAGIC:
        raise BadMagicError("not an embedding file (magic %r)" % (blob[:4],))
    offset = 4

    def take(count):
        nonlocal offset
        if offset + count > len(blob):
            raise TruncatedFileError(
                "needed %d bytes at offset %d, file has %d"
                % (count, offset, len(blob))
            )
        piece = blob[offset : offset + count]
        offset += count
        return piece

    version, class_count, n_x = struct.unpack("<III", take(12))
    if version != EMBEDDING_VERSION:
        raise EmbeddingFormatError("unsupported version %d" % version)
    if n_x == 0:
        raise DimensionMismatchError("embedding dimension must be positive")
    classes = {}
    for _ in range(class_count):
        cid, count = struct.unpack("<II", take(8))
        if cid in classes:
            raise EmbeddingFormatError("duplicate class id %d" % cid)
        raw = take(4 * count * n_x)
        vecs = np.frombuffer(raw, dtype="<f4").reshape(count, n_x)
        classes[cid] = vecs.astype(np.float64)
    if offset != len(blob):
        raise EmbeddingFormatError(
            "%d trailing bytes after last record" % (len(blob) - offset)
        )
    return EmbeddingDataset(n_x=n_x, classes=classes)
