"""Representative Selection over the bounded user-data buffer

When the buffer fills up, the token-mean embeddings of all buffered samples are clustered
with k-means, k growing logarithmically with the buffer size. The member most
cosine-similar to each centroid becomes that cluster's representative and gets its own
tuned prompt; everything else is handed back as leftovers for autoencoder updating.

Example usage:
    - buffer = DataBuffer(capacity=20)
    - buffer.add(BufferedSample(embedding=tokens, id='s0'))
    - selection = select_all(buffer, seed=0)
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.cluster import kmeans_plusplus
from sklearn.metrics.pairwise import cosine_similarity

from nvcim_pt.ml.exceptions import ConfigurationError, StateError

logger = logging.getLogger(__name__)

DEFAULT_BASE_THRESHOLD = 20
DEFAULT_SCALE_FACTOR = 1.5
DEFAULT_N_MIN = 2
DEFAULT_N_MAX = 10
DEFAULT_MAX_ITER = 100

SPLITS = ('warmup', 'train', 'query')

# Cosine similarities closer than this are treated as a tie
_TIE_TOLERANCE = 1e-12


@dataclass
class BufferedSample:
    """One user data sample: T x D token embeddings plus opaque payload"""
    embedding: np.ndarray
    id: str = ''
    payload: str = ''
    domain_tag: int = None
    split: str = 'train'

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim == 1:
            self.embedding = self.embedding[None, :]
        if self.embedding.ndim != 2 or min(self.embedding.shape) < 1:
            raise ConfigurationError(f"Sample {self.id}: embedding must be a non-empty T x D matrix")
        if self.split not in SPLITS:
            raise ConfigurationError(f"Sample {self.id}: split must be one of {SPLITS}, got '{self.split}'")

    @property
    def pooled(self):
        """Token-mean summary vector"""
        return self.embedding.mean(axis=0)

    def to_record(self):
        record = {
            'id': self.id,
            'embedding': self.embedding.tolist(),
            'payload': self.payload,
            'split': self.split,
        }
        if self.domain_tag is not None:
            record['domain'] = int(self.domain_tag)
        return record

    @classmethod
    def from_record(cls, record):
        try:
            return cls(
                embedding=record['embedding'],
                id=str(record.get('id', '')),
                payload=record.get('payload', ''),
                domain_tag=record.get('domain'),
                split=record.get('split', 'train'),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(f"Invalid buffer record: {e}") from e


@dataclass
class DataBuffer:
    """Bounded buffer of samples awaiting representative selection

    Args:
        capacity (int): Buffer size b_s
        base_threshold (float): b_0 of the adaptive cluster count
        scale_factor (float): Growth rate s of the adaptive cluster count
        n_min (int): Lower clamp on k
        n_max (int): Upper clamp on k
    """
    capacity: int
    base_threshold: float = DEFAULT_BASE_THRESHOLD
    scale_factor: float = DEFAULT_SCALE_FACTOR
    n_min: int = DEFAULT_N_MIN
    n_max: int = DEFAULT_N_MAX
    samples: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError(f"Buffer capacity must be >= 1, got {self.capacity}")
        if len(self.samples) > self.capacity:
            raise ConfigurationError(f"{len(self.samples)} samples exceed buffer capacity {self.capacity}")

    def __len__(self):
        return len(self.samples)

    @property
    def is_full(self):
        return len(self.samples) >= self.capacity

    def add(self, sample):
        if self.is_full:
            raise StateError(f"Buffer is full ({self.capacity} samples); run selection first")
        self.samples.append(sample)

    def clear(self):
        self.samples = []

    def adaptive_k(self):
        return adaptive_k(self.capacity, self.base_threshold, self.scale_factor, self.n_min, self.n_max)


class ClusterResult(NamedTuple):
    assignments: np.ndarray
    centroids: np.ndarray
    k: int
    inertia_history: list
    n_iter: int

    @property
    def inertia(self):
        return self.inertia_history[-1] if self.inertia_history else 0.0

    def cluster_sizes(self):
        return np.bincount(self.assignments, minlength=self.k)


class Selection(NamedTuple):
    representatives: list
    leftovers: list
    clustering: ClusterResult
    representative_clusters: list


def adaptive_k(b_s, b0=DEFAULT_BASE_THRESHOLD, s=DEFAULT_SCALE_FACTOR, n_min=DEFAULT_N_MIN, n_max=DEFAULT_N_MAX):
    """Number of clusters: min(max(floor(n_min + s * log2(b_s / b0)), n_min), n_max)"""
    if b_s <= 0 or b0 <= 0:
        raise ConfigurationError(f"Buffer size and base threshold must be positive, got b_s={b_s}, b0={b0}")
    if n_min > n_max:
        raise ConfigurationError(f"n_min ({n_min}) must not exceed n_max ({n_max})")
    raw = math.floor(n_min + s * math.log2(b_s / b0))
    k = min(max(raw, n_min), n_max)
    if k != raw:
        logger.debug(f"adaptive_k clamped {raw} to {k} for buffer size {b_s}")
    return int(k)


def _squared_distances(X, centroids):
    return ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _reseed_empty_clusters(X, centroids, labels, k):
    """Move the farthest point of a multi-member cluster into every empty cluster"""
    for j in range(k):
        sizes = np.bincount(labels, minlength=k)
        if sizes[j] > 0:
            continue
        distances = ((X - centroids[labels]) ** 2).sum(axis=1)
        distances[sizes[labels] <= 1] = -1.0
        point = int(np.argmax(distances))
        logger.warning(f"k-means cluster {j} became empty; reseeding with point {point}")
        labels[point] = j
        centroids[j] = X[point]
    return centroids, labels


def kmeans(E, k, max_iter=DEFAULT_MAX_ITER, seed=0):
    """Lloyd's algorithm with k-means++ seeding

    Assignment ties go to the current cluster if it is among the nearest, otherwise to the
    lowest cluster index. Iteration stops once assignments no longer change.

    Args:
        E: Sequence of D-vectors (or an n x D array)
        k (int): Number of clusters
        max_iter (int): Maximum number of Lloyd iterations
        seed (int): Seed for the k-means++ initialization

    Returns:
        ClusterResult: assignments, centroids, k, inertia after every iteration, iterations run
    """
    X = np.asarray(E, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigurationError(f"k-means expects an n x D matrix, got shape {X.shape}")
    if k < 1 or X.shape[0] < k:
        raise ConfigurationError(f"Cannot form {k} clusters from {X.shape[0]} points")
    if max_iter < 1:
        raise ConfigurationError(f"k-means needs max_iter >= 1, got {max_iter}")

    centroids, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    centroids = centroids.astype(np.float64)
    labels = None
    history = []
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        d2 = _squared_distances(X, centroids)
        nearest = np.argmin(d2, axis=1)
        if labels is not None:
            keep = d2[np.arange(len(X)), labels] <= d2[np.arange(len(X)), nearest]
            nearest = np.where(keep, labels, nearest)
            if np.array_equal(nearest, labels):
                converged = True
                break
        labels = nearest
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = X[members].mean(axis=0)
        centroids, labels = _reseed_empty_clusters(X, centroids, labels, k)
        history.append(float(((X - centroids[labels]) ** 2).sum()))

    if not converged:
        logger.warning(f"k-means did not converge within {max_iter} iterations")
        d2 = _squared_distances(X, centroids)
        best = d2.min(axis=1)
        labels = np.where(d2[np.arange(len(X)), labels] <= best, labels, np.argmin(d2, axis=1))

    logger.debug(f"k-means (k={k}) finished after {n_iter} iterations, inertia {history[-1] if history else 0.0:.6g}")
    return ClusterResult(assignments=labels.astype(np.int64), centroids=centroids, k=k,
                         inertia_history=history, n_iter=n_iter)


def representative(cluster_members, centroid):
    """Index of the member with maximum cosine similarity to the centroid (lowest index on ties)"""
    members = np.asarray(cluster_members, dtype=np.float64)
    if members.ndim == 1:
        members = members[None, :]
    if members.shape[0] == 0:
        raise ConfigurationError("Cannot pick a representative from an empty cluster")
    centroid = np.asarray(centroid, dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(centroid)):
        raise ConfigurationError("Centroid must be finite")
    similarity = cosine_similarity(members, centroid)[:, 0]
    similarity[np.linalg.norm(members, axis=1) == 0] = -np.inf
    best = similarity.max()
    return int(np.flatnonzero(similarity >= best - _TIE_TOLERANCE)[0])


def select_all(buffer, seed=0, max_iter=DEFAULT_MAX_ITER, largest_cluster_only=False):
    """Cluster a full buffer and split it into representatives and leftovers

    The buffer is emptied. Representatives keep their buffer order.

    Args:
        buffer (DataBuffer): A full buffer
        seed (int): k-means seed
        max_iter (int): k-means iteration cap
        largest_cluster_only (bool): Only keep the representative of the largest cluster

    Returns:
        Selection: representatives, leftovers, clustering, cluster index of each representative
    """
    if not buffer.is_full:
        raise StateError(f"Buffer holds {len(buffer)} of {buffer.capacity} samples; selection needs a full buffer")

    samples = list(buffer.samples)
    k = buffer.adaptive_k()
    if k > len(samples):
        logger.warning(f"Reducing k from {k} to the {len(samples)} buffered samples")
        k = len(samples)

    pooled = np.vstack([sample.pooled for sample in samples])
    clustering = kmeans(pooled, k, max_iter=max_iter, seed=seed)

    clusters = range(k)
    if largest_cluster_only:
        clusters = [int(np.argmax(clustering.cluster_sizes()))]

    chosen = {}
    for j in clusters:
        members = np.flatnonzero(clustering.assignments == j)
        chosen[int(members[representative(pooled[members], clustering.centroids[j])])] = j

    order = sorted(chosen)
    representatives = [samples[i] for i in order]
    leftovers = [sample for i, sample in enumerate(samples) if i not in chosen]
    buffer.clear()

    logger.info(f"Selected {len(representatives)} representatives (k={k}) and {len(leftovers)} leftovers "
                f"from a buffer of {len(samples)}")
    return Selection(representatives=representatives, leftovers=leftovers, clustering=clustering,
                     representative_clusters=[chosen[i] for i in order])


def selection_report(selection):
    """JSON-ready summary of one selection round"""
    return {
        'k': int(selection.clustering.k),
        'representative_ids': [sample.id for sample in selection.representatives],
        'representative_clusters': [int(j) for j in selection.representative_clusters],
        'cluster_sizes': [int(n) for n in selection.clustering.cluster_sizes()],
        'leftover_count': len(selection.leftovers),
        'n_iter': int(selection.clustering.n_iter),
        'inertia': float(selection.clustering.inertia),
    }


def load_buffer_jsonl(path):
    """Read buffered samples from a JSON-lines file, one sample per line (workload header lines are skipped)"""
    samples = []
    with open(path, 'r') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{line_no}: invalid JSON ({e})") from e
            if 'meta' in record:
                continue
            samples.append(BufferedSample.from_record(record))
    logger.info(f"Loaded {len(samples)} samples from {path}")
    return samples


def write_buffer_jsonl(samples, path):
    with open(path, 'w') as f:
        for sample in samples:
            f.write(json.dumps(sample.to_record()) + '\n')
    logger.info(f"Wrote {len(samples)} samples to {path}")
