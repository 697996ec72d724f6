#!/usr/bin/env python

"""
Tests for the data buffer, adaptive k, k-means and representative selection
"""

import json
import logging
import os
import sys
import tempfile

import numpy as np
from sklearn.metrics import pairwise_distances_argmin

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('representative_selection_test')

# Add project root to path
project_root = os.path.abspath(os.path.dirname(__file__))
if project_root not in sys.path:
    sys.path.append(project_root)

from nvcim_pt.ml.exceptions import ConfigurationError, StateError  # noqa: E402
from nvcim_pt.ml.representative_selection import (  # noqa: E402
    BufferedSample,
    DataBuffer,
    adaptive_k,
    kmeans,
    load_buffer_jsonl,
    representative,
    select_all,
    selection_report,
    write_buffer_jsonl,
)


def two_blobs(seed, per_blob=25, dim=2, separation=10.0):
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    offsets = np.vstack([np.zeros(dim), direction * separation])
    labels = np.repeat([0, 1], per_blob)
    return offsets[labels] + rng.standard_normal((2 * per_blob, dim)), labels


def full_buffer(points, capacity=None):
    buffer = DataBuffer(capacity=capacity or len(points))
    for i, point in enumerate(points):
        buffer.add(BufferedSample(embedding=np.tile(point, (3, 1)), id=f"s{i}", domain_tag=i % 2))
    return buffer


def test_adaptive_k_table():
    assert adaptive_k(20) == 2
    assert adaptive_k(80) == 5
    assert adaptive_k(10 ** 6) == 10
    assert adaptive_k(10) == 2
    assert adaptive_k(60) == 4
    assert DataBuffer(capacity=40).adaptive_k() == 3

    for args in ((0,), (20, 0), (20, 20, 1.5, 5, 2)):
        try:
            adaptive_k(*args)
            assert False, f"adaptive_k{args} should be rejected"
        except ConfigurationError:
            pass


def test_kmeans_recovers_blobs():
    for seed in range(50):
        X, truth = two_blobs(seed)
        result = kmeans(X, 2, seed=seed)
        labels = result.assignments
        assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth), seed
        history = result.inertia_history
        for before, after in zip(history, history[1:]):
            assert after <= before * (1 + 1e-12), (seed, history)
        assert np.array_equal(labels, pairwise_distances_argmin(X, result.centroids))
    logger.info("k-means matched the generator labels on all 50 seeds")


def test_kmeans_validation():
    X = np.zeros((3, 2))
    for k in (0, 4):
        try:
            kmeans(X, k)
            assert False, f"k={k} should be rejected"
        except ConfigurationError:
            pass
    for max_iter in (0, -1):
        try:
            kmeans(np.eye(3), 2, max_iter=max_iter)
            assert False, f"max_iter={max_iter} should be rejected"
        except ConfigurationError:
            pass


def test_representative_ties_and_zero_vectors():
    members = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert representative(members, [1.0, 0.0]) == 1
    assert representative(members, [0.0, 3.0]) == 3
    assert representative([[1.0, 1.0]], [5.0, 5.0]) == 0
    try:
        representative(np.zeros((0, 2)), [1.0, 0.0])
        assert False, "empty cluster should be rejected"
    except ConfigurationError:
        pass


def test_buffer_lifecycle():
    buffer = DataBuffer(capacity=2)
    buffer.add(BufferedSample(embedding=np.ones((2, 3)), id='a'))
    assert not buffer.is_full
    try:
        select_all(buffer)
        assert False, "selection on a partial buffer should fail"
    except StateError:
        pass
    buffer.add(BufferedSample(embedding=np.ones((2, 3)), id='b'))
    try:
        buffer.add(BufferedSample(embedding=np.ones((2, 3)), id='c'))
        assert False, "adding to a full buffer should fail"
    except StateError:
        pass
    assert len(buffer) == 2


def test_select_all_splits_buffer():
    X, _ = two_blobs(3, per_blob=10, dim=4)
    buffer = full_buffer(X)
    selection = select_all(buffer, seed=0)

    assert len(buffer) == 0
    assert selection.clustering.k == 2
    assert len(selection.representatives) == 2
    assert len(selection.leftovers) == 18
    ids = [s.id for s in selection.representatives]
    assert ids == sorted(ids, key=lambda i: int(i[1:]))
    assert {s.id for s in selection.representatives}.isdisjoint(s.id for s in selection.leftovers)
    # One representative per blob
    blobs = {int(s.id[1:]) // 10 for s in selection.representatives}
    assert blobs == {0, 1}

    report = selection_report(selection)
    assert report['k'] == 2
    assert report['representative_ids'] == ids
    assert sum(report['cluster_sizes']) == 20
    assert report['leftover_count'] == 18
    json.dumps(report)


def test_select_all_identical_samples():
    buffer = full_buffer(np.ones((20, 4)))
    selection = select_all(buffer, seed=5)
    assert [s.id for s in selection.representatives] == ['s0', 's1']
    assert selection.clustering.n_iter < 100


def test_select_all_largest_cluster_only():
    X = np.vstack([np.zeros((15, 2)), np.full((5, 2), 50.0)]) + np.random.default_rng(1).standard_normal((20, 2))
    selection = select_all(full_buffer(X), seed=2, largest_cluster_only=True)
    assert len(selection.representatives) == 1
    assert int(selection.representatives[0].id[1:]) < 15
    assert len(selection.leftovers) == 19


def test_small_buffer_caps_k():
    # adaptive_k never drops below 2, so a one-sample buffer clusters into one group
    selection = select_all(full_buffer(np.ones((1, 3))), seed=0)
    assert selection.clustering.k == 1
    assert [s.id for s in selection.representatives] == ['s0']


def test_jsonl_roundtrip_skips_header():
    samples = [BufferedSample(embedding=np.eye(2) * i, id=f"x{i}", payload='p', domain_tag=i) for i in range(3)]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'buffer.jsonl')
        write_buffer_jsonl(samples, path)
        with open(path, 'r') as f:
            body = f.read()
        with open(path, 'w') as f:
            f.write(json.dumps({'meta': {'spec': {}}}) + '\n' + body + '\n')
        loaded = load_buffer_jsonl(path)
        assert [s.id for s in loaded] == ['x0', 'x1', 'x2']
        assert [s.domain_tag for s in loaded] == [0, 1, 2]
        assert np.array_equal(loaded[2].embedding, samples[2].embedding)

        with open(path, 'a') as f:
            f.write('{not json}\n')
        try:
            load_buffer_jsonl(path)
            assert False, "broken line should be rejected"
        except ConfigurationError:
            pass


if __name__ == "__main__":
    logger.info("Starting representative selection tests")
    for test in (
        test_adaptive_k_table,
        test_kmeans_recovers_blobs,
        test_kmeans_validation,
        test_representative_ties_and_zero_vectors,
        test_buffer_lifecycle,
        test_select_all_splits_buffer,
        test_select_all_identical_samples,
        test_select_all_largest_cluster_only,
        test_small_buffer_caps_k,
        test_jsonl_roundtrip_skips_header,
    ):
        logger.info(f"Running {test.__name__}")
        test()
    logger.info("Representative selection tests completed")
