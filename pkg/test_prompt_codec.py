#!/usr/bin/env python

"""
Tests for the prompt codec: autoencoder, int16 quantization and bit slicing
"""

import logging
import os
import sys
import tempfile

import numpy as np
from sklearn.decomposition import TruncatedSVD

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('prompt_codec_test')

# Add project root to path
project_root = os.path.abspath(os.path.dirname(__file__))
if project_root not in sys.path:
    sys.path.append(project_root)

from nvcim_pt.ml.exceptions import ConfigurationError, StorageFormatError  # noqa: E402
from nvcim_pt.ml.prompt_codec import (  # noqa: E402
    BitSliceLayout,
    EncodedPrompt,
    LinearAutoencoder,
    VirtualTokenSet,
    bit_slice,
    bit_slice_array,
    decode,
    dequantize,
    encode,
    quantize,
    train_autoencoder,
    unslice,
    unslice_array,
    update_autoencoder,
)


def low_rank_corpus(n, dim, rank, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
    X = rng.standard_normal((n, rank)) @ basis.T
    if noise:
        X = X + noise * rng.standard_normal((n, dim))
    return X


def base_digits(u, base, count):
    digits = []
    for _ in range(count):
        u, digit = divmod(u, base)
        digits.append(digit)
    return digits


def test_bit_slice_examples():
    two_bit = BitSliceLayout(2)
    assert two_bit.num_slices == 8
    assert bit_slice(0, two_bit) == base_digits(32768, 4, 8) == [0, 0, 0, 0, 0, 0, 0, 2]
    assert bit_slice(-32767, two_bit) == [1, 0, 0, 0, 0, 0, 0, 0]
    assert unslice([3] * 8, two_bit) == 32767
    assert bit_slice(12345, BitSliceLayout(4)) == base_digits(12345 + 32768, 16, 4)

    for bad_levels in ([0] * 8, [4, 0, 0, 0, 0, 0, 0, 0], [1] * 7):
        try:
            unslice(bad_levels, two_bit)
            assert False, f"{bad_levels} should be rejected"
        except ConfigurationError:
            pass
    try:
        bit_slice(-32768, two_bit)
        assert False, "-32768 is outside the clamped range"
    except ConfigurationError:
        pass
    try:
        BitSliceLayout(3)
        assert False, "3-bit devices are not supported"
    except ConfigurationError:
        pass


def test_bit_slice_exhaustive_roundtrip():
    values = np.arange(-32767, 32768)
    for bits in (1, 2, 4):
        layout = BitSliceLayout(bits)
        levels = bit_slice_array(values, layout)
        assert levels.shape == (values.size, layout.num_slices)
        assert levels.max() < layout.levels_per_device
        assert np.array_equal(unslice_array(levels, layout), values)
    logger.info("Every clamped int16 value round-trips for b in {1, 2, 4}")


def test_quantization_bound():
    rng = np.random.default_rng(4)
    values = rng.standard_normal((10, 48)) * 3.0
    data, scale = quantize(values)
    assert data.dtype == np.int16
    assert np.max(np.abs(data)) == 32767
    assert np.all(np.abs(dequantize(data, scale) - values) <= scale / 2 + 1e-12)

    zeros, unit = quantize(np.zeros((2, 3)))
    assert unit == 1.0
    assert not zeros.any()


def test_autoencoder_fits_low_rank_corpus():
    X = low_rank_corpus(200, 2048, 48, seed=1)
    ae = train_autoencoder(X, d_enc=48, epochs=10)
    variance = np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1))
    assert ae.reconstruction_loss(X) <= 0.01 * variance
    assert len(ae.history) == 11
    logger.info(f"Rank-48 corpus: loss {ae.reconstruction_loss(X):.3g} vs variance {variance:.3g}")


def test_autoencoder_matches_truncated_svd():
    X = low_rank_corpus(300, 64, 20, seed=2, noise=0.05)
    ae = train_autoencoder(X, d_enc=8, epochs=20)
    svd = TruncatedSVD(n_components=8, algorithm='arpack').fit(X)
    oracle = np.sum((svd.inverse_transform(svd.transform(X)) - X) ** 2) / X.shape[0]
    assert ae.reconstruction_loss(X) <= oracle * 1.01 + 1e-9


def test_autoencoder_determinism_and_validation():
    X = low_rank_corpus(50, 32, 10, seed=3)
    first = train_autoencoder(X, d_enc=12, seed=9, init='random', epochs=5)
    second = train_autoencoder(X, d_enc=12, seed=9, init='random', epochs=5)
    assert np.array_equal(first.enc_matrix, second.enc_matrix)
    assert np.array_equal(first.dec_matrix, second.dec_matrix)

    for kwargs in ({'corpus': [], 'd_enc': 4}, {'corpus': X, 'd_enc': 64}, {'corpus': X, 'd_enc': 4, 'init': 'pca'}):
        try:
            train_autoencoder(**kwargs)
            assert False, f"{kwargs.get('d_enc')}/{kwargs.get('init')} should be rejected"
        except ConfigurationError:
            pass


def test_identity_autoencoder_has_zero_loss():
    X = low_rank_corpus(40, 16, 16, seed=6)
    ae = train_autoencoder(X, d_enc=16, init='identity', epochs=5)
    assert ae.history[0] == 0.0
    assert all(loss == 0.0 for loss in ae.history)
    assert ae.reconstruction_loss(X) == 0.0


def test_identical_vectors_train_to_zero_loss():
    v = np.random.default_rng(7).standard_normal(16) * 3.0
    X = np.tile(v, (30, 1))
    ae = train_autoencoder(X, d_enc=4, init='random', seed=2, epochs=1000, lr=0.25)
    assert ae.history[0] > 0
    assert ae.history[-1] <= 1e-10 * ae.history[0], (ae.history[0], ae.history[-1])
    assert np.allclose(ae.reconstruct(ae.project(v)), v, atol=1e-4)


def test_update_autoencoder_decreases_loss():
    X = low_rank_corpus(80, 32, 6, seed=5, noise=0.01)
    ae = train_autoencoder(X[:10], d_enc=6, init='random', epochs=0)
    updated = update_autoencoder(ae, X, epochs=40)
    history = updated.history
    assert history[-1] < history[0]
    for before, after in zip(history, history[1:]):
        assert after <= before + 0.05 * history[0]
    # The input autoencoder is left untouched
    assert np.array_equal(ae.enc_matrix, train_autoencoder(X[:10], d_enc=6, init='random', epochs=0).enc_matrix)


def test_encode_decode_roundtrip():
    X = low_rank_corpus(120, 128, 24, seed=6)
    ae = train_autoencoder(X, d_enc=48, epochs=10)
    vts = VirtualTokenSet(tokens=X[:10], id='p0', domain_tag=3)
    ep = encode(vts, ae)
    assert ep.data.shape == (10, 48)
    assert ep.source_id == 'p0' and ep.domain_tag == 3
    restored = decode(ep, ae)
    error = np.linalg.norm(restored.tokens - vts.tokens) / np.linalg.norm(vts.tokens)
    assert error <= 0.02, error

    try:
        encode(VirtualTokenSet(tokens=np.zeros((2, 64))), ae)
        assert False, "dimension mismatch should be rejected"
    except ConfigurationError:
        pass


def test_encode_is_linear_up_to_quantization():
    X = low_rank_corpus(60, 32, 8, seed=7)
    ae = train_autoencoder(X, d_enc=8, epochs=5)
    vts = VirtualTokenSet(tokens=X[:4])
    base = encode(vts, ae)
    scaled = encode(VirtualTokenSet(tokens=2.5 * X[:4]), ae)
    bound = scaled.scale / 2 + 2.5 * base.scale / 2
    assert np.all(np.abs(scaled.scale * scaled.data - 2.5 * base.scale * base.data) <= bound + 1e-9)


def test_persistence():
    X = low_rank_corpus(40, 16, 4, seed=8)
    ae = train_autoencoder(X, d_enc=4, epochs=3)
    ep = encode(VirtualTokenSet(tokens=X[:5], id='p1', domain_tag=1), ae)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'ae.nvpt')
        ae.save(path)
        loaded = LinearAutoencoder.load(path)
        assert np.allclose(loaded.enc_matrix, ae.enc_matrix, atol=1e-6)
        assert np.allclose(loaded.dec_matrix, ae.dec_matrix, atol=1e-6)

        stem = os.path.join(tmp, 'p1')
        ep.save(stem)
        back = EncodedPrompt.load(stem)
        assert np.array_equal(back.data, ep.data)
        assert back.scale == ep.scale and back.source_id == 'p1' and back.domain_tag == 1
        assert os.path.getsize(f"{stem}.bin") == 5 * 4 * 2

        with open(path, 'r+b') as f:
            f.write(b'XXXX')
        with open(f"{stem}.bin", 'ab') as f:
            f.write(b'\x00')
        for load, target in ((LinearAutoencoder.load, path), (EncodedPrompt.load, stem)):
            try:
                load(target)
                assert False, f"{target} should be rejected"
            except StorageFormatError:
                pass


if __name__ == "__main__":
    logger.info("Starting prompt codec tests")
    for test in (
        test_bit_slice_examples,
        test_bit_slice_exhaustive_roundtrip,
        test_quantization_bound,
        test_autoencoder_fits_low_rank_corpus,
        test_autoencoder_matches_truncated_svd,
        test_autoencoder_determinism_and_validation,
        test_identity_autoencoder_has_zero_loss,
        test_identical_vectors_train_to_zero_loss,
        test_update_autoencoder_decreases_loss,
        test_encode_decode_roundtrip,
        test_encode_is_linear_up_to_quantization,
        test_persistence,
    ):
        logger.info(f"Running {test.__name__}")
        test()
    logger.info("Prompt codec tests completed")
