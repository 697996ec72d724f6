"""Prompt Codec: LLM-side virtual tokens <-> NVM-side encoded prompts

Virtual-token sets (T x D real matrices) are made NVM friendly in three stages:
    1. a linear autoencoder projects every token from D down to d_enc dimensions
    2. the projection is quantized to symmetric int16 with one per-tensor scale
    3. every int16 value is sliced into b-bit device levels (offset binary)

The decoder reverses stages 2 and 1 so a prompt read back from the crossbar can be used
by the (frozen) model again.

Example usage:
    - Pre-train: ae = train_autoencoder(corpus, d_enc=48)
    - Encode: ep = encode(vts, ae)
    - Restore: vts = decode(ep, ae)
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from nvcim_pt.ml.device_models import make_rng
from nvcim_pt.ml.exceptions import ConfigurationError, StorageFormatError

logger = logging.getLogger(__name__)

INT16_LIMIT = 32767
SLICE_OFFSET = 32768
WORD_BITS = 16

DEFAULT_ENCODING_DIM = 48
DEFAULT_EPOCHS = 50
DEFAULT_LEARNING_RATE = 0.5

CONTAINER_MAGIC = b'NVPT'
CONTAINER_VERSION = 1
_HEADER_DTYPE = np.dtype('<u4')
_WEIGHT_DTYPE = np.dtype('<f4')
_PAYLOAD_DTYPE = np.dtype('<i2')


@dataclass
class VirtualTokenSet:
    """A T x D matrix of soft-prompt tokens (one OVT)"""
    tokens: np.ndarray
    id: str = ''
    domain_tag: int = None
    training_log: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or min(self.tokens.shape) < 1:
            raise ConfigurationError(f"Virtual tokens must be a non-empty T x D matrix, got shape {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ConfigurationError(f"Virtual token set {self.id} contains non-finite entries")

    @property
    def num_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass
class EncodedPrompt:
    """int16, dimension-reduced form of an OVT as stored on the crossbars"""
    data: np.ndarray
    scale: float
    source_id: str = ''
    domain_tag: int = None
    multiscale_cache: dict = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ConfigurationError(f"Encoded prompt data must be 2-D, got shape {data.shape}")
        if data.size and np.max(np.abs(data.astype(np.int64))) > INT16_LIMIT:
            raise ConfigurationError(f"Encoded prompt values must lie in [-{INT16_LIMIT}, {INT16_LIMIT}]")
        if not self.scale > 0:
            raise ConfigurationError(f"Dequantization scale must be positive, got {self.scale}")
        self.data = data.astype(np.int16)
        self.scale = float(self.scale)

    @property
    def num_tokens(self):
        return self.data.shape[0]

    @property
    def d_enc(self):
        return self.data.shape[1]

    def save(self, stem):
        """Write `stem`.json (metadata) and `stem`.bin (row-major little-endian int16)"""
        meta = {
            'source_id': self.source_id,
            'domain_tag': self.domain_tag,
            'scale': self.scale,
            'shape': list(self.data.shape),
            'dtype': _PAYLOAD_DTYPE.str,
        }
        with open(f"{stem}.json", 'w') as f:
            json.dump(meta, f, indent=2)
        with open(f"{stem}.bin", 'wb') as f:
            f.write(self.data.astype(_PAYLOAD_DTYPE).tobytes(order='C'))

    @classmethod
    def load(cls, stem):
        try:
            with open(f"{stem}.json", 'r') as f:
                meta = json.load(f)
            shape = tuple(meta['shape'])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise StorageFormatError(f"Invalid encoded prompt metadata at {stem}.json: {e}") from e
        with open(f"{stem}.bin", 'rb') as f:
            payload = f.read()
        expected = int(np.prod(shape)) * _PAYLOAD_DTYPE.itemsize
        if len(payload) != expected:
            raise StorageFormatError(f"{stem}.bin holds {len(payload)} bytes, expected {expected}")
        data = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(shape)
        return cls(data=data, scale=meta['scale'], source_id=meta.get('source_id', ''),
                   domain_tag=meta.get('domain_tag'))


@dataclass(frozen=True)
class BitSliceLayout:
    """How one int16 word is spread across b-bit devices (least significant slice first)"""
    bits_per_device: int = 2

    def __post_init__(self):
        if self.bits_per_device not in (1, 2, 4):
            raise ConfigurationError(f"bits_per_device must be 1, 2 or 4, got {self.bits_per_device}")

    @property
    def num_slices(self):
        return WORD_BITS // self.bits_per_device

    @property
    def levels_per_device(self):
        return 2 ** self.bits_per_device

    @property
    def weights(self):
        return tuple(2 ** (self.bits_per_device * i) for i in range(self.num_slices))


class LinearAutoencoder:
    """Single linear encoder/decoder pair trained on mean squared reconstruction error

    Args:
        enc_matrix (np.ndarray): D x d_enc projection
        dec_matrix (np.ndarray): d_enc x D reconstruction
        history (list): Reconstruction loss after every training epoch
    """

    def __init__(self, enc_matrix, dec_matrix, history=None):
        enc_matrix = np.asarray(enc_matrix, dtype=np.float64)
        dec_matrix = np.asarray(dec_matrix, dtype=np.float64)
        if enc_matrix.ndim != 2 or dec_matrix.shape != enc_matrix.shape[::-1]:
            raise ConfigurationError(
                f"Inconsistent autoencoder shapes: enc {enc_matrix.shape}, dec {dec_matrix.shape}"
            )
        if not (np.all(np.isfinite(enc_matrix)) and np.all(np.isfinite(dec_matrix))):
            raise ConfigurationError("Autoencoder weights must be finite")
        self.enc_matrix = enc_matrix
        self.dec_matrix = dec_matrix
        self.history = list(history or [])

    @property
    def input_dim(self):
        return self.enc_matrix.shape[0]

    @property
    def d_enc(self):
        return self.enc_matrix.shape[1]

    def project(self, rows):
        return np.asarray(rows, dtype=np.float64) @ self.enc_matrix

    def reconstruct(self, codes):
        return np.asarray(codes, dtype=np.float64) @ self.dec_matrix

    def reconstruction_loss(self, corpus):
        """Mean over samples of the squared reconstruction error"""
        X = _as_corpus(corpus, self.input_dim)
        residual = self.reconstruct(self.project(X)) - X
        return float(np.sum(residual ** 2) / X.shape[0])

    def save(self, path):
        """Write the NVPT container: header then enc and dec as little-endian float32"""
        header = np.array([CONTAINER_VERSION, self.input_dim, self.d_enc], dtype=_HEADER_DTYPE)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CONTAINER_MAGIC)
            f.write(header.tobytes())
            f.write(self.enc_matrix.astype(_WEIGHT_DTYPE).tobytes(order='C'))
            f.write(self.dec_matrix.astype(_WEIGHT_DTYPE).tobytes(order='C'))
        logger.info(f"Saved autoencoder ({self.input_dim} -> {self.d_enc}) to {path}")

    @classmethod
    def load(cls, path):
        with open(path, 'rb') as f:
            blob = f.read()
        header_size = len(CONTAINER_MAGIC) + 3 * _HEADER_DTYPE.itemsize
        if len(blob) < header_size or blob[:4] != CONTAINER_MAGIC:
            raise StorageFormatError(f"{path} is not an NVPT autoencoder container")
        version, dim, d_enc = np.frombuffer(blob[4:header_size], dtype=_HEADER_DTYPE)
        if version != CONTAINER_VERSION:
            raise StorageFormatError(f"Unsupported NVPT container version {version}")
        count = int(dim) * int(d_enc)
        if len(blob) != header_size + 2 * count * _WEIGHT_DTYPE.itemsize:
            raise StorageFormatError(f"{path} is truncated or has trailing bytes")
        weights = np.frombuffer(blob[header_size:], dtype=_WEIGHT_DTYPE).astype(np.float64)
        enc = weights[:count].reshape(int(dim), int(d_enc))
        dec = weights[count:].reshape(int(d_enc), int(dim))
        logger.info(f"Loaded autoencoder ({dim} -> {d_enc}) from {path}")
        return cls(enc, dec)


def _as_corpus(corpus, dim=None):
    if isinstance(corpus, np.ndarray):
        X = corpus.astype(np.float64)
    else:
        corpus = list(corpus)
        if not corpus:
            raise ConfigurationError("Autoencoder corpus is empty")
        X = np.vstack([np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in corpus])
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ConfigurationError("Autoencoder corpus is empty")
    if dim is not None and X.shape[1] != dim:
        raise ConfigurationError(f"Corpus vectors have dimension {X.shape[1]}, autoencoder expects {dim}")
    return X


def _orthonormal_columns(basis, d_enc, dim, rng):
    """Complete `basis` (dim x r, orthonormal) to d_enc orthonormal columns"""
    extra = rng.standard_normal((dim, d_enc - basis.shape[1]))
    q, _ = np.linalg.qr(np.hstack([basis, extra]))
    return q[:, :d_enc]


def _initial_weights(X, d_enc, init, rng):
    dim = X.shape[1]
    if init == 'identity':
        if d_enc != dim:
            raise ConfigurationError("Identity initialization requires d_enc == D")
        return np.eye(dim), np.eye(dim)
    if init == 'svd':
        _, singular, vt = np.linalg.svd(X, full_matrices=False)
        rank = int(np.sum(singular > singular[0] * 1e-10)) if singular.size and singular[0] > 0 else 0
        basis = vt[:min(rank, d_enc)].T
    elif init == 'random':
        basis = np.zeros((dim, 0))
    else:
        raise ConfigurationError(f"Unknown autoencoder init '{init}' (expected svd, random or identity)")
    enc = _orthonormal_columns(basis, d_enc, dim, rng)
    return enc, enc.T.copy()


def _gradient_descent(enc, dec, X, epochs, lr):
    """Full-batch gradient descent on mean squared reconstruction error"""
    n = X.shape[0]
    curvature = np.linalg.norm(X, 2) ** 2 / n
    step = lr / (2.0 * curvature) if curvature > 0 else 0.0
    history = []
    for epoch in range(epochs):
        codes = X @ enc
        residual = codes @ dec - X
        history.append(float(np.sum(residual ** 2) / n))
        grad_dec = (2.0 / n) * codes.T @ residual
        grad_enc = (2.0 / n) * X.T @ (residual @ dec.T)
        enc = enc - step * grad_enc
        dec = dec - step * grad_dec
        logger.debug(f"Autoencoder epoch {epoch}: loss {history[-1]:.6g}")
    residual = X @ enc @ dec - X
    history.append(float(np.sum(residual ** 2) / n))
    return enc, dec, history


def train_autoencoder(corpus, d_enc=DEFAULT_ENCODING_DIM, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LEARNING_RATE,
                      seed=0, init='svd'):
    """Pre-train the linear autoencoder on a corpus of D-vectors

    Args:
        corpus: Sequence of D-vectors (or an n x D array)
        d_enc (int): Encoding dimension (must not exceed D)
        epochs (int): Full-batch gradient descent epochs
        lr (float): Step as a fraction of the stable step 1 / (2 * lambda_max(X^T X / n))
        seed (int): Seed for the random part of the initialization
        init (str): 'svd', 'random' or 'identity'

    Returns:
        LinearAutoencoder: The trained encoder/decoder pair
    """
    X = _as_corpus(corpus)
    if d_enc < 1 or d_enc > X.shape[1]:
        raise ConfigurationError(f"d_enc must be in [1, {X.shape[1]}], got {d_enc}")
    logger.info(f"Training autoencoder {X.shape[1]} -> {d_enc} on {X.shape[0]} vectors ({init} init, {epochs} epochs)")
    enc, dec = _initial_weights(X, d_enc, init, make_rng(seed))
    enc, dec, history = _gradient_descent(enc, dec, X, epochs, lr)
    logger.info(f"Autoencoder training finished: loss {history[0]:.6g} -> {history[-1]:.6g}")
    return LinearAutoencoder(enc, dec, history)


def update_autoencoder(ae, leftover, epochs=DEFAULT_EPOCHS, lr=DEFAULT_LEARNING_RATE):
    """Continue training from the current weights on buffer leftovers"""
    X = _as_corpus(leftover, ae.input_dim)
    enc, dec, history = _gradient_descent(ae.enc_matrix.copy(), ae.dec_matrix.copy(), X, epochs, lr)
    logger.info(f"Updated autoencoder on {X.shape[0]} leftover vectors: loss {history[0]:.6g} -> {history[-1]:.6g}")
    return LinearAutoencoder(enc, dec, history)


def quantize(values):
    """Symmetric per-tensor int16 quantization; returns (data, scale)"""
    values = np.asarray(values, dtype=np.float64)
    peak = np.max(np.abs(values)) if values.size else 0.0
    scale = peak / INT16_LIMIT if peak > 0 else 1.0
    data = np.clip(np.rint(values / scale), -INT16_LIMIT, INT16_LIMIT).astype(np.int16)
    return data, scale


def dequantize(data, scale):
    return np.asarray(data, dtype=np.float64) * scale


def encode(vts, ae):
    """Project every token with the encoder, then quantize to int16"""
    if vts.dim != ae.input_dim:
        raise ConfigurationError(f"Token dimension {vts.dim} does not match autoencoder input {ae.input_dim}")
    data, scale = quantize(ae.project(vts.tokens))
    return EncodedPrompt(data=data, scale=scale, source_id=vts.id, domain_tag=vts.domain_tag)


def decode_values(values, scale, ae, source_id='', domain_tag=None):
    """Decode real-valued codes (e.g. a noisy crossbar read-back) into virtual tokens"""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != ae.d_enc:
        raise ConfigurationError(f"Code shape {values.shape} does not match autoencoder code dim {ae.d_enc}")
    return VirtualTokenSet(tokens=ae.reconstruct(dequantize(values, scale)), id=source_id, domain_tag=domain_tag)


def decode(ep, ae):
    """Dequantize and project back to the LLM embedding space"""
    return decode_values(ep.data, ep.scale, ae, source_id=ep.source_id, domain_tag=ep.domain_tag)


def bit_slice_array(values, layout):
    """Offset-binary digits of int16 values; trailing axis holds slices, LSB first"""
    values = np.asarray(values, dtype=np.int64)
    if values.size and np.max(np.abs(values)) > INT16_LIMIT:
        raise ConfigurationError(f"Values must lie in [-{INT16_LIMIT}, {INT16_LIMIT}] to be sliced")
    unsigned = values + SLICE_OFFSET
    shifts = layout.bits_per_device * np.arange(layout.num_slices)
    return ((unsigned[..., None] >> shifts) & (layout.levels_per_device - 1)).astype(np.uint8)


def unslice_array(levels, layout):
    """Shift-and-add inverse of bit_slice_array over the trailing axis"""
    levels = np.asarray(levels)
    if levels.shape[-1] != layout.num_slices:
        raise ConfigurationError(f"Expected {layout.num_slices} slices, got {levels.shape[-1]}")
    if levels.size and (levels.min() < 0 or levels.max() >= layout.levels_per_device):
        raise ConfigurationError(f"Slice levels must lie in [0, {layout.levels_per_device - 1}]")
    weights = np.asarray(layout.weights, dtype=np.int64)
    return levels.astype(np.int64) @ weights - SLICE_OFFSET


def bit_slice(value, layout):
    """Device levels of one int16 value, least significant slice first"""
    return [int(level) for level in bit_slice_array(np.array([value]), layout)[0]]


def unslice(levels, layout):
    value = int(unslice_array(np.array([list(levels)]), layout)[0])
    if value < -INT16_LIMIT:
        raise ConfigurationError(f"Slices decode to {value}, outside the clamped int16 range")
    return value
