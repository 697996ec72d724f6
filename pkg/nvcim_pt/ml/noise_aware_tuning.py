"""Noise-aware Prompt Tuning

Trains one set of virtual tokens per representative sample. The language model is stood
in for by a frozen linear readout over the mean of the concatenated [prompt; input]
token rows, so only the prompt receives gradient updates.

During training every step evaluates the gradient at a noise-injected copy of the prompt
and applies it to the clean prompt (straight-through). The injected noise is
magnitude-dependent: entries are normalized by max|S| and binned into four intervals,
each with its own factor on the global sigma:

    |S_hat| > 0.75           -> f1
    0.5 <= |S_hat| <= 0.75   -> f2
    0.25 <= |S_hat| < 0.5    -> f3
    |S_hat| < 0.25           -> f4

Example usage:
    - task = SurrogateTask.from_prototypes(workload.centroids)
    - vts = tune_prompt(sample, task, TuneConfig(noise=NoiseSpec(sigma=0.1)))
"""

import logging
from dataclasses import dataclass, field, replace

import joblib
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from nvcim_pt.ml.device_models import spawn_rng
from nvcim_pt.ml.exceptions import ConfigurationError
from nvcim_pt.ml.prompt_codec import VirtualTokenSet

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.1
DEFAULT_NUM_TOKENS = 10
DEFAULT_STEPS = 200
DEFAULT_LEARNING_RATE = 25.0
DEFAULT_INIT_STD = 0.02
DEFAULT_PROTOTYPE_GAIN = 2.0

# Lower edges of intervals f1..f3; anything below the last edge uses f4
INTERVAL_EDGES = (0.75, 0.5, 0.25)


@dataclass(frozen=True)
class NoiseSpec:
    """Magnitude-dependent Gaussian noise injected during tuning

    Args:
        sigma (float): Global noise level relative to max|S|
        factors (tuple): Multipliers f1..f4 for the four magnitude intervals
        seed (int): Seed of the injection stream
    """
    sigma: float = DEFAULT_SIGMA
    factors: tuple = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        factors = tuple(float(f) for f in self.factors)
        object.__setattr__(self, 'factors', factors)
        if len(factors) != 4:
            raise ConfigurationError(f"NoiseSpec needs exactly four factors, got {len(factors)}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigurationError(f"Noise sigma must be finite and >= 0, got {self.sigma}")
        if any(not np.isfinite(f) or f < 0 for f in factors):
            raise ConfigurationError(f"Noise factors must be finite and >= 0, got {factors}")

    @classmethod
    def from_profile(cls, profile, sigma=DEFAULT_SIGMA, seed=0):
        """Factors proportional to the device's per-level sigma, highest level first"""
        positions = np.rint(np.linspace(profile.num_levels - 1, 0, 4)).astype(int)
        sigmas = np.asarray(profile.sigma_per_level)[positions]
        peak = sigmas.max()
        factors = tuple(sigmas / peak) if peak > 0 else (0.0,) * 4
        return cls(sigma=sigma, factors=factors, seed=seed)


@dataclass(frozen=True, eq=False)
class SurrogateTask:
    """Frozen linear readout standing in for the language model

    logits = W h + c, with h the mean of the concatenated prompt and input token rows.
    """
    W: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        c = np.array(self.c, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or c.shape[0] != W.shape[0]:
            raise ConfigurationError(f"Readout shapes are inconsistent: W {W.shape}, c {c.shape}")
        W.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, 'W', W)
        object.__setattr__(self, 'c', c)

    @property
    def class_count(self):
        return self.W.shape[0]

    @property
    def dim(self):
        return self.W.shape[1]

    @classmethod
    def random(cls, dim, class_count, seed=0):
        rng = spawn_rng(seed, 'surrogate-task')
        W = rng.standard_normal((class_count, dim)) / np.sqrt(dim)
        c = rng.standard_normal(class_count) * 0.1
        return cls(W=W, c=c)

    @classmethod
    def from_prototypes(cls, prototypes, gain=DEFAULT_PROTOTYPE_GAIN):
        """Readout whose rows point at per-class prototype vectors"""
        prototypes = np.asarray(prototypes, dtype=np.float64)
        norms = np.linalg.norm(prototypes, axis=1)
        if np.any(norms == 0):
            raise ConfigurationError("Prototype vectors must be non-zero")
        W = prototypes / norms[:, None] * (gain / norms.mean())
        return cls(W=W, c=np.zeros(prototypes.shape[0]))

    def save(self, path):
        joblib.dump({'W': np.asarray(self.W), 'c': np.asarray(self.c)}, path)

    @classmethod
    def load(cls, path):
        data = joblib.load(path)
        return cls(W=data['W'], c=data['c'])


@dataclass(frozen=True)
class TuneConfig:
    """Prompt-tuning hyper-parameters (plain gradient descent)"""
    steps: int = DEFAULT_STEPS
    lr: float = DEFAULT_LEARNING_RATE
    num_tokens: int = DEFAULT_NUM_TOKENS
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    init: str = 'random'
    init_std: float = DEFAULT_INIT_STD
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.num_tokens < 1:
            raise ConfigurationError(f"num_tokens must be >= 1, got {self.num_tokens}")
        if self.init not in ('random', 'sample'):
            raise ConfigurationError(f"init must be 'random' or 'sample', got '{self.init}'")

    def without_noise(self):
        return replace(self, noise=replace(self.noise, sigma=0.0))


def interval_index(S):
    """Noise interval (0..3 for f1..f4) of every entry"""
    S = np.asarray(S, dtype=np.float64)
    m = np.max(np.abs(S)) if S.size else 0.0
    if m == 0:
        return np.full(S.shape, 3, dtype=np.int64)
    magnitude = np.abs(S) / m
    return np.select(
        [magnitude > INTERVAL_EDGES[0], magnitude >= INTERVAL_EDGES[1], magnitude >= INTERVAL_EDGES[2]],
        [0, 1, 2],
        default=3,
    ).astype(np.int64)


def inject_noise(S, spec, rng):
    S = np.asarray(S, dtype=np.float64)
    m = np.max(np.abs(S)) if S.size else 0.0
    if m == 0 or spec.sigma == 0:
        return S.copy()
    factors = np.asarray(spec.factors)[interval_index(S)]
    return S + rng.standard_normal(S.shape) * (spec.sigma * factors * m)


def _check_shapes(S, input_tokens, task):
    S = np.asarray(S, dtype=np.float64)
    input_tokens = np.asarray(input_tokens, dtype=np.float64)
    if S.ndim != 2 or input_tokens.ndim != 2:
        raise ConfigurationError("Prompt and input must both be token matrices")
    if S.shape[1] != task.dim or input_tokens.shape[1] != task.dim:
        raise ConfigurationError(
            f"Token dimension mismatch: prompt {S.shape[1]}, input {input_tokens.shape[1]}, readout {task.dim}"
        )
    return S, input_tokens


def _check_target(target, task):
    if target is None or not 0 <= int(target) < task.class_count:
        raise ConfigurationError(f"Target class {target} out of range for {task.class_count} classes")
    return int(target)


def logits(S, input_tokens, task):
    S, input_tokens = _check_shapes(S, input_tokens, task)
    h = np.vstack([S, input_tokens]).mean(axis=0)
    return task.W @ h + task.c


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def forward(S, input_tokens, task, target):
    """Cross-entropy of the frozen readout; returns (loss, logits)"""
    target = _check_target(target, task)
    z = logits(S, input_tokens, task)
    shifted = z - z.max()
    loss = float(np.log(np.exp(shifted).sum()) - shifted[target])
    return loss, z


def grad_tokens(S, input_tokens, task, target):
    """Analytic d loss / d S; every prompt row receives the same gradient"""
    target = _check_target(target, task)
    S, input_tokens = _check_shapes(S, input_tokens, task)
    g = _softmax(logits(S, input_tokens, task))
    g[target] -= 1.0
    row_grad = task.W.T @ g / (S.shape[0] + input_tokens.shape[0])
    return np.broadcast_to(row_grad, S.shape).copy()


def predict(S, input_tokens, task):
    return int(np.argmax(logits(S, input_tokens, task)))


def surrogate_accuracy(pairs, task):
    """Fraction of (prompt tokens, sample) pairs classified as the sample's domain"""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    hits = [predict(S, sample.embedding, task) == sample.domain_tag for S, sample in pairs]
    return float(np.mean(hits))


def _initial_prompt(sample, cfg, dim):
    if cfg.init == 'sample':
        rows = sample.embedding[:cfg.num_tokens]
        S = np.zeros((cfg.num_tokens, dim))
        S[:rows.shape[0]] = rows
        return S
    rng = spawn_rng(cfg.seed, f'prompt-init/{sample.id}')
    return rng.standard_normal((cfg.num_tokens, dim)) * cfg.init_std


def _target_for(sample, task, cfg):
    if sample.domain_tag is not None:
        return int(sample.domain_tag)
    return predict(np.zeros((cfg.num_tokens, task.dim)), sample.embedding, task)


def tune_prompt(sample, task, cfg, target=None):
    """Train one prompt for one representative sample

    Args:
        sample (BufferedSample): The representative
        task (SurrogateTask): Frozen readout
        cfg (TuneConfig): Tuning hyper-parameters
        target (int): Class to steer toward; defaults to the sample's domain tag, or the
            readout's own prediction for the bare input when the sample is untagged

    Returns:
        VirtualTokenSet: Tuned tokens carrying the sample's domain tag and a (step, loss) log
    """
    target = _target_for(sample, task, cfg) if target is None else target
    S = _initial_prompt(sample, cfg, task.dim)
    noise_rng = spawn_rng(cfg.noise.seed, f'noise-injection/{sample.id}')
    log = []

    for step in range(cfg.steps):
        noisy = inject_noise(S, cfg.noise, noise_rng)
        loss, _ = forward(noisy, sample.embedding, task, target)
        S = S - cfg.lr * grad_tokens(noisy, sample.embedding, task, target)
        log.append((step, loss))
        logger.debug(f"Tuning {sample.id} step {step}: loss {loss:.6g}")

    final_loss, _ = forward(S, sample.embedding, task, target)
    log.append((cfg.steps, final_loss))
    logger.info(f"Tuned prompt for {sample.id}: loss {log[0][1]:.4f} -> {final_loss:.4f} "
                f"(sigma={cfg.noise.sigma})")
    return VirtualTokenSet(tokens=S, id=f"ovt-{sample.id}", domain_tag=sample.domain_tag, training_log=log)


def tune_prompts(samples, task, cfg, n_jobs=1):
    """tune_prompt over several representatives; streams are per sample so order does not matter"""
    if n_jobs == 1:
        return [tune_prompt(sample, task, cfg) for sample in samples]
    return Parallel(n_jobs=n_jobs)(delayed(tune_prompt)(sample, task, cfg) for sample in samples)


def tune_one4all(samples, task, cfg):
    """A single prompt trained on the averaged gradient of every sample"""
    samples = list(samples)
    if not samples:
        raise ConfigurationError("tune_one4all needs at least one sample")
    targets = [_target_for(sample, task, cfg) for sample in samples]
    S = spawn_rng(cfg.seed, 'prompt-init/one4all').standard_normal((cfg.num_tokens, task.dim)) * cfg.init_std
    noise_rng = spawn_rng(cfg.noise.seed, 'noise-injection/one4all')
    log = []

    for step in range(cfg.steps):
        noisy = inject_noise(S, cfg.noise, noise_rng)
        grads = [grad_tokens(noisy, sample.embedding, task, y) for sample, y in zip(samples, targets)]
        loss = np.mean([forward(noisy, sample.embedding, task, y)[0] for sample, y in zip(samples, targets)])
        S = S - cfg.lr * np.mean(grads, axis=0)
        log.append((step, float(loss)))

    final_loss = np.mean([forward(S, sample.embedding, task, y)[0] for sample, y in zip(samples, targets)])
    log.append((cfg.steps, float(final_loss)))
    logger.info(f"Tuned one4all prompt on {len(samples)} samples: loss {log[0][1]:.4f} -> {log[-1][1]:.4f}")
    return VirtualTokenSet(tokens=S, id='ovt-one4all', training_log=log)


def training_log_frame(vts):
    return pd.DataFrame(vts.training_log, columns=['step', 'loss'])


def save_prompts(prompts, path):
    joblib.dump(
        [{'tokens': p.tokens, 'id': p.id, 'domain_tag': p.domain_tag, 'training_log': p.training_log} for p in prompts],
        path,
    )
    logger.info(f"Saved {len(prompts)} tuned prompts to {path}")


def load_prompts(path):
    records = joblib.load(path)
    prompts = [VirtualTokenSet(**record) for record in records]
    logger.info(f"Loaded {len(prompts)} tuned prompts from {path}")
    return prompts
