"""Experiment Harness: synthetic workloads, the end-to-end pipeline and parameter sweeps

A workload is a stream of token-embedding samples drawn around orthogonal domain
centroids, so every sample carries a ground-truth domain tag. The pipeline runs the two
modes of the system on it:
    - training: stream samples into the buffer; whenever it fills, select representatives,
      tune one prompt each, encode them and program them with the store's device variation,
      then update the autoencoder on the leftovers
    - inference: encode every held-out query, read the crossbars once and retrieve
      the best prompt per query

Retrieval accuracy is the fraction of queries whose retrieved prompt belongs to the
query's domain. Surrogate accuracy runs the frozen readout on the query with the
decoded read-back of the retrieved prompt.

Example usage:
    - workload = gen_workload(WorkloadSpec(num_domains=5, seed=0))
    - report = run_pipeline(workload, PipelineConfig(buffer_size=20, sigma=0.1))
    - frame = sweep(RunConfig(), 'results/sweep.csv', n_jobs=4)
"""

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import accuracy_score

from nvcim_pt.ml.device_models import VariationConfig, get_profile, spawn_rng
from nvcim_pt.ml.exceptions import ConfigurationError, StateError
from nvcim_pt.ml.noise_aware_tuning import (
    NoiseSpec,
    SurrogateTask,
    TuneConfig,
    predict,
    tune_one4all,
    tune_prompts,
)
from nvcim_pt.ml.nvcim_store import PromptStore, SearchConfig, WriteVerifyPolicy
from nvcim_pt.ml.prompt_codec import (
    BitSliceLayout,
    VirtualTokenSet,
    decode_values,
    encode,
    train_autoencoder,
    update_autoencoder,
)
from nvcim_pt.ml.representative_selection import BufferedSample, DataBuffer, select_all, selection_report

logger = logging.getLogger(__name__)

DEFAULT_BUFFER_SIZES = (10, 20, 30, 40, 50, 60)
DEFAULT_SIGMAS = (0.025, 0.050, 0.075, 0.100, 0.125, 0.150)
DEFAULT_PROFILE = 'nvm-3'

CONFIG_COLUMNS = ['buffer_size', 'sigma', 'profile', 'method', 'retrieval', 'noise_aware', 'write_verify', 'seed']
METRIC_COLUMNS = [
    'num_prompts', 'retrieval_accuracy', 'surrogate_accuracy', 'clean_surrogate_accuracy', 'accuracy_drop',
    'mean_margin', 'write_deviation_rms', 'macs', 'cell_reads', 'adc_conversions', 'cell_writes',
]
REPORT_COLUMNS = CONFIG_COLUMNS + METRIC_COLUMNS
SORT_COLUMNS = ['buffer_size', 'sigma', 'profile', 'method', 'seed']

RETRIEVAL_MODES = ('ssa', 'mips', 'one4all')


@dataclass(frozen=True)
class WorkloadSpec:
    """Synthetic domain-clustered user data

    Args:
        num_domains (int): Number of domains (ground-truth classes)
        samples_per_domain (int): Training-stream samples per domain
        dim (int): Token embedding dimension D
        num_tokens (int): Tokens per sample T
        domain_separation (float): Pairwise centroid distance in units of the within-domain std
        seed (int): Generator seed
        queries_per_domain (int): Held-out queries per domain
        warmup_per_domain (int): Samples per domain reserved for autoencoder pre-training
        within_std (float): Per-entry token noise std
        outlier_scale (float): Constant value of channel 0 in units of within_std; 0 disables it
    """
    num_domains: int = 5
    samples_per_domain: int = 12
    dim: int = 128
    num_tokens: int = 10
    domain_separation: float = 8.0
    seed: int = 0
    queries_per_domain: int = 10
    warmup_per_domain: int = 4
    within_std: float = 1.0
    outlier_scale: float = 50.0

    def __post_init__(self):
        counts = {
            'num_domains': self.num_domains, 'samples_per_domain': self.samples_per_domain, 'dim': self.dim,
            'num_tokens': self.num_tokens, 'queries_per_domain': self.queries_per_domain,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigurationError(f"WorkloadSpec.{name} must be an integer >= 1, got {value}")
        if self.warmup_per_domain < 0:
            raise ConfigurationError(f"warmup_per_domain must be >= 0, got {self.warmup_per_domain}")
        if not self.domain_separation > 0 or not self.within_std > 0:
            raise ConfigurationError("domain_separation and within_std must be positive")
        if not np.isfinite(self.outlier_scale) or self.outlier_scale < 0:
            raise ConfigurationError(f"outlier_scale must be >= 0, got {self.outlier_scale}")
        if self.num_domains > self.free_dims:
            raise ConfigurationError(
                f"Cannot place {self.num_domains} orthogonal centroids in {self.free_dims} free dimensions"
            )

    @property
    def free_dims(self):
        """Channels left for the centroids once the outlier channel is taken"""
        return self.dim - 1 if self.outlier_scale > 0 else self.dim


@dataclass
class Workload:
    spec: WorkloadSpec
    centroids: np.ndarray
    warmup: list
    train: list
    queries: list

    @property
    def samples(self):
        return self.warmup + self.train + self.queries


@dataclass(frozen=True)
class Method:
    """One retrieval/tuning/programming combination"""
    retrieval: str = 'ssa'
    noise_aware: bool = True
    write_verify: bool = False

    def __post_init__(self):
        if self.retrieval not in RETRIEVAL_MODES:
            raise ConfigurationError(f"retrieval must be one of {RETRIEVAL_MODES}, got '{self.retrieval}'")

    @property
    def label(self):
        for name, preset in METHOD_PRESETS.items():
            if preset == self:
                return name
        parts = [self.retrieval, 'na' if self.noise_aware else 'plain']
        if self.write_verify:
            parts.append('wv')
        return '+'.join(parts)


METHOD_PRESETS = {
    'nvcim-pt': Method('ssa', noise_aware=True, write_verify=False),
    'nvp-mips': Method('mips', noise_aware=True, write_verify=False),
    'no-miti-mips': Method('mips', noise_aware=False, write_verify=False),
    'swv': Method('ssa', noise_aware=False, write_verify=True),
    'one4all': Method('one4all', noise_aware=False, write_verify=False),
}
DEFAULT_METHODS = ('nvcim-pt', 'nvp-mips', 'no-miti-mips', 'swv')


def get_method(method):
    """Resolve a preset name, a 'retrieval+na|plain[+wv]' label, a dict or a Method"""
    if isinstance(method, Method):
        return method
    if isinstance(method, dict):
        return Method(**method)
    name = str(method).strip().lower()
    if name in METHOD_PRESETS:
        return METHOD_PRESETS[name]
    parts = name.split('+')
    if parts[0] in RETRIEVAL_MODES and set(parts[1:]) <= {'na', 'plain', 'wv'}:
        return Method(parts[0], noise_aware='plain' not in parts[1:], write_verify='wv' in parts[1:])
    raise ConfigurationError(f"Unknown method '{method}'. Presets: {', '.join(METHOD_PRESETS)}")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one end-to-end run needs besides the workload"""
    buffer_size: int = 20
    sigma: float = 0.1
    profile: str = DEFAULT_PROFILE
    method: Method = field(default_factory=lambda: METHOD_PRESETS['nvcim-pt'])
    seed: int = 0
    d_enc: int = 48
    bits_per_device: int = 2
    ae_epochs: int = 50
    ae_update_epochs: int = 10
    ae_lr: float = 0.5
    prompt_tokens: int = 10
    tune_steps: int = 200
    tune_lr: float = 25.0
    noise_factors: tuple = (1.0, 1.0, 1.0, 1.0)
    task_gain: float = 2.0
    scales: tuple = (1, 2, 4)
    weights: tuple = (1.0, 0.8, 0.6)
    similarity: str = 'dot'
    read_noise: bool = False
    adc_bits: int = None
    wv_tolerance: float = 0.01
    wv_max_iters: int = 20
    largest_cluster_only: bool = False
    prompt_init: str = 'sample'

    def __post_init__(self):
        object.__setattr__(self, 'method', get_method(self.method))
        if self.buffer_size < 1:
            raise ConfigurationError(f"buffer_size must be >= 1, got {self.buffer_size}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")
        if self.prompt_init not in ('random', 'sample'):
            raise ConfigurationError(f"prompt_init must be 'random' or 'sample', got '{self.prompt_init}'")

    def search_config(self):
        return SearchConfig(scales=self.scales, weights=self.weights, read_noise=self.read_noise,
                            variation=VariationConfig(self.sigma, self.seed), similarity=self.similarity,
                            adc_bits=self.adc_bits)

    def tune_config(self):
        sigma = self.sigma if self.method.noise_aware else 0.0
        return TuneConfig(steps=self.tune_steps, lr=self.tune_lr, num_tokens=self.prompt_tokens,
                          init=self.prompt_init,
                          noise=NoiseSpec(sigma=sigma, factors=self.noise_factors, seed=self.seed), seed=self.seed)

    def write_policy(self):
        return WriteVerifyPolicy(enabled=self.method.write_verify, tolerance=self.wv_tolerance,
                                 max_iters=self.wv_max_iters)


@dataclass(frozen=True)
class RunConfig:
    """A sweep: cross product of buffer sizes, sigmas, device profiles, methods and seeds"""
    buffer_sizes: tuple = DEFAULT_BUFFER_SIZES
    sigmas: tuple = DEFAULT_SIGMAS
    profiles: tuple = (DEFAULT_PROFILE,)
    methods: tuple = DEFAULT_METHODS
    seeds: tuple = (0,)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        object.__setattr__(self, 'buffer_sizes', tuple(int(b) for b in self.buffer_sizes))
        object.__setattr__(self, 'sigmas', tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, 'profiles', tuple(str(p) for p in self.profiles))
        object.__setattr__(self, 'methods', tuple(get_method(m) for m in self.methods))
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        if not self.buffer_sizes or any(b <= 0 for b in self.buffer_sizes):
            raise ConfigurationError(f"Buffer sizes must be positive, got {self.buffer_sizes}")
        if not self.sigmas or any(not s > 0 for s in self.sigmas):
            raise ConfigurationError(f"Sweep sigmas must be positive, got {self.sigmas}")
        if not self.profiles or not self.methods or not self.seeds:
            raise ConfigurationError("A sweep needs at least one profile, one method and one seed")
        for profile in self.profiles:
            get_profile(profile)

    def cells(self):
        for buffer_size, sigma, profile, method, seed in itertools.product(self.buffer_sizes, self.sigmas,
                                                                           self.profiles, self.methods, self.seeds):
            yield replace(self.pipeline, buffer_size=buffer_size, sigma=sigma, profile=profile, method=method,
                          seed=seed)

    def workload_for(self, seed):
        """Every run seed gets its own workload, offset from the workload seed"""
        return replace(self.workload, seed=self.workload.seed + seed)

    @classmethod
    def from_dict(cls, data):
        """Build from a JSON document whose keys mirror the field names"""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown run configuration keys: {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if 'workload' in kwargs:
            kwargs['workload'] = _dataclass_from_dict(WorkloadSpec, kwargs['workload'])
        if 'pipeline' in kwargs:
            kwargs['pipeline'] = _dataclass_from_dict(PipelineConfig, kwargs['pipeline'])
        for key in ('buffer_sizes', 'sigmas', 'profiles', 'methods', 'seeds'):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _dataclass_from_dict(cls, data):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"Unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class RunReport:
    """Metrics of one pipeline run"""
    config: PipelineConfig
    num_prompts: int
    retrieval_accuracy: float
    surrogate_accuracy: float
    clean_surrogate_accuracy: float
    mean_margin: float
    write_deviation_rms: float
    counters: dict
    wall_time: float = 0.0

    @property
    def accuracy_drop(self):
        return self.clean_surrogate_accuracy - self.surrogate_accuracy

    def as_row(self, include_wall_time=False):
        cfg = self.config
        row = {
            'buffer_size': cfg.buffer_size,
            'sigma': cfg.sigma,
            'profile': get_profile(cfg.profile).name,
            'method': cfg.method.label,
            'retrieval': cfg.method.retrieval,
            'noise_aware': cfg.method.noise_aware,
            'write_verify': cfg.method.write_verify,
            'seed': cfg.seed,
            'num_prompts': self.num_prompts,
            'retrieval_accuracy': self.retrieval_accuracy,
            'surrogate_accuracy': self.surrogate_accuracy,
            'clean_surrogate_accuracy': self.clean_surrogate_accuracy,
            'accuracy_drop': self.accuracy_drop,
            'mean_margin': self.mean_margin,
            'write_deviation_rms': self.write_deviation_rms,
        }
        row.update({name: self.counters[name] for name in ('macs', 'cell_reads', 'adc_conversions', 'cell_writes')})
        if include_wall_time:
            row['wall_time'] = self.wall_time
        return row


def gen_workload(spec):
    """Draw domain centroids and the warm-up, training and query samples

    Centroids are orthonormal directions scaled so that every pair is separated by
    domain_separation * within_std. The training stream is shuffled; warm-up and query
    samples are kept in domain order.

    With a positive outlier_scale, channel 0 of every token holds the constant
    outlier_scale * within_std and the centroids live in the remaining channels. The
    returned centroids leave that channel at 0, so they stay the domain means minus a
    shared offset.

    Args:
        spec (WorkloadSpec): Workload parameters

    Returns:
        Workload: centroids plus tagged samples
    """
    rng = spawn_rng(spec.seed, 'workload')
    first = spec.dim - spec.free_dims
    basis, _ = np.linalg.qr(rng.standard_normal((spec.free_dims, spec.num_domains)))
    radius = spec.domain_separation * spec.within_std / np.sqrt(2.0)
    centroids = np.zeros((spec.num_domains, spec.dim))
    centroids[:, first:] = basis.T * radius

    def draw(domain, split, i):
        tokens = centroids[domain] + rng.standard_normal((spec.num_tokens, spec.dim)) * spec.within_std
        if first:
            tokens[:, 0] = spec.outlier_scale * spec.within_std
        return BufferedSample(embedding=tokens, id=f"d{domain}-{split}-{i}", payload=f"domain {domain}",
                              domain_tag=domain, split=split)

    warmup, train, queries = [], [], []
    for domain in range(spec.num_domains):
        warmup.extend(draw(domain, 'warmup', i) for i in range(spec.warmup_per_domain))
        train.extend(draw(domain, 'train', i) for i in range(spec.samples_per_domain))
        queries.extend(draw(domain, 'query', i) for i in range(spec.queries_per_domain))
    order = rng.permutation(len(train))
    train = [train[i] for i in order]

    logger.info(f"Generated workload: {spec.num_domains} domains, {len(warmup)} warm-up, {len(train)} train, "
                f"{len(queries)} query samples (D={spec.dim}, T={spec.num_tokens}, seed={spec.seed})")
    return Workload(spec=spec, centroids=centroids, warmup=warmup, train=train, queries=queries)


def write_workload_jsonl(workload, path):
    """One header line with the spec and centroids, then one sample per line"""
    with open(path, 'w') as f:
        f.write(json.dumps({'meta': {'spec': asdict(workload.spec), 'centroids': workload.centroids.tolist()}}) + '\n')
        for sample in workload.samples:
            f.write(json.dumps(sample.to_record()) + '\n')
    logger.info(f"Wrote workload with {len(workload.samples)} samples to {path}")


def read_workload_jsonl(path):
    meta = None
    splits = {'warmup': [], 'train': [], 'query': []}
    with open(path, 'r') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}:{line_no}: invalid JSON ({e})") from e
            if 'meta' in record:
                meta = record['meta']
                continue
            sample = BufferedSample.from_record(record)
            splits[sample.split].append(sample)
    if meta is None:
        raise ConfigurationError(f"{path} has no workload header line")
    spec = _dataclass_from_dict(WorkloadSpec, meta['spec'])
    logger.info(f"Read workload from {path}")
    return Workload(spec=spec, centroids=np.asarray(meta['centroids'], dtype=np.float64),
                    warmup=splits['warmup'], train=splits['train'], queries=splits['query'])


def _token_rows(samples):
    return np.vstack([sample.embedding for sample in samples])


def _margins(scores):
    if scores.shape[1] < 2:
        return np.zeros(scores.shape[0])
    top = -np.sort(-scores, axis=1)[:, :2]
    denom = np.abs(top[:, 0])
    return np.divide(top[:, 0] - top[:, 1], denom, out=np.zeros_like(denom), where=denom > 0)


class TrainingResult(NamedTuple):
    """Outcome of training mode"""
    autoencoder: object
    task: SurrogateTask
    prompts: list
    encoded: list
    selections: list


def train_prompts(workload, cfg):
    """Training mode: stream the workload into the buffer and tune prompts on every flush

    Each tuned prompt is encoded with the autoencoder of its round; the autoencoder is
    then updated on the round's leftovers. Device variation is applied when the store
    programs the encodings.

    Returns:
        TrainingResult: final autoencoder, frozen task, clean prompts, their encodings, selection reports
    """
    corpus = workload.warmup or workload.train
    if not corpus:
        raise ConfigurationError("Workload has no samples to pre-train the autoencoder on")
    ae = train_autoencoder(_token_rows(corpus), d_enc=cfg.d_enc, epochs=cfg.ae_epochs, lr=cfg.ae_lr, seed=cfg.seed)
    task = SurrogateTask.from_prototypes(workload.centroids, gain=cfg.task_gain)
    tune_cfg = cfg.tune_config()
    buffer = DataBuffer(capacity=cfg.buffer_size)
    prompts, encoded, selections, representatives = [], [], [], []

    def keep(vts):
        prompts.append(vts)
        encoded.append(encode(vts, ae))

    for position, sample in enumerate(workload.train):
        buffer.add(sample)
        if not buffer.is_full:
            continue
        selection = select_all(buffer, seed=cfg.seed + position, largest_cluster_only=cfg.largest_cluster_only)
        selections.append(selection_report(selection))
        representatives.extend(selection.representatives)
        if cfg.method.retrieval != 'one4all':
            for vts in tune_prompts(selection.representatives, task, tune_cfg):
                keep(vts)
        if selection.leftovers:
            ae = update_autoencoder(ae, _token_rows(selection.leftovers), epochs=cfg.ae_update_epochs, lr=cfg.ae_lr)

    if cfg.method.retrieval == 'one4all' and representatives:
        keep(tune_one4all(representatives, task, tune_cfg))
    if len(buffer):
        logger.info(f"{len(buffer)} samples left in the buffer at the end of the stream")

    logger.info(f"Training mode finished: {len(prompts)} prompts over {len(selections)} buffer flushes "
                f"({cfg.method.label}, sigma={cfg.sigma})")
    return TrainingResult(autoencoder=ae, task=task, prompts=prompts, encoded=encoded, selections=selections)


def build_store(encoded, cfg):
    """Program encoded prompts into a fresh crossbar store that applies the run's device variation"""
    if not encoded:
        raise StateError(
            f"No prompts to store: the buffer of {cfg.buffer_size} samples never filled during training"
        )
    store = PromptStore(get_profile(cfg.profile), BitSliceLayout(cfg.bits_per_device),
                        store_scales=tuple(sorted(set(cfg.scales) | {1})), search_config=cfg.search_config(),
                        variation=VariationConfig(cfg.sigma, cfg.seed))
    policy = cfg.write_policy()
    program_rng = spawn_rng(cfg.seed, 'cell-program')
    for ep in encoded:
        store.program(ep, policy, program_rng)
    logger.info(f"Programmed {len(store)} prompts into {len(store.subarrays)} subarrays "
                f"(write-verify {'on' if policy.enabled else 'off'})")
    return store


def evaluate(store, ae, task, queries, clean_prompts, cfg):
    """Inference mode: retrieve for every query over one shared crossbar read

    Args:
        store (PromptStore): Programmed store
        ae (LinearAutoencoder): Encoder for the queries and decoder for the read-back
        task (SurrogateTask): Frozen readout
        queries (list): Held-out BufferedSample queries
        clean_prompts (dict): Prompt id -> tuned tokens before deployment
        cfg (PipelineConfig): Retrieval method and search parameters

    Returns:
        dict: retrieval/surrogate accuracies and the mean score margin
    """
    if not queries:
        raise ConfigurationError("Workload has no query samples")
    search = cfg.search_config()
    encoded = [encode(VirtualTokenSet(tokens=q.embedding, id=q.id), ae).data for q in queries]
    snapshot = store.read(search)
    query_search = search.mips() if cfg.method.retrieval == 'mips' else search
    scores = store.gemm_scores(encoded, query_search, snapshot)
    best = [store.best_index(row) for row in scores]

    truth = [q.domain_tag for q in queries]
    retrieved = [_tag(store.entries[b].domain_tag) for b in best]

    noisy_hits, clean_hits = [], []
    for query, b in zip(queries, best):
        entry = store.entries[b]
        read_back = decode_values(snapshot.values[b][1], entry.scale, ae).tokens
        noisy_hits.append(predict(read_back, query.embedding, task) == query.domain_tag)
        clean_hits.append(predict(clean_prompts[entry.id].tokens, query.embedding, task) == query.domain_tag)

    return {
        'retrieval_accuracy': float(accuracy_score(truth, retrieved)),
        'surrogate_accuracy': float(np.mean(noisy_hits)),
        'clean_surrogate_accuracy': float(np.mean(clean_hits)),
        'mean_margin': float(np.mean(_margins(scores))),
    }


def run_pipeline(workload, cfg):
    """Training mode over the sample stream, then inference mode over the held-out queries

    Args:
        workload (Workload): Generated or loaded workload
        cfg (PipelineConfig): One sweep cell

    Returns:
        RunReport: Accuracies, margin, deviation RMS and store counters
    """
    started = time.perf_counter()
    trained = train_prompts(workload, cfg)
    store = build_store(trained.encoded, cfg)
    clean_prompts = {vts.id: vts for vts in trained.prompts}
    metrics = evaluate(store, trained.autoencoder, trained.task, workload.queries, clean_prompts, cfg)

    report = RunReport(
        config=cfg,
        num_prompts=len(store),
        write_deviation_rms=store.write_deviation_rms(),
        counters=store.counters.as_dict(),
        wall_time=time.perf_counter() - started,
        **metrics,
    )
    logger.info(f"Inference mode finished: retrieval accuracy {report.retrieval_accuracy:.3f}, "
                f"surrogate accuracy {report.surrogate_accuracy:.3f} over {len(workload.queries)} queries")
    return report


def _tag(domain_tag):
    return -1 if domain_tag is None else int(domain_tag)


def _run_cell(run_cfg, cell):
    workload = gen_workload(run_cfg.workload_for(cell.seed))
    return run_pipeline(workload, cell)


def report_frame(reports, timing=False):
    """Rows in the fixed column order, sorted by configuration key"""
    columns = REPORT_COLUMNS + (['wall_time'] if timing else [])
    frame = pd.DataFrame([r.as_row(include_wall_time=timing) for r in reports], columns=columns)
    return frame.sort_values(SORT_COLUMNS, kind='mergesort').reset_index(drop=True)


def sweep(run_cfg, path=None, n_jobs=1, timing=False):
    """Run every cell of the sweep and write the CSV report

    Args:
        run_cfg (RunConfig): Sweep axes and base configuration
        path (str): CSV destination; nothing is written when None
        n_jobs (int): Parallel cells (joblib)
        timing (bool): Append the non-reproducible wall_time column

    Returns:
        pandas.DataFrame: The report
    """
    cells = list(run_cfg.cells())
    logger.info(f"Starting sweep of {len(cells)} cells with n_jobs={n_jobs}")
    reports = Parallel(n_jobs=n_jobs)(delayed(_run_cell)(run_cfg, cell) for cell in cells)
    frame = report_frame(reports, timing=timing)
    if path is not None:
        frame.to_csv(path, index=False)
        logger.info(f"Wrote sweep report with {len(frame)} rows to {path}")
    return frame


def summarize(frame):
    """Mean of every metric over seeds, per configuration"""
    keys = [c for c in CONFIG_COLUMNS if c != 'seed']
    metrics = [c for c in METRIC_COLUMNS + ['wall_time'] if c in frame.columns]
    summary = frame.groupby(keys, sort=True)[metrics].mean().reset_index()
    summary.insert(len(keys), 'runs', frame.groupby(keys, sort=True).size().values)
    return summary


def spearman_trend(x, y):
    """Spearman rank correlation; 0.0 when either side is constant"""
    x = pd.Series(list(x), dtype=float)
    y = pd.Series(list(y), dtype=float)
    if len(x) != len(y):
        raise ConfigurationError(f"Trend inputs differ in length: {len(x)} vs {len(y)}")
    if len(x) < 2 or x.nunique() < 2 or y.nunique() < 2:
        return 0.0
    return float(x.rank().corr(y.rank()))
