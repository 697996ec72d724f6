"""NVCiM Prompt Store: crossbar-backed storage and scaled search of encoded prompts

Every stored prompt keeps three average-pooled versions of its int16 codes (scales 1, 2
and 4 by default). Each pooled token row occupies one crossbar column: d_enc values x
num_slices device levels stacked down the rows (48 x 8 = 384 cells with 2-bit devices).
An entry therefore needs sum(ceil(T / s)) columns, packed greedily into 384 x 128
subarrays that are allocated on demand.

Programming first applies the relative deployment variation to each pooled version (when
the store has one), then freezes a Gaussian deviation per cell, optionally tightened by
write-verify. Reading adds that deviation (and optional read noise) to the nominal
conductance, then recombines the slices by shift-and-add. Retrieval scores a query against
every entry with the weighted multi-scale dot product (WMSDP) or plain MIPS, either entry
by entry or as one matrix product per scale.

Example usage:
    - store = PromptStore(get_profile('nvm-3'), BitSliceLayout(2))
    - store.program(encoded_prompt, WriteVerifyPolicy(), make_rng(0))
    - match = store.retrieve(encoded_query.data, SearchConfig())
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from nvcim_pt.ml.device_models import DeviceProfile, VariationConfig, level_sigmas, perturb_values, spawn_rng
from nvcim_pt.ml.exceptions import CapacityError, ConfigurationError, StateError, StorageFormatError
from nvcim_pt.ml.prompt_codec import (
    INT16_LIMIT,
    SLICE_OFFSET,
    BitSliceLayout,
    bit_slice_array,
    unslice_array,
)

logger = logging.getLogger(__name__)

DEFAULT_ROWS = 384
DEFAULT_COLS = 128
DEFAULT_SCALES = (1, 2, 4)
DEFAULT_WEIGHTS = (1.0, 0.8, 0.6)
DEFAULT_TOLERANCE = 0.01
DEFAULT_MAX_ITERS = 20

MANIFEST_NAME = 'manifest.json'
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SearchConfig:
    """How retrieval scores a query

    Args:
        scales (tuple): Pooling scales combined by the search
        weights (tuple): One non-negative weight per scale
        read_noise (bool): Add a fresh per-read Gaussian draw on top of the frozen write deviation
        variation (VariationConfig): Seed source of the read-noise stream
        similarity (str): 'dot' (WMSDP) or 'cosine' (weighted multi-scale cosine)
        adc_bits (int): Cell-level ADC resolution; None for ideal converters
    """
    scales: tuple = DEFAULT_SCALES
    weights: tuple = DEFAULT_WEIGHTS
    read_noise: bool = False
    variation: VariationConfig = field(default_factory=VariationConfig)
    similarity: str = 'dot'
    adc_bits: int = None

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, 'scales', scales)
        object.__setattr__(self, 'weights', weights)
        if not scales or len(scales) != len(weights):
            raise ConfigurationError(f"Need one weight per scale, got scales {scales} and weights {weights}")
        if any(s < 1 for s in scales) or len(set(scales)) != len(scales):
            raise ConfigurationError(f"Scales must be distinct integers >= 1, got {scales}")
        if any(not np.isfinite(w) or w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigurationError(f"Weights must be >= 0 with a positive sum, got {weights}")
        if self.similarity not in ('dot', 'cosine'):
            raise ConfigurationError(f"similarity must be 'dot' or 'cosine', got '{self.similarity}'")
        if self.adc_bits is not None and not 1 <= int(self.adc_bits) <= 16:
            raise ConfigurationError(f"adc_bits must be in [1, 16], got {self.adc_bits}")

    def mips(self):
        """Single-scale, unit-weight configuration (plain inner product search)"""
        return SearchConfig(scales=(1,), weights=(1.0,), read_noise=self.read_noise, variation=self.variation,
                            similarity='dot', adc_bits=self.adc_bits)


@dataclass(frozen=True)
class WriteVerifyPolicy:
    """Iterative program-and-verify of every cell

    Args:
        enabled (bool): Verify after programming
        tolerance (float): Accepted |deviation| in normalized-conductance units
        max_iters (int): Programming attempts per cell; the best attempt is kept when none passes
    """
    enabled: bool = False
    tolerance: float = DEFAULT_TOLERANCE
    max_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError(f"Write-verify tolerance must be > 0, got {self.tolerance}")
        if self.max_iters < 1:
            raise ConfigurationError(f"Write-verify max_iters must be >= 1, got {self.max_iters}")


@dataclass
class StoreCounters:
    macs: int = 0
    cell_reads: int = 0
    adc_conversions: int = 0
    cell_writes: int = 0

    def as_dict(self):
        return asdict(self)

    def reset(self):
        self.macs = self.cell_reads = self.adc_conversions = self.cell_writes = 0


class CrossbarSubArray:
    """One rows x cols array of multi-level cells"""

    def __init__(self, rows=DEFAULT_ROWS, cols=DEFAULT_COLS):
        self.rows = rows
        self.cols = cols
        self.levels = np.zeros((rows, cols), dtype=np.uint8)
        self.deviation = np.zeros((rows, cols), dtype=np.float32)
        self.used_cols = 0

    @property
    def free_cols(self):
        return self.cols - self.used_cols

    def allocate(self, count):
        start = self.used_cols
        self.used_cols += count
        return start


@dataclass
class StoredEntry:
    """One programmed prompt and where its pooled versions live"""
    id: str
    index: int
    domain_tag: int
    scale: float
    num_tokens: int
    d_enc: int
    subarray: int
    col_start: int
    col_offsets: dict
    scaled: dict = field(repr=False, default_factory=dict)

    @property
    def col_count(self):
        return sum(count for _, count in self.col_offsets.values())

    def to_manifest(self):
        return {
            'id': self.id,
            'domain_tag': self.domain_tag,
            'scale': self.scale,
            'num_tokens': self.num_tokens,
            'd_enc': self.d_enc,
            'subarray': self.subarray,
            'col_start': self.col_start,
            'col_offsets': {str(s): list(span) for s, span in self.col_offsets.items()},
        }


class ReadSnapshot(NamedTuple):
    """One physical read of every programmed cell, reconstructed per entry and scale"""
    values: list


class Match(NamedTuple):
    id: str
    score: float


def pool(x, i):
    """Average non-overlapping windows of i token rows; the last window may be shorter"""
    if int(i) != i or i < 1:
        raise ConfigurationError(f"Pooling scale must be an integer >= 1, got {i}")
    x = np.asarray(x, dtype=np.float64)
    if i == 1:
        return x.copy()
    starts = np.arange(0, x.shape[0], int(i))
    counts = np.diff(np.append(starts, x.shape[0]))
    return np.add.reduceat(x, starts, axis=0) / counts[:, None]


def pool_int16(data, i):
    """Pool integer codes and round back to the clamped int16 grid"""
    return np.clip(np.rint(pool(data, i)), -INT16_LIMIT, INT16_LIMIT).astype(np.int64)


def align_length(e, num_tokens):
    """Truncate or zero-pad query token rows to the stored token count"""
    e = np.asarray(e, dtype=np.float64)
    if e.shape[0] >= num_tokens:
        return e[:num_tokens]
    return np.vstack([e, np.zeros((num_tokens - e.shape[0], e.shape[1]))])


def combine_scores(per_scale, cfg, query_norms=None, entry_norms=None):
    """Weighted average over scales of per-scale dot products (or cosines)

    Args:
        per_scale (dict): scale -> dot products (any broadcastable shape)
        cfg (SearchConfig): scales, weights and similarity
        query_norms (dict): scale -> query norms, only needed for cosine
        entry_norms (dict): scale -> entry norms, only needed for cosine

    Returns:
        np.ndarray: Combined scores
    """
    total = 0.0
    for s, w in zip(cfg.scales, cfg.weights):
        term = np.asarray(per_scale[s], dtype=np.float64)
        if cfg.similarity == 'cosine':
            denom = query_norms[s] * entry_norms[s]
            term = np.divide(term, denom, out=np.zeros(np.broadcast(term, denom).shape), where=denom > 0)
        total = total + w * term
    return total / sum(cfg.weights)


def wmsdp(e, p_scaled, cfg, num_tokens=None):
    """Weighted multi-scale dot product of a query against one entry's pooled versions

    Args:
        e: Query token matrix, aligned to the stored token count before pooling
        p_scaled (dict): scale -> stored pooled matrix
        cfg (SearchConfig): scales and weights
        num_tokens (int): Stored token count; read from the scale-1 matrix when omitted

    Returns:
        float: sum_i w_i <Pool_i(e), p_i> / sum_i w_i
    """
    e = np.asarray(e, dtype=np.float64)
    p_any = np.asarray(next(iter(p_scaled.values())))
    if e.ndim != 2 or e.shape[1] != p_any.shape[1]:
        raise ConfigurationError(f"Query shape {e.shape} does not match stored columns {p_any.shape[1]}")
    if num_tokens is None:
        if 1 not in p_scaled:
            raise ConfigurationError("num_tokens is required when scale 1 is not among the stored versions")
        num_tokens = np.asarray(p_scaled[1]).shape[0]
    aligned = align_length(e, num_tokens)
    dots, q_norms, p_norms = {}, {}, {}
    for s in cfg.scales:
        if s not in p_scaled:
            raise ConfigurationError(f"Scale {s} is not stored for this entry")
        q = pool(aligned, s).ravel()
        p = np.asarray(p_scaled[s], dtype=np.float64).ravel()
        if q.shape != p.shape:
            raise ConfigurationError(f"Pooled shapes differ at scale {s}: {q.shape} vs {p.shape}")
        dots[s] = q @ p
        q_norms[s] = np.linalg.norm(q)
        p_norms[s] = np.linalg.norm(p)
    return float(combine_scores(dots, cfg, q_norms, p_norms))


def _query_matrix(e_query):
    data = getattr(e_query, 'data', e_query)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ConfigurationError(f"Query must be a token matrix, got shape {data.shape}")
    return data


class PromptStore:
    """Crossbar-backed index of encoded prompts

    Args:
        profile (DeviceProfile): Device noise model (num_levels must equal 2**bits_per_device)
        layout (BitSliceLayout): How int16 codes are sliced across devices
        rows (int): Subarray rows
        cols (int): Subarray columns
        max_subarrays (int): Capacity limit; None allocates without bound
        store_scales (tuple): Pooling scales kept for every entry
        search_config (SearchConfig): Default search used when none is passed
        variation (VariationConfig): Relative deployment variation applied to every pooled version
            before it is sliced; each version draws its own perturbation. None programs exact codes
    """

    def __init__(self, profile, layout=None, rows=DEFAULT_ROWS, cols=DEFAULT_COLS, max_subarrays=None,
                 store_scales=DEFAULT_SCALES, search_config=None, variation=None):
        self.profile = profile
        self.layout = layout or BitSliceLayout()
        if profile.num_levels != self.layout.levels_per_device:
            raise ConfigurationError(
                f"Profile {profile.name} has {profile.num_levels} levels but {self.layout.bits_per_device}-bit "
                f"devices need {self.layout.levels_per_device}"
            )
        self.store_scales = tuple(sorted(int(s) for s in store_scales))
        if 1 not in self.store_scales:
            raise ConfigurationError("Scale 1 must always be stored")
        self.rows = rows
        self.cols = cols
        self.max_subarrays = max_subarrays
        self.search_config = search_config or SearchConfig()
        self.subarrays = []
        self.entries = []
        self.counters = StoreCounters()
        self.d_enc = None
        self._read_rng = spawn_rng(self.search_config.variation.seed, 'cell-read')
        self.variation = variation
        self._deploy_rng = spawn_rng(variation.seed, 'deployment') if variation is not None else None

    def __len__(self):
        return len(self.entries)

    @property
    def rows_per_column(self):
        return self.d_enc * self.layout.num_slices

    def _columns_for(self, num_tokens):
        return {s: math.ceil(num_tokens / s) for s in self.store_scales}

    def _place(self, col_count):
        if col_count > self.cols:
            raise CapacityError(f"An entry needs {col_count} columns but subarrays only have {self.cols}")
        if self.subarrays and self.subarrays[-1].free_cols >= col_count:
            index = len(self.subarrays) - 1
        else:
            if self.max_subarrays is not None and len(self.subarrays) >= self.max_subarrays:
                raise CapacityError(f"Store is full ({self.max_subarrays} subarrays of {self.rows}x{self.cols})")
            self.subarrays.append(CrossbarSubArray(self.rows, self.cols))
            index = len(self.subarrays) - 1
            logger.debug(f"Allocated subarray {index}")
        return index, self.subarrays[index].allocate(col_count)

    def _deploy(self, codes):
        """Deployed codes: v0 + N(0, (sigma * max|v0|)^2), rounded back onto the int16 grid"""
        if self.variation is None or self.variation.global_sigma == 0:
            return codes
        deployed = perturb_values(codes, self.variation, self._deploy_rng)
        return np.clip(np.rint(deployed), -INT16_LIMIT, INT16_LIMIT).astype(np.int64)

    def _write_cells(self, levels, policy, rng):
        """Frozen deviation for every cell, re-drawn by write-verify while out of tolerance"""
        sigmas = level_sigmas(self.profile, levels.ravel())
        attempts = policy.max_iters if policy.enabled else 1
        draws = rng.standard_normal((attempts, sigmas.size)) * sigmas
        if not policy.enabled:
            self.counters.cell_writes += sigmas.size
            return draws[0].reshape(levels.shape)
        within = np.abs(draws) <= policy.tolerance
        passed = within.any(axis=0)
        first_pass = np.argmax(within, axis=0)
        best = np.argmin(np.abs(draws), axis=0)
        chosen = np.where(passed, first_pass, best)
        pulses = np.where(passed, first_pass + 1, attempts)
        self.counters.cell_writes += int(pulses.sum())
        exhausted = int((~passed).sum())
        if exhausted:
            logger.warning(f"Write-verify exhausted {attempts} attempts on {exhausted} of {sigmas.size} cells")
        return draws[chosen, np.arange(sigmas.size)].reshape(levels.shape)

    def program(self, ep, policy=None, rng=None):
        """Program one encoded prompt; see the module-level program()"""
        policy = policy or WriteVerifyPolicy()
        rng = rng if rng is not None else spawn_rng(0, 'cell-program')
        if any(entry.id == ep.source_id for entry in self.entries):
            raise ConfigurationError(f"An entry with id '{ep.source_id}' is already stored")
        if self.d_enc is None:
            if ep.d_enc * self.layout.num_slices > self.rows:
                raise ConfigurationError(
                    f"d_enc={ep.d_enc} with {self.layout.num_slices} slices needs "
                    f"{ep.d_enc * self.layout.num_slices} rows, subarrays have {self.rows}"
                )
            self.d_enc = ep.d_enc
        elif ep.d_enc != self.d_enc:
            raise ConfigurationError(f"Store holds d_enc={self.d_enc} codes, got {ep.d_enc}")

        scaled = {s: self._deploy(pool_int16(ep.data, s)) for s in self.store_scales}
        ep.multiscale_cache = scaled
        columns = self._columns_for(ep.num_tokens)
        col_count = sum(columns.values())
        sub_index, col_start = self._place(col_count)

        offsets, start = {}, 0
        for s in self.store_scales:
            offsets[s] = (start, columns[s])
            start += columns[s]

        codes = np.vstack([scaled[s] for s in self.store_scales])
        levels = bit_slice_array(codes, self.layout).reshape(col_count, -1).T
        deviation = self._write_cells(levels, policy, rng)

        sub = self.subarrays[sub_index]
        region = (slice(0, self.rows_per_column), slice(col_start, col_start + col_count))
        sub.levels[region] = levels
        sub.deviation[region] = deviation.astype(np.float32)

        entry = StoredEntry(id=ep.source_id, index=len(self.entries), domain_tag=ep.domain_tag, scale=ep.scale,
                            num_tokens=ep.num_tokens, d_enc=ep.d_enc, subarray=sub_index, col_start=col_start,
                            col_offsets=offsets, scaled=scaled)
        self.entries.append(entry)
        logger.debug(f"Programmed entry {entry.id} into subarray {sub_index}, columns {col_start}..{col_start + col_count - 1}")
        return entry

    def _cell_region(self, entry):
        sub = self.subarrays[entry.subarray]
        cols = slice(entry.col_start, entry.col_start + entry.col_count)
        return sub.levels[:self.rows_per_column, cols], sub.deviation[:self.rows_per_column, cols]

    def _shift_add(self, analog_levels, col_count):
        """Recombine per-cell analog level estimates into one real value per (column, dim)"""
        weights = np.asarray(self.layout.weights, dtype=np.float64)
        per_column = analog_levels.T.reshape(col_count, self.d_enc, self.layout.num_slices)
        return per_column @ weights - SLICE_OFFSET

    def read(self, cfg=None, rng=None):
        """Read every programmed cell once and reconstruct each entry's pooled versions

        Without an explicit rng, read noise comes from the store's own stream, seeded once
        at construction and advanced by every read.
        """
        cfg = cfg or self.search_config
        if not self.entries:
            raise StateError("The prompt store is empty")
        if cfg.read_noise and rng is None:
            rng = self._read_rng
        top = self.profile.num_levels - 1
        values = []
        for entry in self.entries:
            levels, deviation = self._cell_region(entry)
            # In level units: conductance g = level / top + deviation
            analog = levels.astype(np.float64) + deviation.astype(np.float64) * top
            if cfg.read_noise:
                analog = analog + rng.standard_normal(levels.shape) * level_sigmas(self.profile, levels) * top
            if cfg.adc_bits is not None:
                steps = 2 ** int(cfg.adc_bits) - 1
                analog = np.clip(np.rint(analog / top * steps), 0, steps) / steps * top
            self.counters.cell_reads += levels.size
            self.counters.adc_conversions += levels.size
            columns = self._shift_add(analog, entry.col_count)
            values.append({s: columns[start:start + count] for s, (start, count) in entry.col_offsets.items()})
        return ReadSnapshot(values=values)

    def _check_scales(self, cfg):
        missing = [s for s in cfg.scales if s not in self.store_scales]
        if missing:
            raise ConfigurationError(f"Scales {missing} are not stored (store keeps {self.store_scales})")

    def _check_query(self, q):
        if q.shape[1] != self.d_enc:
            raise ConfigurationError(f"Query has {q.shape[1]} columns, stored codes have {self.d_enc}")

    def entry_scores(self, e_query, cfg=None, snapshot=None, rng=None):
        """WMSDP (or cosine) of one query against every entry, one entry at a time"""
        cfg = cfg or self.search_config
        snapshot = snapshot if snapshot is not None else self.read(cfg, rng)
        self._check_scales(cfg)
        q = _query_matrix(e_query)
        self._check_query(q)
        scores = np.empty(len(self.entries))
        for entry, read_back in zip(self.entries, snapshot.values):
            scores[entry.index] = wmsdp(q, {s: read_back[s] for s in cfg.scales}, cfg, entry.num_tokens)
            self.counters.macs += sum(read_back[s].size for s in cfg.scales)
        return scores

    def best_index(self, scores):
        """Index of the top score; ties go to the lowest entry id"""
        tied = np.flatnonzero(scores == scores.max())
        return int(min(tied, key=lambda i: self.entries[i].id))

    def retrieve(self, e_query, cfg=None, snapshot=None, rng=None):
        scores = self.entry_scores(e_query, cfg, snapshot, rng)
        best = self.best_index(scores)
        logger.debug(f"Retrieved {self.entries[best].id} with score {scores[best]:.6g}")
        return Match(id=self.entries[best].id, score=float(scores[best]))

    def retrieve_mips(self, e_query, cfg=None, snapshot=None, rng=None):
        cfg = cfg or self.search_config
        return self.retrieve(e_query, cfg.mips(), snapshot, rng)

    def gemm_scores(self, queries, cfg=None, snapshot=None, rng=None):
        """Score a batch of queries against every entry with one matrix product per scale

        Entries are grouped by token count so every group shares one aligned, pooled query
        matrix. The whole batch uses one read snapshot.

        Returns:
            np.ndarray: (num_queries, num_entries) scores
        """
        cfg = cfg or self.search_config
        snapshot = snapshot if snapshot is not None else self.read(cfg, rng)
        self._check_scales(cfg)
        queries = [_query_matrix(q) for q in queries]
        for q in queries:
            self._check_query(q)
        scores = np.empty((len(queries), len(self.entries)))
        groups = {}
        for entry in self.entries:
            groups.setdefault(entry.num_tokens, []).append(entry.index)

        for num_tokens, members in groups.items():
            aligned = [align_length(q, num_tokens) for q in queries]
            dots, q_norms, p_norms = {}, {}, {}
            for s in cfg.scales:
                Q = np.vstack([pool(a, s).ravel() for a in aligned])
                P = np.vstack([snapshot.values[i][s].ravel() for i in members])
                dots[s] = Q @ P.T
                q_norms[s] = np.linalg.norm(Q, axis=1)[:, None]
                p_norms[s] = np.linalg.norm(P, axis=1)[None, :]
                self.counters.macs += Q.shape[0] * P.size
            scores[:, members] = combine_scores(dots, cfg, q_norms, p_norms)
        return scores

    def batched_retrieval_gemm(self, queries, cfg=None, snapshot=None, rng=None):
        scores = self.gemm_scores(queries, cfg, snapshot, rng)
        best = [self.best_index(row) for row in scores]
        return [Match(id=self.entries[b].id, score=float(scores[n, b])) for n, b in enumerate(best)]

    def entry(self, entry_id):
        for entry in self.entries:
            if entry.id == entry_id:
                return entry
        raise ConfigurationError(f"No stored entry with id '{entry_id}'")

    def write_deviation_rms(self):
        """RMS of the frozen write deviation over every programmed cell"""
        if not self.entries:
            return 0.0
        squares = [np.square(self._cell_region(entry)[1].astype(np.float64)).ravel() for entry in self.entries]
        return float(np.sqrt(np.concatenate(squares).mean()))

    def save(self, directory):
        """Persist to `directory`: manifest.json plus per-subarray level and deviation dumps"""
        os.makedirs(directory, exist_ok=True)
        manifest = {
            'version': MANIFEST_VERSION,
            'profile': self.profile.to_dict(),
            'layout': {'bits_per_device': self.layout.bits_per_device, 'num_slices': self.layout.num_slices},
            'rows': self.rows,
            'cols': self.cols,
            'max_subarrays': self.max_subarrays,
            'd_enc': self.d_enc,
            'store_scales': list(self.store_scales),
            'variation': asdict(self.variation) if self.variation is not None else None,
            'search': {
                'scales': list(self.search_config.scales),
                'weights': list(self.search_config.weights),
                'similarity': self.search_config.similarity,
            },
            'subarrays': [],
            'entries': [entry.to_manifest() for entry in self.entries],
        }
        for i, sub in enumerate(self.subarrays):
            levels_file = f"subarray_{i}.levels.bin"
            deviation_file = f"subarray_{i}.deviation.bin"
            with open(os.path.join(directory, levels_file), 'wb') as f:
                f.write(sub.levels.astype('<u1').tobytes(order='C'))
            with open(os.path.join(directory, deviation_file), 'wb') as f:
                f.write(sub.deviation.astype('<f4').tobytes(order='C'))
            manifest['subarrays'].append({'levels': levels_file, 'deviation': deviation_file,
                                          'used_cols': sub.used_cols})
        with open(os.path.join(directory, MANIFEST_NAME), 'w') as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Saved prompt store with {len(self.entries)} entries to {directory}")

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, MANIFEST_NAME)
        try:
            with open(path, 'r') as f:
                manifest = json.load(f)
            search = manifest['search']
            variation = manifest.get('variation')
            store = cls(
                DeviceProfile.from_dict(manifest['profile']),
                BitSliceLayout(manifest['layout']['bits_per_device']),
                rows=manifest['rows'],
                cols=manifest['cols'],
                max_subarrays=manifest['max_subarrays'],
                store_scales=tuple(manifest['store_scales']),
                search_config=SearchConfig(scales=tuple(search['scales']), weights=tuple(search['weights']),
                                           similarity=search.get('similarity', 'dot')),
                variation=VariationConfig(**variation) if variation else None,
            )
            store.d_enc = manifest['d_enc']
            subarray_docs = manifest['subarrays']
            entry_docs = manifest['entries']
        except json.JSONDecodeError as e:
            raise StorageFormatError(f"{path} is not valid JSON: {e}") from e
        except (KeyError, TypeError) as e:
            raise StorageFormatError(f"{path} is missing required fields: {e}") from e

        for doc in subarray_docs:
            sub = CrossbarSubArray(store.rows, store.cols)
            sub.levels = _read_dump(os.path.join(directory, doc['levels']), '<u1', sub.levels.shape)
            sub.deviation = _read_dump(os.path.join(directory, doc['deviation']), '<f4', sub.deviation.shape)
            sub.used_cols = doc['used_cols']
            store.subarrays.append(sub)

        for i, doc in enumerate(entry_docs):
            offsets = {int(s): tuple(span) for s, span in doc['col_offsets'].items()}
            entry = StoredEntry(id=doc['id'], index=i, domain_tag=doc['domain_tag'], scale=doc['scale'],
                                num_tokens=doc['num_tokens'], d_enc=doc['d_enc'], subarray=doc['subarray'],
                                col_start=doc['col_start'], col_offsets=offsets)
            levels, _ = store._cell_region(entry)
            codes = unslice_array(levels.T.reshape(entry.col_count, entry.d_enc, store.layout.num_slices),
                                  store.layout)
            entry.scaled = {s: codes[start:start + count] for s, (start, count) in offsets.items()}
            store.entries.append(entry)
        logger.info(f"Loaded prompt store with {len(store.entries)} entries from {directory}")
        return store


def _read_dump(path, dtype, shape):
    with open(path, 'rb') as f:
        payload = f.read()
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise StorageFormatError(f"{path} holds {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder('='))


def program(store, ep, policy, rng):
    """Program an encoded prompt: pool at every stored scale, bit-slice, write each cell

    Returns:
        StoredEntry: The new entry
    """
    return store.program(ep, policy, rng)


def retrieve(store, e_query, cfg, snapshot=None, rng=None):
    """Best entry by WMSDP; ties go to the lowest entry id"""
    return store.retrieve(e_query, cfg, snapshot, rng)


def retrieve_mips(store, e_query, cfg, snapshot=None, rng=None):
    """Best entry by plain inner product of the scale-1 representations"""
    return store.retrieve_mips(e_query, cfg, snapshot, rng)


def batched_retrieval_gemm(store, queries, cfg, snapshot=None, rng=None):
    """Per-query best entries, computed as one matrix product per scale over a shared read"""
    return store.batched_retrieval_gemm(queries, cfg, snapshot, rng)
