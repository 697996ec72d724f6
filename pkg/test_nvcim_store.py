#!/usr/bin/env python

"""
Tests for the crossbar prompt store: programming, read-back, WMSDP search and persistence
"""

import logging
import math
import os
import sys
import tempfile

import numpy as np

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger('nvcim_store_test')

# Add project root to path
project_root = os.path.abspath(os.path.dirname(__file__))
if project_root not in sys.path:
    sys.path.append(project_root)

from nvcim_pt.ml.device_models import VariationConfig, get_profile, make_rng  # noqa: E402
from nvcim_pt.ml.exceptions import CapacityError, ConfigurationError, StateError  # noqa: E402
from nvcim_pt.ml.nvcim_store import (  # noqa: E402
    PromptStore,
    SearchConfig,
    WriteVerifyPolicy,
    batched_retrieval_gemm,
    pool,
    pool_int16,
    program,
    retrieve,
    retrieve_mips,
    wmsdp,
)
from nvcim_pt.ml.prompt_codec import BitSliceLayout, EncodedPrompt  # noqa: E402


def random_prompt(rng, prompt_id, num_tokens=10, d_enc=48, domain_tag=None):
    data = rng.integers(-32767, 32768, size=(num_tokens, d_enc))
    return EncodedPrompt(data=data, scale=1.0, source_id=prompt_id, domain_tag=domain_tag)


def random_store(rng, count, profile='ideal', policy=None, **kwargs):
    store = PromptStore(get_profile(profile), BitSliceLayout(2), **kwargs)
    for i in range(count):
        store.program(random_prompt(rng, f"p{i}", domain_tag=i % 3), policy, rng)
    return store


def test_pool_definition():
    x = np.array([[1.0], [3.0], [5.0], [7.0]])
    assert np.array_equal(pool(x, 1), x)
    assert np.array_equal(pool(x, 2), [[2.0], [6.0]])
    assert np.array_equal(pool(x, 3), [[3.0], [7.0]])
    assert np.array_equal(pool(x, 4), [[4.0]])
    try:
        pool(x, 0)
        assert False, "scale 0 should be rejected"
    except ConfigurationError:
        pass


def test_wmsdp_self_score():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((10, 48)) * 1000
    versions = {s: pool(p, s) for s in (1, 2, 4)}
    expected = (np.sum(versions[1] ** 2) + 0.8 * np.sum(versions[2] ** 2) + 0.6 * np.sum(versions[4] ** 2)) / 2.4
    score = wmsdp(p, versions, SearchConfig())
    assert abs(score - expected) <= 1e-9 * abs(expected)

    # Shorter queries are zero padded, longer ones truncated
    short = wmsdp(p[:4], versions, SearchConfig(scales=(1,), weights=(1.0,)))
    assert abs(short - np.sum(p[:4] * p[:4])) <= 1e-9 * np.sum(p[:4] * p[:4])
    padded = np.vstack([p, np.ones((3, 48))])
    assert wmsdp(padded, versions, SearchConfig()) == score

    cosine = wmsdp(p, versions, SearchConfig(similarity='cosine'))
    assert abs(cosine - 1.0) <= 1e-12


def test_search_config_validation():
    for kwargs in (
        {'scales': (1, 2), 'weights': (1.0,)},
        {'scales': (0,), 'weights': (1.0,)},
        {'scales': (1, 1), 'weights': (1.0, 1.0)},
        {'weights': (0.0, 0.0, 0.0)},
        {'similarity': 'l2'},
        {'adc_bits': 0},
    ):
        try:
            SearchConfig(**kwargs)
            assert False, f"{kwargs} should be rejected"
        except ConfigurationError:
            pass
    mips = SearchConfig(read_noise=True).mips()
    assert mips.scales == (1,) and mips.weights == (1.0,) and mips.read_noise


def test_noiseless_readback_is_exact():
    rng = make_rng(1)
    store = random_store(rng, 5)
    assert len(store) == 5
    snapshot = store.read()
    for entry, values in zip(store.entries, snapshot.values):
        for s in store.store_scales:
            assert np.array_equal(values[s], entry.scaled[s])
    assert store.write_deviation_rms() == 0.0

    cells = 5 * 384 * (10 + 5 + 3)
    counters = store.counters.as_dict()
    assert counters['cell_writes'] == cells
    assert counters['cell_reads'] == cells
    assert counters['adc_conversions'] == cells


def test_levels_stay_in_range_and_entries_pack():
    store = random_store(make_rng(2), 9, profile='nvm-3')
    # 18 columns per entry: seven fit in the first 128-column subarray
    assert len(store.subarrays) == 2
    assert [e.subarray for e in store.entries] == [0] * 7 + [1, 1]
    assert store.entries[1].col_start == 18
    for sub in store.subarrays:
        assert sub.levels.max() < 4


def test_gemm_matches_naive_loop():
    rng = make_rng(3)
    for trial in range(100):
        noisy = trial % 2 == 1
        store = random_store(rng, int(rng.integers(1, 21)), profile='nvm-3' if noisy else 'ideal')
        queries = [rng.integers(-32767, 32768, size=(10, 48)) for _ in range(4)]
        cfg = SearchConfig(read_noise=noisy, variation=store.search_config.variation)
        snapshot = store.read(cfg, make_rng(trial))

        batched = store.gemm_scores(queries, cfg, snapshot)
        looped = np.vstack([store.entry_scores(q, cfg, snapshot) for q in queries])
        if noisy:
            assert np.allclose(batched, looped, rtol=1e-9, atol=1e-9 * np.abs(looped).max())
        else:
            assert np.array_equal(batched, looped)

        matches = batched_retrieval_gemm(store, queries, cfg, snapshot)
        for q, match in zip(queries, matches):
            single = retrieve(store, q, cfg, snapshot)
            assert single.id == match.id
    logger.info("Batched scores matched the per-entry loop on 100 stores")


def test_single_scale_ssa_ranks_like_mips():
    rng = make_rng(4)
    store = random_store(rng, 12)
    single = SearchConfig(scales=(1,), weights=(1.0,))
    for _ in range(10):
        q = rng.integers(-32767, 32768, size=(10, 48))
        assert retrieve(store, q, single).id == retrieve_mips(store, q, SearchConfig()).id
        assert np.array_equal(store.entry_scores(q, single), store.entry_scores(q, SearchConfig().mips()))


def test_stored_prompt_retrieves_itself():
    rng = make_rng(5)
    store = random_store(rng, 15, profile='nvm-3')
    for entry in store.entries:
        match = store.retrieve(entry.scaled[1], SearchConfig(similarity='cosine'))
        assert match.id == entry.id


def test_ties_go_to_lowest_id():
    store = PromptStore(get_profile('ideal'), BitSliceLayout(2))
    data = np.ones((10, 48), dtype=np.int64)
    for prompt_id in ('p2', 'p1', 'p0'):
        store.program(EncodedPrompt(data=data, scale=1.0, source_id=prompt_id))
    assert [e.id for e in store.entries] == ['p2', 'p1', 'p0']
    assert store.retrieve(data).id == 'p0'
    assert store.retrieve_mips(data).id == 'p0'
    assert [m.id for m in store.batched_retrieval_gemm([data, data])] == ['p0', 'p0']
    try:
        store.program(EncodedPrompt(data=data, scale=1.0, source_id='p1'))
        assert False, "duplicate ids should be rejected"
    except ConfigurationError:
        pass


def test_read_noise_and_adc():
    rng = make_rng(6)
    store = random_store(rng, 3, profile='nvm-3')
    cfg = SearchConfig(read_noise=True)
    first = store.read(cfg, make_rng(9))
    second = store.read(cfg, make_rng(9))
    third = store.read(cfg, make_rng(10))
    assert np.array_equal(first.values[0][1], second.values[0][1])
    assert not np.array_equal(first.values[0][1], third.values[0][1])

    # Without an rng every read draws fresh noise from the store's stream
    fourth = store.read(cfg)
    fifth = store.read(cfg)
    assert not np.array_equal(fourth.values[0][1], fifth.values[0][1])

    # A 2-bit converter snaps the small device deviations back to the nominal levels
    snapped = store.read(SearchConfig(adc_bits=2))
    for entry, values in zip(store.entries, snapped.values):
        assert np.array_equal(values[1], entry.scaled[1])


def test_write_verify_tightens_deviation():
    profile = get_profile('nvm-2')
    tolerance, max_iters = 0.005, 20
    plain = random_store(make_rng(7), 2, profile='nvm-2')
    policy = WriteVerifyPolicy(enabled=True, tolerance=tolerance, max_iters=max_iters)
    verified = random_store(make_rng(7), 2, profile='nvm-2', policy=policy)
    assert verified.write_deviation_rms() < plain.write_deviation_rms()
    assert verified.counters.cell_writes > plain.counters.cell_writes

    levels, deviations = [], []
    for entry in verified.entries:
        lv, dev = verified._cell_region(entry)
        levels.append(lv.ravel())
        deviations.append(dev.ravel())
    levels = np.concatenate(levels)
    deviations = np.concatenate(deviations).astype(np.float64)
    assert levels.size >= 10 ** 4

    # Probability that all attempts miss the tolerance, per cell
    miss = np.array([math.erfc(tolerance / (s * math.sqrt(2.0))) for s in profile.sigma_per_level])[levels]
    bound = float(np.mean(miss ** max_iters))
    rate = float(np.mean(np.abs(deviations) > tolerance * (1 + 1e-6)))
    assert rate <= bound + 4 * math.sqrt(bound / levels.size) + 1.0 / levels.size, (rate, bound)


def test_pool_is_linear():
    rng = make_rng(11)
    x = rng.standard_normal((10, 48))
    y = rng.standard_normal((10, 48))
    for s in (1, 2, 3, 4):
        combined = pool(2.5 * x - 0.75 * y, s)
        assert np.allclose(combined, 2.5 * pool(x, s) - 0.75 * pool(y, s), rtol=1e-12, atol=1e-12)


def test_query_scaling_keeps_retrieval():
    rng = make_rng(12)
    store = random_store(rng, 12, profile='nvm-3')
    snapshot = store.read()
    for _ in range(20):
        q = rng.standard_normal((10, 48)) * 1000
        reference = store.retrieve(q, snapshot=snapshot).id
        for alpha in (0.5, 2.0, 7.3, 1e3):
            assert store.retrieve(alpha * q, snapshot=snapshot).id == reference
            assert store.retrieve_mips(alpha * q, snapshot=snapshot).id == store.retrieve_mips(q, snapshot=snapshot).id


def test_write_verify_with_loose_tolerance_matches_plain_programming():
    prompts = [random_prompt(make_rng(20 + i), f"p{i}") for i in range(3)]
    plain = PromptStore(get_profile('nvm-3'), BitSliceLayout(2))
    loose = PromptStore(get_profile('nvm-3'), BitSliceLayout(2))
    plain_rng, loose_rng = make_rng(13), make_rng(13)
    policy = WriteVerifyPolicy(enabled=True, tolerance=1e9, max_iters=20)
    for ep in prompts:
        plain.program(ep, WriteVerifyPolicy(), plain_rng)
        loose.program(ep, policy, loose_rng)
    for a, b in zip(plain.entries, loose.entries):
        assert np.array_equal(plain._cell_region(a)[1], loose._cell_region(b)[1])
    assert plain.counters.cell_writes == loose.counters.cell_writes
    assert plain.write_deviation_rms() == loose.write_deviation_rms()


def test_capacity_and_configuration_errors():
    rng = make_rng(8)
    small = PromptStore(get_profile('ideal'), BitSliceLayout(2), cols=20, max_subarrays=1)
    small.program(random_prompt(rng, 'a'))
    try:
        small.program(random_prompt(rng, 'b'))
        assert False, "second entry should not fit"
    except CapacityError:
        pass

    narrow = PromptStore(get_profile('ideal'), BitSliceLayout(2), cols=10)
    try:
        narrow.program(random_prompt(rng, 'c'))
        assert False, "18 columns cannot fit in 10"
    except CapacityError:
        pass

    for kwargs in ({'layout': BitSliceLayout(1)}, {'store_scales': (2, 4)}):
        try:
            PromptStore(get_profile('nvm-1'), **kwargs)
            assert False, f"{kwargs} should be rejected"
        except ConfigurationError:
            pass

    store = PromptStore(get_profile('nvm-1'), BitSliceLayout(2))
    try:
        store.read()
        assert False, "reading an empty store should fail"
    except StateError:
        pass
    program(store, random_prompt(rng, 'd'), WriteVerifyPolicy(), rng)
    try:
        store.program(random_prompt(rng, 'e', d_enc=32))
        assert False, "mixed d_enc should be rejected"
    except ConfigurationError:
        pass
    try:
        store.retrieve(np.zeros((10, 32)))
        assert False, "query width must match d_enc"
    except ConfigurationError:
        pass


def test_save_and_load_roundtrip():
    rng = make_rng(9)
    store = random_store(rng, 9, profile='nvm-4')
    with tempfile.TemporaryDirectory() as tmp:
        store.save(tmp)
        loaded = PromptStore.load(tmp)
    assert len(loaded) == 9
    assert [e.id for e in loaded.entries] == [e.id for e in store.entries]
    assert loaded.profile == store.profile
    before, after = store.read(), loaded.read()
    for a, b, entry, back in zip(before.values, after.values, store.entries, loaded.entries):
        assert np.array_equal(back.scaled[2], entry.scaled[2])
        for s in store.store_scales:
            assert np.array_equal(a[s], b[s])


def deployed_entry(data, variation):
    store = PromptStore(get_profile('ideal'), BitSliceLayout(2), variation=variation)
    entry = store.program(EncodedPrompt(data=data, scale=1.0, source_id='p0'), None, make_rng(0))
    return store, entry


def test_deployment_variation_perturbs_each_copy():
    data = make_rng(14).integers(-10000, 10001, size=(10, 48))
    exact = {s: pool_int16(data, s) for s in (1, 2, 4)}
    for variation in (None, VariationConfig(0.0, 3)):
        _, entry = deployed_entry(data, variation)
        for s in exact:
            assert np.array_equal(entry.scaled[s], exact[s])

    store, entry = deployed_entry(data, VariationConfig(0.05, 3))
    for s in exact:
        assert not np.array_equal(entry.scaled[s], exact[s])
    assert not np.array_equal(entry.scaled[2], pool_int16(entry.scaled[1], 2))
    for s, values in store.read().values[0].items():
        assert np.array_equal(values, entry.scaled[s])

    # Same seed, double sigma: the same draws, twice the offset up to rounding
    _, doubled = deployed_entry(data, VariationConfig(0.1, 3))
    for s in exact:
        offset = entry.scaled[s] - exact[s]
        assert np.abs((doubled.scaled[s] - exact[s]) - 2 * offset).max() <= 1

    with tempfile.TemporaryDirectory() as tmp:
        store.save(tmp)
        loaded = PromptStore.load(tmp)
    assert loaded.variation == store.variation
    assert np.array_equal(loaded.entries[0].scaled[4], entry.scaled[4])


if __name__ == "__main__":
    logger.info("Starting prompt store tests")
    for test in (
        test_pool_definition,
        test_wmsdp_self_score,
        test_search_config_validation,
        test_noiseless_readback_is_exact,
        test_levels_stay_in_range_and_entries_pack,
        test_gemm_matches_naive_loop,
        test_single_scale_ssa_ranks_like_mips,
        test_stored_prompt_retrieves_itself,
        test_ties_go_to_lowest_id,
        test_read_noise_and_adc,
        test_write_verify_tightens_deviation,
        test_pool_is_linear,
        test_query_scaling_keeps_retrieval,
        test_write_verify_with_loose_tolerance_matches_plain_programming,
        test_capacity_and_configuration_errors,
        test_save_and_load_roundtrip,
        test_deployment_variation_perturbs_each_copy,
    ):
        logger.info(f"Running {test.__name__}")
        test()
    logger.info("Prompt store tests completed")
