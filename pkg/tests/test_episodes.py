from collections import Counter

import numpy as np
import pytest
import torch

from config import UNANNOTATED
from conftest import toy_bundle
from core.episodes import (
    EpisodeSpec,
    balanced_technique,
    build_omni_schedule,
    enumerate_eval_grid,
    materialize,
    sample_original_batch,
)
from core.errors import ConfigError
from schemas import EvalGrid, OmniConfig, SparsifySizes, ValueSpace

SHOT_OPTIONS = [1, 5, 10, 15, 20]


def count_multiplicity(schedule) -> Counter:
    return Counter(i for ep in schedule.episodes for i in ep.support)


def omni_config(shots=SHOT_OPTIONS, seed=0, **kwargs) -> OmniConfig:
    return OmniConfig(shots=ValueSpace(options=shots), seed=seed, **kwargs)


@pytest.mark.parametrize("n_support", [7, 20, 53])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_omni_schedule_properties(n_support, seed):
    bundle = toy_bundle(n_support, 6)
    schedule = build_omni_schedule(bundle, omni_config(seed=seed), batch_size=5)

    # full coverage and at most one wrap-around duplicate per image
    multiplicity = count_multiplicity(schedule)
    assert set(multiplicity) == set(range(n_support))
    assert max(multiplicity.values()) <= 2
    duplicated = sum(1 for m in multiplicity.values() if m > 1)
    assert duplicated <= schedule.episodes[-1].shots - 1

    # options are used within one of each other
    usable = [s for s in SHOT_OPTIONS if s <= n_support]
    counts = Counter(ep.shots for ep in schedule.episodes)
    per_option = [counts.get(s, 0) for s in usable]
    assert set(counts) <= set(usable)
    assert max(per_option) - min(per_option) <= 1
    n_groups = len(schedule)
    assert all(c in (n_groups // len(usable), -(-n_groups // len(usable))) for c in per_option)

    # same multiset every epoch
    first = sorted(schedule.epoch_order(0))
    for epoch in (1, 2, 5):
        assert sorted(schedule.epoch_order(epoch)) == first


def test_exact_partition_without_duplicates():
    schedule = build_omni_schedule(toy_bundle(20, 5), omni_config(shots=[5]), batch_size=5)
    assert len(schedule) == 4
    assert all(m == 1 for m in count_multiplicity(schedule).values())


def test_epochs_replay_in_different_orders():
    schedule = build_omni_schedule(toy_bundle(40, 5), omni_config(shots=[2]), batch_size=5)
    assert schedule.epoch_order(0) != schedule.epoch_order(1)
    assert sorted(schedule.epoch_order(0)) == sorted(schedule.epoch_order(1))


def test_schedule_is_deterministic():
    bundle = toy_bundle(20, 6)
    a = build_omni_schedule(bundle, omni_config(), batch_size=5)
    b = build_omni_schedule(bundle, omni_config(), batch_size=5)
    assert a.episodes == b.episodes
    assert a.fingerprint == b.fingerprint
    c = build_omni_schedule(bundle, omni_config(seed=1), batch_size=5)
    assert c.fingerprint != a.fingerprint


def test_query_batch_defaults_to_batch_size():
    bundle = toy_bundle(20, 6)
    schedule = build_omni_schedule(bundle, omni_config(), batch_size=3)
    assert all(len(ep.query) == 3 for ep in schedule.episodes)
    schedule = build_omni_schedule(bundle, omni_config(query_batch=2), batch_size=3)
    assert all(len(ep.query) == 2 for ep in schedule.episodes)


def test_queries_are_dealt_evenly():
    bundle = toy_bundle(30, 4)
    schedule = build_omni_schedule(bundle, omni_config(shots=[3]), batch_size=2)
    counts = Counter(q for ep in schedule.episodes for q in ep.query)
    # 10 episodes x 2 queries over 4 images
    assert max(counts.values()) - min(counts.values()) <= 1


def test_schedule_needs_query_images():
    with pytest.raises(ConfigError):
        build_omni_schedule(toy_bundle(5, 0), omni_config(), batch_size=2)


def test_schedule_records_name_images():
    bundle = toy_bundle(7, 3)
    schedule = build_omni_schedule(bundle, omni_config(), batch_size=2)
    records = schedule.records(bundle)
    assert len(records) == len(schedule)
    assert all(r.support_ids[0].startswith("s") and r.query_ids[0].startswith("q") for r in records)


def test_original_batch_samples_with_replacement():
    bundle = toy_bundle(1, 3)
    spec = sample_original_batch(bundle, 2, OmniConfig(), step=0, seed=0)
    assert spec.support == (0, 0)
    assert spec.shots == 2
    assert len(spec.query) == 2


def test_original_batch_is_deterministic():
    bundle = toy_bundle(10, 10)
    assert sample_original_batch(bundle, 4, OmniConfig(), 3, 0) == sample_original_batch(bundle, 4, OmniConfig(), 3, 0)


def test_technique_rotation_is_balanced():
    techniques = ["points", "grid", "contours", "skeleton", "regions", "extra"]
    draws = Counter(balanced_technique(techniques, i, seed=3) for i in range(600))
    assert all(draws[t] == 100 for t in techniques)


def test_original_batches_draw_in_density_domain():
    bundle = toy_bundle(10, 10)
    omni = OmniConfig()
    for step in range(25):
        spec = sample_original_batch(bundle, 2, omni, step, seed=0)
        if spec.technique == "points":
            assert float(spec.density).is_integer() and 5 <= spec.density <= 50
        else:
            assert 0.1 <= spec.density <= 1.0


def test_eval_grid_sizes():
    bundle = toy_bundle(20, 12)
    combine = enumerate_eval_grid(bundle, EvalGrid())
    assert len(combine) == 45
    assert all(len(d.spec.query) == 5 for d in combine)

    grid = EvalGrid(mode="full_combine", shots=[1, 5, 10, 15, 20],
                    densities={t: [0.1, 0.25, 0.5, 0.75, 1.0] for t in ("grid", "contours", "skeleton", "regions")}
                    | {"points": [1, 13, 25, 37, 50]})
    full = enumerate_eval_grid(bundle, grid)
    assert len(full) == 125
    assert all(d.spec.query == tuple(range(12)) for d in full)


def test_single_triple_grid():
    grid = EvalGrid(shots=[2], densities={"regions": [0.5]})
    descriptors = enumerate_eval_grid(toy_bundle(5, 5), grid)
    assert len(descriptors) == 1
    d = descriptors[0]
    assert (d.shots, d.technique, d.density) == (2, "regions", 0.5)
    assert len(set(d.spec.support)) == 2


def test_materialized_episode_tensors():
    bundle = toy_bundle(4, 3)
    spec = EpisodeSpec((0, 1, 2), (0, 1), "points", 5, seed=11)
    episode = materialize(bundle, spec, SparsifySizes())
    assert episode.shots == 3
    assert episode.support_sparse.shape == (3, 16, 16)
    sx, sy, qx, qy = episode.tensors(dtype=torch.float64)
    assert sx.shape == (3, 3, 16, 16) and sx.dtype == torch.float64
    assert sy.dtype == torch.int64 and qy.shape == (2, 16, 16)
    assert (sy == UNANNOTATED).any()
    # per-element seeds differ, so identical masks still get different sparse labels
    assert not np.array_equal(episode.support_sparse[0], episode.support_sparse[1])
