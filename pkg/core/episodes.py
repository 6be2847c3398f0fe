"""
Episode construction.

An episode is one few-shot task: a support set with sparse labels and a
query set with dense labels. Three schedules produce episodes:

- original: every step draws B support and B query pairs with replacement;
- omni: the support set is partitioned once into a fixed list of episodes
  with diverse shot counts, replayed in a new order every epoch;
- evaluation grids: one episode per (shots, technique, density) triple.

Schedules only store ids, techniques, densities and seeds. Sparse labels are
produced when an episode is materialized.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch

from core.data import DatasetBundle, Sample
from core.errors import ConfigError
from core.sparsify import sparsify
from schemas import EpisodeRecord, EvalGrid, OmniConfig, SparsifySizes, ValueSpace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeSpec:
    """What an episode is made of, by sample index."""
    support: tuple[int, ...]
    query: tuple[int, ...]
    technique: str
    density: float
    seed: int

    @property
    def shots(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class Episode:
    support_ids: tuple[str, ...]
    support_images: np.ndarray = field(repr=False)   # S x H x W x L
    support_sparse: np.ndarray = field(repr=False)   # S x H x W, UNANNOTATED where unlabelled
    query_ids: tuple[str, ...]
    query_images: np.ndarray = field(repr=False)     # Q x H x W x L
    query_dense: np.ndarray = field(repr=False)      # Q x H x W
    technique: str
    density: float
    seed: int

    @property
    def shots(self) -> int:
        return len(self.support_ids)

    def tensors(self, device: torch.device | str = "cpu", dtype: torch.dtype = torch.float32):
        """Channel-first tensors: (sx, sy, qx, qy)."""
        def images(a: np.ndarray) -> torch.Tensor:
            return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(device=device, dtype=dtype)

        def labels(a: np.ndarray) -> torch.Tensor:
            return torch.from_numpy(a.astype(np.int64)).to(device)

        return images(self.support_images), labels(self.support_sparse), images(self.query_images), labels(self.query_dense)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def materialize(bundle: DatasetBundle, spec: EpisodeSpec, sizes: SparsifySizes,
                support_pool: Sequence[Sample] | None = None,
                query_pool: Sequence[Sample] | None = None) -> Episode:
    """Load images for an episode spec and sparsify its support labels."""
    support_pool = bundle.support if support_pool is None else support_pool
    query_pool = bundle.query if query_pool is None else query_pool
    support = [support_pool[i] for i in spec.support]
    query = [query_pool[i] for i in spec.query]
    sparse = [
        sparsify(s.dense, sizes.params(spec.technique, spec.density, derive_seed(spec.seed, k)))
        for k, s in enumerate(support)
    ]
    return Episode(
        support_ids=tuple(s.id for s in support),
        support_images=np.stack([s.image for s in support]),
        support_sparse=np.stack(sparse),
        query_ids=tuple(q.id for q in query),
        query_images=np.stack([q.image for q in query]),
        query_dense=np.stack([q.dense for q in query]),
        technique=spec.technique,
        density=spec.density,
        seed=spec.seed,
    )


def balanced_technique(techniques: Sequence[str], index: int, seed: int) -> str:
    """Technique for draw `index`: each block of len(techniques) draws is a seeded permutation."""
    block, pos = divmod(index, len(techniques))
    order = np.random.default_rng([seed, block]).permutation(len(techniques))
    return techniques[int(order[pos])]


def draw_density(space: ValueSpace, technique: str, rng: np.random.Generator) -> float:
    value = space.draw(rng, integer=technique == "points")
    return float(value)


# --- Original meta-training ---

def sample_original_batch(bundle: DatasetBundle, batch_size: int, omni: OmniConfig, step: int,
                          seed: int) -> EpisodeSpec:
    """
    Draw one original-mode step: B support and B query pairs with replacement.

    Shots always equal B. The technique rotates through balanced blocks and
    the density is drawn from the technique's configured space.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    if not bundle.support or not bundle.query:
        raise ConfigError(f"bundle {bundle.name} needs both support and query samples")
    step_seed = derive_seed(seed, step)
    rng = np.random.default_rng(step_seed)
    support = tuple(int(i) for i in rng.integers(len(bundle.support), size=batch_size))
    query = tuple(int(i) for i in rng.integers(len(bundle.query), size=batch_size))
    technique = balanced_technique(omni.techniques, step, seed)
    density = draw_density(omni.densities[technique], technique, rng)
    return EpisodeSpec(support, query, technique, density, step_seed)


# --- Omni meta-training ---

@dataclass(frozen=True)
class OmniSchedule:
    episodes: tuple[EpisodeSpec, ...]
    epoch_permutation_seed: int
    fingerprint: str

    def __len__(self) -> int:
        return len(self.episodes)

    def epoch_order(self, epoch: int) -> list[int]:
        return [int(i) for i in np.random.default_rng([self.epoch_permutation_seed, epoch]).permutation(len(self))]

    def iter_epoch(self, epoch: int) -> Iterator[EpisodeSpec]:
        for i in self.epoch_order(epoch):
            yield self.episodes[i]

    def records(self, bundle: DatasetBundle) -> list[EpisodeRecord]:
        return [
            EpisodeRecord(
                index=i,
                support_ids=[bundle.support[j].id for j in ep.support],
                query_ids=[bundle.query[j].id for j in ep.query],
                shots=ep.shots,
                technique=ep.technique,
                density=ep.density,
                seed=ep.seed,
            )
            for i, ep in enumerate(self.episodes)
        ]


def schedule_fingerprint(bundle: DatasetBundle, omni: OmniConfig, query_batch: int) -> str:
    blob = json.dumps(
        {"config": omni.model_dump(mode="json"), "query_batch": query_batch, "dataset": bundle.identity()},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _shot_sizes(space: ValueSpace, n_support: int, rng: np.random.Generator) -> Iterator[int]:
    """Endless group sizes: option lists are shuffled and consumed cyclically, ranges drawn uniformly."""
    if space.options is None:
        low, high = int(space.bounds[0]), min(int(space.bounds[1]), n_support)
        low = min(low, high)
        while True:
            yield int(rng.integers(low, high + 1))

    options = sorted({int(s) for s in space.options if s <= n_support})
    dropped = sorted({int(s) for s in space.options} - set(options))
    if dropped:
        log.warning(f"⚠️ Shot options {dropped} exceed the {n_support} support images and are skipped")
    if not options:
        options = [n_support]
    while True:
        for k in rng.permutation(len(options)):
            yield options[int(k)]


def build_omni_schedule(bundle: DatasetBundle, omni: OmniConfig, batch_size: int) -> OmniSchedule:
    """
    Partition the support set into a fixed list of episodes.

    A seeded permutation of the support is cut into consecutive groups whose
    sizes come from the shot options; the last short group wraps around to
    the start of the permutation, which is the only source of duplicates.
    Queries are dealt round-robin from reshuffled passes over the query set.
    """
    if omni.shots.options is not None and not omni.shots.options:
        raise ConfigError("shot options must not be empty")
    if not bundle.support or not bundle.query:
        raise ConfigError(f"bundle {bundle.name} needs both support and query samples")

    n = len(bundle.support)
    query_batch = omni.query_batch or batch_size
    rng = np.random.default_rng([omni.seed, 0])
    perm = [int(i) for i in rng.permutation(n)]
    sizes = _shot_sizes(omni.shots, n, np.random.default_rng([omni.seed, 1]))

    groups: list[tuple[int, ...]] = []
    pos = 0
    while pos < n:
        size = next(sizes)
        if pos + size <= n:
            groups.append(tuple(perm[pos:pos + size]))
        else:
            extra = size - (n - pos)
            groups.append(tuple(perm[pos:] + perm[:extra]))
        pos += size

    query_stream = _round_robin(len(bundle.query), np.random.default_rng([omni.seed, 2]))
    density_rng = np.random.default_rng([omni.seed, 3])
    episodes = []
    for i, group in enumerate(groups):
        technique = balanced_technique(omni.techniques, i, omni.seed)
        density = draw_density(omni.densities[technique], technique, density_rng)
        query = tuple(next(query_stream) for _ in range(query_batch))
        episodes.append(EpisodeSpec(group, query, technique, density, derive_seed(omni.seed, 4, i)))

    schedule = OmniSchedule(
        episodes=tuple(episodes),
        epoch_permutation_seed=derive_seed(omni.seed, 5),
        fingerprint=schedule_fingerprint(bundle, omni, query_batch),
    )
    log.info(f"🗂️ Omni schedule for {bundle.name}: {len(schedule)} episodes from {n} support images")
    return schedule


def _round_robin(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        for i in rng.permutation(n):
            yield int(i)


# --- Evaluation grids ---

@dataclass(frozen=True)
class EvalDescriptor:
    shots: int
    technique: str
    density: float
    spec: EpisodeSpec


def enumerate_eval_grid(bundle: DatasetBundle, grid: EvalGrid, mode: str | None = None) -> list[EvalDescriptor]:
    """
    One descriptor per (shots, technique, density) triple.

    combine: each triple gets one query batch, dealt round-robin over the query set.
    full_combine: each triple is evaluated on every query image.
    Supports are drawn per triple without replacement from the support set.
    """
    mode = mode or grid.mode
    if mode not in ("combine", "full_combine"):
        raise ConfigError(f"evaluation mode must be combine or full_combine, got {mode!r}")
    if not bundle.support or not bundle.query:
        raise ConfigError(f"bundle {bundle.name} needs both support and query samples")

    n_sup, n_qry = len(bundle.support), len(bundle.query)
    query_stream = _round_robin(n_qry, np.random.default_rng([grid.seed, 0]))
    triples = [
        (shots, technique, float(density))
        for shots in grid.shots
        for technique in (t for t in ("points", "grid", "contours", "skeleton", "regions") if t in grid.densities)
        for density in grid.densities[technique]
    ]
    descriptors = []
    for i, (shots, technique, density) in enumerate(triples):
        rng = np.random.default_rng([grid.seed, 1, i])
        take = min(shots, n_sup)
        if take < shots:
            log.warning(f"⚠️ {shots}-shot triple capped to the {n_sup} available support images")
        support = tuple(int(j) for j in rng.choice(n_sup, size=take, replace=False))
        if mode == "full_combine":
            query = tuple(range(n_qry))
        else:
            query = tuple(next(query_stream) for _ in range(min(grid.query_batch, n_qry)))
        spec = EpisodeSpec(support, query, technique, density, derive_seed(grid.seed, 2, i))
        descriptors.append(EvalDescriptor(shots, technique, density, spec))
    return descriptors
