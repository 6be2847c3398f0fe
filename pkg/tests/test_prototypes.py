import pytest
import torch

from config import UNANNOTATED
from core.errors import ContractError
from core.learners.prototypes import (
    PrototypeSet,
    avg_class_prototypes,
    class_prototypes,
    lcm_broadcast_probs,
    proto_probs,
    query_probs,
)


def random_protos(b, c, m, g, absent_rate=0.3, averaged=False):
    vectors = torch.randn(b, c, m, generator=g, dtype=torch.float64)
    counts = (torch.rand(b, c, generator=g) > absent_rate).to(torch.float64) * 10
    return PrototypeSet(vectors, counts, averaged=averaged)


def reference_probs(embedding, vectors, present):
    """Distance softmax for one (M, H, W) embedding against one (C, M) prototype row."""
    dist = torch.stack([torch.sqrt(((embedding - v[:, None, None]) ** 2).sum(dim=0)) for v in vectors])
    logits = -dist
    if present.any():
        logits[~present] = float("-inf")
    else:
        logits = torch.zeros_like(logits)
    return torch.softmax(logits, dim=0)


def test_probabilities_are_distributions():
    g = torch.Generator().manual_seed(0)
    for i in range(100):
        b = 1 + i % 4
        emb = torch.randn(b, 3, 5, 5, generator=g, dtype=torch.float64)
        protos = random_protos(b, 3, 3, g, absent_rate=0.5)
        probs = proto_probs(emb, protos)
        assert torch.allclose(probs.sum(dim=1), torch.ones(b, 5, 5, dtype=torch.float64), atol=1e-6)
        assert (probs >= 0).all()
        # absent classes get nothing unless every class is absent
        for k in range(b):
            present = protos.present[k]
            if present.any():
                assert (probs[k][~present] == 0).all()


def test_all_absent_row_is_uniform():
    emb = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    protos = PrototypeSet(torch.randn(1, 3, 2, dtype=torch.float64), torch.zeros(1, 3))
    probs = proto_probs(emb, protos)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 3))


def test_matched_batches_agree_with_lcm_path():
    g = torch.Generator().manual_seed(1)
    for _ in range(20):
        emb = torch.randn(3, 4, 6, 6, generator=g, dtype=torch.float64)
        protos = random_protos(3, 3, 4, g)
        assert torch.allclose(proto_probs(emb, protos), lcm_broadcast_probs(emb, protos), atol=1e-6)


def test_lcm_path_matches_explicit_expansion():
    g = torch.Generator().manual_seed(2)
    for _ in range(20):
        emb = torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64)
        protos = random_protos(3, 3, 4, g)
        expected = []
        for q in range(2):
            pairs = [reference_probs(emb[q], protos.vectors[i % 3], protos.present[i % 3])
                     for i in range(6) if i % 2 == q]
            expected.append(torch.stack(pairs).mean(dim=0))
        assert torch.allclose(lcm_broadcast_probs(emb, protos), torch.stack(expected), atol=1e-6)
        assert torch.allclose(query_probs(emb, protos), torch.stack(expected), atol=1e-6)


def test_mismatched_batch_needs_lcm_or_averaging():
    protos = PrototypeSet(torch.randn(3, 2, 4), torch.ones(3, 2))
    with pytest.raises(ContractError):
        proto_probs(torch.randn(2, 4, 5, 5), protos)


def test_depth_mismatch_is_rejected():
    protos = PrototypeSet(torch.randn(1, 2, 3), torch.ones(1, 2), averaged=True)
    with pytest.raises(ContractError):
        proto_probs(torch.randn(2, 4, 5, 5), protos)


def test_prototypes_are_annotated_means():
    emb = torch.arange(2 * 1 * 2 * 2, dtype=torch.float64).view(2, 1, 2, 2)
    sparse = torch.tensor([[[0, 1], [UNANNOTATED, 1]], [[0, 0], [0, UNANNOTATED]]])
    protos = class_prototypes(emb, sparse, num_classes=3)
    assert protos.vectors[0, 0, 0] == 0.0
    assert protos.vectors[0, 1, 0] == (1 + 3) / 2
    assert protos.vectors[1, 0, 0] == (4 + 5 + 6) / 3
    assert protos.present.tolist() == [[True, True, False], [True, False, False]]


def test_micro_and_macro_averages():
    emb = torch.arange(2 * 1 * 2 * 2, dtype=torch.float64).view(2, 1, 2, 2)
    sparse = torch.tensor([[[0, 1], [UNANNOTATED, 1]], [[0, 0], [0, UNANNOTATED]]])
    micro = avg_class_prototypes([(emb, sparse)], num_classes=3)
    assert micro.averaged and micro.vectors.shape == (1, 3, 1)
    assert micro.vectors[0, 0, 0] == (0 + 4 + 5 + 6) / 4
    macro = avg_class_prototypes([(emb, sparse)], num_classes=3, macro=True)
    assert macro.vectors[0, 0, 0] == (0 + 5) / 2


def test_chunked_average_equals_whole_average():
    g = torch.Generator().manual_seed(3)
    emb = torch.randn(6, 2, 4, 4, generator=g, dtype=torch.float64)
    sparse = torch.randint(0, 3, (6, 4, 4), generator=g)
    sparse[torch.rand(6, 4, 4, generator=g) < 0.5] = UNANNOTATED
    whole = avg_class_prototypes([(emb, sparse)], 3)
    chunked = avg_class_prototypes(zip(emb.split(4), sparse.split(4)), 3)
    assert torch.allclose(whole.vectors, chunked.vectors)
    assert torch.equal(whole.counts, chunked.counts)


def test_averaged_prototypes_serve_any_query_batch():
    protos = PrototypeSet(torch.randn(1, 3, 4), torch.ones(1, 3), averaged=True)
    for b in (1, 2, 7):
        assert proto_probs(torch.randn(b, 4, 3, 3), protos).shape == (b, 3, 3, 3)
