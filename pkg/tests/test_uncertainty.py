import itertools
import math

import pytest
import torch

from protoseg.core import class_softmax
from protoseg.prototypes import SimilarityStack
from protoseg.uncertainty import (
    confidence_weight,
    normalized_entropy,
    stability_weight,
    vote_probability,
)

from oracles import entropy_oracle, vote_oracle


def stack_from_votes(votes, c=3):
    """Build a similarity stack whose per-map argmax at the single pixel is `votes`."""
    maps = torch.full((len(votes), c, 1, 1), -0.5)
    for n, v in enumerate(votes):
        maps[n, v, 0, 0] = 0.5
    return SimilarityStack(maps=maps, target_sample=0)


def test_vote_probability_counts():
    stack = stack_from_votes([0, 0, 0, 1], c=2)
    p = vote_probability(stack)
    assert p.flatten().tolist() == [0.75, 0.25]


def test_vote_probability_unanimous_is_one_hot():
    p = vote_probability(stack_from_votes([2, 2, 2, 2]))
    assert p.flatten().tolist() == [0.0, 0.0, 1.0]


def test_vote_probability_rejects_singleton():
    with pytest.raises(ValueError, match=">= 2"):
        vote_probability(SimilarityStack(torch.zeros(1, 2, 1, 1), 0))


def test_vote_probability_multiples_and_sum():
    torch.manual_seed(0)
    for _ in range(10):
        maps = torch.rand(4, 3, 6, 6) * 2.0 - 1.0
        p = vote_probability(SimilarityStack(maps, 0))
        scaled = p * 4.0
        assert torch.equal(scaled, scaled.round())  # exact multiples of 1/B
        assert (p.sum(dim=0) == 1.0).all()
        assert abs(p.numpy() - vote_oracle(maps.numpy())).max() < 1e-7


def test_entropy_endpoints_and_value():
    one_hot = torch.tensor([1.0, 0.0]).view(2, 1, 1)
    assert normalized_entropy(one_hot).item() == 0.0
    uniform = torch.full((4, 1, 1), 0.25)
    assert normalized_entropy(uniform).item() == pytest.approx(1.0, abs=1e-7)
    skewed = torch.tensor([0.75, 0.25]).view(2, 1, 1)
    assert normalized_entropy(skewed).item() == pytest.approx(0.8112781244591328, abs=1e-4)


def test_entropy_rejects_single_class():
    with pytest.raises(ValueError, match=">= 2 classes"):
        normalized_entropy(torch.ones(1, 2, 2))


def test_entropy_permutation_invariant():
    torch.manual_seed(1)
    p = class_softmax(torch.randn(4, 5, 5))
    base = normalized_entropy(p)
    assert torch.allclose(normalized_entropy(p[[2, 0, 3, 1]]), base, atol=1e-7)


def test_entropy_exhaustive_vote_patterns():
    # every possible 4-vote pattern over 3 classes, one pixel each
    b, c = 4, 3
    patterns = list(itertools.product(range(c), repeat=b))
    stacks = stack_from_votes
    for pattern in patterns:
        p = vote_probability(stacks(list(pattern), c=c))
        e = normalized_entropy(p)
        w1 = stability_weight(e)
        assert 0.0 <= e.item() <= 1.0
        assert abs(e.item() - entropy_oracle(p.numpy())[0, 0]) < 1e-7
        assert w1.item() == pytest.approx(1.0 - e.item(), abs=1e-7)
        if len(set(pattern)) == 1:
            assert e.item() == 0.0


def test_stability_weight_values():
    e = torch.tensor([[0.0, 1.0, 0.8112781]])
    w1 = stability_weight(e)
    assert w1[0, 0].item() == 1.0 and w1[0, 1].item() == 0.0
    assert w1[0, 2].item() == pytest.approx(0.1887219, abs=1e-6)


def test_confidence_weight_values_and_bounds():
    p = torch.tensor([0.6, 0.3, 0.1]).view(3, 1, 1)
    assert confidence_weight(p).item() == pytest.approx(0.6, abs=1e-7)
    assert confidence_weight(torch.full((4, 2, 2), 0.25)).min().item() == pytest.approx(0.25)
    torch.manual_seed(2)
    for _ in range(10):
        probs = class_softmax(torch.randn(5, 6, 6) * 3.0)
        w2 = confidence_weight(probs)
        assert w2.min().item() >= 1.0 / 5.0 - 1e-7
        assert w2.max().item() <= 1.0 + 1e-7


def test_entropy_concave_on_binary_mixtures():
    # numeric spot check of concavity along the C=2 vote simplex
    def e(p):
        return normalized_entropy(torch.tensor([p, 1.0 - p]).view(2, 1, 1)).item()

    for a, b in [(0.1, 0.7), (0.25, 0.5), (0.0, 1.0)]:
        mid = e((a + b) / 2.0)
        assert mid >= (e(a) + e(b)) / 2.0 - 1e-9
