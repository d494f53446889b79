import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from edgedistill.errors import ConfigurationError, ValidationError
from edgedistill.losses import (
    EmbeddingBatch,
    contrastive_loss,
    diversity_loss,
    edge_loss,
    similarity_matrix,
)


def brute_force(z, y, tau=0.5, lambda_c=1.0, lambda_d=1.0):
    """Plain-python reference: lists, loops and math.log only."""
    def unit(v):
        n = math.sqrt(sum(a * a for a in v))
        return [a / n for a in v]

    z = [unit(list(r)) for r in z]
    y = [unit(list(r)) for r in y]
    n = len(z)
    s = [[sum(a * b for a, b in zip(z[i], y[j])) / tau for j in range(n)] for i in range(n)]
    i2t = sum(-math.log(math.exp(s[i][i]) / sum(math.exp(s[i][j]) for j in range(n))) for i in range(n)) / n
    t2i = sum(-math.log(math.exp(s[j][j]) / sum(math.exp(s[i][j]) for i in range(n))) for j in range(n)) / n
    cat = [unit(z[i] + y[i]) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    div = sum(sum(a * b for a, b in zip(cat[i], cat[j])) for i, j in pairs) / len(pairs) if pairs else float("nan")
    l_c = lambda_c * i2t + t2i
    return {"l_i2t": i2t, "l_t2i": t2i, "l_c": l_c, "l_d": div, "l_edge": l_c + lambda_d * div}


def raw_batch(rng, n, d=6):
    return torch.tensor(rng.normal(size=(n, d))), torch.tensor(rng.normal(size=(n, d)))


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        z, y = raw_batch(rng, n)
        tau, lc, ld = rng.uniform(0.1, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0)
        got = edge_loss(EmbeddingBatch.from_raw(z, y), tau, lc, ld).as_floats()
        want = brute_force(z.tolist(), y.tolist(), tau, lc, ld)
        for k in want:
            assert got[k] == pytest.approx(want[k], rel=1e-12, abs=1e-12)


def test_hand_computed_orthonormal_pair():
    e = torch.eye(2, dtype=torch.float64)
    out = edge_loss(EmbeddingBatch(e, e.clone()), tau=0.5)
    # S = diag(2, 2): each direction is log(1 + e^-2)
    expected = math.log1p(math.exp(-2.0))
    assert out.l_i2t.item() == pytest.approx(expected, abs=1e-15)
    assert out.l_t2i.item() == pytest.approx(expected, abs=1e-15)
    assert out.l_c.item() == pytest.approx(2 * expected, abs=1e-15)
    assert out.l_d.item() == pytest.approx(0.0, abs=1e-15)


def test_hand_computed_half_shared_diversity():
    e = torch.eye(2, dtype=torch.float64)
    z = torch.stack([e[0], e[0]])
    y = torch.stack([e[0], e[1]])
    # [e1; e1] and [e1; e2], each over sqrt 2: cosine 1/2
    assert diversity_loss(EmbeddingBatch(z, y)).item() == pytest.approx(0.5, abs=1e-15)


def test_similarity_scaled_by_tau():
    rng = np.random.default_rng(0)
    b = EmbeddingBatch.from_raw(*raw_batch(rng, 4))
    s1, s2 = similarity_matrix(b, 1.0), similarity_matrix(b, 0.25)
    torch.testing.assert_close(s2, 4 * s1)


def test_i2t_normalizes_rows_t2i_columns():
    z = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    l_i2t, l_t2i, _ = contrastive_loss(EmbeddingBatch(z, y), tau=1.0)
    # rows: both images prefer caption 0
    row = (-(1 - math.log(math.e + 1)) - (0 - math.log(math.e + 1))) / 2
    # columns: caption 0 sees two equal images, caption 1 sees two zeros
    col = (math.log(2) + math.log(2)) / 2
    assert l_i2t.item() == pytest.approx(row, abs=1e-14)
    assert l_t2i.item() == pytest.approx(col, abs=1e-14)


def test_validation_errors():
    z = torch.eye(3, dtype=torch.float64)
    with pytest.raises(ValidationError):
        EmbeddingBatch(2 * z, z)
    with pytest.raises(ValidationError):
        EmbeddingBatch(z, z[:2])
    with pytest.raises(ValidationError):
        EmbeddingBatch(torch.full((2, 3), float("nan")), z[:2])
    with pytest.raises(ValidationError):
        similarity_matrix(EmbeddingBatch(z, z), tau=0.0)
    with pytest.raises(ConfigurationError):
        similarity_matrix(EmbeddingBatch(z, torch.eye(3, 4, dtype=torch.float64)))
    with pytest.raises(ValidationError):
        diversity_loss(EmbeddingBatch(z[:1], z[:1]))


def test_large_similarities_stay_finite():
    z = torch.eye(4, dtype=torch.float64)
    out = edge_loss(EmbeddingBatch(z, z.clone()), tau=1e-3)
    assert all(math.isfinite(v) for v in out.as_floats().values())
    assert out.l_c.item() == pytest.approx(0.0, abs=1e-12)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def batches(draw, min_n=2, max_n=6):
    n = draw(st.integers(min_n, max_n))
    d = draw(st.integers(2, 5))
    z = np.array(draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=n, max_size=n)))
    y = np.array(draw(st.lists(st.lists(finite, min_size=d, max_size=d), min_size=n, max_size=n)))
    # keep rows away from zero so normalization is well defined
    z[np.linalg.norm(z, axis=1) < 1e-3] = 1.0
    y[np.linalg.norm(y, axis=1) < 1e-3] = 1.0
    return torch.tensor(z), torch.tensor(y)


@settings(max_examples=60, deadline=None)
@given(batches(), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_positive_rescaling_invariance(zy, a, b):
    z, y = zy
    base = edge_loss(EmbeddingBatch.from_raw(z, y)).as_floats()
    scaled = edge_loss(EmbeddingBatch.from_raw(a * z, b * y)).as_floats()
    for k in base:
        assert scaled[k] == pytest.approx(base[k], rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(batches(), st.randoms(use_true_random=False))
def test_joint_permutation_invariance(zy, rnd):
    z, y = zy
    perm = list(range(z.shape[0]))
    rnd.shuffle(perm)
    base = edge_loss(EmbeddingBatch.from_raw(z, y)).as_floats()
    shuffled = edge_loss(EmbeddingBatch.from_raw(z[perm], y[perm])).as_floats()
    for k in base:
        assert shuffled[k] == pytest.approx(base[k], rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(batches(), st.floats(0.05, 5.0))
def test_ranges(zy, tau):
    z, y = zy
    out = edge_loss(EmbeddingBatch.from_raw(z, y), tau)
    n = z.shape[0]
    # each cross-entropy lies in [0, log n + 2/tau * 2]
    for v in (out.l_i2t.item(), out.l_t2i.item()):
        assert -1e-12 <= v <= math.log(n) + 4.0 / tau + 1e-9
    assert -1.0 - 1e-12 <= out.l_d.item() <= 1.0 + 1e-12
    assert out.l_c.item() == out.l_i2t.item() + out.l_t2i.item()
