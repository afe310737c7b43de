#!/usr/bin/env python3
"""
Tests for codebooks, EMA updates and the residual quantizer
"""

import numpy as np
import torch

from omnicodec.errors import DimMismatch, EmptyBatch, InvalidStageCount, NotInTrainingMode, ShapeMismatch
from omnicodec.models import INACTIVE
from omnicodec.quantize import (
    Codebook,
    ResidualVQ,
    commitment_loss,
    dead_code_reseed,
    ema_update,
    quantizer_dropout_schedule,
    rvq_quantize,
    vq_nearest,
)


def brute_force_nearest(vectors: np.ndarray, x: np.ndarray) -> int:
    best, best_d = 0, None
    for k, v in enumerate(vectors):
        d = float(((x - v) ** 2).sum())
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best


def test_nearest_matches_brute_force():
    gen = torch.Generator().manual_seed(0)
    codebook = Codebook(32, 8, generator=gen)
    queries = torch.randn(100, 8, generator=gen)
    vectors = codebook.vectors.numpy().astype(np.float64)

    for q in queries:
        index, codeword = vq_nearest(codebook, q)
        assert index == brute_force_nearest(vectors, q.numpy().astype(np.float64))
        assert torch.equal(codeword, codebook.vectors[index])


def test_nearest_ties_go_to_smaller_index():
    codebook = Codebook(6, 3)
    codebook.vectors[5] = codebook.vectors[2]
    index, _ = vq_nearest(codebook, codebook.vectors[2].clone())
    assert index == 2

    # Equidistant codewords on either side of the query
    codebook.vectors.zero_()
    codebook.vectors[3] = torch.tensor([1.0, 0.0, 0.0])
    codebook.vectors[1] = torch.tensor([-1.0, 0.0, 0.0])
    codebook.vectors[0] = torch.tensor([5.0, 5.0, 5.0])
    codebook.vectors[2] = torch.tensor([5.0, 5.0, 5.0])
    codebook.vectors[4] = torch.tensor([5.0, 5.0, 5.0])
    codebook.vectors[5] = torch.tensor([5.0, 5.0, 5.0])
    index, _ = vq_nearest(codebook, torch.zeros(3))
    assert index == 1


def test_nearest_dim_mismatch():
    codebook = Codebook(4, 3)
    try:
        codebook.nearest(torch.zeros(2, 4))
    except DimMismatch:
        pass
    else:
        raise AssertionError("wrong dim should raise DimMismatch")


def test_ema_matches_scalar_recurrence():
    K, D, decay, eps = 3, 2, 0.9, 1e-5
    codebook = Codebook(K, D, decay=decay, epsilon=eps, dtype=torch.float64)
    codebook.train()

    sizes = [1.0, 1.0, 1.0]
    sums = [[float(v) for v in row] for row in codebook.ema_vector_sum]

    rng = np.random.default_rng(3)
    for _ in range(5):
        batch = rng.normal(size=(6, D))
        assign = [0, 0, 2, 2, 2, 0]

        ema_update(codebook, torch.from_numpy(batch), torch.tensor(assign))

        for k in range(K):
            count = sum(1 for a in assign if a == k)
            sizes[k] = decay * sizes[k] + (1 - decay) * count
            for d in range(D):
                total = sum(batch[i, d] for i, a in enumerate(assign) if a == k)
                sums[k][d] = decay * sums[k][d] + (1 - decay) * total
        n = sum(sizes)
        for k in range(K):
            smoothed = (sizes[k] + eps) / (n + K * eps) * n
            assert abs(float(codebook.ema_cluster_size[k]) - sizes[k]) <= 1e-10
            for d in range(D):
                expected = sums[k][d] / smoothed
                assert abs(float(codebook.vectors[k, d]) - expected) <= 1e-10


def test_ema_requires_training_mode():
    codebook = Codebook(4, 2)
    codebook.eval()
    try:
        ema_update(codebook, torch.zeros(1, 2), torch.tensor([0]))
    except NotInTrainingMode:
        pass
    else:
        raise AssertionError("eval-mode EMA update should raise")


def test_ema_zero_decay_takes_the_assigned_vector():
    K, eps = 4, 1e-5
    codebook = Codebook(K, 3, decay=0.0, epsilon=eps, dtype=torch.float64)
    codebook.train()
    v = torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)

    ema_update(codebook, v[None], torch.tensor([2]))

    assert torch.allclose(codebook.vectors[2], v, rtol=K * eps, atol=0.0)
    assert codebook.ema_cluster_size.tolist() == [0.0, 0.0, 1.0, 0.0]


def test_ema_without_assignments_only_decays():
    codebook = Codebook(5, 3, decay=0.99, dtype=torch.float64)
    codebook.train()
    sizes = codebook.ema_cluster_size.clone()
    vectors = codebook.vectors.clone()

    for step in range(1, 4):
        ema_update(codebook, torch.zeros(0, 3, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
        assert torch.allclose(codebook.ema_cluster_size, sizes * 0.99 ** step, rtol=1e-12)
        # Equal cluster sizes renormalize to exactly the old codewords
        assert torch.allclose(codebook.vectors, vectors, rtol=1e-12)


def test_ema_fixed_point_is_cluster_mean():
    gen = torch.Generator().manual_seed(4)
    codebook = Codebook(2, 3, decay=0.9, dtype=torch.float64, generator=gen)
    codebook.train()
    batch = torch.cat([
        torch.randn(4, 3, generator=gen, dtype=torch.float64) + 5.0,
        torch.randn(4, 3, generator=gen, dtype=torch.float64) - 5.0,
    ])
    assign = torch.tensor([0, 0, 0, 0, 1, 1, 1, 1])

    for _ in range(400):
        ema_update(codebook, batch, assign)

    assert torch.allclose(codebook.vectors[0], batch[:4].mean(0), atol=1e-6, rtol=0.0)
    assert torch.allclose(codebook.vectors[1], batch[4:].mean(0), atol=1e-6, rtol=0.0)


def test_rvq_error_non_increasing():
    gen = torch.Generator().manual_seed(1)
    for trial in range(100):
        stack = ResidualVQ(6, 16, 4, generator=gen)
        stack.eval()
        for codebook in stack.stages:
            # A zero codeword means a stage can never make things worse
            codebook.vectors[0] = 0.0
        x = torch.randn(8, 4, generator=gen, dtype=torch.float64)

        previous = float((x ** 2).sum())
        for n in range(1, 7):
            result = rvq_quantize(stack, x, n)
            error = float(((x - result.quantized) ** 2).sum())
            assert error <= previous + 1e-12, (trial, n, error, previous)
            previous = error


def test_rvq_inactive_stages_marked():
    stack = ResidualVQ(4, 8, 3)
    stack.eval()
    result = stack(torch.randn(2, 5, 3), torch.tensor([1, 3]))
    assert result.indices.shape == (2, 5, 4)
    assert (result.indices[0, :, 1:] == INACTIVE).all()
    assert (result.indices[0, :, 0] >= 0).all()
    assert (result.indices[1, :, :3] >= 0).all()
    assert (result.indices[1, :, 3] == INACTIVE).all()
    assert result.residual_energy_per_stage.shape == (4,)


def test_rvq_decode_matches_quantized():
    stack = ResidualVQ(3, 8, 4)
    stack.eval()
    x = torch.randn(7, 4)
    result = rvq_quantize(stack, x, 2)
    decoded = stack.decode(result.indices)
    assert torch.allclose(decoded, result.quantized, atol=1e-6)

    indices = torch.tensor([[0, INACTIVE, INACTIVE]])
    assert torch.equal(stack.decode(indices)[0], stack.stages[0].vectors[0])


def test_rvq_invalid_stage_count():
    stack = ResidualVQ(3, 8, 4)
    for n in (0, 4):
        try:
            rvq_quantize(stack, torch.zeros(2, 4), n)
        except InvalidStageCount:
            pass
        else:
            raise AssertionError(f"n_active={n} should raise")
    try:
        stack.decode(torch.zeros(1, 4, dtype=torch.long))
    except InvalidStageCount:
        pass
    else:
        raise AssertionError("too many stages should raise")


def test_rvq_empty_sequence():
    stack = ResidualVQ(2, 8, 4)
    stack.eval()
    result = stack(torch.zeros(0, 4))
    assert result.indices.shape == (0, 2)
    assert float(result.commit_loss) == 0.0


def test_training_initializes_from_first_batch():
    stack = ResidualVQ(2, 4, 2)
    stack.train()
    x = torch.randn(1, 10, 2)
    stack(x)
    assert bool(stack.stages[0].initialized)
    assert bool(stack.stages[1].initialized)


def test_batch_init_ignores_global_rng():
    x = torch.randn(40, 3, generator=torch.Generator().manual_seed(2))
    few = x[:3]
    runs = []
    for global_seed in (0, 1):
        torch.manual_seed(global_seed)
        many_rows = Codebook(8, 3)
        few_rows = Codebook(8, 3)
        many_rows.init_from_batch(x, torch.Generator().manual_seed(9))
        few_rows.init_from_batch(few, torch.Generator().manual_seed(9))
        runs.append((many_rows.vectors.clone(), few_rows.vectors.clone()))

    assert torch.equal(runs[0][0], runs[1][0])
    assert torch.equal(runs[0][1], runs[1][1])
    assert all(any(torch.equal(row, r) for r in x) for row in runs[0][0])
    assert runs[0][0].unique(dim=0).shape[0] == 8


def test_rvq_init_follows_its_generator():
    x = torch.randn(1, 30, 2, generator=torch.Generator().manual_seed(3))
    stacks = []
    for global_seed in (5, 6):
        stack = ResidualVQ(2, 4, 2, generator=torch.Generator().manual_seed(0))
        stack.train()
        torch.manual_seed(global_seed)
        stack(x)
        stacks.append(stack)
    for a, b in zip(stacks[0].stages, stacks[1].stages):
        assert torch.equal(a.vectors, b.vectors)


def test_straight_through_gradient_is_identity():
    gen = torch.Generator().manual_seed(11)
    w_in = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    w_out = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    mix = torch.randn(5, 2, generator=gen, dtype=torch.float64)
    codebook = Codebook(16, 4, generator=gen, dtype=torch.float64)
    codebook.eval()

    def quantized_net(x):
        z = x @ w_in.T
        q = codebook.lookup(codebook.nearest(z))
        z_q = z + (q - z).detach()
        return ((z_q @ w_out.T) * mix).sum()

    def unquantized_net(x):
        return ((x @ w_in.T @ w_out.T) * mix).sum()

    x = torch.randn(5, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    grad = torch.autograd.grad(quantized_net(x), x)[0]

    h = 1e-6
    numeric = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                step = torch.zeros_like(x)
                step[i, j] = h
                numeric[i, j] = (unquantized_net(x + step) - unquantized_net(x - step)) / (2 * h)
    assert torch.allclose(grad, numeric, rtol=1e-6, atol=1e-8)


def test_commitment_loss():
    x = torch.tensor([[1.0, 2.0], [0.0, 0.0]], requires_grad=True)
    q = torch.tensor([[0.0, 0.0], [1.0, 1.0]], requires_grad=True)
    loss = commitment_loss(x, q)
    assert abs(float(loss) - (5.0 + 2.0) / 2) < 1e-6
    loss.backward()
    assert q.grad is None
    try:
        commitment_loss(torch.zeros(2, 2), torch.zeros(2, 3))
    except ShapeMismatch:
        pass
    else:
        raise AssertionError("shape mismatch should raise")


def test_dropout_schedule():
    rng = np.random.default_rng(0)
    n, stages = 100_000, 8
    draws = np.array([quantizer_dropout_schedule(rng, stages) for _ in range(n)])
    assert draws.min() >= 1 and draws.max() <= stages
    for value in range(1, stages + 1):
        p = 0.5 / stages + (0.5 if value == stages else 0.0)
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs((draws == value).mean() - p) <= 3 * sigma, value

    try:
        quantizer_dropout_schedule(rng, 0)
    except InvalidStageCount:
        pass
    else:
        raise AssertionError("zero stages should raise")


def test_dead_code_reseed():
    codebook = Codebook(4, 2, dtype=torch.float64)
    codebook.train()
    codebook.ema_cluster_size.copy_(torch.tensor([1.0, 0.01, 2.0, 0.05], dtype=torch.float64))
    batch = torch.tensor([[10.0, 10.0], [20.0, 20.0]], dtype=torch.float64)
    untouched = codebook.vectors[[0, 2]].clone()

    dead_code_reseed(codebook, batch, 0.1, np.random.default_rng(0))

    assert torch.equal(codebook.vectors[[0, 2]], untouched)
    for k in (1, 3):
        assert any(torch.equal(codebook.vectors[k], row) for row in batch)
        assert float(codebook.ema_cluster_size[k]) == 1.0
        assert torch.equal(codebook.ema_vector_sum[k], codebook.vectors[k])


def test_reseed_does_not_lower_utilization():
    gen = torch.Generator().manual_seed(7)
    codebook = Codebook(16, 3, generator=gen)
    codebook.train()
    codebook.vectors[4:] = 100.0
    codebook.ema_cluster_size[4:] = 0.0
    batch = torch.randn(64, 3, generator=gen)

    before = codebook.nearest(batch).unique().numel()
    dead_code_reseed(codebook, batch, 0.1, np.random.default_rng(1))
    after = codebook.nearest(batch).unique().numel()
    assert after >= before
    assert after > 4


def test_dead_code_reseed_errors():
    codebook = Codebook(2, 2)
    codebook.ema_cluster_size.fill_(0.0)
    try:
        dead_code_reseed(codebook, torch.zeros(0, 2), 0.1, np.random.default_rng(0))
    except EmptyBatch:
        pass
    else:
        raise AssertionError("empty batch should raise")

    codebook.eval()
    try:
        dead_code_reseed(codebook, torch.zeros(3, 2), 0.1, np.random.default_rng(0))
    except NotInTrainingMode:
        pass
    else:
        raise AssertionError("eval mode should raise")


def main():
    tests = [v for k, v in globals().items() if k.startswith("test_") and callable(v)]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
    print(f"\n✓ {len(tests)} quantizer tests passed")


if __name__ == "__main__":
    main()
