#!/usr/bin/env python3
"""
Tests for the encoder/decoder graph: causality, streaming and initialization
"""

import torch

from omnicodec.config import preset, validate
from omnicodec.errors import DimMismatch, SampleRateMismatch
from omnicodec.models import LatentSequence, PcmBuffer
from omnicodec.nn_graph import init_params, transformer_pass
from omnicodec.transformer import CausalTransformer


VC = validate(preset("desk-tiny"))
RATE = VC.config.sample_rate_hz
HOP = VC.hop


def tiny_graph(seed: int = 0):
    graph = init_params(VC, seed)
    graph.eval()
    return graph


def noise(samples: int, seed: int = 0) -> torch.Tensor:
    return 0.3 * torch.randn(samples, generator=torch.Generator().manual_seed(seed))


def test_init_is_deterministic():
    a = tiny_graph(5).state_dict()
    b = tiny_graph(5).state_dict()
    c = tiny_graph(6).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_encode_emits_one_frame_per_hop():
    graph = tiny_graph()
    state = graph.init_encode_state()
    state, frames = graph.encode(state, PcmBuffer(torch.zeros(HOP - 1), RATE))
    assert frames.frames == 0
    state, frames = graph.encode(state, PcmBuffer(torch.zeros(1), RATE))
    assert frames.frames == 1
    assert frames.dim == VC.config.hidden_dim


def test_encode_split_hop_is_identical():
    graph = tiny_graph()
    x = noise(HOP * 5 + 7)

    _, whole = graph.encode(graph.init_encode_state(), PcmBuffer(x, RATE))

    state = graph.init_encode_state()
    parts = []
    for start, end in [(0, 23), (23, 24), (24, 61), (61, len(x))]:
        state, frames = graph.encode(state, PcmBuffer(x[start:end], RATE))
        parts.append(frames.data)
    assert torch.equal(torch.cat(parts), whole.data)
    assert whole.frames == 5
    assert state.pending.shape[0] == 7


def test_flush_pads_partial_hop():
    graph = tiny_graph()
    x = noise(HOP + 5)
    state, frames = graph.encode(graph.init_encode_state(), PcmBuffer(x, RATE))
    state, tail = graph.flush(state)
    assert frames.frames == 1
    assert tail.frames == 1

    padded = torch.cat([x, torch.zeros(HOP - 5)])
    _, reference = graph.encode(graph.init_encode_state(), PcmBuffer(padded, RATE))
    assert torch.equal(torch.cat([frames.data, tail.data]), reference.data)

    _, nothing = graph.flush(state)
    assert nothing.frames == 0


def test_streaming_matches_batch_encode():
    graph = tiny_graph()
    x = noise(HOP * 12)
    _, streamed = graph.encode(graph.init_encode_state(), PcmBuffer(x, RATE))
    with torch.no_grad():
        batch = graph.encode_batch(x[None])[0]
    assert batch.shape == streamed.data.shape
    assert torch.allclose(batch, streamed.data, rtol=1e-4, atol=1e-5)


def test_batch_encode_is_causal():
    graph = tiny_graph()
    x = noise(HOP * 10)
    cut = HOP * 6
    y = x.clone()
    y[cut:] = noise(HOP * 4, seed=9)
    with torch.no_grad():
        hx = graph.encode_batch(x[None])[0]
        hy = graph.encode_batch(y[None])[0]
    assert torch.allclose(hx[:6], hy[:6], atol=1e-6)
    assert not torch.allclose(hx[6:], hy[6:])


def test_encode_rejects_wrong_rate():
    graph = tiny_graph()
    try:
        graph.encode(graph.init_encode_state(), PcmBuffer(torch.zeros(HOP), 16000))
    except SampleRateMismatch:
        pass
    else:
        raise AssertionError("wrong sample rate should raise")


def test_decode_length_and_chunking():
    graph = tiny_graph()
    latents = torch.randn(3, VC.config.hidden_dim, generator=torch.Generator().manual_seed(2))

    _, whole = graph.decode(graph.init_decode_state(), LatentSequence(latents, VC.frame_rate_hz))
    assert len(whole) == 3 * HOP

    state = graph.init_decode_state()
    state, first = graph.decode(state, LatentSequence(latents[:1], VC.frame_rate_hz))
    state, rest = graph.decode(state, LatentSequence(latents[1:], VC.frame_rate_hz))
    assert torch.equal(torch.cat([first.samples, rest.samples]), whole.samples)


def test_streaming_matches_batch_decode():
    graph = tiny_graph()
    latents = torch.randn(8, VC.config.hidden_dim, generator=torch.Generator().manual_seed(3))
    _, streamed = graph.decode(graph.init_decode_state(), LatentSequence(latents, VC.frame_rate_hz))
    with torch.no_grad():
        batch = graph.decode_batch(latents[None])[0]
    assert batch.shape == streamed.samples.shape
    assert torch.allclose(batch, streamed.samples, rtol=1e-4, atol=1e-5)


def test_decode_zero_frames():
    graph = tiny_graph()
    _, pcm = graph.decode(graph.init_decode_state(),
                          LatentSequence(torch.zeros(0, VC.config.hidden_dim), VC.frame_rate_hz))
    assert len(pcm) == 0


def test_decode_dim_mismatch():
    graph = tiny_graph()
    try:
        graph.decode(graph.init_decode_state(), LatentSequence(torch.zeros(2, 3), VC.frame_rate_hz))
    except DimMismatch:
        pass
    else:
        raise AssertionError("wrong latent dim should raise")


def test_transformer_pass_is_causal():
    graph = tiny_graph()
    gen = torch.Generator().manual_seed(4)
    latents = torch.randn(10, VC.config.hidden_dim, generator=gen)
    perturbed = latents.clone()
    perturbed[7] += torch.randn(VC.config.hidden_dim, generator=gen)

    with torch.no_grad():
        for side in ("encoder_side", "decoder_side"):
            a = transformer_pass(LatentSequence(latents, VC.frame_rate_hz), graph, side).data
            b = transformer_pass(LatentSequence(perturbed, VC.frame_rate_hz), graph, side).data
            assert torch.equal(a[:7], b[:7]), side
            assert not torch.equal(a[7], b[7]), side


def test_transformer_pass_unknown_side():
    graph = tiny_graph()
    try:
        transformer_pass(LatentSequence(torch.zeros(1, VC.config.hidden_dim), VC.frame_rate_hz),
                         graph, "middle")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown side should raise")


def test_transformer_cache_keeps_whole_session():
    torch.manual_seed(0)
    transformer = CausalTransformer(16, 2, 2, 32)
    transformer.eval()
    frames = torch.randn(1, 60, 16, generator=torch.Generator().manual_seed(1))
    perturbed = frames.clone()
    perturbed[0, 0] += 1.0

    outputs = []
    with torch.no_grad():
        for sequence in (frames, perturbed):
            state = transformer.init_state()
            steps = []
            for t in range(sequence.shape[1]):
                y, state = transformer.step(sequence[:, t:t + 1], state)
                steps.append(y)
            outputs.append(torch.cat(steps, dim=1))
            assert state.offset == 60
            assert all(k.shape[2] == 60 and v.shape[2] == 60 for k, v in state.caches)

        assert torch.allclose(outputs[0], transformer(frames), atol=1e-5)
    # The first frame is still visible at the last one
    assert not torch.allclose(outputs[0][0, -1], outputs[1][0, -1])


def main():
    tests = [v for k, v in globals().items() if k.startswith("test_") and callable(v)]
    for test in tests:
        test()
        print(f"✓ {test.__name__}")
    print(f"\n✓ {len(tests)} graph tests passed")


if __name__ == "__main__":
    main()
