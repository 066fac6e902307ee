import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from oasis.decoder import MaskDecoder, aggregate, aggregate_logits, decode_masks
from oasis.encoders import (ImageEncoder, ImageEncoderConfig, MemoryEncoder, encode_image,
                            encode_memory, memory_update)
from oasis.model import ModelConfig, build_model, count_parameters
from oasis.structure import (StructureDecoder, StructureDecoderConfig, predict_structure,
                             structure_supervision_loss)
from oasis.types import (FeaturePyramid, FrameTensor, InvalidInputError, MemoryState, ProbMask,
                         StructureKind, StructureMap)
from oracles import aggregate_scalar

CH = [32, 64, 128]


def _frame(rng, h=64, w=64):
    return FrameTensor(rng.random((3, h, w)).astype(np.float32))


def _levels(B, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(B, c, size >> (i + 2), size >> (i + 2), generator=g) for i, c in enumerate(CH)]


def _memory(B, n_obj, seed=0):
    return torch.randn(B, n_obj, 256, 30, 30, generator=torch.Generator().manual_seed(seed))


# image encoder

@pytest.mark.parametrize("h,w", [(64, 64), (128, 64)])
def test_pyramid_shape_law(rng, h, w):
    torch.manual_seed(0)
    p = encode_image(_frame(rng, h, w), ImageEncoder())
    assert [tuple(l.shape[-2:]) for l in p.levels] == [(h // 4, w // 4), (h // 8, w // 8),
                                                      (h // 16, w // 16)]


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_pyramid_shape_property(a, b):
    torch.manual_seed(0)
    enc = ImageEncoder()
    x = torch.rand(1, 3, 16 * a, 16 * b)
    for i, l in enumerate(enc(x)):
        assert l.shape[-2:] == (16 * a >> (i + 2), 16 * b >> (i + 2))
        assert torch.isfinite(l).all()


def test_zero_frame_deterministic():
    torch.manual_seed(3)
    enc = ImageEncoder().eval()
    f = FrameTensor(np.zeros((3, 32, 32), np.float32))
    a = [l.norm().item() for l in encode_image(f, enc).levels]
    b = [l.norm().item() for l in encode_image(f, enc).levels]
    assert a == b and all(math.isfinite(v) for v in a)


def test_encoder_rejects_bad_size():
    with pytest.raises(InvalidInputError):
        ImageEncoder()(torch.zeros(1, 3, 40, 64))
    with pytest.raises(InvalidInputError):
        ImageEncoderConfig(channels_per_scale=[64, 32, 128])


# memory encoder

def _mem_encoder():
    torch.manual_seed(0)
    return MemoryEncoder(channels=CH).eval()


def test_zero_object_channel_gives_zero_feature(rng):
    enc = _mem_encoder()
    p = np.zeros((3, 64, 64), np.float32)
    p[0] = 1
    p[0, :32], p[1, :32] = 0, 1
    _, objs = encode_memory(_frame(rng), ProbMask(p, (1, 2)), enc)
    assert torch.count_nonzero(objs[1]) == 0 and torch.count_nonzero(objs[0]) > 0


def test_full_frame_object_equals_unmasked_path(rng):
    enc = _mem_encoder()
    f = _frame(rng)
    p = np.zeros((2, 64, 64), np.float32)
    p[1] = 1
    g, objs = encode_memory(f, ProbMask(p, (1,)), enc)
    ref = F.interpolate(enc.to_object(g[None]), size=(30, 30), mode="bilinear", align_corners=False)
    torch.testing.assert_close(objs[0], ref[0], rtol=0, atol=1e-6)


def test_swapping_object_channels_swaps_features(rng):
    enc = _mem_encoder()
    f = _frame(rng)
    p = np.zeros((3, 64, 64), np.float32)
    p[1, 8:24, 8:24] = 1
    p[2, 40:56, 36:60] = 1
    p[0] = 1 - p[1] - p[2]
    _, a = encode_memory(f, ProbMask(p, (1, 2)), enc)
    _, b = encode_memory(f, ProbMask(p[[0, 2, 1]], (1, 2)), enc)
    assert torch.equal(a[0], b[1]) and torch.equal(a[1], b[0])


def test_memory_encoding_needs_objects(rng):
    with pytest.raises(InvalidInputError):
        encode_memory(_frame(rng), ProbMask(np.ones((1, 64, 64), np.float32), ()), _mem_encoder())


def _feat(v=0.0):
    return torch.full((4, 2, 2), v), torch.full((1, 8, 30, 30), v)


def test_memory_first_frame():
    s = memory_update(MemoryState(capacity=3), 0, *_feat())
    assert len(s) == 1 and s.stored_frame_indices == [0]


def test_memory_fifo_except_first():
    s = MemoryState(capacity=3)
    for t in (0, 5, 10, 15):
        s = memory_update(s, t, *_feat(t), update_interval=5)
    assert s.stored_frame_indices == [0, 10, 15]


def test_memory_interval_skips():
    s = memory_update(MemoryState(capacity=3), 0, *_feat())
    assert memory_update(s, 7, *_feat(1.0), update_interval=5) is s


def test_memory_ema():
    s = memory_update(MemoryState(capacity=3), 0, *_feat(1.0))
    s = memory_update(s, 5, *_feat(2.0), update_interval=5)
    torch.testing.assert_close(s.object_features, torch.full((1, 8, 30, 30), 0.8 + 0.2 * 2.0))


def test_memory_object_count_mismatch():
    s = memory_update(MemoryState(capacity=3), 0, *_feat())
    with pytest.raises(InvalidInputError):
        memory_update(s, 5, torch.zeros(4, 2, 2), torch.zeros(2, 8, 30, 30))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 40))
def test_memory_bounded_and_keeps_first(capacity, interval, n):
    s = MemoryState(capacity=capacity)
    for t in range(n):
        s = memory_update(s, t, *_feat(), update_interval=interval)
        assert len(s) <= capacity and s.stored_frame_indices[0] == 0


# structure decoder

def test_structure_output_shape_and_kind():
    torch.manual_seed(0)
    dec = StructureDecoder(CH)
    lv = [l[0] for l in _levels(1)]
    s = predict_structure(FeaturePyramid(tuple(lv), (64, 64)), _memory(1, 2)[0], dec)
    assert s.kind is StructureKind.PREDICTED_LOGITS and tuple(s.values.shape) == (1, 64, 64)


def test_structure_without_fusion_ignores_memory():
    torch.manual_seed(0)
    dec = StructureDecoder(CH, cfg=StructureDecoderConfig(use_object_fusion=False))
    lv = _levels(1)
    a = dec(lv, _memory(1, 2, 1), (64, 64))
    b = dec(lv, _memory(1, 3, 2), (64, 64))
    assert torch.equal(a, b) and dec.object_proj is None


def test_structure_object_permutation_invariant():
    torch.manual_seed(0)
    dec = StructureDecoder(CH)
    lv = _levels(1)
    m = _memory(1, 3)
    a = dec(lv, m, (64, 64))
    b = dec(lv, m[:, [2, 0, 1]], (64, 64))
    torch.testing.assert_close(a, b, rtol=0, atol=1e-5)


def test_structure_channel_mismatch():
    torch.manual_seed(0)
    dec = StructureDecoder(CH)
    with pytest.raises(InvalidInputError):
        dec(_levels(1), torch.zeros(1, 2, 64, 30, 30), (64, 64))
    with pytest.raises(InvalidInputError):
        dec(_levels(1), None, (64, 64))


def test_structure_bce_examples(rng):
    t = (rng.random((1, 4, 4)) > 0.5).astype(np.float32)
    target = StructureMap(t, StructureKind.GROUND_TRUTH_BINARY)
    sat = StructureMap(torch.from_numpy(np.where(t > 0, 20.0, -20.0)), StructureKind.PREDICTED_LOGITS)
    assert structure_supervision_loss(sat, target).item() < 1e-6
    zero = StructureMap(torch.zeros(1, 4, 4), StructureKind.PREDICTED_LOGITS)
    assert abs(structure_supervision_loss(zero, target).item() - math.log(2)) < 1e-6
    x = rng.standard_normal((1, 4, 4))
    ref = np.mean([-(tt * math.log(1 / (1 + math.exp(-v))) + (1 - tt) * math.log(1 - 1 / (1 + math.exp(-v))))
                   for v, tt in zip(x.ravel(), t.ravel())])
    got = structure_supervision_loss(StructureMap(torch.from_numpy(x), StructureKind.PREDICTED_LOGITS),
                                     StructureMap(t.astype(np.float64), StructureKind.GROUND_TRUTH_BINARY))
    assert abs(got.item() - ref) < 1e-6
    with pytest.raises(InvalidInputError):
        structure_supervision_loss(zero, zero)


def test_structure_decoder_paper_size():
    cfg = ModelConfig.paper()
    dec = StructureDecoder(cfg.image.channels_per_scale, cfg.memory.object_dim, cfg.structure)
    assert 1.5e6 <= count_parameters(dec) <= 2.5e6


# mask decoder and aggregation

@pytest.mark.parametrize("n_obj", [1, 2, 3])
def test_mask_decoder_shape(n_obj):
    torch.manual_seed(0)
    dec = MaskDecoder(CH)
    lv = [l[0] for l in _levels(1)]
    state = MemoryState([torch.zeros(8, 4, 4)], _memory(1, n_obj)[0], [0], 5)
    out = decode_masks(FeaturePyramid(tuple(lv), (64, 64)), state, dec)
    assert tuple(out.shape) == (n_obj, 64, 64)


def test_mask_decoder_copy_equivariance():
    torch.manual_seed(0)
    dec = MaskDecoder(CH).eval()
    m = _memory(1, 2)
    m = torch.cat([m, m[:, :1]], dim=1)
    out = dec(_levels(1), m, (64, 64))
    torch.testing.assert_close(out[0, 0], out[0, 2], rtol=0, atol=1e-5)


def test_mask_decoder_empty_memory():
    torch.manual_seed(0)
    lv = [l[0] for l in _levels(1)]
    with pytest.raises(InvalidInputError):
        decode_masks(FeaturePyramid(tuple(lv), (64, 64)), MemoryState(capacity=5), MaskDecoder(CH))


def test_mask_decoder_finite_fuzz():
    for seed in range(100):
        torch.manual_seed(seed)
        dec = MaskDecoder(CH, cfg=None)
        out = dec(_levels(1, 32, seed), _memory(1, 1, seed), (32, 32))
        assert torch.isfinite(out).all()


def test_mask_decoder_all_parameters_get_gradients():
    torch.manual_seed(0)
    dec = MaskDecoder(CH)
    dec(_levels(2), _memory(2, 2), (64, 64)).square().mean().backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in dec.parameters())


def test_aggregate_examples():
    p = aggregate(torch.zeros(1, 2, 2))
    np.testing.assert_allclose(np.asarray(p.probs), 0.5, atol=1e-6)
    p = aggregate(torch.full((1, 2, 2), 20.0))
    assert np.asarray(p.probs)[1].min() > 1 - 1e-6


def test_aggregate_matches_scalar_loop(rng):
    logits = rng.standard_normal((2, 3, 3)) * 3
    probs = np.asarray(aggregate(torch.from_numpy(logits)).probs)
    for y in range(3):
        for x in range(3):
            np.testing.assert_allclose(probs[:, y, x], aggregate_scalar(list(logits[:, y, x])), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4))
def test_aggregate_valid_and_equivariant(seed, n):
    r = np.random.default_rng(seed)
    logits = torch.from_numpy(r.standard_normal((n, 4, 4)) * 10)
    probs, _ = aggregate_logits(logits, dim=0)
    torch.testing.assert_close(probs.sum(0), torch.ones(4, 4, dtype=probs.dtype))
    perm = torch.from_numpy(r.permutation(n))
    probs2, _ = aggregate_logits(logits[perm], dim=0)
    torch.testing.assert_close(probs2[1:], probs[1:][perm], rtol=0, atol=1e-12)


def test_aggregate_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        aggregate(torch.tensor([[[float("inf")]]]))


# assembled model

def test_model_segment_shapes_and_ablation_switches():
    for cfg in (ModelConfig(), ModelConfig(use_structure_decoder=False)):
        m = build_model(cfg, 0)
        out = m.segment(torch.rand(2, 3, 32, 32), torch.zeros(2, 1, 32, 32), _memory(2, 2))
        assert out.probs.shape == (2, 3, 32, 32) and out.logits.shape == (2, 2, 32, 32)
        assert (out.structure is None) == (not cfg.use_structure_decoder)


def test_model_config_roundtrip():
    cfg = ModelConfig.paper()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_preset_structure_activation():
    assert ModelConfig().fusion.structure_activation == "sigmoid"
    assert ModelConfig.paper().fusion.structure_activation == "logits"
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()
