import numpy as np
import pytest
import torch

import oracles
from pointcmp.encoder import EncoderConfig, PointEncoder, clips_to_segments, count_params


def _segments(seed=0, b=2, l=2, f=4, p=64, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(-0.5, 0.5, size=(b, l, f, p, 3))).to(dtype)


def _encoder(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = EncoderConfig(**{"num_tokens": 8, "channels": 16, "hidden": 8, "radius": 0.3, "k_ball": 9,
                           "frames_per_segment": 4, **kw})
    return PointEncoder(cfg)


def test_default_shapes():
    enc = PointEncoder(EncoderConfig())
    feat, anchors, g = enc(_segments(b=1, l=4, p=256))
    assert feat.shape == (1, 4, 32, 128)
    assert anchors.shape == (1, 4, 32, 4)
    assert g.shape == (1, 128)


def test_anchor_contract():
    seg = _segments(l=3)
    _, anchors, _ = _encoder()(seg)
    for b in range(2):
        for l in range(3):
            pts = seg[b, l].reshape(-1, 3)
            xyz = anchors[b, l, :, :3]
            assert (xyz >= pts.min(0).values).all() and (xyz <= pts.max(0).values).all()
            # anchors are points of the middle frame
            mid = seg[b, l, 2]
            assert all((mid == a).all(-1).any() for a in xyz)
            t = anchors[b, l, :, 3]
            assert (t == t[0]).all()
    assert torch.allclose(anchors[0, :, 0, 3], torch.tensor([2 / 11, 6 / 11, 10 / 11]))


def test_encode_segment_matches_batched():
    seg = _segments(b=1, l=3)
    enc = _encoder().eval()
    feat, anchors, _ = enc(seg)
    f1, a1 = enc.encode_segment(seg[0, 1], index=1, total_frames=12)
    torch.testing.assert_close(f1, feat[0, 1])
    torch.testing.assert_close(a1, anchors[0, 1])


@pytest.mark.parametrize("train_mode", [True, False])
def test_translation_equivariance(train_mode):
    seg = _segments(dtype=torch.float64)
    enc = _encoder().double().train(train_mode)
    v = torch.tensor([1.5, -3.0, 0.25], dtype=torch.float64)
    f0, a0, g0 = enc(seg)
    f1, a1, g1 = enc(seg + v)
    torch.testing.assert_close(a1, a0 + torch.cat([v, v.new_zeros(1)]))
    torch.testing.assert_close(f1, f0, rtol=1e-6, atol=1e-9)
    torch.testing.assert_close(g1, g0, rtol=1e-6, atol=1e-9)


def test_point_permutation_invariance():
    seg = _segments(dtype=torch.float64)
    enc = _encoder().double().eval()
    gen = torch.Generator().manual_seed(0)
    perm = torch.stack([torch.randperm(64, generator=gen) for _ in range(2 * 2 * 4)]).reshape(2, 2, 4, 64)
    shuffled = torch.gather(seg, 3, perm.unsqueeze(-1).expand(-1, -1, -1, -1, 3))
    f0, a0, _ = enc(seg)
    f1, a1, _ = enc(shuffled)
    torch.testing.assert_close(f1, f0, rtol=1e-6, atol=1e-9)
    for b in range(2):
        for l in range(2):
            assert {tuple(r) for r in a0[b, l].tolist()} == {tuple(r) for r in a1[b, l].tolist()}


def test_duplicate_points_invariance():
    # a small radius keeps every ball under k points even after duplication
    seg = _segments(dtype=torch.float64)
    enc = _encoder(radius=0.08).double().eval()
    doubled = torch.cat([seg, seg], 3)
    f0, a0, g0 = enc(seg)
    f1, a1, g1 = enc(doubled)
    torch.testing.assert_close(f1, f0)
    torch.testing.assert_close(a1, a0)
    torch.testing.assert_close(g1, g0)


def test_global_token_recomputable():
    enc = _encoder()
    feat, _, g = enc(_segments())
    pooled = feat.reshape(2, -1, 16).max(1).values
    torch.testing.assert_close(g, enc.global_head(pooled))


def _expected_params(n, c, h, f):
    point = 4 * h + 2 * h + h * h + 2 * h  # bias-free linears followed by batch norm
    temporal = f + 1
    token = h * c + 2 * c + c * c + c
    head = 2 * (c * c + c)
    return point + temporal + token + head


@pytest.mark.parametrize("n,c,h,f,expected", [
    (32, 128, 64, 4, 62_597),
    (4, 8, 8, 2, 427),
    (16, 64, 32, 8, 15_945),
])
def test_count_params(n, c, h, f, expected):
    assert _expected_params(n, c, h, f) == expected
    enc = PointEncoder(EncoderConfig(num_tokens=n, channels=c, hidden=h, frames_per_segment=f))
    assert count_params(enc) == expected


def test_finite_difference_gradients():
    torch.manual_seed(0)
    enc = PointEncoder(EncoderConfig(num_tokens=4, channels=8, hidden=8, radius=0.4, k_ball=5,
                                     frames_per_segment=2)).double()
    seg = _segments(seed=3, b=2, l=2, f=2, p=16, dtype=torch.float64)
    w_feat = torch.randn(2, 2, 4, 8, dtype=torch.float64)
    w_glob = torch.randn(2, 8, dtype=torch.float64)

    def objective():
        feat, _, g = enc(seg)
        return (feat * w_feat).sum() + (g * w_glob).sum()

    enc.zero_grad()
    objective().backward()
    for name, module in enc.named_children():
        params = list(module.parameters())
        numeric = oracles.central_difference(objective, [p.data for p in params])
        analytic = np.concatenate([p.grad.numpy().ravel() for p in params])
        numeric = np.concatenate([n.numpy().ravel() for n in numeric])
        assert oracles.relative_error(analytic, numeric) < 1e-4, name


def test_rejects_bad_inputs():
    enc = _encoder(num_tokens=8)
    with pytest.raises(ValueError):
        enc(_segments(p=6))
    with pytest.raises(ValueError):
        enc(_segments(f=3))
    with pytest.raises(ValueError):
        EncoderConfig(radius=0).validate()


def test_clips_to_segments():
    clips = torch.arange(2 * 8 * 5 * 3, dtype=torch.float32).reshape(2, 8, 5, 3)
    seg = clips_to_segments(clips, 4)
    assert seg.shape == (2, 4, 2, 5, 3)
    assert torch.equal(seg[1, 2, 1], clips[1, 5])
    with pytest.raises(ValueError):
        clips_to_segments(clips, 3)
