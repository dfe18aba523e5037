import math

import numpy as np
import pytest
import torch
from scipy import stats

from pointcmp import augment as aug


def _grid(seed, l=4, n=32, c=128):
    gen = torch.Generator().manual_seed(seed)
    return (torch.randn(l, n, c, generator=gen, dtype=torch.float64),
            torch.randn(c, generator=gen, dtype=torch.float64))


def _random_rotation(c, rng):
    q, r = np.linalg.qr(rng.normal(size=(c, c)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return torch.from_numpy(q)


class TestSimilarity:
    def test_hand_values(self):
        g = torch.tensor([1.0, 1.0])
        z = torch.tensor([[[1.0, 1.0], [2.0, -2.0], [1.0, 0.0]]])
        s = aug.token_global_similarity(z, g)
        assert s[0, 0].item() == pytest.approx(1.0)
        assert s[0, 1].item() == pytest.approx(0.0, abs=1e-7)
        assert s[0, 2].item() == pytest.approx(1 / math.sqrt(2), abs=1e-5)

    def test_zero_vectors_are_guarded(self):
        s = aug.token_global_similarity(torch.zeros(1, 2, 3), torch.zeros(3))
        assert torch.equal(s, torch.zeros(1, 2))

    def test_rejects_non_finite(self):
        z, g = _grid(0)
        z[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            aug.token_global_similarity(z, g)
        with pytest.raises(ValueError):
            aug.channel_correlation(z, g)

    def test_range(self):
        z, g = _grid(1)
        s = aug.token_global_similarity(z, g)
        assert s.abs().max() <= 1 + 1e-12


class TestDominant:
    def test_count(self):
        z, g = _grid(0, l=4, n=16)
        assert int(aug.select_dominant(aug.token_global_similarity(z, g), 0.4).sum()) == 25

    def test_ties_go_to_low_index(self):
        dom = aug.select_dominant(torch.zeros(4, 16), 0.4)
        assert torch.equal(torch.nonzero(dom.flatten()).flatten(), torch.arange(25))

    def test_argmax(self):
        sim = torch.zeros(2, 5)
        sim[1, 3] = 1.0
        dom = aug.select_dominant(sim, 0.1)
        assert torch.nonzero(dom.flatten()).flatten().tolist() == [8]

    def test_picks_the_highest(self):
        z, g = _grid(2)
        sim = aug.token_global_similarity(z, g)
        dom = aug.select_dominant(sim)
        assert sim[dom].min() >= sim[~dom].max()

    @pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            aug.select_dominant(torch.zeros(2, 2), fraction)


class TestMaskedSegments:
    def _dominant(self, counts, n=16):
        return torch.stack([torch.arange(n) < c for c in counts])

    def test_argmax(self):
        assert aug.select_masked_segments(self._dominant([2, 9, 7, 7]), 1).tolist() == [1]

    def test_ties(self):
        assert aug.select_masked_segments(self._dominant([5, 5, 5, 5]), 2).tolist() == [0, 1]

    def test_output_ascending(self):
        assert aug.select_masked_segments(self._dominant([1, 9, 3, 8]), 2).tolist() == [1, 3]

    @pytest.mark.parametrize("lm", [0, 4, 5])
    def test_rejects(self, lm):
        with pytest.raises(ValueError):
            aug.select_masked_segments(self._dominant([1, 2, 3, 4]), lm)

    def test_token_mask(self):
        mask = aug.segment_token_mask(torch.tensor([2]), 4, 32)
        assert mask.shape == (4, 32) and int(mask.sum()) == 32 and mask[2].all()

    def test_segment_ratio_rounding(self):
        assert [aug.segments_for(r, 4) for r in (0.25, 0.5, 0.75)] == [1, 2, 3]


class TestChannels:
    def test_hand_correlation(self):
        s = aug.channel_correlation(torch.tensor([[[3.0, 4.0]]]), torch.tensor([6.0, 8.0]))
        torch.testing.assert_close(s, torch.tensor([[0.36, 0.64]]))

    def test_sums_to_similarity(self):
        z, g = _grid(3)
        torch.testing.assert_close(aug.channel_correlation(z, g).sum(-1),
                                   aug.token_global_similarity(z, g).flatten())

    def test_sparse_global(self):
        z, _ = _grid(4)
        g = torch.zeros(128, dtype=torch.float64)
        g[7] = 2.0
        corr = aug.channel_correlation(z, g)
        assert (corr[:, torch.arange(128) != 7] == 0).all()

    def test_rank_single_token(self):
        assert aug.rank_sum_channels(torch.tensor([[0.2, 0.9, 0.5]])).tolist() == [1, 3, 2]

    def test_rank_reversed_tokens(self):
        a = aug.rank_sum_channels(torch.tensor([[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]]))
        assert a.tolist() == [4, 4, 4]

    def test_rank_constant(self):
        a = aug.rank_sum_channels(torch.full((6, 5), 0.5))
        assert a.tolist() == [6 * r for r in range(1, 6)]

    def test_erase_count_and_locality(self):
        z, _ = _grid(5, c=10)
        a = torch.arange(10, dtype=torch.float64)
        out, mask = aug.erase_principal_channels(z, a, 0.2)
        assert mask.tolist() == [False] * 8 + [True] * 2
        assert (out[..., 8:] == 0).all()
        assert torch.equal(out[..., :8], z[..., :8])
        assert not (z[..., 8:] == 0).all()  # input untouched

    def test_erase_default_width(self):
        z, g = _grid(6)
        spec = aug.similarity_erase_spec(z, g)
        assert len(spec.erased_channels) == 25
        assert spec.to_record().startswith("erased_channels=")


class TestInvariances:
    def _selections(self, z, g):
        sim = aug.token_global_similarity(z, g)
        dom = aug.select_dominant(sim)
        seg = aug.select_masked_segments(dom, 1)
        erased = aug.principal_channels(aug.rank_sum_channels(aug.channel_correlation(z, g)))
        return dom, seg, erased

    def test_global_scaling(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            z, g = _grid(trial)
            base = self._selections(z, g)
            for a, b in zip(base, self._selections(z, g * float(rng.uniform(0.01, 100)))):
                assert torch.equal(a, b)

    def test_per_token_scaling(self):
        gen = torch.Generator().manual_seed(1)
        for trial in range(20):
            z, g = _grid(100 + trial)
            scale = torch.rand(4, 32, 1, generator=gen, dtype=torch.float64) * 10 + 0.05
            for a, b in zip(self._selections(z, g), self._selections(z * scale, g)):
                assert torch.equal(a, b)

    def test_rotation_keeps_token_selection(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            z, g = _grid(200 + trial)
            r = _random_rotation(128, rng)
            (d0, s0, _), (d1, s1, _) = self._selections(z, g), self._selections(z @ r.T, g @ r.T)
            assert torch.equal(d0, d1) and torch.equal(s0, s1)

    def test_channel_permutation_relabels_erased_set(self):
        gen = torch.Generator().manual_seed(3)
        z, g = _grid(300)
        perm = torch.randperm(128, generator=gen)
        _, _, e0 = self._selections(z, g)
        _, _, e1 = self._selections(z[..., perm], g[perm])
        assert torch.equal(e1, e0[perm])


class TestRandomVariants:
    def test_deterministic(self):
        a = aug.random_mask_spec(4, 32, torch.Generator().manual_seed(9), num_masked=1)
        b = aug.random_mask_spec(4, 32, torch.Generator().manual_seed(9), num_masked=1)
        assert a.masked_segments == b.masked_segments and np.array_equal(a.masked, b.masked)
        e1 = aug.random_erase_spec(128, 0.2, torch.Generator().manual_seed(9))
        e2 = aug.random_erase_spec(128, 0.2, torch.Generator().manual_seed(9))
        assert e1.erased_channels == e2.erased_channels

    def test_cardinalities_match_similarity_rules(self):
        z, g = _grid(7)
        gen = torch.Generator().manual_seed(0)
        sim_mask = aug.similarity_mask_spec(z.float(), g.float(), 1)
        rnd_mask = aug.random_mask_spec(4, 32, gen, num_masked=1)
        assert len(sim_mask.masked_segments) == len(rnd_mask.masked_segments) == 1
        assert sim_mask.masked.sum() == rnd_mask.masked.sum() == 32
        tok = aug.random_mask_spec(4, 32, gen, token_fraction=0.25)
        assert tok.masked.sum() == 32
        assert len(aug.random_erase_spec(128, 0.2, gen).erased_channels) == 25
        assert "masked_tokens=32" in sim_mask.to_record()

    def test_mask_spec_arguments(self):
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError):
            aug.random_mask_spec(4, 32, gen)
        with pytest.raises(ValueError):
            aug.random_mask_spec(4, 32, gen, num_masked=1, token_fraction=0.5)
        with pytest.raises(ValueError):
            aug.random_mask_spec(4, 32, gen, num_masked=4)

    def test_segments_uniform(self):
        gen = torch.Generator().manual_seed(123)
        counts = np.bincount(aug.random_segments((1000,), 4, 1, gen).ravel().numpy(), minlength=4)
        assert counts.sum() == 1000
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_batched_random_shapes(self):
        gen = torch.Generator().manual_seed(0)
        seg = aug.random_segments((5,), 4, 2, gen)
        assert seg.shape == (5, 2) and (seg[:, 0] < seg[:, 1]).all()
        assert aug.random_token_mask((5,), 4, 8, 3, gen).flatten(1).sum(-1).tolist() == [3] * 5
        assert aug.random_channel_mask((5,), 10, 0.3, gen).sum(-1).tolist() == [3] * 5
