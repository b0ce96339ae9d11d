import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvmde.discretization import (DiscretizationError, SidBins, decode_ordinal, encode_depth, ordinal_targets,
                                  sid_thresholds)

B4 = SidBins(1.0, 80.0, 4)


class TestThresholds:
    def test_endpoints_and_middle(self):
        t = sid_thresholds(1.0, 80.0, 4).thresholds
        assert t[0] == 1.0 and t[4] == 80.0
        assert t[2] == pytest.approx(math.sqrt(80), abs=1e-12)
        assert t[2] == pytest.approx(8.944272, abs=1e-6)

    def test_ratio_and_widths(self):
        b = sid_thresholds(1.0, 80.0, 80)
        t = b.thresholds
        assert np.abs(t[1:] / t[:-1] - 80 ** (1 / 80)).max() < 1e-9
        assert np.all(np.diff(np.diff(t)) >= 0)

    @pytest.mark.parametrize("args", [(0.0, 80.0, 4), (5.0, 5.0, 4), (1.0, 80.0, 1), (1.0, 80.0, 2.5)])
    def test_invalid(self, args):
        with pytest.raises(DiscretizationError):
            sid_thresholds(*args)

    def test_read_only(self):
        with pytest.raises(ValueError):
            B4.thresholds[1] = 3.0

    def test_dict_round_trip(self):
        b = SidBins.from_dict(B4.to_dict())
        assert np.array_equal(b.thresholds, B4.thresholds)


class TestEncode:
    def test_examples(self):
        enc = encode_depth(np.array([[1.0, 80.0, 500.0, 10.0, 0.0, 0.5]]), B4)
        assert enc.labels[0, :4].tolist() == [0, 3, 3, 2]
        assert enc.mask.tolist() == [[True, True, True, True, False, True]]

    def test_mask_mode(self):
        enc = encode_depth(np.array([[0.5, 10.0, 100.0]]), B4, out_of_range="mask")
        assert enc.mask.tolist() == [[False, True, False]]

    def test_bad_mode(self):
        with pytest.raises(DiscretizationError):
            encode_depth(np.ones((1, 1)), B4, out_of_range="wrap")

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 200), st.floats(0.01, 200))
    def test_monotone(self, d1, d2):
        lo, hi = sorted((d1, d2))
        lab = encode_depth(np.array([[lo, hi]]), B4).labels[0]
        assert lab[0] <= lab[1]


class TestDecode:
    def test_examples(self):
        t = B4.thresholds
        zero = decode_ordinal(np.zeros((4, 1, 1)), B4)
        one = decode_ordinal(np.ones((4, 1, 1)), B4)
        assert zero[0, 0] == pytest.approx((t[0] + t[1]) / 2, rel=1e-15)
        assert one[0, 0] == pytest.approx((t[3] + t[4]) / 2, rel=1e-15)
        p = np.array([0.9, 0.8, 0.2, 0.1]).reshape(4, 1, 1)
        # t2 = 80 ** 0.5, t3 = 80 ** 0.75 = 26.749612
        assert decode_ordinal(p, B4)[0, 0] == pytest.approx((80**0.5 + 80**0.75) / 2, rel=1e-14)
        assert decode_ordinal(p, B4)[0, 0] == pytest.approx(17.846942, abs=1e-6)

    def test_batch_shape(self):
        assert decode_ordinal(np.zeros((2, 4, 3, 5)), B4).shape == (2, 3, 5)

    def test_bin_count_checked(self):
        with pytest.raises(DiscretizationError):
            decode_ordinal(np.zeros((3, 1, 1)), B4)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0, 80.0))
    def test_round_trip(self, d):
        b = SidBins(1.0, 80.0, 80)
        lab = encode_depth(np.array([[d]]), b).labels
        dec = decode_ordinal(ordinal_targets(lab, b.K), b)[0, 0]
        t = b.thresholds
        assert t[lab[0, 0]] <= dec <= t[lab[0, 0] + 1]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3))
    def test_monotone_in_each_prob(self, probs, k):
        p = np.array(probs).reshape(4, 1, 1)
        lowered, raised = p.copy(), p.copy()
        lowered[k] = 0.2
        raised[k] = 0.7
        assert decode_ordinal(raised, B4)[0, 0] >= decode_ordinal(lowered, B4)[0, 0]
