import numpy as np
import pytest

from src.rng import purpose_tag, stream


class TestStream:
    """용도별 난수 스트림 테스트"""

    def test_same_inputs_same_draws(self):
        """같은 (seed, 용도, 키) → 같은 난수열"""
        a = stream(7, "batch", 3, 11).standard_normal(5)
        b = stream(7, "batch", 3, 11).standard_normal(5)
        assert np.array_equal(a, b)

    def test_order_independent(self):
        """다른 스트림을 먼저 뽑아도 결과가 같음"""
        first = stream(1, "partition").permutation(20)
        stream(1, "batch", 0, 0).integers(0, 10, 100)
        assert np.array_equal(first, stream(1, "partition").permutation(20))

    @pytest.mark.parametrize(
        "left, right",
        [
            ((0, "batch", 0, 0), (0, "batch", 0, 1)),
            ((0, "batch", 0, 0), (0, "batch", 1, 0)),
            ((0, "batch", 0, 0), (0, "participants", 0, 0)),
            ((0, "batch", 0, 0), (1, "batch", 0, 0)),
        ],
    )
    def test_distinct_streams(self, left, right):
        assert not np.array_equal(stream(*left).random(8), stream(*right).random(8))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            stream(-1, "batch")
        with pytest.raises(ValueError):
            stream(0, "batch", -3)

    def test_tag_stable(self):
        assert purpose_tag("batch") == purpose_tag("batch")
        assert purpose_tag("batch") != purpose_tag("init")
        assert 0 <= purpose_tag("batch") < 2**64


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
