#!/usr/bin/env python3
"""
结构化矩阵测试：Kronecker 和、GS 矩阵、零块矩阵
"""

import numpy as np
import pytest
import scipy.linalg

from pkit.core.structured import (
    BlockZero,
    BlockZeroSpec,
    GSMatrix,
    GSSpec,
    KroneckerSum,
    KronSpec,
    PartitionedMatrix,
    apply,
    blockzero_project,
    compression_ratio,
    gs_project,
    kron_project,
    load_structured,
    materialize,
    param_count,
    project,
    rearrange_kron,
    residual,
    save_structured,
    spec_from_dict,
    spec_of,
    spec_to_dict,
)
from pkit.errors import RankTooLarge, ShapeMismatch, UnsupportedStructure


def random_gs(spec: GSSpec, rng: np.random.Generator) -> GSMatrix:
    p_left, perm, p_right = spec.permutations()
    return GSMatrix(
        rng.standard_normal((spec.kl, spec.bl1, spec.bl2)),
        rng.standard_normal((spec.kr, spec.br1, spec.br2)),
        p_left, perm, p_right, spec.permutation,
    )


class TestKronecker:
    """Kronecker 和的投影与运算"""

    def test_rearrangement_turns_kron_into_rank_one(self):
        """A⊗B 重排后等于 vec(A)vec(B)ᵀ"""
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 5))
        r = rearrange_kron(np.kron(a, b), 2, 3, 4, 5)
        assert np.allclose(r, np.outer(a.ravel(), b.ravel()), atol=1e-13)

    def test_materialize_matches_numpy_kron(self):
        """materialize 等于 Σ np.kron(A_i, B_i)"""
        rng = np.random.default_rng(1)
        s = KroneckerSum(rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 4, 5)))
        expected = np.kron(s.A[0], s.B[0]) + np.kron(s.A[1], s.B[1])
        assert np.allclose(materialize(s), expected, atol=1e-13)
        assert s.shape == (12, 10)

    def test_projection_residual_equals_svd_tail(self):
        """投影残差等于重排矩阵奇异值尾部"""
        rng = np.random.default_rng(2)
        for _ in range(100):
            m1, n1, m2, n2 = rng.integers(1, 4, size=4)
            w = rng.standard_normal((m1 * m2, n1 * n2))
            limit = min(m1 * n1, m2 * n2)
            r = int(rng.integers(1, limit + 1))
            s = kron_project(w, KronSpec(r, m1, n1, m2, n2))
            tail = scipy.linalg.svdvals(rearrange_kron(w, m1, n1, m2, n2))[r:]
            assert residual(w, s) == pytest.approx(np.sqrt(np.sum(tail ** 2)), abs=1e-10)

    def test_projection_beats_perturbations(self):
        """随机扰动的候选都不比投影结果更好"""
        rng = np.random.default_rng(3)
        w = rng.standard_normal((6, 6))
        best = kron_project(w, KronSpec(2, 2, 3, 3, 2))
        base = residual(w, best)
        for _ in range(300):
            candidate = KroneckerSum(
                best.A + 0.05 * rng.standard_normal(best.A.shape),
                best.B + 0.05 * rng.standard_normal(best.B.shape),
            )
            assert residual(w, candidate) >= base - 1e-12

    def test_planted_recovered_exactly(self):
        """秩 r 的 Kronecker 和被精确恢复"""
        rng = np.random.default_rng(4)
        planted = KroneckerSum(rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4)))
        w = materialize(planted)
        assert residual(w, kron_project(w, KronSpec(2, 4, 4, 4, 4))) < 1e-10

    def test_rank_too_large(self):
        """秩超过重排矩阵最小维度"""
        with pytest.raises(RankTooLarge):
            kron_project(np.ones((4, 4)), KronSpec(5, 2, 2, 2, 2))

    def test_shape_mismatch(self):
        """矩阵形状与分块不符"""
        with pytest.raises(ShapeMismatch):
            kron_project(np.ones((4, 5)), KronSpec(1, 2, 2, 2, 2))

    def test_three_quarter_param_count(self):
        """q=4、r=3 的 64×64 分块约保留 75% 参数"""
        spec = KronSpec(3, 4, 1, 16, 64)
        s = KroneckerSum(np.zeros((3, 4, 1)), np.zeros((3, 16, 64)))
        assert param_count(s) == spec.param_count() == 3 * (4 + 16 * 64)
        assert compression_ratio(s, (64, 64)) == pytest.approx(1 - 3084 / 4096)


class TestGSMatrix:
    """GS 矩阵的置换约定、投影与运算"""

    def test_stride_permutation(self):
        """σ(a) = (a mod kr)·(s/kr) + a div kr"""
        spec = GSSpec(2, 2, 3, 2, 2, 3)
        _, perm, _ = spec.permutations()
        assert perm.tolist() == [0, 2, 1, 3]
        assert GSSpec(2, 2, 3, 2, 2, 3, "identity").permutations()[1].tolist() == [0, 1, 2, 3]

    def test_materialize_matches_permutation_matrices(self):
        """materialize 等于 block_diag(L)·P·block_diag(R)，P = I[perm, :]"""
        rng = np.random.default_rng(5)
        spec = GSSpec(4, 2, 2, 2, 4, 3)
        g = random_gs(spec, rng)
        p = np.eye(spec.inner)[g.perm, :]
        expected = scipy.linalg.block_diag(*g.L) @ p @ scipy.linalg.block_diag(*g.R)
        assert np.allclose(materialize(g), expected, atol=1e-13)
        assert g.shape == (8, 6)

    def test_low_rank_special_case(self):
        """kl = kr = 1 时即普通低秩逼近"""
        rng = np.random.default_rng(6)
        w = rng.standard_normal((6, 5))
        g = gs_project(w, GSSpec(1, 1, 6, 2, 2, 5))
        tail = scipy.linalg.svdvals(w)[2:]
        assert residual(w, g) == pytest.approx(np.sqrt(np.sum(tail ** 2)), abs=1e-10)

    def test_planted_recovered_exactly(self):
        """GS 类中的矩阵被精确恢复"""
        rng = np.random.default_rng(7)
        for spec in (GSSpec(4, 2, 2, 2, 4, 3), GSSpec(2, 4, 3, 4, 2, 2, "identity")):
            w = materialize(random_gs(spec, rng))
            assert residual(w, gs_project(w, spec)) < 1e-10

    def test_projection_beats_perturbations(self):
        """固定置换下投影是最优的"""
        rng = np.random.default_rng(8)
        spec = GSSpec(2, 2, 3, 2, 2, 3)
        w = rng.standard_normal(spec.shape)
        best = gs_project(w, spec)
        base = residual(w, best)
        for _ in range(300):
            candidate = GSMatrix(
                best.L + 0.05 * rng.standard_normal(best.L.shape),
                best.R + 0.05 * rng.standard_normal(best.R.shape),
                best.p_left, best.perm, best.p_right,
            )
            assert residual(w, candidate) >= base - 1e-12

    def test_inner_dimension_mismatch(self):
        """kl·bl2 ≠ kr·br1"""
        with pytest.raises(ShapeMismatch):
            GSSpec(2, 2, 3, 3, 2, 3)

    def test_square_default_fraction(self):
        """64×64、kl,kr = 4,2 时参数占比为 3/4"""
        spec = GSSpec(4, 2, 16, 16, 32, 32)
        assert spec.param_count() / (64 * 64) == pytest.approx(0.75)


class TestBlockZero:
    """零块矩阵"""

    @pytest.mark.parametrize("pattern,core_shape", [("zero-cols", (4, 2)), ("zero-rows", (2, 5)), ("corner", (2, 2))])
    def test_projection_keeps_one_block(self, pattern, core_shape):
        """保留块原样复制，其余置零"""
        w = np.arange(20.0).reshape(4, 5)
        s = blockzero_project(w, BlockZeroSpec(2, pattern))
        assert s.core.shape == core_shape
        dense = materialize(s)
        rows, cols = core_shape
        assert np.array_equal(dense[:rows, :cols], w[:rows, :cols])
        assert dense.sum() == w[:rows, :cols].sum()

    def test_full_block_has_zero_ratio(self):
        """d = n 的 zero-cols 不压缩"""
        s = blockzero_project(np.ones((3, 3)), BlockZeroSpec(3))
        assert compression_ratio(s, (3, 3)) == 0.0

    def test_d_too_large(self):
        """d 超过列数"""
        with pytest.raises(ShapeMismatch):
            blockzero_project(np.ones((3, 3)), BlockZeroSpec(4))


class TestUnifiedInterface:
    """apply / param_count / spec / 序列化"""

    def values(self):
        rng = np.random.default_rng(9)
        kron = KroneckerSum(rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 2)))
        gs = random_gs(GSSpec(2, 2, 3, 2, 2, 3), rng)
        bz = BlockZero(rng.standard_normal((6, 2)), (6, 6), "zero-cols")
        part = PartitionedMatrix(kron, rng.standard_normal((6, 2)), (1, 3))
        return [rng.standard_normal((6, 6)), kron, gs, bz, part]

    def test_apply_matches_materialize(self):
        """X·S 不物化时与稠密乘积一致"""
        x = np.random.default_rng(10).standard_normal((7, 6))
        for s in self.values():
            assert np.allclose(apply(s, x), x @ materialize(s), atol=1e-12)

    def test_apply_identity(self):
        """X = I 时得到 materialize(s)"""
        for s in self.values():
            assert np.allclose(apply(s, np.eye(6)), materialize(s), atol=1e-13)

    def test_apply_shape_mismatch(self):
        """输入列数与结构矩阵行数不符"""
        with pytest.raises(ShapeMismatch):
            apply(self.values()[1], np.ones((2, 5)))

    def test_param_counts(self):
        """置换不计入参数"""
        dense, kron, gs, bz, part = self.values()
        assert param_count(dense) == 36
        assert param_count(kron) == 2 * (6 + 6)
        assert param_count(gs) == 2 * 6 + 2 * 6
        assert param_count(bz) == 12
        assert param_count(part) == param_count(kron) + 12

    def test_spec_dict(self):
        """规格与字典互转"""
        for spec in (None, KronSpec(1, 2, 3, 4, 5), GSSpec(2, 2, 3, 2, 2, 3, "identity"), BlockZeroSpec(2, "corner")):
            assert spec_from_dict(spec_to_dict(spec)) == spec
        assert spec_of(self.values()[2]) == GSSpec(2, 2, 3, 2, 2, 3)
        with pytest.raises(UnsupportedStructure):
            spec_from_dict({"kind": "butterfly"})

    def test_project_dispatch(self):
        """spec 为 None 时返回稠密副本"""
        w = np.ones((4, 4))
        out = project(w, None)
        assert np.array_equal(out, w) and out is not w
        assert isinstance(project(w, KronSpec(1, 2, 2, 2, 2)), KroneckerSum)

    def test_save_and_load(self, tmp_path):
        """各类结构化值写出后读回，物化结果完全一致"""
        for i, s in enumerate(self.values()):
            save_structured(tmp_path / f"s{i}", s)
            back = load_structured(tmp_path / f"s{i}")
            assert type(back) is type(s)
            assert np.array_equal(materialize(back), materialize(s))

    def test_save_empty_blockzero(self, tmp_path):
        """d = 0 的零块矩阵没有核心张量"""
        s = BlockZero(np.zeros((4, 0)), (4, 4), "zero-cols")
        save_structured(tmp_path / "bz", s)
        back = load_structured(tmp_path / "bz")
        assert back.core.shape == (4, 0)
        assert not materialize(back).any()
