#!/usr/bin/env python3
"""
正交矩阵工具测试：OPP、Cayley 参数化、谱修正、加权 Procrustes
"""

import numpy as np
import pytest
import scipy.linalg

from pkit.config import SolverConfig
from pkit.core.calib import correlation_root
from pkit.core.procrustes import (
    OrthogonalFactor,
    WoppProblem,
    cayley,
    cayley_inverse,
    check_orthogonal,
    fix_spectrum,
    matrix_exponential_skew,
    opp_objective,
    replay_fixes,
    skew_from_upper,
    skew_to_upper,
    solve_opp,
    solve_wopp,
    spectrum_gap,
    wopp_value_and_grad,
)
from pkit.errors import MinusOneEigenvalue, NotOrthogonal, NotSkew, ShapeMismatch


def random_orthogonal(n: int, rng: np.random.Generator, det: int = 0) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if det and np.sign(np.linalg.det(q)) != det:
        q[:, 0] *= -1.0
    return q


def rotation2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestOpp:
    """闭式正交 Procrustes"""

    def test_identity_instance(self):
        """A = B 时 Q = I"""
        a = np.random.default_rng(0).standard_normal((3, 5))
        assert np.allclose(solve_opp(a, a).matrix, np.eye(3), atol=1e-12)

    def test_planted_rotation_recovered(self):
        """B = Q*A（A 满秩）时精确恢复 Q*"""
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((4, 6))
            q_star = random_orthogonal(4, rng)
            q = solve_opp(a, q_star @ a).matrix
            assert np.linalg.norm(q - q_star) < 1e-10

    def test_beats_brute_force_grid(self):
        """2×2 实例上不劣于旋转与反射的网格搜索"""
        rng = np.random.default_rng(2)
        angles = np.linspace(0.0, 2 * np.pi, 2000, endpoint=False)
        flip = np.diag([1.0, -1.0])
        for _ in range(100):
            a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
            value = opp_objective(solve_opp(a, b).matrix, a, b)
            grid = min(
                min(opp_objective(rotation2(t), a, b), opp_objective(rotation2(t) @ flip, a, b))
                for t in angles
            )
            assert value <= grid + 1e-8

    def test_result_is_orthogonal(self):
        """秩亏输入也返回正交矩阵"""
        rng = np.random.default_rng(3)
        a = np.outer(rng.standard_normal(5), rng.standard_normal(4))
        q = solve_opp(a, rng.standard_normal((5, 4))).matrix
        check_orthogonal(q, 1e-10)

    def test_shape_mismatch(self):
        """A、B 形状不同"""
        with pytest.raises(ShapeMismatch):
            solve_opp(np.ones((2, 3)), np.ones((3, 2)))


class TestCayley:
    """Cayley 变换与反对称存储"""

    def test_zero_maps_to_identity(self):
        """K = 0 → Q = I"""
        assert np.array_equal(cayley(np.zeros((4, 4))), np.eye(4))

    def test_two_by_two_closed_form(self):
        """K = [[0, −t], [t, 0]] → 旋转角 2·arctan(t)"""
        t = 0.7
        q = cayley(np.array([[0.0, -t], [t, 0.0]]))
        assert np.allclose(q, rotation2(2 * np.arctan(t)), atol=1e-14)

    def test_round_trip(self):
        """K → Q → K"""
        rng = np.random.default_rng(4)
        for _ in range(100):
            k = skew_from_upper(rng.standard_normal(15), 6)
            q = cayley(k)
            check_orthogonal(q, 1e-10)
            assert np.linalg.det(q) == pytest.approx(1.0)
            assert np.allclose(cayley_inverse(q), k, atol=1e-10 * max(1.0, np.abs(k).max()))

    def test_not_skew(self):
        """非反对称输入"""
        with pytest.raises(NotSkew):
            cayley(np.eye(3))

    def test_minus_one_eigenvalue(self):
        """−I 没有 Cayley 原像"""
        with pytest.raises(MinusOneEigenvalue):
            cayley_inverse(-np.eye(2))

    def test_not_orthogonal(self):
        """非正交输入"""
        with pytest.raises(NotOrthogonal):
            cayley_inverse(2.0 * np.eye(2))

    def test_exponential_is_special_orthogonal(self):
        """exp(K) 正交且 det = +1"""
        k = skew_from_upper(np.random.default_rng(5).standard_normal(6), 4)
        q = matrix_exponential_skew(k)
        check_orthogonal(q, 1e-12)
        assert np.linalg.det(q) == pytest.approx(1.0)

    def test_upper_storage(self):
        """反对称矩阵只存 n(n−1)/2 个参数"""
        k = skew_from_upper(np.arange(1.0, 11.0), 5)
        assert np.array_equal(k, -k.T)
        assert skew_to_upper(k).tolist() == list(np.arange(1.0, 11.0))
        with pytest.raises(ShapeMismatch):
            skew_from_upper(np.ones(4), 4)


class TestFixSpectrum:
    """谱修正：det = +1 且远离 −1 特征值"""

    def test_identity_untouched(self):
        """I 不需要修正"""
        q, log = fix_spectrum(np.eye(3))
        assert log == [] and np.array_equal(q, np.eye(3))

    def test_reflection(self):
        """diag(1, −1) 一步变为 I"""
        q, log = fix_spectrum(np.diag([1.0, -1.0]))
        assert np.allclose(q, np.eye(2))
        assert log == [{"kind": "negate_row", "index": 1}]

    def test_minus_identity(self):
        """−I（偶数维）经修正后有 Cayley 原像"""
        q, log = fix_spectrum(-np.eye(4))
        assert log
        assert np.linalg.det(q) == pytest.approx(1.0)
        assert spectrum_gap(q) > 1e-6
        cayley_inverse(q)

    def test_random_orthogonal(self):
        """随机正交矩阵（含强制 det = −1 与 −1 特征值的情形）"""
        rng = np.random.default_rng(6)
        cases = [random_orthogonal(5, rng, det=-1) for _ in range(100)]
        cases += [random_orthogonal(6, rng, det=1) for _ in range(100)]
        for _ in range(50):
            v = random_orthogonal(4, rng)
            cases.append(v @ np.diag([-1.0, -1.0, 1.0, 1.0]) @ v.T)
            cases.append(v @ np.diag([-1.0, 1.0, 1.0, 1.0]) @ v.T)
        for q in cases:
            fixed, log = fix_spectrum(q)
            check_orthogonal(fixed, 1e-8)
            assert np.linalg.det(fixed) > 0
            assert spectrum_gap(fixed) > 1e-6
            assert np.allclose(replay_fixes(log, fixed), q, atol=1e-10)


class TestOrthogonalFactor:
    """正交因子的稠密与反对称存储"""

    def test_skew_storage_preserves_matrix(self):
        """to_skew 后矩阵不变，参数个数为 n(n−1)/2"""
        rng = np.random.default_rng(7)
        q = random_orthogonal(6, rng, det=-1)
        factor = OrthogonalFactor.from_dense(q).to_skew()
        assert factor.is_skew
        assert factor.param_count() == 15
        assert np.allclose(factor.matrix, q, atol=1e-10)

    def test_save_and_load(self, tmp_path):
        """写出后读回"""
        q = random_orthogonal(5, np.random.default_rng(8))
        OrthogonalFactor.from_dense(q).save(tmp_path / "q")
        back = OrthogonalFactor.load(tmp_path / "q")
        assert back.param_count() == 10
        assert np.allclose(back.matrix, q, atol=1e-10)

    def test_one_dimensional(self, tmp_path):
        """n = 1 时没有参数"""
        factor = OrthogonalFactor.from_dense(np.array([[-1.0]]))
        factor.save(tmp_path / "q")
        back = OrthogonalFactor.load(tmp_path / "q")
        assert back.param_count() == 0
        assert np.allclose(back.matrix, [[-1.0]])


class TestWopp:
    """加权 Procrustes 的梯度与共轭梯度求解"""

    def test_gradient_matches_finite_differences(self):
        """对上三角参数的解析梯度与中心差分一致"""
        rng = np.random.default_rng(9)
        n = 4
        c_out = rng.standard_normal((6, 6))
        c_in = rng.standard_normal((n, n))
        problem = WoppProblem.joint(
            c_out @ c_out.T, rng.standard_normal((6, n)), rng.standard_normal((6, n)),
            c_in @ c_in.T, rng.standard_normal((n, 3)), rng.standard_normal((n, 3)), 0.7,
        )
        q0 = random_orthogonal(n, rng)
        k = 0.3 * rng.standard_normal(n * (n - 1) // 2)
        _, grad, _ = wopp_value_and_grad(problem, q0, k)
        eps = 1e-6
        numeric = np.empty_like(k)
        for i in range(k.size):
            step = np.zeros_like(k)
            step[i] = eps
            numeric[i] = (
                wopp_value_and_grad(problem, q0, k + step)[0] - wopp_value_and_grad(problem, q0, k - step)[0]
            ) / (2 * eps)
        assert np.linalg.norm(grad - numeric) <= 1e-5 * max(1.0, np.linalg.norm(numeric))

    def test_zero_iterations_return_start(self):
        """cg_iters = 0 原样返回 Q0"""
        rng = np.random.default_rng(10)
        q0 = random_orthogonal(3, rng)
        problem = WoppProblem.single(np.eye(3), rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
        result = solve_wopp(problem, q0, cg_iters=0)
        assert result.iterations == 0
        assert np.array_equal(result.factor.matrix, q0)

    def test_identity_weight_reaches_opp(self):
        """C = I 时收敛到闭式 OPP 的目标值"""
        rng = np.random.default_rng(11)
        reached = 0
        for _ in range(50):
            a = rng.standard_normal((4, 6))
            q_star = random_orthogonal(4, rng, det=1)
            b = q_star @ a + 0.1 * rng.standard_normal((4, 6))
            opp = solve_opp(a, b).matrix
            if np.linalg.det(opp) < 0:
                continue
            result = solve_wopp(WoppProblem.single(np.eye(4), a, b), cg_iters=500)
            target = opp_objective(opp, a, b)
            assert result.objectives[-1] <= result.objectives[0]
            assert result.objectives[-1] <= target + 1e-6
            reached += 1
        assert reached > 30

    def test_far_optimum_recenters(self):
        """最优旋转远离 Q0 时仍收敛到零目标"""
        rng = np.random.default_rng(14)
        a = rng.standard_normal((4, 6))
        q_star = scipy.linalg.block_diag(rotation2(2.6), rotation2(-2.2))
        b = q_star @ a
        result = solve_wopp(WoppProblem.single(np.eye(4), a, b), cg_iters=500)
        assert not result.line_search_failed
        assert result.objectives[-1] <= 1e-8 * np.linalg.norm(b) ** 2
        check_orthogonal(result.factor.matrix, 1e-8)

    def test_planted_weighted_solution(self):
        """B = C·cayley(K*)·A 时目标降到 1e-8·‖B‖² 以下"""
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = rng.standard_normal((12, 4))
            c = correlation_root(x.T @ x)
            a = rng.standard_normal((4, 8))
            k_star = skew_from_upper(0.5 * rng.standard_normal(6), 4)
            b = c @ cayley(k_star) @ a
            result = solve_wopp(WoppProblem.single(c, a, b), cg_iters=500)
            assert result.objectives[-1] < 1e-8 * np.linalg.norm(b) ** 2
            check_orthogonal(result.factor.matrix, 1e-8)

    def test_objectives_non_increasing(self):
        """目标序列单调不增"""
        rng = np.random.default_rng(12)
        c = rng.standard_normal((5, 5))
        problem = WoppProblem.single(c @ c.T, rng.standard_normal((5, 7)), rng.standard_normal((5, 7)))
        result = solve_wopp(problem, cg_iters=100, options=SolverConfig())
        trace = np.asarray(result.objectives)
        assert np.all(np.diff(trace) <= 1e-12 * (1.0 + trace[:-1]))
        check_orthogonal(result.factor.matrix, 1e-8)

    def test_symmetric_weight_required(self):
        """C 必须对称"""
        with pytest.raises(ShapeMismatch):
            WoppProblem.single(np.triu(np.ones((3, 3))), np.ones((3, 2)), np.ones((3, 2)))
