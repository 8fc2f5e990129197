#!/usr/bin/env python3
"""
玩具网络测试：RMSNorm、旋转不变性、校准统计、分块形状与埋点网络
"""

from fractions import Fraction

import numpy as np
import pytest

from pkit.config import StructureConfig
from pkit.core.structured import BlockZeroSpec, GSSpec, KronSpec, residual, project
from pkit.errors import ConfigError, IdOutOfRange, NoFeasibleShape, NotDivisible, ShapeMismatch, ZeroVector
from pkit.toymodel.network import (
    CalibrationStats,
    ToyBlock,
    ToyNetwork,
    attention_stub,
    collect_calibration,
    forward,
    load_network,
    max_relative_deviation,
    network_param_count,
    random_network,
    random_rotations,
    random_token_batches,
    rmsnorm,
    rotate_network,
    save_network,
)
from pkit.toymodel.planted import planted_config, planted_network, planted_sites
from pkit.toymodel.shapes import (
    choose_gs_shape,
    choose_kron_for_fraction,
    choose_kron_shape,
    gs_param_fraction,
    kron_param_fraction,
    resolve_structure,
)


@pytest.fixture
def net():
    return random_network(vocab=20, dim=8, activations=("attention", "relu", "gelu"), seed=3, biases=True)


@pytest.fixture
def batches():
    return random_token_batches(20, 4, 6, seed=7)


class TestBasicOps:
    """基本运算"""

    def test_rmsnorm_unit_rows(self):
        """每行归一化为单位长度"""
        x = np.random.default_rng(0).standard_normal((5, 4))
        assert np.allclose(np.linalg.norm(rmsnorm(x), axis=1), 1.0)

    def test_rmsnorm_commutes_with_rotation(self):
        """RMSNorm(xQ) = RMSNorm(x)Q"""
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 6))
        q = random_rotations(1, 6, 2)[0]
        assert np.allclose(rmsnorm(x @ q), rmsnorm(x) @ q, atol=1e-14)

    def test_rmsnorm_zero_vector(self):
        with pytest.raises(ZeroVector):
            rmsnorm(np.zeros((1, 3)))

    def test_attention_is_causal(self):
        """第一个位置只看到自己"""
        qkv = np.random.default_rng(3).standard_normal((4, 6))
        out = attention_stub(qkv)
        assert np.allclose(out[0], qkv[0, 4:])

    def test_block_shape_checks(self):
        """注意力块的 W_in 必须是三段拼接"""
        with pytest.raises(ShapeMismatch):
            ToyBlock(w_in=np.ones((4, 10)), w_out=np.ones((3, 4)), activation="attention")
        with pytest.raises(ShapeMismatch):
            ToyBlock(w_in=np.ones((4, 6)), w_out=np.ones((5, 4)))


class TestForward:
    """前向输出回归"""

    def test_hand_computed_logits(self):
        """两 token、宽度 2 的 relu 网络，logits 与手算结果一致"""
        net = ToyNetwork(
            w_emb=np.array([[3.0, 4.0], [0.0, 2.0]]),
            blocks=[ToyBlock(w_in=np.eye(2), w_out=np.array([[1.0, 0.0], [0.0, -1.0]]))],
            w_head=np.eye(2),
        )
        expected = np.array([[3.6 / np.sqrt(23.2), 3.2 / np.sqrt(23.2)], [0.0, 1.0]])
        assert np.allclose(forward(net, [0, 1]), expected, rtol=0, atol=1e-14)

    def test_fixed_seed_is_reproducible(self, batches):
        """同一种子生成的网络前向输出逐位一致"""
        first = random_network(vocab=20, dim=8, activations=("attention", "relu", "gelu"), seed=3, biases=True)
        second = random_network(vocab=20, dim=8, activations=("attention", "relu", "gelu"), seed=3, biases=True)
        for ids in batches:
            assert np.array_equal(forward(first, ids), forward(second, ids))


class TestRotationInvariance:
    """整网对正交旋转的计算不变性"""

    def test_random_rotation_keeps_logits(self, net, batches):
        """任意正交矩阵集合旋转后 logits 不变"""
        rotated = rotate_network(net, random_rotations(net.n_sites, net.dim, 11))
        assert max_relative_deviation(net, rotated, batches) < 1e-10

    def test_many_random_networks(self):
        """100 个两块网络（n = 16, V = 32）随机旋转后偏差均小于 1e-10"""
        for seed in range(100):
            net = random_network(vocab=32, dim=16, activations=("attention", "gelu"), seed=seed, biases=seed % 2 == 1)
            rotated = rotate_network(net, random_rotations(net.n_sites, 16, 1000 + seed))
            batches = random_token_batches(32, 2, 8, seed=seed)
            assert max_relative_deviation(net, rotated, batches) < 1e-10

    def test_identity_rotation_is_noop(self, net, batches):
        """全部为单位矩阵时权重不变"""
        rotated = rotate_network(net, [np.eye(net.dim)] * net.n_sites)
        assert np.array_equal(rotated.w_emb, net.w_emb)
        assert np.array_equal(rotated.blocks[1].w_in, net.blocks[1].w_in)
        for ids in batches:
            assert np.array_equal(forward(net, ids), forward(rotated, ids))

    def test_skip_rotation_parameters_counted(self, net):
        """旋转后跳连多出 n(n−1)/2 个存储参数（反对称形式）"""
        rotated = rotate_network(net, random_rotations(net.n_sites, net.dim, 12))
        for block in rotated.blocks:
            block.skip_rotation = block.skip_rotation.to_skew()
        extra = len(net.blocks) * net.dim * (net.dim - 1) // 2
        assert network_param_count(rotated) == network_param_count(net) + extra

    def test_wrong_rotation_count(self, net):
        with pytest.raises(ShapeMismatch):
            rotate_network(net, [np.eye(net.dim)])

    def test_bad_token(self, net):
        with pytest.raises(IdOutOfRange):
            forward(net, [0, 20])

    def test_save_and_load(self, net, batches, tmp_path):
        """写出后读回（跳连旋转以反对称形式存储）"""
        rotated = rotate_network(net, random_rotations(net.n_sites, net.dim, 13))
        save_network(rotated, tmp_path / "net")
        back = load_network(tmp_path / "net")
        assert max_relative_deviation(rotated, back, batches) < 1e-10


class TestCalibration:
    """校准统计"""

    def test_counts_and_shapes(self, net, batches):
        """词频与每个旋转点的相关矩阵维度"""
        stats = collect_calibration(net, batches)
        assert stats.tokens.total == 24
        assert len(stats.normed) == len(stats.stream) == net.n_sites
        assert [acc.n for acc in stats.inner] == [b.w_out.shape[0] for b in net.blocks]

    def test_rotated_stats_match_rotated_network(self, net, batches):
        """旋转网络后重新采集等于共轭原统计"""
        qs = random_rotations(net.n_sites, net.dim, 14)
        direct = collect_calibration(rotate_network(net, qs), batches)
        conjugated = collect_calibration(net, batches).rotated(qs)
        for a, b in zip(direct.stream, conjugated.stream):
            assert np.allclose(a.sum, b.sum, atol=1e-9)
        for a, b in zip(direct.normed, conjugated.normed):
            assert np.allclose(a.sum, b.sum, atol=1e-9)
        for a, b in zip(direct.inner, conjugated.inner):
            assert np.allclose(a.sum, b.sum, atol=1e-9)

    def test_save_and_load(self, net, batches, tmp_path):
        stats = collect_calibration(net, batches)
        stats.save(tmp_path / "calib")
        back = CalibrationStats.load(tmp_path / "calib")
        assert np.array_equal(back.tokens.counts, stats.tokens.counts)
        assert np.array_equal(back.stream[1].sum, stats.stream[1].sum)
        assert len(back.inner) == len(stats.inner)


class TestShapes:
    """分块形状选择"""

    def test_kron_fraction(self):
        """64×64、q=4、r=3：A 为 4×1，B 为 16×64，占比 3084/4096"""
        spec, fraction = choose_kron_shape(64, 64, 4, 3)
        assert spec == KronSpec(3, 4, 1, 16, 64)
        assert fraction == Fraction(3084, 4096)
        assert kron_param_fraction(64, 64, 4, 3) == fraction

    @pytest.mark.parametrize("n,m,q,r", [(64, 64, 4, 3), (60, 64, 5, 8), (64, 64, 1, 2)])
    def test_kron_accounting_matches_formula(self, n, m, q, r):
        """参数占比 = (q·r + n·m·r/q) / (n·m)，超过 1 的组合同样如实计数"""
        spec, fraction = choose_kron_shape(n, m, q, r)
        assert fraction == Fraction(q * r + n * m * r // q, n * m)
        assert fraction == kron_param_fraction(n, m, q, r)
        assert spec.param_count() == q * r + n * m * r // q

    @pytest.mark.parametrize("kl,kr,n,m,s", [(4, 2, 64, 64, 64), (4, 8, 64, 128, 32), (1, 4, 128, 64, 16)])
    def test_gs_accounting_matches_formula(self, kl, kr, n, m, s):
        """占比 = s·(n/kl + m/kr) / (n·m)"""
        spec = GSSpec(kl, kr, n // kl, s // kl, s // kr, m // kr)
        assert gs_param_fraction(spec) == Fraction(s * (n // kl + m // kr), n * m)

    def test_kron_right_side(self):
        spec, _ = choose_kron_shape(8, 12, 4, 1, side="right")
        assert spec == KronSpec(1, 1, 4, 8, 3)

    def test_kron_not_divisible(self):
        with pytest.raises(NotDivisible):
            choose_kron_shape(10, 8, 4, 1)

    def test_kron_for_fraction(self):
        """r ≈ keep·q"""
        assert choose_kron_for_fraction(16, 16, 0.5).r == 2
        assert choose_kron_for_fraction(16, 16, 0.01).r == 1

    def test_gs_default_square(self):
        """64×64、c=0.75 → kl=4, kr=2, s=64"""
        spec = choose_gs_shape(64, 64, 0.75)
        assert spec == GSSpec(4, 2, 16, 16, 32, 32)
        assert gs_param_fraction(spec) == Fraction(3, 4)

    def test_gs_infeasible(self):
        """4×4 上无法达到 0.1% 的占比"""
        with pytest.raises(NoFeasibleShape):
            choose_gs_shape(4, 4, 0.001)

    def test_resolve_structure(self):
        """角色配置到结构规格"""
        assert resolve_structure(StructureConfig(), (8, 8), "left") is None
        assert resolve_structure(StructureConfig(kind="blockzero", d=3), (8, 8), "left") == BlockZeroSpec(3, "zero-rows")
        assert resolve_structure(StructureConfig(kind="blockzero", d=3), (8, 8), "right") == BlockZeroSpec(3, "zero-cols")
        assert resolve_structure(StructureConfig(kind="kron", r=2, q=2), (8, 4), "left") == KronSpec(2, 2, 1, 4, 4)
        with pytest.raises(ConfigError):
            resolve_structure(StructureConfig(kind="kron"), (8, 8), "left")


class TestPlanted:
    """埋点网络"""

    def test_config_roles(self):
        config = planted_config("blockzero", 0.25, 16)
        assert config.structure_for("in").d == 4
        with pytest.raises(ConfigError):
            planted_config("kron", 1.5, 16)

    @pytest.mark.parametrize("kind", ["kron", "gs", "blockzero"])
    def test_planted_rotation_makes_weights_exact(self, kind):
        """用埋入的旋转还原后，结构化部分可被精确投影"""
        ratio = 0.375 if kind == "gs" else 0.5
        net, plan, rotations = planted_network(kind, ratio, vocab=32, dim=16, seed=5)
        sites = planted_sites(plan)
        assert sites
        for index in sites:
            site = plan.sites[index]
            q = rotations[index]
            w_out = net.w_emb if index == 0 else net.blocks[index - 1].w_out
            if site.spec_out is not None:
                rotated = w_out @ q
                assert residual(rotated, project(rotated, site.spec_out)) < 1e-8 * np.linalg.norm(rotated)

    def test_planted_network_runs(self, batches):
        """埋点网络可以正常前向"""
        net, _, _ = planted_network("kron", 0.5, vocab=20, dim=16, seed=6)
        logits = forward(net, batches[0])
        assert logits.shape == (6, 20)
        assert np.isfinite(logits).all()
