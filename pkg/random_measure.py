"""
截断随机测度模块
给定链状态抽取 G_L = q0·Σ_l p_l δ_{ϑ_l} + Σ_j q_j δ_{θ*_j}，以及截断水平的选择
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

import config
from errors import ParameterError
from kernels import ComponentParams


@dataclass(frozen=True, eq=False)
class FiniteMixture:
    """
    有限原子混合

    stick_atoms / stick_weights: 先验尾部的 L 个原子及其折棍权重 p_l（和为 1）
    cluster_atoms: 占用聚类的参数 θ*_j
    q: (q0, q1, ..., qm)，q0 为先验尾部的总质量
    """

    stick_atoms: Tuple[ComponentParams, ...]
    stick_weights: np.ndarray
    cluster_atoms: Tuple[ComponentParams, ...]
    q: np.ndarray

    @property
    def atoms(self) -> List[ComponentParams]:
        return list(self.stick_atoms) + list(self.cluster_atoms)

    @property
    def weights(self):
        return np.concatenate([self.q[0] * self.stick_weights, self.q[1:]])

    @property
    def stick_count(self):
        return len(self.stick_atoms)

    def log_weights(self):
        with np.errstate(divide='ignore'):
            return np.log(self.weights)


def stick_break(zeta):
    """
    折棍权重 p_1 = ζ_1, p_l = ζ_l ∏_{s<l}(1-ζ_s)，最后一个权重取剩余质量

    Args:
        zeta: L-1 个位于 (0,1) 的值

    Returns:
        长度 L 的权重向量，和恰为 1
    """
    zeta = np.asarray(zeta, dtype=float).ravel()
    if np.any((zeta <= 0.0) | (zeta >= 1.0)):
        raise ParameterError(f"折棍比例必须位于 (0,1): {zeta}")
    remain = np.concatenate([[1.0], np.cumprod(1.0 - zeta)])
    p = np.empty(zeta.shape[0] + 1)
    p[:-1] = zeta * remain[:-1]
    p[-1] = 1.0 - p[:-1].sum()
    return p


def stick_mass(zeta):
    """前 L 个折棍比例覆盖的质量 1 - ∏(1-ζ_l)（不含剩余质量约定）"""
    zeta = np.asarray(zeta, dtype=float)
    return 1.0 - np.prod(1.0 - zeta, axis=-1)


def expected_stick_mass(alpha, level):
    """ζ ~ Beta(1, α) 时 E[前 L 段质量] = 1 - (α/(α+1))^L"""
    return 1.0 - (alpha / (alpha + 1.0)) ** level


def choose_truncation(alpha=None, alpha_prior=None, tolerance=None, rng=None,
                      draws=None, max_level=None):
    """
    最小的截断水平 L，使期望未覆盖质量 (α/(α+1))^L 不超过 tolerance

    α 固定时直接求解；α 随机时对其伽马先验做蒙特卡罗平均
    """
    tolerance = config.TRUNCATION_CONFIG['tolerance'] if tolerance is None else tolerance
    draws = config.TRUNCATION_CONFIG['prior_draws'] if draws is None else draws
    max_level = config.TRUNCATION_CONFIG['max_level'] if max_level is None else max_level
    if not 0.0 < tolerance < 1.0:
        raise ParameterError(f"tolerance={tolerance} 必须位于 (0,1)")

    if alpha is not None:
        if not alpha > 0:
            raise ParameterError(f"α={alpha} 必须为正")
        log_r = np.log(alpha / (alpha + 1.0))
        level = max(1, int(np.ceil(np.log(tolerance) / log_r)))
        # 修正 ceil 的舍入
        while level > 1 and np.exp((level - 1) * log_r) <= tolerance:
            level -= 1
        while np.exp(level * log_r) > tolerance:
            level += 1
        return min(level, max_level)

    if alpha_prior is None:
        raise ParameterError("必须给出固定的 α 或 α 的先验")
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)
    a, b = alpha_prior
    log_r = np.log(1.0 / (1.0 + 1.0 / rng.gamma(a, 1.0 / b, size=draws)))
    for level in range(1, max_level + 1):
        if np.mean(np.exp(level * log_r)) <= tolerance:
            return level
    return max_level


def draw_GL(state, model, level, rng):
    """
    给定链状态抽一个截断随机测度

    (q0, q1..qm) ~ Dir(α, n_1..n_m)，先验尾部原子从 G0(ψ) 新抽，折棍比例 ζ ~ Beta(1, α)
    """
    if level < 1:
        raise ParameterError(f"截断水平 L={level} 必须不小于 1")
    counts = state.counts.astype(float)
    shape = np.concatenate([[state.alpha], counts])
    # α 很小时 Gamma(α) 会下溢为 0，改在对数空间抽
    log_g = np.log(rng.gamma(shape + 1.0)) + np.log(rng.random(shape.shape)) / shape
    q = np.exp(log_g - logsumexp(log_g))
    q = q / q.sum()

    zeta = rng.beta(1.0, state.alpha, size=level - 1)
    zeta = np.clip(zeta, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    p = stick_break(zeta)
    stick_atoms = tuple(model.draw_prior(state.hyper, rng) for _ in range(level))
    return FiniteMixture(stick_atoms, p, tuple(state.thetas), q)


def single_atom(params):
    """只有一个原子的混合，用于测试和模拟"""
    return FiniteMixture((), np.zeros(0), (params,), np.array([0.0, 1.0]))


def from_weights(atoms, weights):
    """由给定原子和权重构造混合（不含先验尾部）"""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0, atol=1e-12):
        raise ParameterError(f"权重必须非负且和为 1: {weights}")
    return FiniteMixture((), np.zeros(0), tuple(atoms), np.concatenate([[0.0], weights]))
