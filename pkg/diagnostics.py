"""
模型检验模块
时间重标度、空间边际重标度与标记的概率积分变换，得到应服从 U(0,1) 的样本，
再把多个后验抽样汇总成 Q-Q 区间
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import stats

import config
from errors import ContractError
from functionals import as_points, conditional_mark_cdf, mark_index
from random_measure import draw_GL


KINDS = ('temporal', 'spatial-1', 'spatial-2', 'mark')


@dataclass(frozen=True, eq=False)
class UniformizedSample:
    """一个 G_L 抽样下的 u_i，kind 为 temporal / spatial-1 / spatial-2 / mark"""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if np.any((values < 0.0) | (values > 1.0)):
            raise ContractError(f"{self.kind} 样本含 [0,1] 之外的值")
        object.__setattr__(self, 'values', values)

    @property
    def N(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class QqSummary:
    theoretical: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    ks: np.ndarray
    kind: str = ''

    def to_csv(self, path):
        pd.DataFrame({'theoretical': self.theoretical, 'mean': self.mean,
                      'lower': self.lower, 'upper': self.upper}).to_csv(path, index=False, float_format='%.17g')
        return path


def cumulative_intensity(mixture, model, lam_R, values, dim=0):
    """Λ(t; G_L) = Λ_R Σ_k w_k F_k(t)，F_k 为第 dim 维上的核边际分布函数"""
    values = np.asarray(values, dtype=float)
    cdfs = np.column_stack([model.location_cdf(a, values, dim) for a in mixture.atoms])
    return lam_R * cdfs @ mixture.weights


def _rescale(mixture, model, lam_R, sorted_values, dim):
    cum = cumulative_intensity(mixture, model, lam_R, sorted_values, dim)
    gaps = np.diff(np.concatenate([[0.0], cum]))
    # 累积强度单调，负的间隔只能来自舍入
    return -np.expm1(-np.maximum(gaps, 0.0))


def time_rescale_uniforms(mixture, model, lam_R, times):
    """
    u_i = 1 - exp{-(Λ(t_i) - Λ(t_{i-1}))}，Λ(t_0) = 0

    Args:
        times: 升序排列的事件时间（单位区间）

    Returns:
        UniformizedSample
    """
    times = np.asarray(times, dtype=float).ravel()
    if np.any(np.diff(times) < 0):
        raise ContractError("时间必须升序排列")
    return UniformizedSample(_rescale(mixture, model, lam_R, times, 0), 'temporal')


def marginal_rescale_uniforms(mixture, model, lam_R, pattern, dimension):
    """对空间模式的第 dimension 维（1 或 2）边际强度做重标度"""
    if pattern.dims != 2:
        raise ContractError("边际重标度只用于空间点模式")
    if dimension not in (1, 2):
        raise ContractError(f"维度 {dimension} 应为 1 或 2")
    dim = dimension - 1
    coords = pattern.locations[pattern.order(dim), dim]
    return UniformizedSample(_rescale(mixture, model, lam_R, coords, dim), f"spatial-{dimension}")


def mark_pit_uniforms(mixture, model, pattern, mark, given=(), rng=None):
    """
    u_i = H(y_i | x_i; G_L)

    计数标记做随机化 PIT: u_i ~ U(H(y_i - 1), H(y_i))
    """
    col = mark_index(model, mark)
    desc = model.schema.marks[col]
    if desc.kind == 'categorical':
        raise ContractError(f"标记 {desc.name} 为分类标记，不做 PIT")
    x = as_points(model, pattern.locations)
    y = np.array(pattern.marks, dtype=float)
    upper = conditional_mark_cdf(mixture, model, x, y, col, given)
    if desc.kind != 'count':
        return UniformizedSample(upper, 'mark')
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)
    y_prev = y.copy()
    y_prev[:, col] -= 1.0
    below = y_prev[:, col] < desc.bound
    # 低于截断下界时 H = 0，直接用占位值避免越界
    y_prev[below, col] = desc.bound
    lower = np.where(below, 0.0, conditional_mark_cdf(mixture, model, x, y_prev, col, given))
    u = lower + rng.random(lower.shape[0]) * (upper - lower)
    return UniformizedSample(np.clip(u, 0.0, 1.0), 'mark')


def ks_statistic(u):
    """与 U(0,1) 比较的双侧单样本 KS 统计量"""
    return float(stats.kstest(np.asarray(u, dtype=float), 'uniform').statistic)


def qq_band(samples, band=None):
    """
    多个后验抽样的 Q-Q 汇总

    每个抽样的次序统计量对 i/(N+1)，逐点取均值和 band 水平的分位数区间
    """
    band = config.DIAGNOSTIC_CONFIG['band'] if band is None else band
    samples = list(samples)
    if len(samples) < 2:
        raise ContractError("Q-Q 区间至少需要 2 个抽样")
    n = samples[0].N
    if any(s.N != n for s in samples):
        raise ContractError("各抽样的长度不一致")
    ordered = np.sort(np.array([s.values for s in samples]), axis=1)
    theoretical = np.arange(1, n + 1) / (n + 1.0)
    tail = 0.5 * (1.0 - band)
    mean = ordered.mean(axis=0)
    lo, hi = np.quantile(ordered, [tail, 1.0 - tail], axis=0) if n else (np.empty(0), np.empty(0))
    ks = np.array([ks_statistic(s.values) for s in samples]) if n else np.empty(0)
    return QqSummary(theoretical, mean, np.minimum(lo, mean), np.maximum(hi, mean), ks, samples[0].kind)


def posterior_qq(chain, model, pattern, kind, level, lam_post, rng, mark=None, given=(), band=None):
    """
    沿链对每个保存状态抽一个 G_L 和一个 Λ_R，得到指定类型的 u 样本并汇总

    kind: temporal / spatial-1 / spatial-2 / mark
    """
    if kind not in KINDS:
        raise ContractError(f"未知检验类型 {kind}，应为 {KINDS} 之一")
    samples = []
    for state in chain:
        mixture = draw_GL(state, model, level, rng)
        lam_R = lam_post.draw(rng)
        if kind == 'temporal':
            if pattern.dims != 1:
                raise ContractError("时间重标度只用于时间点模式")
            times = pattern.locations[pattern.order(0), 0]
            samples.append(time_rescale_uniforms(mixture, model, lam_R, times))
        elif kind == 'mark':
            samples.append(mark_pit_uniforms(mixture, model, pattern, mark, given, rng))
        else:
            samples.append(marginal_rescale_uniforms(mixture, model, lam_R, pattern, int(kind[-1])))
    return qq_band(samples, band)
