"""
后验泛函模块
积分强度后验、强度曲线、预测密度、条件标记密度/分布函数/均值，
以及把逐状态的泛函实现汇总成带区间的曲线
"""

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

import config
from errors import ContractError, ImproperPosteriorError, ParameterError, UnderflowError
from kernels import probe_value
from random_measure import draw_GL


# ============================================================
# 积分强度 Λ_R
# ============================================================

@dataclass(frozen=True)
class IntensityPosterior:
    """Λ_R | N 的伽马后验 ga(shape, rate)"""

    shape: float
    rate: float
    prior: str = 'reference'

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ParameterError(f"伽马后验参数必须为正: shape={self.shape}, rate={self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate ** 2

    def draw(self, rng, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)


def lambda_posterior(n, prior='reference'):
    """
    参考先验 π(Λ) ∝ 1/Λ 下后验为 ga(N, 1)；伽马先验 ga(a, b) 下为 ga(a+N, b+1)

    参数:
        n: 观测到的事件数
        prior: 'reference' 或 (a, b)
    """
    if prior is None or prior == 'reference':
        if n < 1:
            raise ImproperPosteriorError("参考先验下没有事件时 Λ_R 的后验不正常")
        return IntensityPosterior(float(n), 1.0, 'reference')
    a, b = prior
    return IntensityPosterior(float(a) + n, float(b) + 1.0, 'gamma')


# ============================================================
# 曲线汇总
# ============================================================

def unit_grid(size=None):
    """单位区间内部的等距网格（中点），不含端点"""
    size = size or config.FUNCTIONAL_CONFIG['grid_size']
    return (np.arange(size) + 0.5) / size


def product_grid(*axes):
    """多个轴的笛卡尔积网格，第一轴变化最慢"""
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.column_stack([m.ravel() for m in mesh])


@dataclass(frozen=True, eq=False)
class CurveSummary:
    """
    网格上的后验汇总：逐点均值与分位数区间，可选保留每次实现

    axes 为各维的网格轴（严格递增），points 为 (n, d) 的评估点
    """

    points: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    axes: Tuple[np.ndarray, ...] = ()
    draws: Optional[np.ndarray] = None
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, np.newaxis]
        object.__setattr__(self, 'points', points)
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes) or \
            ((points[:, 0],) if points.shape[1] == 1 else ())
        for k, a in enumerate(axes):
            if np.any(np.diff(a) <= 0):
                raise ParameterError(f"第 {k + 1} 个网格轴必须严格递增")
        object.__setattr__(self, 'axes', axes)
        if not self.columns:
            cols = ('t',) if points.shape[1] == 1 else tuple(f"x{k + 1}" for k in range(points.shape[1]))
            object.__setattr__(self, 'columns', cols)

    @classmethod
    def from_draws(cls, points, draws, quantiles=None, keep_draws=False, axes=(), columns=()):
        quantiles = quantiles or config.FUNCTIONAL_CONFIG['quantiles']
        draws = np.asarray(draws, dtype=float)
        mean = draws.mean(axis=0)
        lo, hi = np.quantile(draws, quantiles, axis=0)
        # 分位数插值的舍入可能让区间略微越过均值
        lower = np.minimum(lo, mean)
        upper = np.maximum(hi, mean)
        return cls(points, mean, lower, upper, axes=axes, draws=draws if keep_draws else None, columns=columns)

    def to_frame(self):
        data = {c: self.points[:, k] for k, c in enumerate(self.columns)}
        data.update(mean=self.mean, lower=self.lower, upper=self.upper)
        return pd.DataFrame(data)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path

    def dump_draws(self, path):
        if self.draws is None:
            raise ContractError("未保留逐次实现，构造时需 keep_draws=True")
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'columns': list(self.columns), 'points': self.points.tolist(),
                       'draws': self.draws.tolist()}, f)
        return path


# ============================================================
# 单个 G_L 上的泛函
# ============================================================

class MarkRegression(Protocol):
    """半参数路径: 位置用 DP 混合建模，标记均值由外部回归模型给出"""

    def fit(self, x, y): ...

    def predict(self, x): ...


def as_points(model, x):
    return np.asarray(x, dtype=float).reshape(-1, model.dims)


def mark_matrix(model, n, assign=None):
    """
    构造 (n, 标记数) 的标记矩阵，assign 中给出的列取指定值，其余列填入合法占位值
    """
    y = np.tile([probe_value(m) for m in model.schema.marks], (n, 1)).astype(float).reshape(n, len(model.schema))
    for col, v in (assign or {}).items():
        y[:, mark_index(model, col)] = v
    return y


def mark_index(model, mark):
    return model.schema.index(mark) if isinstance(mark, str) else int(mark)


def _log_atom_matrix(mixture, model, x, y, marks_used):
    """(n, 原子数) 的对数核值"""
    return np.column_stack([model.log_kernel(x, y, a, marks_used) for a in mixture.atoms])


def log_density_at(mixture, model, x, y=None, marks_used=None):
    x = as_points(model, x)
    if y is None:
        y, marks_used = mark_matrix(model, x.shape[0]), ()
    with np.errstate(divide='ignore'):
        return logsumexp(_log_atom_matrix(mixture, model, x, y, marks_used) + mixture.log_weights(), axis=1)


def density_at(mixture, model, x, y=None, marks_used=None):
    """
    f(z; G_L) = Σ_k w_k k(z; θ_k)

    参数:
        x: (n, dims) 单位窗口坐标
        y: (n, 标记数) 标记矩阵；None 表示只看位置（丢掉全部标记核因子）
        marks_used: 参与的标记列集合；None 表示全部

    返回:
        (n,) 密度值
    """
    return np.exp(log_density_at(mixture, model, x, y, marks_used))


def _conditional_weights(mixture, model, x, y, given):
    """条件化后各原子的归一化对数权重 log[w_k k(x, y_given; θ_k) / f(x, y_given)]"""
    log_joint = _log_atom_matrix(mixture, model, x, y, set(given)) + mixture.log_weights()
    log_marg = logsumexp(log_joint, axis=1)
    bad = np.flatnonzero(~np.isfinite(log_marg))
    if bad.size:
        raise UnderflowError(f"x={x[bad[0]].tolist()} 处边际密度下溢为 0，无法条件化")
    return log_joint - log_marg[:, np.newaxis]


def _given_cols(model, given):
    return tuple(mark_index(model, g) for g in given)


def conditional_mark_density(mixture, model, x, y, mark, given=()):
    """
    h(y_mark | x, y_given; G_L) = f(x, y_mark, y_given) / f(x, y_given)

    参数:
        x: (n, dims)
        y: (n, 标记数)，目标列与 given 列需填好
        mark: 目标标记（名称或列号）
        given: 作为条件的其他标记；空表示对其余标记求边际
    """
    x = as_points(model, x)
    col = mark_index(model, mark)
    given = _given_cols(model, given)
    num = set(given) | {col}
    log_weights = _conditional_weights(mixture, model, x, y, given)
    log_num = _log_atom_matrix(mixture, model, x, y, num) - _log_atom_matrix(mixture, model, x, y, set(given))
    with np.errstate(invalid='ignore'):
        terms = np.where(np.isfinite(log_weights), log_weights + log_num, -np.inf)
    return np.exp(logsumexp(terms, axis=1))


def conditional_mark_cdf(mixture, model, x, y, mark, given=()):
    """
    H(y_mark | x, y_given; G_L) = Σ_k w̃_k(x) F_k(y_mark | x, y_given)

    相关正态核在块内对位置和 given 标记做条件化，其余族用核自身的分布函数
    """
    x = as_points(model, x)
    col = mark_index(model, mark)
    if model.schema.marks[col].kind == 'categorical':
        raise ContractError(f"标记 {model.schema.marks[col].name} 为分类标记，没有分布函数")
    given = _given_cols(model, given)
    weights = np.exp(_conditional_weights(mixture, model, x, y, given))
    b = model.block_for_mark(col)
    block = model.blocks[b]
    values = y[:, col]
    cdfs = np.column_stack([block.mark_cdf(a.parts[b], col, values, x, y, given) for a in mixture.atoms])
    return np.clip(np.sum(weights * cdfs, axis=1), 0.0, 1.0)


def conditional_mark_mean(mixture, model, x, mark, y=None, given=(), regression=None):
    """
    E[y_mark | x, y_given; G_L] = Σ_k w̃_k(x) E_k[y_mark | x, y_given]

    二元分类标记的均值即 Pr(z=1 | x)；给出 regression 时直接返回其预测
    """
    x = as_points(model, x)
    if regression is not None:
        return np.asarray(regression.predict(x), dtype=float)
    col = mark_index(model, mark)
    given = _given_cols(model, given)
    y = mark_matrix(model, x.shape[0]) if y is None else y
    weights = np.exp(_conditional_weights(mixture, model, x, y, given))
    b = model.block_for_mark(col)
    block = model.blocks[b]
    means = np.column_stack([block.mark_mean(a.parts[b], col, x, y, given) for a in mixture.atoms])
    return np.sum(weights * means, axis=1)


# ============================================================
# 沿链汇总
# ============================================================

def posterior_curve(chain, model, level, rng, fn, points, draws_per_state=None,
                    quantiles=None, keep_draws=False, axes=(), columns=()):
    """
    对每个保存状态抽 draws_per_state 个 G_L，计算 fn(mixture, state) 并逐点汇总

    非线性泛函（条件密度、条件均值）必须走这条路径
    """
    draws_per_state = draws_per_state or config.FUNCTIONAL_CONFIG['draws_per_state']
    values = []
    for state in chain:
        for _ in range(draws_per_state):
            values.append(fn(draw_GL(state, model, level, rng), state))
    return CurveSummary.from_draws(points, np.array(values), quantiles, keep_draws, axes, columns)


def intensity_curve(chain, model, lam_post, points, level, rng, draws_per_state=None,
                    quantiles=None, scale=1.0, keep_draws=False, axes=()):
    """
    λ(x; G_L) = Λ_R f(x; G_L)，每个 G_L 配一个独立的 Λ_R 抽样

    scale 为原始单位下的窗口体积，给出时返回每原始单位的强度
    """
    x = as_points(model, points)

    def fn(mixture, state):
        return lam_post.draw(rng) * density_at(mixture, model, x) / scale

    return posterior_curve(chain, model, level, rng, fn, x, draws_per_state, quantiles, keep_draws, axes)


def predictive_density(chain, model, x, y=None, marks_used=None, rng=None, mc_draws=200,
                       quantiles=None, keep_draws=False, axes=()):
    """
    Pólya 罐预测密度 (α+N)^{-1}(α ∫k dG0 + Σ_j n_j k(z; θ*_j))，沿链平均

    没有解析边际时 ∫k dG0 用 mc_draws 个 G0 抽样估计
    """
    x = as_points(model, x)
    if y is None:
        y, marks_used = mark_matrix(model, x.shape[0]), ()
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)
    closed = model.has_closed_marginal()
    values = []
    for state in chain:
        if closed:
            marg = np.exp(model.log_marginal(x, y, state.hyper, marks_used))
        else:
            logk = np.column_stack([model.log_kernel(x, y, model.draw_prior(state.hyper, rng), marks_used)
                                    for _ in range(mc_draws)])
            marg = np.exp(logsumexp(logk, axis=1) - np.log(mc_draws))
        if state.m:
            logk = np.column_stack([model.log_kernel(x, y, th, marks_used) for th in state.thetas])
            with np.errstate(divide='ignore'):
                occupied = np.exp(logsumexp(logk + np.log(state.counts), axis=1))
        else:
            occupied = np.zeros(x.shape[0])
        values.append((state.alpha * marg + occupied) / (state.alpha + state.N))
    return CurveSummary.from_draws(x, np.array(values), quantiles, keep_draws, axes)
