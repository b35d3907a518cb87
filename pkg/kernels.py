"""
混合核模块
各族核密度（对数空间）、基测度、共轭后验抽样、边际似然，以及把若干核块拼成联合核的 MixtureModel

约定:
    伽马分布一律用 shape/rate 参数化，均值 = shape/rate
    Wishart 记号 W(X; a, B) 满足 E[X] = a·B^{-1}，即 scipy 的 wishart(df=2a, scale=(2B)^{-1})
    因而 W(Σ^{-1}; ν, Ω) 等价于 Σ ~ invwishart(df=2ν, scale=2Ω)，E[Σ] = Ω / (ν - (d+1)/2)
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.special import (betainc, betaln, expit, gammainc, gammaln, log_ndtr,
                           logit, ndtr, xlog1py, xlogy)

import config
from errors import ContractError, ParameterError, SingularCovarianceError, SupportError


LOG_2PI = np.log(2.0 * np.pi)


def _as_array(v, ndim=1):
    a = np.asarray(v, dtype=float)
    while a.ndim < ndim:
        a = a[np.newaxis]
    return a


def _check_open_unit(name, v):
    v = np.asarray(v, dtype=float)
    if np.any(~((v > 0.0) & (v < 1.0))):
        raise ParameterError(f"参数 {name}={v} 必须位于 (0,1)")


def _check_positive(name, v):
    v = np.asarray(v, dtype=float)
    if np.any(~(v > 0.0)) or np.any(~np.isfinite(v)):
        raise ParameterError(f"参数 {name}={v} 必须为正的有限值")


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise SingularCovarianceError(f"协方差矩阵非正定: {e}") from e


def sample_log_weights(log_w, rng):
    """按未归一化的对数权重抽一个下标"""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise SupportError("所有候选的权重都为 0")
    w = np.exp(log_w - top)
    c = np.cumsum(w)
    return int(np.searchsorted(c, rng.random() * c[-1], side='right'))


def _inv_gamma_logpdf(x, shape, scale):
    """逆伽马 IG(shape, scale) 的对数密度（即 1/x ~ ga(shape, scale)）"""
    return shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x


def gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + xlogy(shape - 1.0, x) - rate * x


# ============================================================
# 核参数
# ============================================================

@dataclass(frozen=True, eq=False)
class BetaParams:
    """乘积 beta 核，每个位置维一对 (μ, τ)"""

    mu: np.ndarray
    tau: np.ndarray
    family = 'beta'

    def to_dict(self):
        return {'family': self.family, 'mu': [float(v) for v in self.mu], 'tau': [float(v) for v in self.tau]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d['mu'], dtype=float), np.array(d['tau'], dtype=float))


@dataclass(frozen=True, eq=False)
class SarmanovParams:
    mu: np.ndarray
    tau: np.ndarray
    rho: float
    family = 'sarmanov'

    def to_dict(self):
        return {'family': self.family, 'mu': [float(v) for v in self.mu],
                'tau': [float(v) for v in self.tau], 'rho': float(self.rho)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d['mu'], dtype=float), np.array(d['tau'], dtype=float), float(d['rho']))


@dataclass(frozen=True, eq=False)
class LogitNormalParams:
    """变换尺度上的正态核 N(mean, cov)，维数 d ≤ 3"""

    mean: np.ndarray
    cov: np.ndarray
    family = 'logit_normal'

    def to_dict(self):
        return {'family': self.family, 'mean': [float(v) for v in self.mean],
                'cov': [[float(v) for v in row] for row in self.cov]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d['mean'], dtype=float), np.array(d['cov'], dtype=float))


@dataclass(frozen=True, eq=False)
class UniformScaleParams:
    """单调核 θ^{-1}·1{t∈(0,θ)}，direction 为 nonincreasing 或 nondecreasing"""

    theta: float
    direction: str = 'nonincreasing'
    family = 'uniform_scale'

    def to_dict(self):
        return {'family': self.family, 'theta': float(self.theta), 'direction': self.direction}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d['theta']), d.get('direction', 'nonincreasing'))


@dataclass(frozen=True, eq=False)
class CategoricalParams:
    q: np.ndarray
    family = 'categorical'

    def to_dict(self):
        return {'family': self.family, 'q': [float(v) for v in self.q]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d['q'], dtype=float))


@dataclass(frozen=True, eq=False)
class NormalParams:
    """实值标记的正态核 N(η, φ)，φ 为方差"""

    eta: float
    phi: float
    family = 'normal'

    def to_dict(self):
        return {'family': self.family, 'eta': float(self.eta), 'phi': float(self.phi)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d['eta']), float(d['phi']))


@dataclass(frozen=True, eq=False)
class LogNormalShiftParams:
    """log(y - offset) ~ N(mean, variance)"""

    mean: float
    variance: float
    offset: float = 0.0
    family = 'lognormal_shift'

    def to_dict(self):
        return {'family': self.family, 'mean': float(self.mean),
                'variance': float(self.variance), 'offset': float(self.offset)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d['mean']), float(d['variance']), float(d.get('offset', 0.0)))


@dataclass(frozen=True, eq=False)
class TruncPoissonParams:
    """下截断于 bound 的泊松核（bound=0 即普通泊松）"""

    rate: float
    bound: int = 0
    family = 'trunc_poisson'

    def to_dict(self):
        return {'family': self.family, 'rate': float(self.rate), 'bound': int(self.bound)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d['rate']), int(d.get('bound', 0)))


PARAM_TYPES = {cls.family: cls for cls in (
    BetaParams, SarmanovParams, LogitNormalParams, UniformScaleParams,
    CategoricalParams, NormalParams, LogNormalShiftParams, TruncPoissonParams)}


@dataclass(frozen=True, eq=False)
class ComponentParams:
    """一个混合分量的全部核参数 θ = (θ^x, θ^y)，parts 与 MixtureModel.blocks 一一对应"""

    parts: Tuple

    def to_dict(self):
        return {'parts': [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(PARAM_TYPES[p['family']].from_dict(p) for p in d['parts']))


# ============================================================
# 基测度
# ============================================================

@dataclass(frozen=True, eq=False)
class BetaBase:
    """
    beta 核的基测度: μ ~ U(0,1)，τ ~ IG(shape=c, scale=β_τ)，均值 β_τ/(c-1)

    scale_prior 为 β_τ 的伽马超先验 (a, b)；None 表示 β_τ 固定
    """

    shape: float = config.KERNEL_CONFIG['beta_shape']
    scale: float = 1.0
    scale_prior: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        _check_positive('shape', self.shape)
        _check_positive('scale', self.scale)
        if self.scale_prior is not None:
            _check_positive('scale_prior', self.scale_prior)


@dataclass(frozen=True, eq=False)
class SarmanovBase:
    """每维 μ_i ~ U(0,1)、1/τ_i ~ ga(ν_i, β_i)，ρ 在 (C_μ, C^μ) 上条件均匀"""

    nu: Tuple[float, float] = (2.0, 2.0)
    scale: Tuple[float, float] = (1.0, 1.0)
    scale_prior: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, 'nu', np.broadcast_to(np.asarray(self.nu, dtype=float), (2,)).copy())
        object.__setattr__(self, 'scale', np.broadcast_to(np.asarray(self.scale, dtype=float), (2,)).copy())
        _check_positive('nu', self.nu)
        _check_positive('scale', self.scale)
        if self.scale_prior is not None:
            _check_positive('scale_prior', self.scale_prior)


@dataclass(frozen=True, eq=False)
class UniformBase:
    """单调核 θ 的 Beta(a, b) 基测度，默认 Beta(1,1)"""

    a: float = config.KERNEL_CONFIG['monotone_base'][0]
    b: float = config.KERNEL_CONFIG['monotone_base'][1]

    def __post_init__(self):
        _check_positive('a', self.a)
        _check_positive('b', self.b)


@dataclass(frozen=True, eq=False)
class NIWBase:
    """
    正态-Wishart 基测度 N(μ; δ, Σ/κ)·W(Σ^{-1}; ν, Ω)

    omega_prior = (a, B) 时 Ω ~ W(a, B)（同一记号）；None 表示 Ω 固定
    """

    delta: np.ndarray
    kappa: float
    nu: float
    omega: np.ndarray
    omega_prior: Optional[Tuple] = None

    def __post_init__(self):
        delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        d = delta.shape[0]
        omega = np.asarray(self.omega, dtype=float).reshape(d, d)
        object.__setattr__(self, 'delta', delta)
        object.__setattr__(self, 'omega', omega)
        _check_positive('kappa', self.kappa)
        _check_positive('nu', self.nu)
        if not 2.0 * self.nu > d - 1:
            raise ParameterError(f"Wishart 自由度 2ν={2 * self.nu} 必须大于 d-1={d - 1}")
        if not np.allclose(omega, omega.T):
            raise ParameterError("Ω 必须对称")
        _cholesky(omega)
        if self.omega_prior is not None:
            a, B = self.omega_prior
            B = np.asarray(B, dtype=float).reshape(d, d)
            if not 2.0 * a > d - 1:
                raise ParameterError(f"Ω 超先验自由度 2a={2 * a} 必须大于 d-1={d - 1}")
            _cholesky(B)
            object.__setattr__(self, 'omega_prior', (float(a), B))

    @property
    def dim(self):
        return self.delta.shape[0]


class NIGBase(NIWBase):
    """d=1 的正态-逆伽马基测度 N(η; δ, φ/κ)·ga(φ^{-1}; ν, ω)，ω 的超先验为 ga(a, b)"""

    def __init__(self, delta=0.0, kappa=1.0, nu=2.0, omega=1.0, omega_prior=None):
        if omega_prior is not None:
            omega_prior = (omega_prior[0], [[float(np.ravel(omega_prior[1])[0])]])
        super().__init__(delta=[delta], kappa=kappa, nu=nu, omega=[[omega]], omega_prior=omega_prior)


@dataclass(frozen=True, eq=False)
class DirichletBase:
    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        object.__setattr__(self, 'a', a)
        _check_positive('a', a)


@dataclass(frozen=True, eq=False)
class GammaBase:
    """泊松率的伽马基测度 ga(shape, rate)；rate_prior 为 rate 的伽马超先验"""

    shape: float
    rate: float
    rate_prior: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        _check_positive('shape', self.shape)
        _check_positive('rate', self.rate)
        if self.rate_prior is not None:
            _check_positive('rate_prior', self.rate_prior)


# ============================================================
# 单个核的密度
# ============================================================

def beta_logpdf(t, mu, tau):
    """均值-尺度参数化的 beta 对数密度 Beta(μτ, τ(1-μ))"""
    a = mu * tau
    b = tau * (1.0 - mu)
    return xlogy(a - 1.0, t) + xlog1py(b - 1.0, -t) - betaln(a, b)


def beta_pdf(t, mu, tau):
    """
    b(t; μ, τ)

    Args:
        t: 单位区间上的点（允许端点，用于求极限）
        mu: 均值，(0,1)
        tau: 尺度，> 0
    """
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)):
        raise ParameterError(f"t={t} 不在 [0,1] 内")
    _check_open_unit('mu', mu)
    _check_positive('tau', tau)
    return np.exp(beta_logpdf(t, mu, tau))


def beta_cdf(t, mu, tau):
    return betainc(mu * tau, tau * (1.0 - mu), np.clip(t, 0.0, 1.0))


def _mvn_logpdf(w, mean, cov):
    """多元正态对数密度，w 为 (n, d)"""
    w = _as_array(w, 2)
    L = _cholesky(np.atleast_2d(cov))
    r = (w - mean).T
    sol = np.linalg.solve(L, r)
    d = L.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (d * LOG_2PI + logdet + np.sum(sol ** 2, axis=0))


def _mvt_logpdf(w, loc, shape, df):
    """
    批量多元 t 对数密度

    参数:
        w: (d,) 或 (n, d)
        loc: (K, d)
        shape: (K, d, d)
        df: (K,)
    """
    L = _cholesky(shape)
    r = w - loc
    sol = np.linalg.solve(L, r[..., np.newaxis])[..., 0]
    maha = np.sum(sol ** 2, axis=-1)
    d = loc.shape[-1]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return (gammaln(0.5 * (df + d)) - gammaln(0.5 * df) - 0.5 * d * np.log(df * np.pi)
            - 0.5 * logdet - 0.5 * (df + d) * np.log1p(maha / df))


@dataclass(frozen=True)
class Transform:
    """正态核的坐标变换: logit（位置）、identity（实值标记）、log（正值或平移正值标记）"""

    kind: str = 'logit'
    offset: float = 0.0

    @property
    def lower(self):
        if self.kind == 'logit':
            return 0.0
        if self.kind == 'log':
            return self.offset
        return -np.inf

    @property
    def upper(self):
        return 1.0 if self.kind == 'logit' else np.inf

    def valid(self, v):
        return (v > self.lower) & (v < self.upper)

    def forward(self, v):
        """返回变换值和对数雅可比；定义域外的点标为 nan"""
        v = np.asarray(v, dtype=float)
        ok = self.valid(v)
        safe = np.where(ok, v, 0.5 if self.kind == 'logit' else self.offset + 1.0)
        if self.kind == 'logit':
            w, lj = logit(safe), -np.log(safe) - np.log1p(-safe)
        elif self.kind == 'log':
            w = np.log(safe - self.offset)
            lj = -w
        else:
            w, lj = safe, np.zeros_like(safe)
        return np.where(ok, w, np.nan), np.where(ok, lj, np.nan)

    def inverse(self, w):
        if self.kind == 'logit':
            return expit(w)
        if self.kind == 'log':
            return self.offset + np.exp(w)
        return np.asarray(w, dtype=float)

    @classmethod
    def for_mark(cls, desc):
        if desc.kind != 'continuous':
            raise ContractError(f"标记 {desc.name} 为 {desc.kind} 型，不能使用正态核")
        if desc.support == 'real':
            return cls('identity')
        if desc.support == 'positive':
            return cls('log', 0.0)
        return cls('log', float(desc.offset))


def logit_normal_logpdf(z, mean, cov, transforms=None):
    z = _as_array(z, 2)
    d = z.shape[1]
    transforms = transforms or [Transform('logit')] * d
    ws, ljs = zip(*(tr.forward(z[:, k]) for k, tr in enumerate(transforms)))
    w = np.column_stack(ws)
    lj = np.sum(np.column_stack(ljs), axis=1)
    ok = np.all(np.isfinite(w), axis=1)
    out = np.full(z.shape[0], -np.inf)
    if np.any(ok):
        out[ok] = _mvn_logpdf(w[ok], np.asarray(mean, dtype=float), np.atleast_2d(cov)) + lj[ok]
    return out


def logit_normal_pdf(z, mean, cov, transforms=None):
    """
    logit-正态核密度（含雅可比因子）

    Args:
        z: (n, d) 或 (d,)；单位区间坐标用 logit，标记坐标按 transforms 指定
        mean, cov: 变换尺度上的均值与协方差
        transforms: 每个坐标的 Transform，缺省全部为 logit

    Returns:
        (n,) 密度；越过支撑边界时为 0
    """
    return np.exp(logit_normal_logpdf(z, mean, cov, transforms))


def rho_bounds(mu1, mu2):
    """
    Sarmanov 依赖参数 ρ 的允许区间 (C_μ, C^μ)

    保证 1 + ρ(x1-μ1)(x2-μ2) > 0 在单位正方形上成立
    """
    _check_open_unit('mu1', mu1)
    _check_open_unit('mu2', mu2)
    lo = -1.0 / max(mu1 * mu2, (1.0 - mu1) * (1.0 - mu2))
    hi = -1.0 / min(mu1 * (mu2 - 1.0), mu2 * (mu1 - 1.0))
    return lo, hi


def sarmanov_logpdf(x, params):
    x = _as_array(x, 2)
    mu, tau, rho = params.mu, params.tau, params.rho
    factor = 1.0 + rho * (x[:, 0] - mu[0]) * (x[:, 1] - mu[1])
    with np.errstate(invalid='ignore', divide='ignore'):
        out = (beta_logpdf(x[:, 0], mu[0], tau[0]) + beta_logpdf(x[:, 1], mu[1], tau[1])
               + np.log(np.where(factor > 0, factor, np.nan)))
    return np.where(np.isfinite(out), out, -np.inf)


def sarmanov_beta_pdf(x, params):
    """二元 Sarmanov-beta 密度 b(x1)·b(x2)·(1 + ρ(x1-μ1)(x2-μ2))"""
    lo, hi = rho_bounds(*params.mu)
    if not lo <= params.rho <= hi:
        raise ParameterError(f"ρ={params.rho} 不在 [{lo}, {hi}] 内")
    _check_positive('tau', params.tau)
    return np.exp(sarmanov_logpdf(x, params))


def uniform_scale_logpdf(t, theta, direction='nonincreasing'):
    t = np.asarray(t, dtype=float)
    s = t if direction == 'nonincreasing' else 1.0 - t
    return np.where((s >= 0.0) & (s < theta), -np.log(theta), -np.inf)


def uniform_scale_pdf(t, theta, direction='nonincreasing'):
    """单调核 θ^{-1}·1{t∈(0,θ)}；nondecreasing 为其关于 1/2 的镜像"""
    if not 0.0 < theta <= 1.0:
        raise ParameterError(f"θ={theta} 必须位于 (0,1]")
    if direction not in ('nonincreasing', 'nondecreasing'):
        raise ParameterError(f"未知方向 {direction}")
    return np.exp(uniform_scale_logpdf(t, theta, direction))


def uniform_scale_cdf(t, theta, direction='nonincreasing'):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    if direction == 'nonincreasing':
        return np.minimum(t / theta, 1.0)
    return np.maximum(0.0, (t - (1.0 - theta)) / theta)


def log_poisson_tail(bound, rate):
    """
    log P(Y ≥ bound)，Y ~ Po(rate)

    rate < bound 时用互补 CDF 的级数递推 Po(bound)·Σ_k rate^k·bound!/(bound+k)!，
    否则尾概率不小，直接用正则化不完全伽马函数
    """
    bound, rate = np.broadcast_arrays(np.asarray(bound, dtype=float), np.asarray(rate, dtype=float))
    out = np.zeros(bound.shape)
    pos = bound > 0
    big = pos & (rate >= bound)
    small = pos & (rate < bound)
    if np.any(big):
        out[big] = np.log(gammainc(bound[big], rate[big]))
    if np.any(small):
        b, r = bound[small], rate[small]
        with np.errstate(divide='ignore'):
            head = xlogy(b, r) - r - gammaln(b + 1.0)
        term = np.ones_like(b)
        total = np.ones_like(b)
        k = 0
        while True:
            k += 1
            term = term * r / (b + k)
            total += term
            if np.all(term <= 1e-17 * total) or k > 100000:
                break
        out[small] = head + np.log(total)
    return out


def trunc_poisson_logpmf(y, rate, bound=0):
    y = np.asarray(y, dtype=float)
    ok = (y >= bound) & (y == np.round(y))
    with np.errstate(divide='ignore', invalid='ignore'):
        val = xlogy(y, rate) - rate - gammaln(y + 1.0) - log_poisson_tail(bound, rate)
    return np.where(ok, val, -np.inf)


def trunc_poisson_cdf(y, rate, bound=0):
    y = np.floor(np.asarray(y, dtype=float))
    below = y < bound
    upper = np.where(below, bound, y) + 1.0
    val = -np.expm1(log_poisson_tail(upper, rate) - log_poisson_tail(bound, rate))
    return np.where(below, 0.0, np.clip(val, 0.0, 1.0))


def trunc_poisson_mean(rate, bound=0):
    """E[Y | Y ≥ bound] = rate·P(Y ≥ bound-1)/P(Y ≥ bound)"""
    if bound <= 0:
        return float(rate)
    return float(rate * np.exp(log_poisson_tail(bound - 1, rate) - log_poisson_tail(bound, rate)))


def mark_kernel_logpdf(y, params):
    y = np.asarray(y, dtype=float)
    if isinstance(params, CategoricalParams):
        idx = np.round(y).astype(int)
        ok = (idx >= 0) & (idx < params.q.shape[0]) & (idx == y)
        with np.errstate(divide='ignore'):
            return np.where(ok, np.log(params.q[np.clip(idx, 0, params.q.shape[0] - 1)]), -np.inf)
    if isinstance(params, NormalParams):
        return -0.5 * (LOG_2PI + np.log(params.phi) + (y - params.eta) ** 2 / params.phi)
    if isinstance(params, LogNormalShiftParams):
        tr = Transform('log', params.offset)
        w, lj = tr.forward(y)
        val = -0.5 * (LOG_2PI + np.log(params.variance) + (w - params.mean) ** 2 / params.variance) + lj
        return np.where(np.isfinite(val), val, -np.inf)
    if isinstance(params, TruncPoissonParams):
        return trunc_poisson_logpmf(y, params.rate, params.bound)
    raise ContractError(f"{type(params).__name__} 不是标记核参数")


def mark_kernel_pdf(y, params):
    """
    标记核的密度或概率质量

    参数:
        y: 标记值（分类标记编码为 0..M-1）
        params: CategoricalParams / NormalParams / LogNormalShiftParams / TruncPoissonParams

    返回:
        密度/质量值
    """
    if isinstance(params, TruncPoissonParams):
        y = np.asarray(y, dtype=float)
        if np.any(y < params.bound):
            raise SupportError(f"计数标记 {y} 低于截断下界 {params.bound}")
    return np.exp(mark_kernel_logpdf(y, params))


# ============================================================
# 共轭计算
# ============================================================

def _niw_update(base, omega, n, sw, sww):
    """
    正态-Wishart 后验参数（在标准 NIW(δ, κ, v, Ψ) 形式下，v=2ν，Ψ=2Ω）

    n: (K,)，sw: (K,d)，sww: (K,d,d)；n=0 时退化为先验
    """
    delta = base.delta
    kappa = base.kappa
    kn = kappa + n
    dn = (kappa * delta + sw) / kn[:, np.newaxis]
    psin = (2.0 * omega + sww + kappa * np.outer(delta, delta)
            - kn[:, np.newaxis, np.newaxis] * dn[:, :, np.newaxis] * dn[:, np.newaxis, :])
    psin = 0.5 * (psin + np.swapaxes(psin, -1, -2))
    vn = 2.0 * base.nu + n
    return dn, kn, vn, psin


def _niw_predictive_logpdf(w, dn, kn, vn, psin):
    d = dn.shape[-1]
    df = vn - d + 1.0
    shape = psin * ((kn + 1.0) / (kn * df))[:, np.newaxis, np.newaxis]
    return _mvt_logpdf(w, dn, shape, df)


def _invwishart_rvs(df, scale, rng):
    d = scale.shape[0]
    if d == 1:
        return np.array([[float(stats.invwishart.rvs(df=df, scale=float(scale[0, 0]), random_state=rng))]])
    s = np.asarray(stats.invwishart.rvs(df=df, scale=scale, random_state=rng), dtype=float)
    return 0.5 * (s + s.T)


def _invwishart_logpdf(x, df, scale):
    if scale.shape[0] == 1:
        return float(stats.invwishart.logpdf(float(x[0, 0]), df=df, scale=float(scale[0, 0])))
    return float(stats.invwishart.logpdf(x, df=df, scale=scale))


def _wishart_rvs(df, scale, rng):
    if scale.shape[0] == 1:
        return np.array([[float(stats.wishart.rvs(df=df, scale=float(scale[0, 0]), random_state=rng))]])
    s = np.asarray(stats.wishart.rvs(df=df, scale=scale, random_state=rng), dtype=float)
    return 0.5 * (s + s.T)


def _wishart_logpdf(x, df, scale):
    if scale.shape[0] == 1:
        return float(stats.wishart.logpdf(float(x[0, 0]), df=df, scale=float(scale[0, 0])))
    return float(stats.wishart.logpdf(x, df=df, scale=scale))


def _niw_draw(dn, kn, vn, psin, rng):
    cov = _invwishart_rvs(vn, psin, rng)
    mean = rng.multivariate_normal(dn, cov / kn) if dn.shape[0] > 1 else \
        np.array([dn[0] + np.sqrt(cov[0, 0] / kn) * rng.standard_normal()])
    return mean, cov


def _gaussian_stats(w):
    w = _as_array(w, 2)
    n, d = w.shape
    outer = (w[:, :, np.newaxis] * w[:, np.newaxis, :]).reshape(n, d * d)
    return np.column_stack([np.ones(n), w, outer])


def _unpack_gaussian_stats(stats_rows, d):
    stats_rows = _as_array(stats_rows, 2)
    n = stats_rows[:, 0]
    sw = stats_rows[:, 1:1 + d]
    sww = stats_rows[:, 1 + d:].reshape(-1, d, d)
    return n, sw, sww


def conjugate_posterior_draw(observations, base, rng, hyper=None, bound=0):
    """
    从共轭全条件分布中精确抽取一个分量参数

    Args:
        observations: 聚类内的观测，已在核的尺度上
            NIG/NIW: (n, d) 变换后的实值向量；Dirichlet: 类别编码；Gamma: 计数
        base: NIGBase / NIWBase / DirichletBase / GammaBase
        rng: numpy Generator
        hyper: 当前随机超参数（Ω 或伽马率），缺省用基测度中的初值
        bound: 泊松截断下界；> 0 时不共轭

    Returns:
        NormalParams（NIG）/ LogitNormalParams（NIW）/ CategoricalParams / TruncPoissonParams
    """
    if isinstance(base, NIWBase):
        d = base.dim
        obs = np.asarray(observations, dtype=float).reshape(-1, d)
        st = _gaussian_stats(obs).sum(axis=0) if obs.shape[0] else np.zeros(1 + d + d * d)
        omega = base.omega if hyper is None else np.asarray(hyper, dtype=float).reshape(d, d)
        n, sw, sww = _unpack_gaussian_stats(st, d)
        mean, cov = _niw_draw(*(a[0] for a in _niw_update(base, omega, n, sw, sww)), rng)
        if isinstance(base, NIGBase):
            return NormalParams(float(mean[0]), float(cov[0, 0]))
        return LogitNormalParams(mean, cov)
    if isinstance(base, DirichletBase):
        obs = np.asarray(observations, dtype=int).ravel()
        counts = np.bincount(obs, minlength=base.a.shape[0]).astype(float)
        return CategoricalParams(dirichlet_draw(base.a + counts, rng))
    if isinstance(base, GammaBase):
        if bound > 0:
            raise ContractError("截断泊松核与伽马基测度不共轭，应走 Metropolis 路径")
        obs = np.asarray(observations, dtype=float).ravel()
        rate = base.rate if hyper is None else float(hyper)
        return TruncPoissonParams(float(rng.gamma(base.shape + obs.sum(), 1.0 / (rate + obs.shape[0]))), 0)
    raise ContractError(f"{type(base).__name__} 没有共轭更新，应走 Metropolis 路径")


def dirichlet_draw(a, rng):
    """由独立伽马变量归一化得到 Dirichlet；形状参数很小时在对数空间计算"""
    a = np.asarray(a, dtype=float)
    log_g = np.log(rng.gamma(a + 1.0)) + np.log(rng.random(a.shape)) / a
    log_g -= np.max(log_g)
    g = np.exp(log_g)
    return g / g.sum()


def _log_trunc_poisson_marginal(y, shape, rate, bound):
    """∫ Po_{≥bound}(y; φ) ga(φ; shape, rate) dφ 的对数，一维数值积分"""
    def integrand(phi):
        if phi <= 0.0:
            return 0.0
        return float(np.exp(trunc_poisson_logpmf(y, phi, bound) + gamma_logpdf(phi, shape, rate)))

    mode = max(float(y), shape / rate)
    # 分段积分，峰附近单独处理
    parts = [(0.0, mode), (mode, 4.0 * mode + 50.0)]
    total = 0.0
    for lo, hi in parts:
        v, _ = integrate.quad(integrand, lo, hi, limit=500, epsabs=0.0, epsrel=1e-12)
        total += v
    tail, _ = integrate.quad(integrand, parts[-1][1], np.inf, limit=500, epsabs=0.0, epsrel=1e-10)
    total += tail
    with np.errstate(divide='ignore'):
        return float(np.log(total))


def marginal_likelihood(z, base, hyper=None, bound=0, transforms=None):
    """
    单个事件在基测度下的边际似然 ∫k(z;θ) g0(θ) dθ

    参数:
        z: 单个观测（NIG/NIW 时为原始尺度的坐标，按 transforms 变换并计入雅可比）
        base: NIGBase / NIWBase / DirichletBase / GammaBase
        bound: 伽马-泊松的截断下界（> 0 时用数值积分）
        transforms: 正态族各坐标的 Transform；缺省为恒等（即 z 已在核尺度上）

    返回:
        边际密度/质量
    """
    if isinstance(base, NIWBase):
        d = base.dim
        z = np.asarray(z, dtype=float).reshape(1, d)
        transforms = transforms or [Transform('identity')] * d
        ws, ljs = zip(*(tr.forward(z[:, k]) for k, tr in enumerate(transforms)))
        w = np.column_stack(ws)[0]
        lj = float(np.sum(ljs))
        omega = base.omega if hyper is None else np.asarray(hyper, dtype=float).reshape(d, d)
        dn, kn, vn, psin = _niw_update(base, omega, np.zeros(1), np.zeros((1, d)), np.zeros((1, d, d)))
        return float(np.exp(_niw_predictive_logpdf(w, dn, kn, vn, psin)[0] + lj))
    if isinstance(base, DirichletBase):
        y = int(np.ravel(z)[0])
        return float(base.a[y] / base.a.sum())
    if isinstance(base, GammaBase):
        y = float(np.ravel(z)[0])
        rate = base.rate if hyper is None else float(hyper)
        if y < bound:
            return 0.0
        if bound > 0:
            return float(np.exp(_log_trunc_poisson_marginal(y, base.shape, rate, bound)))
        return float(np.exp(_negbin_logpmf(y, base.shape, rate)))
    raise ContractError(f"{type(base).__name__} 没有解析的边际似然")


def _negbin_logpmf(y, shape, rate):
    """伽马-泊松边际: Γ(a+y)/(Γ(a)y!)·(b/(b+1))^a·(1/(b+1))^y"""
    return (gammaln(shape + y) - gammaln(shape) - gammaln(y + 1.0)
            + shape * np.log(rate / (rate + 1.0)) - y * np.log1p(rate))


def _metropolis(u, log_target, scale, rng):
    """变换坐标上的随机游走 Metropolis 一步"""
    current = log_target(u)
    proposal = u + scale * rng.standard_normal(u.shape)
    candidate = log_target(proposal)
    if np.log(rng.random()) < candidate - current:
        return proposal, True
    return u, False


# ============================================================
# 核块
# ============================================================

class KernelBlock:
    """
    联合核中的一个因子，拥有若干位置维 (dims) 和/或标记列 (marks)

    子类实现对数密度、先验抽样与先验密度、超参数条件抽样；
    共轭块另外实现充分统计量、预测密度与后验抽样，非共轭块实现 Metropolis 更新
    """

    family = ''
    conjugate = False

    def __init__(self, base, dims=(), marks=()):
        self.base = base
        self.dims = tuple(int(d) for d in dims)
        self.marks = tuple(int(c) for c in marks)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, marks={self.marks})"

    # 通用接口
    def init_hyper(self):
        return {}

    def log_pdf(self, x, y, params, marks_used=None):
        raise NotImplementedError

    def draw_prior(self, hyper, rng):
        raise NotImplementedError

    def log_prior(self, params, hyper):
        raise NotImplementedError

    def update_hyper(self, params_list, hyper, rng):
        return hyper

    def log_hyperprior(self, hyper):
        return 0.0

    def sample(self, params, n, rng):
        """返回 ({位置维: 值}, {标记列: 值})"""
        raise NotImplementedError

    def uses_marks(self, marks_used):
        return marks_used is None or any(c in marks_used for c in self.marks)

    # 共轭接口
    def suff(self, x, y):
        raise ContractError(f"{self.family} 核不共轭")

    def log_predictive(self, x_row, y_row, stats_rows, hyper):
        raise ContractError(f"{self.family} 核不共轭")

    def posterior_draw(self, stats_row, hyper, rng):
        raise ContractError(f"{self.family} 核不共轭")

    def log_marginal(self, x, y, hyper, marks_used=None):
        raise ContractError(f"{self.family} 核没有解析的边际似然")

    # 非共轭接口
    def metropolis(self, params, x, y, hyper, scale, rng):
        raise ContractError(f"{self.family} 核为共轭核，应使用 posterior_draw")

    def initial_params(self, x, y, hyper, rng, tries=50):
        """先验抽样中挑似然最大的一个作为初值"""
        best, best_lp = None, -np.inf
        for _ in range(tries):
            p = self.draw_prior(hyper, rng)
            lp = float(np.sum(self.log_pdf(x, y, p))) if x.shape[0] else 0.0
            if best is None or lp > best_lp:
                best, best_lp = p, lp
        return best

    # 位置块
    def location_cdf(self, params, values, dim):
        raise ContractError(f"{self.family} 核不含位置维")

    # 标记块
    def mark_cdf(self, params, col, values, x, y, given=()):
        raise ContractError(f"{self.family} 核不含连续或计数标记")

    def mark_mean(self, params, col, x, y, given=()):
        raise ContractError(f"{self.family} 核不含标记")


class BetaBlock(KernelBlock):
    """位置维上的（乘积）beta 核"""

    family = 'beta'

    def __init__(self, base, dims=(0,)):
        super().__init__(base, dims=dims)
        self.d = len(self.dims)

    def init_hyper(self):
        return {'scale': np.full(self.d, float(self.base.scale))}

    def log_pdf(self, x, y, params, marks_used=None):
        out = np.zeros(x.shape[0])
        for k, dim in enumerate(self.dims):
            out += beta_logpdf(x[:, dim], params.mu[k], params.tau[k])
        return out

    def draw_prior(self, hyper, rng):
        mu = rng.uniform(size=self.d)
        tau = 1.0 / rng.gamma(self.base.shape, 1.0 / hyper['scale'])
        return BetaParams(mu, tau)

    def log_prior(self, params, hyper):
        if np.any((params.mu <= 0) | (params.mu >= 1)) or np.any(params.tau <= 0):
            return -np.inf
        return float(np.sum(_inv_gamma_logpdf(params.tau, self.base.shape, hyper['scale'])))

    def update_hyper(self, params_list, hyper, rng):
        if self.base.scale_prior is None:
            return hyper
        a, b = self.base.scale_prior
        m = len(params_list)
        inv_tau = np.sum([1.0 / p.tau for p in params_list], axis=0) if m else np.zeros(self.d)
        scale = rng.gamma(a + m * self.base.shape, 1.0 / (b + inv_tau))
        return {'scale': np.asarray(scale, dtype=float).reshape(self.d)}

    def log_hyperprior(self, hyper):
        if self.base.scale_prior is None:
            return 0.0
        a, b = self.base.scale_prior
        return float(np.sum(gamma_logpdf(hyper['scale'], a, b)))

    def _to_free(self, params):
        return np.concatenate([logit(params.mu), np.log(params.tau)])

    def _from_free(self, u):
        mu = expit(u[:self.d])
        tau = np.exp(u[self.d:])
        log_jac = float(np.sum(np.log(mu) + np.log1p(-mu) + u[self.d:]))
        return BetaParams(mu, tau), log_jac

    def metropolis(self, params, x, y, hyper, scale, rng):
        def log_target(u):
            p, lj = self._from_free(u)
            if np.any((p.mu <= 0) | (p.mu >= 1)) or not np.all(np.isfinite(p.tau)) or np.any(p.tau <= 0):
                return -np.inf
            return float(np.sum(self.log_pdf(x, y, p))) + self.log_prior(p, hyper) + lj

        u, accepted = _metropolis(self._to_free(params), log_target, scale, rng)
        return (self._from_free(u)[0] if accepted else params), accepted

    def location_cdf(self, params, values, dim):
        k = self.dims.index(dim)
        return beta_cdf(values, params.mu[k], params.tau[k])

    def sample(self, params, n, rng):
        a = params.mu * params.tau
        b = params.tau * (1.0 - params.mu)
        return {dim: rng.beta(a[k], b[k], size=n) for k, dim in enumerate(self.dims)}, {}


class SarmanovBlock(KernelBlock):
    """二维 Sarmanov-beta 核"""

    family = 'sarmanov'

    def __init__(self, base, dims=(0, 1)):
        super().__init__(base, dims=dims)

    def init_hyper(self):
        return {'scale': np.array(self.base.scale, dtype=float)}

    def log_pdf(self, x, y, params, marks_used=None):
        return sarmanov_logpdf(x[:, list(self.dims)], params)

    def draw_prior(self, hyper, rng):
        mu = rng.uniform(size=2)
        tau = 1.0 / rng.gamma(self.base.nu, 1.0 / hyper['scale'])
        lo, hi = rho_bounds(*mu)
        return SarmanovParams(mu, tau, float(rng.uniform(lo, hi)))

    def log_prior(self, params, hyper):
        if np.any((params.mu <= 0) | (params.mu >= 1)) or np.any(params.tau <= 0):
            return -np.inf
        lo, hi = rho_bounds(*params.mu)
        if not lo < params.rho < hi:
            return -np.inf
        return float(np.sum(_inv_gamma_logpdf(params.tau, self.base.nu, hyper['scale'])) - np.log(hi - lo))

    def update_hyper(self, params_list, hyper, rng):
        if self.base.scale_prior is None:
            return hyper
        a, b = self.base.scale_prior
        m = len(params_list)
        inv_tau = np.sum([1.0 / p.tau for p in params_list], axis=0) if m else np.zeros(2)
        return {'scale': rng.gamma(a + m * self.base.nu, 1.0 / (b + inv_tau))}

    def log_hyperprior(self, hyper):
        if self.base.scale_prior is None:
            return 0.0
        a, b = self.base.scale_prior
        return float(np.sum(gamma_logpdf(hyper['scale'], a, b)))

    def _to_free(self, params):
        lo, hi = rho_bounds(*params.mu)
        frac = (params.rho - lo) / (hi - lo)
        return np.concatenate([logit(params.mu), np.log(params.tau), [logit(frac)]])

    def _from_free(self, u):
        mu = expit(u[:2])
        tau = np.exp(u[2:4])
        frac = expit(u[4])
        lo, hi = rho_bounds(*mu)
        rho = lo + frac * (hi - lo)
        # ρ 的均匀条件先验 1/(C^-C_μ) 与线性映射的雅可比相消，只剩 frac(1-frac)
        log_jac = float(np.sum(np.log(mu) + np.log1p(-mu) + u[2:4]) + np.log(frac) + np.log1p(-frac)
                        + np.log(hi - lo))
        return SarmanovParams(mu, tau, float(rho)), log_jac

    def metropolis(self, params, x, y, hyper, scale, rng):
        def log_target(u):
            try:
                p, lj = self._from_free(u)
            except ParameterError:
                return -np.inf
            if not np.all(np.isfinite(p.tau)):
                return -np.inf
            return float(np.sum(self.log_pdf(x, y, p))) + self.log_prior(p, hyper) + lj

        u, accepted = _metropolis(self._to_free(params), log_target, scale, rng)
        return (self._from_free(u)[0] if accepted else params), accepted

    def location_cdf(self, params, values, dim):
        # 依赖因子对另一维积分为 0，边际正好是 beta
        k = self.dims.index(dim)
        return beta_cdf(values, params.mu[k], params.tau[k])

    def sample(self, params, n, rng):
        mu, tau, rho = params.mu, params.tau, params.rho
        a, b = mu * tau, tau * (1.0 - mu)
        corners = [1.0 + rho * (c1 - mu[0]) * (c2 - mu[1]) for c1 in (0, 1) for c2 in (0, 1)]
        ceiling = max(corners)
        out = np.empty((0, 2))
        while out.shape[0] < n:
            k = 2 * (n - out.shape[0]) + 10
            cand = np.column_stack([rng.beta(a[0], b[0], size=k), rng.beta(a[1], b[1], size=k)])
            factor = 1.0 + rho * (cand[:, 0] - mu[0]) * (cand[:, 1] - mu[1])
            out = np.vstack([out, cand[rng.random(k) * ceiling < factor]])
        out = out[:n]
        return {self.dims[0]: out[:, 0], self.dims[1]: out[:, 1]}, {}


class UniformScaleBlock(KernelBlock):
    """单调强度的均匀尺度混合核"""

    family = 'uniform_scale'

    def __init__(self, base, dims=(0,), direction='nonincreasing'):
        super().__init__(base, dims=dims)
        if direction not in ('nonincreasing', 'nondecreasing'):
            raise ParameterError(f"未知方向 {direction}")
        self.direction = direction

    def log_pdf(self, x, y, params, marks_used=None):
        return uniform_scale_logpdf(x[:, self.dims[0]], params.theta, self.direction)

    def draw_prior(self, hyper, rng):
        return UniformScaleParams(float(rng.beta(self.base.a, self.base.b)), self.direction)

    def log_prior(self, params, hyper):
        if not 0.0 < params.theta < 1.0:
            return -np.inf
        return float(stats.beta.logpdf(params.theta, self.base.a, self.base.b))

    def metropolis(self, params, x, y, hyper, scale, rng):
        def log_target(u):
            theta = float(expit(u[0]))
            if not 0.0 < theta < 1.0:
                return -np.inf
            p = UniformScaleParams(theta, self.direction)
            lj = np.log(theta) + np.log1p(-theta)
            return float(np.sum(self.log_pdf(x, y, p))) + self.log_prior(p, hyper) + lj

        u, accepted = _metropolis(np.array([logit(params.theta)]), log_target, scale, rng)
        return (UniformScaleParams(float(expit(u[0])), self.direction) if accepted else params), accepted

    def initial_params(self, x, y, hyper, rng, tries=50):
        if x.shape[0] == 0:
            return self.draw_prior(hyper, rng)
        t = x[:, self.dims[0]]
        reach = t.max() if self.direction == 'nonincreasing' else 1.0 - t.min()
        return UniformScaleParams(float(reach + 0.5 * (1.0 - reach)), self.direction)

    def location_cdf(self, params, values, dim):
        return uniform_scale_cdf(values, params.theta, self.direction)

    def sample(self, params, n, rng):
        s = params.theta * rng.random(n)
        return {self.dims[0]: s if self.direction == 'nonincreasing' else 1.0 - s}, {}


class GaussianBlock(KernelBlock):
    """
    变换尺度上的（多元）正态核，正态-Wishart 基测度，完全共轭

    coords 依次为位置维（logit 变换）和连续标记列（按标记支撑变换）
    """

    family = 'gaussian'
    conjugate = True

    def __init__(self, base, dims=(), marks=(), schema=None):
        super().__init__(base, dims=dims, marks=marks)
        transforms = [Transform('logit') for _ in self.dims]
        for col in self.marks:
            if schema is None:
                raise ContractError("含标记的正态核需要标记模式")
            transforms.append(Transform.for_mark(schema.marks[col]))
        self.transforms = tuple(transforms)
        self.sources = tuple(('loc', d) for d in self.dims) + tuple(('mark', c) for c in self.marks)
        self.d = len(self.sources)
        if base.dim != self.d:
            raise ParameterError(f"基测度维数 {base.dim} 与核维数 {self.d} 不一致")

    # 子类负责参数的打包
    def _moments(self, params):
        return params.mean, params.cov

    def _make(self, mean, cov):
        return LogitNormalParams(np.asarray(mean, dtype=float), np.asarray(cov, dtype=float))

    def _keep(self, marks_used):
        if marks_used is None:
            return list(range(self.d))
        return [k for k, (src, idx) in enumerate(self.sources) if src == 'loc' or idx in marks_used]

    def _column(self, x, y, k):
        src, idx = self.sources[k]
        return x[:, idx] if src == 'loc' else y[:, idx]

    def _transform(self, x, y, keep):
        ws, lj = [], np.zeros(x.shape[0])
        for k in keep:
            w, j = self.transforms[k].forward(self._column(x, y, k))
            ws.append(w)
            lj = lj + j
        w = np.column_stack(ws) if ws else np.zeros((x.shape[0], 0))
        return w, lj

    def init_hyper(self):
        return {'omega': np.array(self.base.omega, dtype=float)}

    def log_pdf(self, x, y, params, marks_used=None):
        keep = self._keep(marks_used)
        if not keep:
            return np.zeros(x.shape[0])
        mean, cov = self._moments(params)
        w, lj = self._transform(x, y, keep)
        ok = np.all(np.isfinite(w), axis=1)
        out = np.full(x.shape[0], -np.inf)
        if np.any(ok):
            out[ok] = _mvn_logpdf(w[ok], mean[keep], cov[np.ix_(keep, keep)]) + lj[ok]
        return out

    def draw_prior(self, hyper, rng):
        dn, kn, vn, psin = _niw_update(self.base, hyper['omega'], np.zeros(1),
                                       np.zeros((1, self.d)), np.zeros((1, self.d, self.d)))
        return self._make(*_niw_draw(dn[0], kn[0], vn[0], psin[0], rng))

    def log_prior(self, params, hyper):
        mean, cov = self._moments(params)
        lp = _mvn_logpdf(mean[np.newaxis], self.base.delta, cov / self.base.kappa)[0]
        return float(lp + _invwishart_logpdf(cov, 2.0 * self.base.nu, 2.0 * hyper['omega']))

    def update_hyper(self, params_list, hyper, rng):
        """Ω | Σ_1..Σ_m ~ W(a + m·ν, B + Σ_j Σ_j^{-1})"""
        if self.base.omega_prior is None:
            return hyper
        a, B = self.base.omega_prior
        m = len(params_list)
        precision_sum = np.zeros((self.d, self.d))
        for p in params_list:
            precision_sum += np.linalg.inv(self._moments(p)[1])
        post_a = a + m * self.base.nu
        post_B = B + precision_sum
        return {'omega': _wishart_rvs(2.0 * post_a, np.linalg.inv(2.0 * post_B), rng)}

    def log_hyperprior(self, hyper):
        if self.base.omega_prior is None:
            return 0.0
        a, B = self.base.omega_prior
        return _wishart_logpdf(hyper['omega'], 2.0 * a, np.linalg.inv(2.0 * B))

    def suff(self, x, y):
        w, _ = self._transform(x, y, list(range(self.d)))
        return _gaussian_stats(w)

    def log_predictive(self, x_row, y_row, stats_rows, hyper):
        w, lj = self._transform(x_row[np.newaxis], y_row[np.newaxis], list(range(self.d)))
        n, sw, sww = _unpack_gaussian_stats(stats_rows, self.d)
        dn, kn, vn, psin = _niw_update(self.base, hyper['omega'], n, sw, sww)
        return _niw_predictive_logpdf(w[0], dn, kn, vn, psin) + lj[0]

    def posterior_draw(self, stats_row, hyper, rng):
        n, sw, sww = _unpack_gaussian_stats(stats_row, self.d)
        dn, kn, vn, psin = _niw_update(self.base, hyper['omega'], n, sw, sww)
        return self._make(*_niw_draw(dn[0], kn[0], vn[0], psin[0], rng))

    def log_marginal(self, x, y, hyper, marks_used=None):
        """先验预测（多元 t）在保留坐标上的边际，仍是同自由度的 t"""
        keep = self._keep(marks_used)
        if not keep:
            return np.zeros(x.shape[0])
        dn, kn, vn, psin = _niw_update(self.base, hyper['omega'], np.zeros(1),
                                       np.zeros((1, self.d)), np.zeros((1, self.d, self.d)))
        df = vn - self.d + 1.0
        shape = psin * ((kn + 1.0) / (kn * df))[:, np.newaxis, np.newaxis]
        w, lj = self._transform(x, y, keep)
        ok = np.all(np.isfinite(w), axis=1)
        out = np.full(x.shape[0], -np.inf)
        if np.any(ok):
            out[ok] = _mvt_logpdf(w[ok], dn[:, keep], shape[:, keep][:, :, keep], df) + lj[ok]
        return out

    def location_cdf(self, params, values, dim):
        k = self.sources.index(('loc', dim))
        mean, cov = self._moments(params)
        w, _ = Transform('logit').forward(np.clip(values, 1e-300, 1.0 - 1e-16))
        out = ndtr((w - mean[k]) / np.sqrt(cov[k, k]))
        values = np.asarray(values, dtype=float)
        return np.where(values <= 0.0, 0.0, np.where(values >= 1.0, 1.0, out))

    def _conditional(self, params, col, x, y, given):
        """目标标记在块内其余已知坐标（位置 + given 标记）下的条件正态 (均值, 方差)"""
        k = self.sources.index(('mark', col))
        keep = [j for j in self._keep(set(given)) if j != k]
        mean, cov = self._moments(params)
        n = x.shape[0]
        if not keep:
            return np.full(n, mean[k]), np.full(n, cov[k, k])
        w, _ = self._transform(x, y, keep)
        s_kk = cov[np.ix_(keep, keep)]
        s_tk = cov[k, keep]
        coef = np.linalg.solve(s_kk, s_tk)
        cmean = mean[k] + (w - mean[keep]) @ coef
        cvar = cov[k, k] - s_tk @ coef
        return cmean, np.full(n, cvar)

    def mark_cdf(self, params, col, values, x, y, given=()):
        tr = self.transforms[self.sources.index(('mark', col))]
        cmean, cvar = self._conditional(params, col, x, y, given)
        values = np.broadcast_to(np.asarray(values, dtype=float), cmean.shape)
        w, _ = tr.forward(values)
        z = (np.where(np.isfinite(w), w, 0.0) - cmean) / np.sqrt(cvar)
        return np.where(values <= tr.lower, 0.0, ndtr(z))

    def mark_mean(self, params, col, x, y, given=()):
        tr = self.transforms[self.sources.index(('mark', col))]
        cmean, cvar = self._conditional(params, col, x, y, given)
        if tr.kind == 'log':
            return tr.offset + np.exp(cmean + 0.5 * cvar)
        return cmean

    def sample(self, params, n, rng):
        mean, cov = self._moments(params)
        w = rng.multivariate_normal(mean, cov, size=n)
        locs, marks = {}, {}
        for k, (src, idx) in enumerate(self.sources):
            v = self.transforms[k].inverse(w[:, k])
            (locs if src == 'loc' else marks)[idx] = v
        return locs, marks


class LogitNormalBlock(GaussianBlock):
    """logit 位置（可联合连续标记）的多元正态核"""

    family = 'logit_normal'


class NormalMarkBlock(GaussianBlock):
    """单个连续标记的独立正态核（正值/平移正值标记在对数尺度上）"""

    family = 'normal'

    def __init__(self, base, mark, schema):
        super().__init__(base, dims=(), marks=(mark,), schema=schema)
        self.transform = self.transforms[0]

    def _moments(self, params):
        if isinstance(params, NormalParams):
            return np.array([params.eta]), np.array([[params.phi]])
        return np.array([params.mean]), np.array([[params.variance]])

    def _make(self, mean, cov):
        if self.transform.kind == 'log':
            return LogNormalShiftParams(float(mean[0]), float(cov[0, 0]), self.transform.offset)
        return NormalParams(float(mean[0]), float(cov[0, 0]))

    def log_pdf(self, x, y, params, marks_used=None):
        if not self.uses_marks(marks_used):
            return np.zeros(x.shape[0])
        return mark_kernel_logpdf(y[:, self.marks[0]], params)


class CategoricalBlock(KernelBlock):
    """分类标记核 q_y，Dirichlet 基测度"""

    family = 'categorical'
    conjugate = True

    def __init__(self, base, mark, levels):
        super().__init__(base, marks=(mark,))
        self.levels = int(levels)
        if base.a.shape[0] != self.levels:
            raise ParameterError(f"Dirichlet 参数长度 {base.a.shape[0]} 与水平数 {self.levels} 不一致")

    def log_pdf(self, x, y, params, marks_used=None):
        if not self.uses_marks(marks_used):
            return np.zeros(x.shape[0])
        return mark_kernel_logpdf(y[:, self.marks[0]], params)

    def draw_prior(self, hyper, rng):
        return CategoricalParams(dirichlet_draw(self.base.a, rng))

    def log_prior(self, params, hyper):
        return float(stats.dirichlet.logpdf(np.clip(params.q, 1e-300, 1.0) / np.clip(params.q, 1e-300, 1.0).sum(),
                                            self.base.a))

    def suff(self, x, y):
        codes = np.round(y[:, self.marks[0]]).astype(int)
        return np.eye(self.levels)[codes]

    def log_predictive(self, x_row, y_row, stats_rows, hyper):
        code = int(round(y_row[self.marks[0]]))
        stats_rows = _as_array(stats_rows, 2)
        return np.log(self.base.a[code] + stats_rows[:, code]) - np.log(self.base.a.sum() + stats_rows.sum(axis=1))

    def posterior_draw(self, stats_row, hyper, rng):
        return CategoricalParams(dirichlet_draw(self.base.a + np.ravel(stats_row), rng))

    def log_marginal(self, x, y, hyper, marks_used=None):
        if not self.uses_marks(marks_used):
            return np.zeros(x.shape[0])
        codes = np.round(y[:, self.marks[0]]).astype(int)
        return np.log(self.base.a[codes] / self.base.a.sum())

    def mark_cdf(self, params, col, values, x, y, given=()):
        cum = np.concatenate([[0.0], np.cumsum(params.q)])
        idx = np.clip(np.floor(np.asarray(values, dtype=float)) + 1, 0, self.levels).astype(int)
        return np.broadcast_to(cum[idx], (x.shape[0],)) if np.ndim(values) == 0 else cum[idx]

    def mark_mean(self, params, col, x, y, given=()):
        """编码 0..M-1 的均值；二元标记时即 Pr(z=1)"""
        return np.full(x.shape[0], float(np.dot(np.arange(self.levels), params.q)))

    def sample(self, params, n, rng):
        return {}, {self.marks[0]: rng.choice(self.levels, size=n, p=params.q).astype(float)}


class PoissonMarkBlock(KernelBlock):
    """计数标记的（下截断）泊松核，伽马基测度；bound=0 时共轭"""

    family = 'poisson'

    def __init__(self, base, mark, bound=0):
        super().__init__(base, marks=(mark,))
        self.bound = int(bound)
        self.conjugate = self.bound == 0

    def init_hyper(self):
        return {'rate': float(self.base.rate)}

    def log_pdf(self, x, y, params, marks_used=None):
        if not self.uses_marks(marks_used):
            return np.zeros(x.shape[0])
        return trunc_poisson_logpmf(y[:, self.marks[0]], params.rate, self.bound)

    def draw_prior(self, hyper, rng):
        return TruncPoissonParams(float(rng.gamma(self.base.shape, 1.0 / hyper['rate'])), self.bound)

    def log_prior(self, params, hyper):
        if not params.rate > 0:
            return -np.inf
        return float(gamma_logpdf(params.rate, self.base.shape, hyper['rate']))

    def update_hyper(self, params_list, hyper, rng):
        if self.base.rate_prior is None:
            return hyper
        a, b = self.base.rate_prior
        m = len(params_list)
        total = float(sum(p.rate for p in params_list))
        return {'rate': float(rng.gamma(a + m * self.base.shape, 1.0 / (b + total)))}

    def log_hyperprior(self, hyper):
        if self.base.rate_prior is None:
            return 0.0
        return float(gamma_logpdf(hyper['rate'], *self.base.rate_prior))

    def suff(self, x, y):
        if not self.conjugate:
            return super().suff(x, y)
        v = y[:, self.marks[0]]
        return np.column_stack([np.ones_like(v), v, gammaln(v + 1.0)])

    def log_predictive(self, x_row, y_row, stats_rows, hyper):
        if not self.conjugate:
            return super().log_predictive(x_row, y_row, stats_rows, hyper)
        v = float(y_row[self.marks[0]])
        stats_rows = _as_array(stats_rows, 2)
        return _negbin_logpmf(v, self.base.shape + stats_rows[:, 1], hyper['rate'] + stats_rows[:, 0])

    def posterior_draw(self, stats_row, hyper, rng):
        if not self.conjugate:
            return super().posterior_draw(stats_row, hyper, rng)
        st = np.ravel(stats_row)
        return TruncPoissonParams(float(rng.gamma(self.base.shape + st[1], 1.0 / (hyper['rate'] + st[0]))), 0)

    def log_marginal(self, x, y, hyper, marks_used=None):
        if not self.uses_marks(marks_used):
            return np.zeros(x.shape[0])
        v = y[:, self.marks[0]]
        if self.conjugate:
            return _negbin_logpmf(v, self.base.shape, hyper['rate'])
        return np.array([_log_trunc_poisson_marginal(float(vi), self.base.shape, hyper['rate'], self.bound)
                         for vi in v])

    def metropolis(self, params, x, y, hyper, scale, rng):
        def log_target(u):
            rate = float(np.exp(u[0]))
            if not 0.0 < rate < np.inf:
                return -np.inf
            p = TruncPoissonParams(rate, self.bound)
            return float(np.sum(self.log_pdf(x, y, p))) + self.log_prior(p, hyper) + u[0]

        u, accepted = _metropolis(np.array([np.log(params.rate)]), log_target, scale, rng)
        return (TruncPoissonParams(float(np.exp(u[0])), self.bound) if accepted else params), accepted

    def mark_cdf(self, params, col, values, x, y, given=()):
        out = trunc_poisson_cdf(values, params.rate, self.bound)
        return np.broadcast_to(out, (x.shape[0],)) if np.ndim(out) == 0 else out

    def mark_mean(self, params, col, x, y, given=()):
        return np.full(x.shape[0], trunc_poisson_mean(params.rate, self.bound))

    def sample(self, params, n, rng):
        rate, bound = params.rate, self.bound
        if rate >= bound:
            out = np.empty(0)
            while out.shape[0] < n:
                draw = rng.poisson(rate, size=2 * (n - out.shape[0]) + 10).astype(float)
                out = np.concatenate([out, draw[draw >= bound]])
            return {}, {self.marks[0]: out[:n]}
        # 小率大下界: 从下界开始做逆 CDF 搜索
        log_tail = float(log_poisson_tail(bound, rate))
        u = rng.random(n)
        values = np.empty(n)
        for i in range(n):
            k = bound
            logp = float(xlogy(k, rate) - rate - gammaln(k + 1.0)) - log_tail
            cum = np.exp(logp)
            while cum < u[i] and cum < 1.0 - 1e-15:
                k += 1
                logp += np.log(rate) - np.log(k)
                cum += np.exp(logp)
            values[i] = k
        return {}, {self.marks[0]: values}


# ============================================================
# 联合核 / 混合模型
# ============================================================

class MixtureModel:
    """
    DP 混合的核与基测度规格: k(z; θ) = ∏_b k_b(z; θ_b)，g0 = ∏_b g0_b

    所有位置维必须恰好被一个块覆盖；标记列最多被一个块覆盖（未覆盖的标记留给半参数回归）
    """

    def __init__(self, blocks, dims, schema):
        self.blocks = tuple(blocks)
        self.dims = int(dims)
        self.schema = schema
        self._check()

    def problems(self):
        out = []
        owned = [d for b in self.blocks for d in b.dims]
        for d in range(self.dims):
            if owned.count(d) != 1:
                out.append(f"位置维 {d} 被 {owned.count(d)} 个核块覆盖（应为 1）")
        for d in owned:
            if not 0 <= d < self.dims:
                out.append(f"核块引用了不存在的位置维 {d}")
        marks = [c for b in self.blocks for c in b.marks]
        for c in set(marks):
            if not 0 <= c < len(self.schema):
                out.append(f"核块引用了不存在的标记列 {c}")
            elif marks.count(c) > 1:
                out.append(f"标记 {self.schema.marks[c].name} 被多个核块覆盖")
        for b in self.blocks:
            for c in b.marks:
                if not 0 <= c < len(self.schema):
                    continue
                desc = self.schema.marks[c]
                if isinstance(b, CategoricalBlock) and desc.kind != 'categorical':
                    out.append(f"标记 {desc.name} 为 {desc.kind} 型，不能用分类核")
                if isinstance(b, PoissonMarkBlock) and desc.kind != 'count':
                    out.append(f"标记 {desc.name} 为 {desc.kind} 型，不能用泊松核")
                if isinstance(b, PoissonMarkBlock) and desc.kind == 'count' and b.bound != desc.bound:
                    out.append(f"标记 {desc.name} 的截断下界 {desc.bound} 与泊松核的 {b.bound} 不一致")
                if isinstance(b, GaussianBlock) and desc.kind != 'continuous':
                    out.append(f"标记 {desc.name} 为 {desc.kind} 型，不能用正态核")
            if isinstance(b, (SarmanovBlock,)) and len(b.dims) != 2:
                out.append("Sarmanov 核需要两个位置维")
            if isinstance(b, UniformScaleBlock) and self.dims != 1:
                out.append("单调均匀尺度核只用于时间过程")
        return out

    def _check(self):
        problems = self.problems()
        if problems:
            raise ContractError('; '.join(problems))

    @property
    def conjugate(self):
        return all(b.conjugate for b in self.blocks)

    @property
    def modeled_marks(self):
        return tuple(sorted(c for b in self.blocks for c in b.marks))

    def block_for_dim(self, dim):
        for b in self.blocks:
            if dim in b.dims:
                return self.blocks.index(b)
        raise ContractError(f"没有核块覆盖位置维 {dim}")

    def block_for_mark(self, col):
        for b in self.blocks:
            if col in b.marks:
                return self.blocks.index(b)
        raise ContractError(f"标记列 {col} 未被模型覆盖")

    def init_hyper(self):
        return tuple(b.init_hyper() for b in self.blocks)

    def log_kernel(self, x, y, params, marks_used=None):
        out = np.zeros(x.shape[0])
        for b, p in zip(self.blocks, params.parts):
            out = out + b.log_pdf(x, y, p, marks_used)
        return out

    def draw_prior(self, hyper, rng):
        return ComponentParams(tuple(b.draw_prior(h, rng) for b, h in zip(self.blocks, hyper)))

    def log_prior(self, params, hyper):
        return float(sum(b.log_prior(p, h) for b, p, h in zip(self.blocks, params.parts, hyper)))

    def log_hyperprior(self, hyper):
        return float(sum(b.log_hyperprior(h) for b, h in zip(self.blocks, hyper)))

    def initial_params(self, x, y, hyper, rng):
        parts = []
        for k, (b, h) in enumerate(zip(self.blocks, hyper)):
            if b.conjugate:
                parts.append(b.posterior_draw(self.block_stats(k, x, y), h, rng))
            else:
                parts.append(b.initial_params(x, y, h, rng))
        return ComponentParams(tuple(parts))

    def suff(self, x, y):
        return [b.suff(x, y) for b in self.blocks]

    def block_stats(self, k, x, y):
        """第 k 块在一组事件上的充分统计量之和（空集返回全零行）"""
        b = self.blocks[k]
        if x.shape[0]:
            return b.suff(x, y).sum(axis=0)
        probe_x = np.full((1, self.dims), 0.5)
        probe_y = np.array([[probe_value(m) for m in self.schema.marks]]) if len(self.schema) else np.zeros((1, 0))
        return np.zeros(b.suff(probe_x, probe_y).shape[1])

    def log_predictive(self, x_row, y_row, stats_list, hyper):
        out = 0.0
        for b, st, h in zip(self.blocks, stats_list, hyper):
            out = out + b.log_predictive(x_row, y_row, st, h)
        return out

    def posterior_draw(self, stats_rows, hyper, rng):
        return ComponentParams(tuple(b.posterior_draw(st, h, rng) for b, st, h in zip(self.blocks, stats_rows, hyper)))

    def has_closed_marginal(self):
        return all(b.conjugate or isinstance(b, PoissonMarkBlock) for b in self.blocks)

    def log_marginal(self, x, y, hyper, marks_used=None):
        out = np.zeros(x.shape[0])
        for b, h in zip(self.blocks, hyper):
            out = out + b.log_marginal(x, y, h, marks_used)
        return out

    def update_params(self, params, x, y, hyper, scales, rng):
        """
        θ* 的全条件更新：共轭块精确抽样，其余块在变换坐标上做一步 Metropolis

        Returns:
            (新参数, 每块是否接受)
        """
        parts, accepted = [], []
        for k, (b, p, h) in enumerate(zip(self.blocks, params.parts, hyper)):
            if b.conjugate:
                parts.append(b.posterior_draw(self.block_stats(k, x, y), h, rng))
                accepted.append(True)
            else:
                new, ok = b.metropolis(p, x, y, h, scales[k], rng)
                parts.append(new)
                accepted.append(ok)
        return ComponentParams(tuple(parts)), accepted

    def update_hyper(self, params_list, hyper, rng):
        return tuple(b.update_hyper([p.parts[k] for p in params_list], h, rng)
                     for k, (b, h) in enumerate(zip(self.blocks, hyper)))

    def location_cdf(self, params, values, dim):
        k = self.block_for_dim(dim)
        return self.blocks[k].location_cdf(params.parts[k], values, dim)

    def sample(self, params, n, rng):
        x = np.full((n, self.dims), np.nan)
        y = np.full((n, len(self.schema)), np.nan)
        for b, p in zip(self.blocks, params.parts):
            locs, marks = b.sample(p, n, rng)
            for d, v in locs.items():
                x[:, d] = v
            for c, v in marks.items():
                y[:, c] = v
        return x, y


# ============================================================
# 由配置构建模型
# ============================================================

def probe_value(desc):
    """取值空间内的一个合法标记值，用于确定统计量维数"""
    if desc.kind == 'categorical':
        return 0.0
    if desc.kind == 'count':
        return float(desc.bound)
    return desc.lower + 1.0 if np.isfinite(desc.lower) else 0.0


def _resolve_mark(schema, ref):
    if isinstance(ref, str):
        return schema.index(ref)
    return int(ref)


def hyper_to_json(hyper):
    out = []
    for h in hyper:
        out.append({k: (np.asarray(v).tolist() if isinstance(v, np.ndarray) else float(v)) for k, v in h.items()})
    return out


def hyper_from_json(items):
    out = []
    for h in items:
        out.append({k: (np.array(v, dtype=float) if isinstance(v, list) else float(v)) for k, v in h.items()})
    return tuple(out)


def build_block(spec, schema):
    """
    按配置字典构建一个核块

    spec 例:
        {"family": "beta", "dims": [0], "base": {"shape": 2, "scale": 20, "scale_prior": [1, 0.05]}}
        {"family": "logit_normal", "dims": [0], "marks": ["deaths"],
         "base": {"delta": [0, 2.5], "kappa": 0.1, "nu": 3, "omega": [[0.3, 0], [0, 0.15]],
                  "omega_prior": [3, [[10, 0], [0, 20]]]}}
    """
    family = spec.get('family')
    base = dict(spec.get('base', {}))
    dims = tuple(spec.get('dims', ()))
    if family == 'beta':
        prior = base.get('scale_prior')
        return BetaBlock(BetaBase(float(base.get('shape', config.KERNEL_CONFIG['beta_shape'])),
                                  float(base.get('scale', 1.0)),
                                  tuple(prior) if prior else None), dims=dims or (0,))
    if family == 'sarmanov':
        prior = base.get('scale_prior')
        return SarmanovBlock(SarmanovBase(tuple(np.broadcast_to(base.get('nu', 2.0), (2,))),
                                          tuple(np.broadcast_to(base.get('scale', 1.0), (2,))),
                                          tuple(prior) if prior else None), dims=dims or (0, 1))
    if family == 'uniform_scale':
        a, b = base.get('beta', config.KERNEL_CONFIG['monotone_base'])
        return UniformScaleBlock(UniformBase(float(a), float(b)), dims=dims or (0,),
                                 direction=spec.get('direction', 'nonincreasing'))
    if family == 'logit_normal':
        marks = tuple(_resolve_mark(schema, m) for m in spec.get('marks', ()))
        prior = base.get('omega_prior')
        niw = NIWBase(base['delta'], float(base['kappa']), float(base['nu']), base['omega'],
                      (float(prior[0]), prior[1]) if prior else None)
        return LogitNormalBlock(niw, dims=dims, marks=marks, schema=schema)
    if family == 'normal':
        col = _resolve_mark(schema, spec['mark'])
        prior = base.get('omega_prior')
        nig = NIGBase(float(base.get('delta', 0.0)), float(base.get('kappa', 1.0)), float(base.get('nu', 2.0)),
                      float(base.get('omega', 1.0)), tuple(prior) if prior else None)
        return NormalMarkBlock(nig, col, schema)
    if family == 'categorical':
        col = _resolve_mark(schema, spec['mark'])
        levels = schema.marks[col].levels
        a = base.get('a', [1.0] * levels)
        return CategoricalBlock(DirichletBase(np.array(a, dtype=float)), col, levels)
    if family == 'poisson':
        col = _resolve_mark(schema, spec['mark'])
        prior = base.get('rate_prior')
        bound = int(spec.get('bound', schema.marks[col].bound))
        return PoissonMarkBlock(GammaBase(float(base['shape']), float(base['rate']),
                                          tuple(prior) if prior else None), col, bound)
    raise ParameterError(f"未知核族 {family}")


def build_model(block_specs, dims, schema):
    return MixtureModel([build_block(s, schema) for s in block_specs], dims, schema)
