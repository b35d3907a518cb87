"""
模拟模块
稀释法模拟非齐次泊松过程、按位置生成标记，以及合成实验的数据生成器
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import stats

import config
from errors import ContractError, DominationError, ParameterError
from point_data import MarkDescriptor, MarkedPointPattern, MarkSchema, ObservationWindow


@dataclass(frozen=True)
class SimSpec:
    """
    稀释法的输入

    intensity: 单位窗口上的强度函数，接收 (n, dims) 坐标返回 (n,)
    bound: 控制上界 λ_max，须不小于 sup λ
    marks: 可选的标记生成器 (locations, rng) -> (n, 标记数)
    """

    intensity: Callable
    bound: float
    window: ObservationWindow = ObservationWindow.unit(1)
    schema: MarkSchema = MarkSchema()
    marks: Optional[Callable] = None
    seed: int = config.DEFAULT_SEED

    @property
    def dims(self):
        return self.window.dims


def _uniform_open(rng, size):
    """(0,1) 上的均匀数，剔除恰为 0 的抽样"""
    u = rng.random(size)
    while np.any(u == 0.0):
        zero = u == 0.0
        u[zero] = rng.random(int(zero.sum()))
    return u


def simulate_nhpp(spec, rng=None):
    """
    稀释法: 候选点数 ~ Po(λ_max × 单位窗口体积)，每个候选以 λ(x)/λ_max 的概率保留

    λ(x) > λ_max 时抛出 DominationError，不做截断
    """
    if not spec.bound > 0:
        raise ParameterError(f"控制上界 λ_max={spec.bound} 必须为正")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = rng.poisson(spec.bound)
    cand = _uniform_open(rng, (n, spec.dims))
    lam = np.asarray(spec.intensity(cand), dtype=float).reshape(n)
    over = np.flatnonzero(lam > spec.bound)
    if over.size:
        i = int(over[0])
        raise DominationError(f"候选点 {cand[i].tolist()} 处强度 {lam[i]} 超过上界 {spec.bound}")
    keep = rng.random(n) * spec.bound < lam
    locations = cand[keep]
    marks = simulate_marks(locations, spec.marks, rng, len(spec.schema)) if spec.marks else None
    return MarkedPointPattern(spec.window, spec.schema, locations, marks)


def simulate_marks(locations, generator, rng, width=None):
    """给定位置逐事件独立生成标记"""
    locations = np.asarray(locations, dtype=float)
    marks = np.asarray(generator(locations, rng), dtype=float)
    n = locations.shape[0]
    return marks.reshape(n, -1 if width is None else width)


def homogeneous_intensity(rate):
    def intensity(x):
        return np.full(np.asarray(x).shape[0], float(rate))
    return intensity


# 合成实验：两个 beta 密度混合的时间强度，Λ_R = 500
SECTION51_TOTAL = 500.0
SECTION51_BOUND = 2500.0
SECTION51_SCHEMA = MarkSchema((
    MarkDescriptor('z', 'categorical', levels=2),
    MarkDescriptor('y', 'continuous', support='real'),
))


def section51_intensity(t):
    """λ(t) = 250(b(t; 1/11, 11) + b(t; 4/7, 7))，即 250(Beta(1,10) + Beta(4,3))"""
    t = np.asarray(t, dtype=float).reshape(-1)
    return 0.5 * SECTION51_TOTAL * (stats.beta.pdf(t, 1.0, 10.0) + stats.beta.pdf(t, 4.0, 3.0))


def section51_marks(locations, rng):
    """
    z ~ Bern(t²)；y = -10(1-t)^4 + ε，z=0 时 ε ~ N(0,1)，z=1 时 ε ~ ga(4,1)
    """
    t = np.asarray(locations, dtype=float).reshape(-1)
    n = t.shape[0]
    z = (rng.random(n) < t ** 2).astype(float)
    eps = np.where(z == 1.0, rng.gamma(4.0, 1.0, size=n), rng.standard_normal(n))
    y = -10.0 * (1.0 - t) ** 4 + eps
    return np.column_stack([z, y])


def section51_spec(seed=None):
    return SimSpec(intensity=section51_intensity, bound=SECTION51_BOUND,
                   window=ObservationWindow.unit(1), schema=SECTION51_SCHEMA,
                   marks=section51_marks, seed=config.DEFAULT_SEED if seed is None else seed)


def simulate_section51(seed=None):
    """按固定种子生成合成实验的标记时间模式"""
    spec = section51_spec(seed)
    return simulate_nhpp(spec, np.random.default_rng(spec.seed))


def simulate_from_mixture(mixture, model, lam_R, window, schema, rng):
    """
    从已知 G_L 与 Λ_R 模拟: N ~ Po(Λ_R)，按权重分配原子，再从原子核中抽位置和标记
    """
    if model.modeled_marks != tuple(range(len(schema))):
        raise ContractError("模型必须覆盖全部标记列才能整体模拟")
    n = rng.poisson(lam_R)
    weights = mixture.weights
    alloc = rng.choice(weights.shape[0], size=n, p=weights / weights.sum())
    x = np.empty((n, model.dims))
    y = np.empty((n, len(schema)))
    for k, atom in enumerate(mixture.atoms):
        idx = np.flatnonzero(alloc == k)
        if idx.size:
            x[idx], y[idx] = model.sample(atom, idx.size, rng)
    # 浮点下 beta 或 expit 抽样可能恰好落在 0 或 1 上
    x = np.clip(x, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    # 保持事件在时间（第一维）上有序，便于写出
    order = np.argsort(x[:, 0], kind='stable') if n else np.arange(0)
    return MarkedPointPattern(window, schema, x[order], y[order])
