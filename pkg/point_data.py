"""
点模式数据模块
负责时间/空间标记点模式的数据模型、CSV 读写，以及观测窗口到单位区间（正方形）的仿射缩放
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import BoundaryError, DataFormatError, ParameterError, SupportError


MARK_KINDS = ('categorical', 'count', 'continuous')
CONTINUOUS_SUPPORTS = ('real', 'positive', 'shifted')


@dataclass(frozen=True)
class ObservationWindow:
    """
    矩形观测窗口

    bounds 为各维原始单位（天、米）下的 (lo, hi)，
    缩放记录 offset = lo, scale = hi - lo，缩放后的窗口恰为 (0,1)^dims
    """

    bounds: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(bounds) not in (1, 2):
            raise ParameterError(f"窗口维数只能是 1 或 2, 实际为 {len(bounds)}")
        for d, (lo, hi) in enumerate(bounds):
            if not lo < hi:
                raise ParameterError(f"第 {d + 1} 维窗口下界 {lo} 不小于上界 {hi}")
        object.__setattr__(self, 'bounds', bounds)

    @classmethod
    def unit(cls, dims=1):
        return cls(tuple((0.0, 1.0) for _ in range(dims)))

    @property
    def dims(self):
        return len(self.bounds)

    @property
    def offset(self):
        return np.array([lo for lo, _ in self.bounds])

    @property
    def scale(self):
        return np.array([hi - lo for lo, hi in self.bounds])

    @property
    def area(self):
        """原始单位下的窗口体积"""
        return float(np.prod(self.scale))

    def to_unit(self, locations):
        locations = np.asarray(locations, dtype=float).reshape(-1, self.dims)
        return (locations - self.offset) / self.scale

    def to_native(self, unit_locations):
        unit_locations = np.asarray(unit_locations, dtype=float).reshape(-1, self.dims)
        return unit_locations * self.scale + self.offset


@dataclass(frozen=True)
class MarkDescriptor:
    """
    单个标记的描述

    kind:
        categorical - 取值编码为 0..levels-1
        count       - 整数，不小于截断下界 bound
        continuous  - support 为 real / positive / shifted（shifted 要求 y > offset）
    """

    name: str
    kind: str
    levels: int = 0
    bound: int = 0
    support: str = 'real'
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in MARK_KINDS:
            raise ParameterError(f"标记 {self.name}: 未知类型 {self.kind}")
        if self.kind == 'categorical' and self.levels < 2:
            raise ParameterError(f"标记 {self.name}: 分类标记至少需要 2 个水平")
        if self.kind == 'count' and (int(self.bound) != self.bound or self.bound < 0):
            raise ParameterError(f"标记 {self.name}: 截断下界必须是非负整数")
        if self.kind == 'continuous' and self.support not in CONTINUOUS_SUPPORTS:
            raise ParameterError(f"标记 {self.name}: 未知连续支撑 {self.support}")

    @property
    def lower(self):
        """连续标记的开下界（real 为 -inf）"""
        if self.support == 'positive':
            return 0.0
        if self.support == 'shifted':
            return float(self.offset)
        return -np.inf

    def check(self, values, row_offset=0):
        """检查一列标记值是否都在取值空间内，否则抛出 SupportError 并指明事件下标"""
        values = np.asarray(values, dtype=float)
        if self.kind == 'categorical':
            bad = (values != np.round(values)) | (values < 0) | (values >= self.levels)
            why = f"不在 0..{self.levels - 1} 内"
        elif self.kind == 'count':
            bad = (values != np.round(values)) | (values < self.bound)
            why = f"不是不小于 {self.bound} 的整数"
        else:
            bad = ~np.isfinite(values) | (values <= self.lower)
            why = f"不大于下界 {self.lower}"
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise SupportError(f"事件 #{i + row_offset} 的标记 {self.name}={values[i]} {why}")

    def to_dict(self):
        out = {'name': self.name, 'kind': self.kind}
        if self.kind == 'categorical':
            out['levels'] = self.levels
        elif self.kind == 'count':
            out['bound'] = self.bound
        else:
            out['support'] = self.support
            if self.support == 'shifted':
                out['offset'] = self.offset
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d['name'],
            kind=d['kind'],
            levels=int(d.get('levels', 0)),
            bound=int(d.get('bound', 0)),
            support=d.get('support', 'real'),
            offset=float(d.get('offset', 0.0)),
        )


@dataclass(frozen=True)
class MarkSchema:
    """有序的标记描述列表"""

    marks: Tuple[MarkDescriptor, ...] = ()

    def __len__(self):
        return len(self.marks)

    @property
    def names(self):
        return [m.name for m in self.marks]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ParameterError(f"标记 {name} 不在模式 {self.names} 中") from None

    def check(self, marks):
        if not self.marks:
            return
        marks = np.asarray(marks, dtype=float).reshape(-1, len(self.marks))
        for k, desc in enumerate(self.marks):
            desc.check(marks[:, k])

    def to_list(self):
        return [m.to_dict() for m in self.marks]

    @classmethod
    def from_list(cls, items):
        return cls(tuple(MarkDescriptor.from_dict(d) for d in items or []))


@dataclass(frozen=True)
class MarkedPointPattern:
    """
    单位窗口上的标记点模式

    locations: (N, dims)，每个坐标严格位于 (0,1)
    marks:     (N, 标记个数)，分类与计数标记以浮点数存储
    """

    window: ObservationWindow
    schema: MarkSchema
    locations: np.ndarray
    marks: np.ndarray = field(default=None)

    def __post_init__(self):
        dims = self.window.dims
        locations = np.asarray(self.locations, dtype=float).reshape(-1, dims)
        n = locations.shape[0]
        if self.marks is None:
            marks = np.zeros((n, len(self.schema)))
        else:
            marks = np.asarray(self.marks, dtype=float).reshape(n, len(self.schema))
        inside = np.all((locations > 0.0) & (locations < 1.0), axis=1)
        if not np.all(inside):
            i = int(np.flatnonzero(~inside)[0])
            raise BoundaryError(i, tuple(locations[i]), '(0,1)')
        self.schema.check(marks)
        locations.setflags(write=False)
        marks.setflags(write=False)
        object.__setattr__(self, 'locations', locations)
        object.__setattr__(self, 'marks', marks)

    @property
    def N(self):
        return self.locations.shape[0]

    @property
    def dims(self):
        return self.window.dims

    def native_locations(self):
        return self.window.to_native(self.locations)

    def order(self, dim=0):
        """按某一维坐标的稳定排序（并列时保持文件顺序）"""
        return np.argsort(self.locations[:, dim], kind='stable')


def rescale_window(raw_events, native_window, schema=None):
    """
    将原始单位下的事件仿射映射到单位窗口

    Args:
        raw_events: [(location, marks), ...]，location 为标量或长度 dims 的序列
        native_window: ObservationWindow，原始单位
        schema: MarkSchema，缺省表示无标记

    Returns:
        MarkedPointPattern
    """
    schema = schema or MarkSchema()
    dims = native_window.dims
    n = len(raw_events)
    locations = np.empty((n, dims))
    marks = np.empty((n, len(schema)))
    for i, (loc, mk) in enumerate(raw_events):
        locations[i] = np.asarray(loc, dtype=float).reshape(dims)
        mk = np.asarray(mk if mk is not None else [], dtype=float).reshape(-1)
        if mk.shape[0] != len(schema):
            raise DataFormatError(f"事件 #{i} 有 {mk.shape[0]} 个标记, 模式要求 {len(schema)} 个")
        marks[i] = mk

    # 边界上的点直接拒绝，不做微调
    for d, (lo, hi) in enumerate(native_window.bounds):
        bad = ~((locations[:, d] > lo) & (locations[:, d] < hi))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise BoundaryError(i, tuple(locations[i]), native_window.bounds)

    unit = native_window.to_unit(locations)
    # 浮点舍入可能把贴近边界的点推到 0 或 1 上
    unit_bad = ~np.all((unit > 0.0) & (unit < 1.0), axis=1)
    if np.any(unit_bad):
        i = int(np.flatnonzero(unit_bad)[0])
        raise BoundaryError(i, tuple(locations[i]), native_window.bounds)
    return MarkedPointPattern(native_window, schema, unit, marks)


def _location_columns(fmt):
    if fmt == 'temporal':
        return ['t']
    if fmt == 'spatial':
        return ['x1', 'x2']
    raise DataFormatError(f"未知数据格式 {fmt}，应为 temporal 或 spatial")


def load_pattern(path, fmt, schema, native_window):
    """
    读取 CSV 点模式（必须带表头）

    参数:
        path: CSV 路径；时间数据列为 t[,marks...]，空间数据列为 x1,x2[,marks...]
        fmt: 'temporal' 或 'spatial'
        schema: MarkSchema，标记列按名称读取
        native_window: 原始单位的观测窗口（来自运行配置，不从数据推断）

    返回:
        MarkedPointPattern，事件顺序与文件一致
    """
    loc_cols = _location_columns(fmt)
    if len(loc_cols) != native_window.dims:
        raise DataFormatError(f"{fmt} 数据需要 {len(loc_cols)} 维窗口, 配置给出 {native_window.dims} 维")

    try:
        df = pd.read_csv(path, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"无法解析 {path}: {e}") from e

    df.columns = [str(c).strip() for c in df.columns]
    needed = loc_cols + schema.names
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise DataFormatError(f"{path} 缺少列: {', '.join(missing)}")

    try:
        table = df[needed].apply(pd.to_numeric, errors='raise').to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise DataFormatError(f"{path} 含有非数值数据: {e}") from e

    table = table.reshape(-1, len(needed))
    locations = table[:, :len(loc_cols)]
    marks = table[:, len(loc_cols):]
    schema.check(marks)
    events = [(locations[i], marks[i]) for i in range(table.shape[0])]
    return rescale_window(events, native_window, schema)


def write_pattern(pattern, path, native=True):
    """将点模式写成 CSV（默认写回原始单位）"""
    loc_cols = ['t'] if pattern.dims == 1 else ['x1', 'x2']
    locations = pattern.native_locations() if native else pattern.locations
    data = {c: locations[:, d] for d, c in enumerate(loc_cols)}
    for k, desc in enumerate(pattern.schema.marks):
        col = pattern.marks[:, k]
        data[desc.name] = col.astype(int) if desc.kind != 'continuous' else col
    pd.DataFrame(data, columns=loc_cols + pattern.schema.names).to_csv(
        path, index=False, float_format='%.17g')
    return path


if __name__ == '__main__':
    # 测试代码
    window = ObservationWindow(((0.0, 200.0), (0.0, 200.0)))
    pattern = rescale_window([((100.0, 50.0), None), ((20.0, 180.0), None)], window)
    print(f"事件数: {pattern.N}")
    print(f"单位窗口坐标:\n{pattern.locations}")
    print(f"还原坐标:\n{pattern.native_locations()}")
