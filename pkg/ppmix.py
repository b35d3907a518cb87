#!/usr/bin/env python3
"""
标记泊松过程 DP 混合模型 - 命令行入口

用法:
    python ppmix.py run --preset sim51
    python ppmix.py fit --config my_run.json --iters 2000 --chains 2
    python ppmix.py diagnose --preset coal-direct --out output/coal
    python ppmix.py verify --out output/sim51
"""

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import scipy

import config
from diagnostics import KINDS as QQ_KINDS, posterior_qq
from dp_sampler import McmcConfig, load_chain, run_chains, save_chain
from errors import ConfigError, PpmixError, ValidationError
from functionals import (CurveSummary, conditional_mark_density, conditional_mark_mean, intensity_curve,
                         lambda_posterior, mark_matrix, posterior_curve, product_grid, unit_grid)
from kernels import build_model
from point_data import MarkSchema, ObservationWindow, load_pattern, write_pattern
from random_measure import choose_truncation
from simulate import SimSpec, homogeneous_intensity, section51_spec, simulate_nhpp


COMMANDS = ('simulate', 'fit', 'functionals', 'diagnose', 'run')
GENERATORS = ('section51', 'homogeneous')
CURVE_KINDS = ('intensity', 'mark_mean', 'mark_density')
MANIFEST = 'manifest.json'


# ============================================================
# 运行配置
# ============================================================

@dataclass
class RunConfig:
    """一次运行的完整配置（JSON 文档解析而来，缺省值已补齐）"""

    name: str
    command: str
    data: dict
    model: dict
    mcmc: McmcConfig
    intensity_prior: object = 'reference'
    truncation: dict = field(default_factory=dict)
    functionals: dict = field(default_factory=dict)
    diagnostics: List[dict] = field(default_factory=list)
    output: str = ''
    chains: int = 1
    notes: List[str] = field(default_factory=list)

    # 由 validate() 填入
    window: Optional[ObservationWindow] = None
    schema: Optional[MarkSchema] = None

    def to_dict(self):
        return {
            'name': self.name,
            'command': self.command,
            'data': self.data,
            'model': self.model,
            'mcmc': self.mcmc.to_dict(),
            'intensity_prior': self.intensity_prior,
            'truncation': self.truncation,
            'functionals': self.functionals,
            'diagnostics': self.diagnostics,
            'output': self.output,
            'chains': self.chains,
            'notes': self.notes,
        }

    def canonical_text(self):
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, indent=2)

    def sha256(self):
        return hashlib.sha256(self.canonical_text().encode('utf-8')).hexdigest()

    @property
    def output_dir(self):
        if os.path.isabs(self.output):
            return self.output
        return os.path.join(config.OUTPUT_DIR, self.output or self.name)

    @property
    def data_path(self):
        path = self.data.get('path', '')
        return path if os.path.isabs(path) else os.path.join(config.DATA_DIR, path)


def _default_functionals(d):
    out = {
        'grid_size': config.FUNCTIONAL_CONFIG['grid_size'],
        'quantiles': list(config.FUNCTIONAL_CONFIG['quantiles']),
        'draws_per_state': config.FUNCTIONAL_CONFIG['draws_per_state'],
        'curves': [{'kind': 'intensity'}],
    }
    out.update(d or {})
    return out


def _default_truncation(d):
    out = {'tolerance': config.TRUNCATION_CONFIG['tolerance'], 'level': None}
    out.update(d or {})
    return out


def parse_config(raw):
    """
    解析运行配置并补齐缺省值

    Args:
        raw: 已解析的 JSON 字典

    Returns:
        RunConfig（尚未校验，见 validate_config）
    """
    if not isinstance(raw, dict):
        raise ConfigError("配置必须是 JSON 对象")
    known = {'name', 'command', 'data', 'model', 'mcmc', 'intensity_prior', 'truncation',
             'functionals', 'diagnostics', 'output', 'chains', 'notes'}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError([f"未知配置字段 {k}" for k in unknown])
    try:
        mcmc = McmcConfig.from_dict(raw.get('mcmc'))
    except TypeError as e:
        raise ConfigError(f"mcmc 段不合法: {e}") from e
    prior = raw.get('intensity_prior', 'reference')
    return RunConfig(
        name=str(raw.get('name', 'run')),
        command=str(raw.get('command', 'run')),
        data=dict(raw.get('data') or {}),
        model=dict(raw.get('model') or {}),
        mcmc=mcmc,
        intensity_prior=list(prior) if isinstance(prior, (list, tuple)) else prior,
        truncation=_default_truncation(raw.get('truncation')),
        functionals=_default_functionals(raw.get('functionals')),
        diagnostics=list(raw.get('diagnostics') or []),
        output=str(raw.get('output', '')),
        chains=raw.get('chains', 1),
        notes=list(raw.get('notes') or []),
    )


def validate_config(cfg):
    """逐项检查配置，收集全部问题后一次性抛出 ConfigError"""
    problems = []
    if cfg.command not in COMMANDS:
        problems.append(f"command={cfg.command} 应为 {COMMANDS} 之一")
    problems.extend(cfg.mcmc.problems())
    if not isinstance(cfg.chains, int) or cfg.chains < 1:
        problems.append(f"chains={cfg.chains} 必须是正整数")

    data = cfg.data
    try:
        cfg.window = ObservationWindow(tuple(tuple(b) for b in data.get('window', [])))
    except (ValidationError, TypeError, ValueError) as e:
        problems.append(f"data.window 不合法: {e}")
    try:
        cfg.schema = MarkSchema.from_list(data.get('schema', []))
    except (ValidationError, KeyError, TypeError) as e:
        problems.append(f"data.schema 不合法: {e}")

    source = data.get('source')
    if source == 'file':
        if data.get('format') not in ('temporal', 'spatial'):
            problems.append(f"data.format={data.get('format')} 应为 temporal 或 spatial")
        if not os.path.isfile(cfg.data_path):
            problems.append(f"数据文件不存在: {cfg.data_path}")
    elif source == 'simulate':
        if data.get('generator') not in GENERATORS:
            problems.append(f"data.generator={data.get('generator')} 应为 {GENERATORS} 之一")
        if data.get('generator') == 'homogeneous' and not data.get('rate', 0) > 0:
            problems.append("homogeneous 生成器需要正的 rate")
    else:
        problems.append(f"data.source={source} 应为 file 或 simulate")

    prior = cfg.intensity_prior
    if prior != 'reference' and not (isinstance(prior, list) and len(prior) == 2 and min(prior) > 0):
        problems.append(f"intensity_prior={prior} 应为 'reference' 或两个正数")

    tol = cfg.truncation.get('tolerance')
    if not (isinstance(tol, (int, float)) and 0 < tol < 1):
        problems.append(f"truncation.tolerance={tol} 必须位于 (0,1)")
    level = cfg.truncation.get('level')
    if level is not None and (not isinstance(level, int) or level < 1):
        problems.append(f"truncation.level={level} 必须是正整数")

    model = None
    if cfg.window is not None and cfg.schema is not None:
        try:
            model = build_model(cfg.model.get('blocks', []), cfg.window.dims, cfg.schema)
        except (ValidationError, KeyError, TypeError, ValueError) as e:
            problems.append(f"model 不合法: {e}")

    fn = cfg.functionals
    q = fn.get('quantiles', [])
    if not (len(q) == 2 and 0 <= q[0] < q[1] <= 1):
        problems.append(f"functionals.quantiles={q} 必须满足 0 ≤ lo < hi ≤ 1")
    for k, curve in enumerate(fn.get('curves', [])):
        if curve.get('kind') not in CURVE_KINDS:
            problems.append(f"functionals.curves[{k}].kind={curve.get('kind')} 应为 {CURVE_KINDS} 之一")
        elif curve['kind'] != 'intensity':
            problems.extend(_mark_problems(cfg.schema, curve, f"functionals.curves[{k}]"))
            if curve['kind'] == 'mark_density' and not (curve.get('at') and len(curve.get('range', [])) == 2):
                problems.append(f"functionals.curves[{k}] 需要 at 和 range")
    for k, diag in enumerate(cfg.diagnostics):
        if diag.get('kind') not in QQ_KINDS:
            problems.append(f"diagnostics[{k}].kind={diag.get('kind')} 应为 {QQ_KINDS} 之一")
        elif diag['kind'] == 'mark':
            problems.extend(_mark_problems(cfg.schema, diag, f"diagnostics[{k}]"))

    if problems:
        raise ConfigError(problems)
    return model


def _mark_problems(schema, item, where):
    if schema is None:
        return []
    out = []
    for name in [item.get('mark')] + list((item.get('given') or {}).keys()):
        if name not in schema.names:
            out.append(f"{where} 引用了未知标记 {name}")
    return out


def load_config(path=None, preset=None):
    if preset:
        path = os.path.join(config.PRESET_DIR, f"{preset}.json")
    if not path:
        raise ConfigError("必须给出 --config 或 --preset")
    if not os.path.isfile(path):
        raise ConfigError(f"配置文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} 不是合法 JSON: {e}") from e
    return parse_config(raw)


def apply_overrides(cfg, args):
    """命令行参数覆盖配置字段"""
    if args.command:
        cfg.command = args.command
    if args.seed is not None:
        cfg.mcmc.seed = args.seed
    if args.iters is not None:
        cfg.mcmc.iterations = args.iters
    if args.burnin is not None:
        cfg.mcmc.burn_in = args.burnin
    if args.thin is not None:
        cfg.mcmc.thin = args.thin
    if args.chains is not None:
        cfg.chains = args.chains
    if args.out:
        cfg.output = os.path.abspath(args.out)
    return cfg


# ============================================================
# 流水线
# ============================================================

def obtain_pattern(cfg):
    data = cfg.data
    if data['source'] == 'file':
        return load_pattern(cfg.data_path, data['format'], cfg.schema, cfg.window)
    seed = int(data.get('seed', cfg.mcmc.seed))
    if data['generator'] == 'section51':
        spec = section51_spec(seed)
    else:
        spec = SimSpec(intensity=homogeneous_intensity(data['rate']), bound=float(data['rate']),
                       window=cfg.window, schema=cfg.schema, seed=seed)
    return simulate_nhpp(spec, np.random.default_rng(seed))


def _chain_files(cfg):
    if cfg.chains == 1:
        return ['chain.jsonl']
    return [f"chain_{k + 1}.jsonl" for k in range(cfg.chains)]


def _load_chains(cfg):
    paths = [os.path.join(cfg.output_dir, name) for name in _chain_files(cfg)]
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise ConfigError([f"链文件不存在: {p}（先运行 fit）" for p in missing])
    return [load_chain(p) for p in paths]


def _truncation_level(cfg):
    level = cfg.truncation.get('level')
    if level:
        return level
    if cfg.mcmc.alpha_prior is None:
        return choose_truncation(alpha=cfg.mcmc.alpha, tolerance=cfg.truncation['tolerance'])
    return choose_truncation(alpha_prior=cfg.mcmc.alpha_prior, tolerance=cfg.truncation['tolerance'],
                             rng=np.random.default_rng([cfg.mcmc.seed, 0]))


def _grid(cfg):
    axis = unit_grid(cfg.functionals['grid_size'])
    axes = tuple(axis for _ in range(cfg.window.dims))
    return (axis[:, np.newaxis] if cfg.window.dims == 1 else product_grid(*axes)), axes


def _native(cfg, points, axes):
    native = cfg.window.to_native(points)
    native_axes = tuple(a * s + o for a, s, o in zip(axes, cfg.window.scale, cfg.window.offset))
    return native, native_axes


def _given_suffix(given):
    return ''.join(f"_{k}{v:g}" for k, v in sorted(given.items()))


def compute_functionals(cfg, model, pattern, chain, verbose=True):
    """按配置计算全部曲线并写出 CSV，返回写出的文件列表"""
    fn = cfg.functionals
    rng = np.random.default_rng([cfg.mcmc.seed, 1])
    level = _truncation_level(cfg)
    quantiles = tuple(fn['quantiles'])
    draws = fn['draws_per_state']
    points, axes = _grid(cfg)
    native_points, native_axes = _native(cfg, points, axes)
    written = []
    if verbose:
        print(f"\n计算后验泛函: {len(chain)} 个状态, 截断水平 L={level}")

    for curve in fn['curves']:
        kind = curve['kind']
        if kind == 'intensity':
            lam_post = lambda_posterior(pattern.N, _prior(cfg))
            summary = intensity_curve(chain, model, lam_post, points, level, rng, draws, quantiles,
                                      scale=cfg.window.area, axes=axes)
            summary = _relabel(summary, native_points, native_axes)
            name = 'intensity.csv'
        elif kind == 'mark_mean':
            given = curve.get('given') or {}
            y = mark_matrix(model, points.shape[0], given)
            summary = posterior_curve(
                chain, model, level, rng,
                lambda mix, st: conditional_mark_mean(mix, model, points, curve['mark'], y, tuple(given)),
                points, draws, quantiles, axes=axes)
            summary = _relabel(summary, native_points, native_axes)
            name = f"mark_mean_{curve['mark']}{_given_suffix(given)}.csv"
        else:
            given = curve.get('given') or {}
            lo, hi = curve['range']
            ys = np.linspace(lo, hi, fn['grid_size'])
            for at in curve['at']:
                x = np.tile(np.atleast_1d(np.asarray(at, dtype=float)), (ys.shape[0], 1))
                y = mark_matrix(model, ys.shape[0], dict(given, **{curve['mark']: ys}))
                summary = posterior_curve(
                    chain, model, level, rng,
                    lambda mix, st: conditional_mark_density(mix, model, x, y, curve['mark'], tuple(given)),
                    ys, draws, quantiles, columns=(curve['mark'],))
                tag = '_'.join(f"{v:g}" for v in np.atleast_1d(at))
                path = os.path.join(cfg.output_dir, f"mark_density_{curve['mark']}_at_{tag}{_given_suffix(given)}.csv")
                written.append(summary.to_csv(path))
                if verbose:
                    print(f"  ✓ {os.path.basename(path)}")
            continue
        path = summary.to_csv(os.path.join(cfg.output_dir, name))
        written.append(path)
        if verbose:
            print(f"  ✓ {name}")
    return written


def _relabel(summary, native_points, native_axes):
    """把单位窗口网格换成原始单位的坐标"""
    return CurveSummary(native_points, summary.mean, summary.lower, summary.upper,
                        axes=native_axes, draws=summary.draws)


def _prior(cfg):
    return 'reference' if cfg.intensity_prior == 'reference' else tuple(cfg.intensity_prior)


def compute_diagnostics(cfg, model, pattern, chain, verbose=True):
    rng = np.random.default_rng([cfg.mcmc.seed, 2])
    level = _truncation_level(cfg)
    lam_post = lambda_posterior(pattern.N, _prior(cfg))
    written = []
    if verbose:
        print(f"\n模型检验: {len(cfg.diagnostics)} 项")
    for diag in cfg.diagnostics:
        kind = diag['kind']
        given = diag.get('given') or {}
        qq = posterior_qq(chain, model, pattern, kind, level, lam_post, rng,
                          mark=diag.get('mark'), given=tuple(given))
        name = f"qq_{kind}" + (f"_{diag['mark']}" if kind == 'mark' else '') + '.csv'
        written.append(qq.to_csv(os.path.join(cfg.output_dir, name)))
        if verbose:
            print(f"  ✓ {name}: KS 均值 {np.mean(qq.ks):.4f}")
    return written


def write_manifest(cfg, paths):
    """
    写出 manifest.json：本次运行写出或读入的文件及其 sha256，并记录种子、配置哈希和版本

    输出目录里其他运行遗留的文件不计入
    """
    out = cfg.output_dir
    files = {}
    for path in paths:
        name = os.path.basename(path)
        if name != MANIFEST and os.path.isfile(path):
            files[name] = _file_sha256(path)
    manifest = {
        'name': cfg.name,
        'command': cfg.command,
        'seed': cfg.mcmc.seed,
        'config_sha256': cfg.sha256(),
        'config': cfg.to_dict(),
        'versions': {
            'python': platform.python_version(),
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'pandas': pd.__version__,
        },
        'notes': cfg.notes,
        'files': files,
    }
    path = os.path.join(out, MANIFEST)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
    return path


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            h.update(block)
    return h.hexdigest()


def verify_manifest(out_dir):
    """重新计算输出文件哈希，返回不一致的文件名列表"""
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.isfile(path):
        raise ConfigError(f"清单不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    bad = []
    for name, digest in manifest['files'].items():
        target = os.path.join(out_dir, name)
        if not os.path.isfile(target) or _file_sha256(target) != digest:
            bad.append(name)
    return bad


def run_experiment(cfg, verbose=True):
    """
    执行一次运行

    Args:
        cfg: RunConfig
        verbose: 是否打印进度

    Returns:
        写出的文件路径列表
    """
    command = cfg.command
    model = validate_config(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    if verbose:
        print("=" * 60)
        print(f"ppmix {command}: {cfg.name}")
        print(f"输出目录: {cfg.output_dir}")
        print("=" * 60)

    pattern = obtain_pattern(cfg)
    if verbose:
        print(f"  ✓ 数据: N={pattern.N}, 维数 {pattern.dims}, 标记 {pattern.schema.names}")
    written = []

    if command in ('simulate', 'run') and cfg.data['source'] == 'simulate':
        written.append(write_pattern(pattern, os.path.join(cfg.output_dir, 'data.csv')))

    if command in ('fit', 'run'):
        chains = run_chains(pattern, model, cfg.mcmc, cfg.chains, verbose)
        for chain, name in zip(chains, _chain_files(cfg)):
            written.append(save_chain(chain, os.path.join(cfg.output_dir, name)))

    inputs = []
    if command in ('functionals', 'diagnose', 'run'):
        # 多条链的保存状态合并使用
        inputs = [os.path.join(cfg.output_dir, name) for name in _chain_files(cfg)]
        chain = [st for ch in _load_chains(cfg) for st in ch]
        if command in ('functionals', 'run'):
            written.extend(compute_functionals(cfg, model, pattern, chain, verbose))
        if command in ('diagnose', 'run'):
            written.extend(compute_diagnostics(cfg, model, pattern, chain, verbose))

    written.append(write_manifest(cfg, sorted(set(written) | set(inputs))))
    if verbose:
        print(f"\n完成！写出 {len(written)} 个文件")
    return written


# ============================================================
# 命令行
# ============================================================

def build_parser():
    parser = argparse.ArgumentParser(prog='ppmix', description='标记非齐次泊松过程的 DP 混合建模')
    parser.add_argument('command', choices=COMMANDS + ('verify',), help='要执行的命令')
    parser.add_argument('--config', help='运行配置 JSON 路径')
    parser.add_argument('--preset', help='presets/ 下的预设名（不含 .json）')
    parser.add_argument('--seed', type=int, help='随机种子')
    parser.add_argument('--iters', type=int, help='MCMC 迭代次数')
    parser.add_argument('--burnin', type=int, help='预烧期长度')
    parser.add_argument('--thin', type=int, help='稀疏间隔')
    parser.add_argument('--chains', type=int, help='并发链数')
    parser.add_argument('--out', help='输出目录')
    parser.add_argument('--quiet', action='store_true', help='不打印进度')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == 'verify':
            if args.out:
                out = args.out
            else:
                out = load_config(args.config, args.preset).output_dir
            bad = verify_manifest(out)
            if bad:
                print(f"✗ 以下文件与清单不一致: {', '.join(bad)}")
                return config.EXIT_CODES['validation']
            print("✓ 清单校验通过")
            return config.EXIT_CODES['ok']
        cfg = apply_overrides(load_config(args.config, args.preset), args)
        run_experiment(cfg, verbose=not args.quiet)
        return config.EXIT_CODES['ok']
    except PpmixError as e:
        print(f"✗ {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
