"""
DP 混合后验的 MCMC 采样模块
共轭模型走折叠 Gibbs 分配，非共轭模型走辅助分量分配（Neal 算法 8），
每轮依次更新 分配 -> 分量参数 -> 基测度超参数 -> 精度参数 α
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammaln
from tqdm import tqdm

import config
from errors import ConfigError, ContractError, DataFormatError, NonFiniteLikelihoodError
from kernels import ComponentParams, gamma_logpdf, hyper_from_json, hyper_to_json, sample_log_weights


SAMPLERS = ('auto', 'gibbs', 'aux')


@dataclass
class McmcConfig:
    """
    MCMC 运行参数

    alpha_prior 为 α 的伽马先验 (a, b)；设为 None 时 α 固定为 alpha
    """

    iterations: int = config.MCMC_CONFIG['iterations']
    burn_in: int = config.MCMC_CONFIG['burn_in']
    thin: int = config.MCMC_CONFIG['thin']
    seed: int = config.MCMC_CONFIG['seed']
    proposal_scale: float = config.MCMC_CONFIG['proposal_scale']
    aux_count: int = config.MCMC_CONFIG['aux_count']
    adapt_target: float = config.MCMC_CONFIG['adapt_target']
    alpha_prior: Optional[Tuple[float, float]] = config.MCMC_CONFIG['alpha_prior']
    alpha: Optional[float] = None
    sampler: str = 'auto'
    debug: bool = config.MCMC_CONFIG['debug']

    def problems(self):
        out = []
        if not isinstance(self.iterations, int) or self.iterations < 1:
            out.append(f"iterations={self.iterations} 必须是正整数")
        if not isinstance(self.burn_in, int) or self.burn_in < 0:
            out.append(f"burn_in={self.burn_in} 必须是非负整数")
        elif isinstance(self.iterations, int) and self.burn_in >= self.iterations:
            out.append(f"burn_in={self.burn_in} 必须小于 iterations={self.iterations}")
        if not isinstance(self.thin, int) or self.thin < 1:
            out.append(f"thin={self.thin} 必须不小于 1")
        if not isinstance(self.aux_count, int) or self.aux_count < 1:
            out.append(f"aux_count={self.aux_count} 必须不小于 1")
        if not self.proposal_scale > 0:
            out.append(f"proposal_scale={self.proposal_scale} 必须为正")
        if not 0.0 < self.adapt_target < 1.0:
            out.append(f"adapt_target={self.adapt_target} 必须位于 (0,1)")
        if self.alpha_prior is None:
            if self.alpha is None or not self.alpha > 0:
                out.append("α 固定时必须给出正的 alpha")
        elif len(self.alpha_prior) != 2 or min(self.alpha_prior) <= 0:
            out.append(f"alpha_prior={self.alpha_prior} 必须是两个正数 (a, b)")
        if self.sampler not in SAMPLERS:
            out.append(f"sampler={self.sampler} 应为 {SAMPLERS} 之一")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def saved_count(self):
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self):
        return {
            'iterations': self.iterations, 'burn_in': self.burn_in, 'thin': self.thin,
            'seed': self.seed, 'proposal_scale': self.proposal_scale, 'aux_count': self.aux_count,
            'adapt_target': self.adapt_target,
            'alpha_prior': list(self.alpha_prior) if self.alpha_prior is not None else None,
            'alpha': self.alpha, 'sampler': self.sampler, 'debug': self.debug,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError([f"mcmc 段含未知字段 {k}" for k in sorted(unknown)])
        if d.get('alpha_prior') is not None:
            d['alpha_prior'] = tuple(d['alpha_prior'])
        return cls(**d)


@dataclass
class ChainState:
    """
    链的一个状态

    s 为分配向量，thetas[j] 为第 j 个占用聚类的参数；计数由 s 推出，
    不保留空聚类
    """

    s: np.ndarray
    thetas: List[ComponentParams]
    alpha: float
    hyper: tuple
    iteration: int = 0
    scales: np.ndarray = field(default=None)
    acceptance: np.ndarray = field(default=None)

    @property
    def N(self):
        return int(self.s.shape[0])

    @property
    def m(self):
        return len(self.thetas)

    @property
    def counts(self):
        return np.bincount(self.s, minlength=self.m)

    def check(self):
        """分配簿记检查：计数之和为 N、无空聚类、s 只引用已有聚类"""
        if self.N and (self.s.min() < 0 or self.s.max() >= self.m):
            raise ContractError(f"第 {self.iteration} 次迭代: 分配向量引用了不存在的聚类")
        counts = self.counts
        if np.any(counts < 1):
            raise ContractError(f"第 {self.iteration} 次迭代: 存在空聚类 {np.flatnonzero(counts < 1).tolist()}")
        if counts.sum() != self.N:
            raise ContractError(f"第 {self.iteration} 次迭代: 计数之和 {counts.sum()} != N={self.N}")
        if not self.alpha > 0:
            raise ContractError(f"第 {self.iteration} 次迭代: α={self.alpha} 不为正")

    def snapshot(self):
        s = self.s.copy()
        s.setflags(write=False)
        return replace(self, s=s, thetas=list(self.thetas),
                       scales=None if self.scales is None else self.scales.copy(),
                       acceptance=None if self.acceptance is None else self.acceptance.copy())

    def to_dict(self):
        counts = self.counts
        return {
            'iteration': int(self.iteration),
            'alpha': float(self.alpha),
            'hyper': hyper_to_json(self.hyper),
            'm': self.m,
            'clusters': [{'count': int(counts[j]), 'params': th.to_dict()} for j, th in enumerate(self.thetas)],
            's': [int(v) for v in self.s],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            s=np.array(d['s'], dtype=int),
            thetas=[ComponentParams.from_dict(c['params']) for c in d['clusters']],
            alpha=float(d['alpha']),
            hyper=hyper_from_json(d['hyper']),
            iteration=int(d['iteration']),
        )


def _data(pattern):
    return pattern.locations, pattern.marks


def _drop_cluster(c, counts, thetas, s, *arrays):
    """删除空聚类 c 并把后面的标签前移"""
    counts = np.delete(counts, c)
    del thetas[c]
    s[s > c] -= 1
    return (counts,) + tuple(np.delete(a, c, axis=0) for a in arrays)


def gibbs_allocation_step(state, x, y, model, rng):
    """
    折叠 Gibbs 分配更新

    事件 i 进入已有聚类 j 的概率 ∝ n_j^{(-i)} × 预测密度，开新聚类的概率 ∝ α × 边际似然；
    新开聚类的参数在整轮结束后从其后验抽取
    """
    if not model.conjugate:
        raise ContractError("折叠 Gibbs 分配只适用于共轭核，非共轭模型请用辅助分量分配")
    n = x.shape[0]
    if n == 0:
        return state
    hyper = state.hyper
    rows = model.suff(x, y)
    log_new = np.log(state.alpha) + model.log_marginal(x, y, hyper)
    s = state.s.copy()
    thetas = list(state.thetas)
    counts = np.bincount(s, minlength=len(thetas)).astype(float)
    stats = [np.zeros((len(thetas), r.shape[1])) for r in rows]
    for st, r in zip(stats, rows):
        np.add.at(st, s, r)

    for i in range(n):
        c = s[i]
        counts[c] -= 1
        for st, r in zip(stats, rows):
            st[c] -= r[i]
        if counts[c] == 0:
            counts, *stats = _drop_cluster(c, counts, thetas, s, *stats)

        if counts.shape[0]:
            log_w = np.log(counts) + model.log_predictive(x[i], y[i], stats, hyper)
        else:
            log_w = np.empty(0)
        log_w = np.append(log_w, log_new[i])
        if not np.any(np.isfinite(log_w)):
            raise NonFiniteLikelihoodError(state.iteration, i, "所有分配权重为 0")

        j = sample_log_weights(log_w, rng)
        if j == counts.shape[0]:
            counts = np.append(counts, 1.0)
            stats = [np.vstack([st, r[i]]) for st, r in zip(stats, rows)]
            thetas.append(None)
        else:
            counts[j] += 1
            for st, r in zip(stats, rows):
                st[j] += r[i]
        s[i] = j

    for j, th in enumerate(thetas):
        if th is None:
            thetas[j] = model.posterior_draw([st[j] for st in stats], hyper, rng)
    return replace(state, s=s, thetas=thetas)


def neal_aux_allocation_step(state, x, y, model, aux_count, rng, max_redraws=100):
    """
    辅助分量分配更新（适用于任意核族）

    事件 i 若为单元素聚类，其参数作为第一个辅助分量，其余辅助分量从 G0(ψ) 新抽；
    已有聚类权重 n_j^{(-i)}·k(z_i;θ_j)，每个辅助分量权重 (α/aux_count)·k(z_i;φ)
    """
    if aux_count < 1:
        raise ConfigError(f"aux_count={aux_count} 必须不小于 1")
    n = x.shape[0]
    if n == 0:
        return state
    hyper = state.hyper
    s = state.s.copy()
    thetas = list(state.thetas)
    counts = np.bincount(s, minlength=len(thetas)).astype(float)
    # 已有聚类在全部事件上的对数核值，新开聚类时追加一列
    loglik = (np.column_stack([model.log_kernel(x, y, th) for th in thetas])
              if thetas else np.zeros((n, 0)))
    log_aux_w = np.log(state.alpha / aux_count)

    for i in range(n):
        c = s[i]
        counts[c] -= 1
        aux = [None] * aux_count
        if counts[c] == 0:
            aux[0] = thetas[c]
            counts, loglik_t = _drop_cluster(c, counts, thetas, s, loglik.T)
            loglik = loglik_t.T

        xi, yi = x[i:i + 1], y[i:i + 1]
        existing = np.log(counts) + loglik[i] if counts.shape[0] else np.empty(0)
        for _ in range(max_redraws):
            aux = [a if a is not None else model.draw_prior(hyper, rng) for a in aux]
            aux_ll = np.array([model.log_kernel(xi, yi, a)[0] for a in aux])
            log_w = np.concatenate([existing, log_aux_w + aux_ll])
            if np.any(np.isfinite(log_w)):
                break
            aux = [None] * aux_count
        else:
            raise NonFiniteLikelihoodError(state.iteration, i, "已有聚类与辅助分量的核值都为 0")

        m = counts.shape[0]
        j = sample_log_weights(log_w, rng)
        if j >= m:
            th = aux[j - m]
            thetas.append(th)
            counts = np.append(counts, 1.0)
            loglik = np.column_stack([loglik, model.log_kernel(x, y, th)])
            s[i] = m
        else:
            counts[j] += 1
            s[i] = j
    return replace(state, s=s, thetas=thetas)


def update_cluster_params(state, x, y, model, rng):
    """
    逐聚类更新 θ*_j ∝ g0(θ;ψ)∏_{i:s_i=j} k(z_i;θ)

    共轭块精确抽样，其余块在变换坐标上走一步随机游走 Metropolis；
    每块本轮的接受率记录在 state.acceptance 中
    """
    scales = state.scales if state.scales is not None else \
        np.full(len(model.blocks), config.MCMC_CONFIG['proposal_scale'])
    order = np.argsort(state.s, kind='stable')
    bounds = np.searchsorted(state.s[order], np.arange(state.m + 1))
    thetas = []
    accepted = np.zeros(len(model.blocks))
    for j, th in enumerate(state.thetas):
        members = order[bounds[j]:bounds[j + 1]]
        new, ok = model.update_params(th, x[members], y[members], state.hyper, scales, rng)
        thetas.append(new)
        accepted += np.asarray(ok, dtype=float)
    rate = accepted / state.m if state.m else np.ones(len(model.blocks))
    return replace(state, thetas=thetas, scales=scales, acceptance=rate)


def update_hyperparams(state, model, rng):
    """ψ | θ* 的精确条件抽样（伽马-伽马、Wishart 共轭）"""
    return replace(state, hyper=model.update_hyper(state.thetas, state.hyper, rng))


def update_alpha(state, alpha_prior, rng):
    """
    Escobar-West 辅助变量法更新 α

    η ~ Beta(α+1, N)，再从两个伽马分布的混合中抽 α，混合比例
    (a+m-1) / (N(b - log η))；N=0 时后验即先验
    """
    if alpha_prior is None:
        return state
    a, b = alpha_prior
    n, m = state.N, state.m
    if n == 0:
        alpha = rng.gamma(a, 1.0 / b)
    else:
        eta = rng.beta(state.alpha + 1.0, n)
        rate = b - np.log(eta)
        odds = (a + m - 1.0) / (n * rate)
        shape = a + m if rng.random() < odds / (1.0 + odds) else a + m - 1.0
        alpha = rng.gamma(shape, 1.0 / rate)
    return replace(state, alpha=float(max(alpha, np.finfo(float).tiny)))


def expected_components(alpha, n):
    """给定 α 与 N 时占用分量数的近似期望 α·log((α+N)/α)"""
    return float(alpha * np.log((alpha + n) / alpha))


def expected_components_prior(a, b, n, rng=None, draws=10000):
    """在 α ~ ga(a, b) 下对 expected_components 做蒙特卡罗平均，用于先验设定"""
    rng = rng if rng is not None else np.random.default_rng(config.DEFAULT_SEED)
    alpha = rng.gamma(a, 1.0 / b, size=draws)
    return float(np.mean(alpha * np.log((alpha + n) / alpha)))


def event_log_likelihood(state, x, y, model):
    """每个事件在其所属分量下的对数核值"""
    out = np.empty(state.N)
    for j, th in enumerate(state.thetas):
        members = np.flatnonzero(state.s == j)
        out[members] = model.log_kernel(x[members], y[members], th)
    return out


def log_eppf(counts, alpha):
    """DP 划分的先验概率 m log α + Σ log Γ(n_j) + log Γ(α) - log Γ(α+N)"""
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    return float(counts.shape[0] * np.log(alpha) + np.sum(gammaln(counts)) + gammaln(alpha) - gammaln(alpha + n))


def joint_log_density(state, x, y, model, alpha_prior=None):
    """log p(data, s, θ*, α, ψ)"""
    total = float(np.sum(event_log_likelihood(state, x, y, model)))
    total += sum(model.log_prior(th, state.hyper) for th in state.thetas)
    total += model.log_hyperprior(state.hyper)
    if alpha_prior is not None:
        total += float(gamma_logpdf(state.alpha, *alpha_prior))
    return total + log_eppf(state.counts, state.alpha)


def initial_state(pattern, model, cfg, rng):
    """全部事件放在一个聚类中，α 取先验均值"""
    x, y = _data(pattern)
    hyper = model.init_hyper()
    if cfg.alpha_prior is None:
        alpha = float(cfg.alpha)
    else:
        alpha = float(cfg.alpha) if cfg.alpha is not None else cfg.alpha_prior[0] / cfg.alpha_prior[1]
    s = np.zeros(pattern.N, dtype=int)
    thetas = [model.initial_params(x, y, hyper, rng)] if pattern.N else []
    return ChainState(s=s, thetas=thetas, alpha=alpha, hyper=hyper, iteration=0,
                      scales=np.full(len(model.blocks), float(cfg.proposal_scale)),
                      acceptance=np.ones(len(model.blocks)))


def _adapt(state, model, cfg):
    """预烧期内按 Robbins-Monro 调整各非共轭块的提议步长"""
    scales = state.scales.copy()
    step = 1.0 / np.sqrt(state.iteration)
    for k, b in enumerate(model.blocks):
        if not b.conjugate:
            scales[k] *= np.exp(step * (state.acceptance[k] - cfg.adapt_target))
    return replace(state, scales=scales)


def _check_finite(state, x, y, model):
    ll = event_log_likelihood(state, x, y, model)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise NonFiniteLikelihoodError(state.iteration, int(bad[0]))


def run_mcmc(pattern, model, cfg=None, rng=None, verbose=True):
    """
    运行一条链

    Args:
        pattern: MarkedPointPattern（单位窗口）
        model: kernels.MixtureModel
        cfg: McmcConfig
        rng: 可选的 numpy Generator，缺省由 cfg.seed 生成
        verbose: 是否显示进度

    Returns:
        预烧与稀疏化之后保存的 ChainState 列表，长度 (iterations - burn_in) // thin
    """
    cfg = (cfg or McmcConfig()).validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if len(pattern.schema) != len(model.schema):
        raise ContractError("数据的标记模式与模型不一致")
    x, y = _data(pattern)
    sampler = cfg.sampler
    if sampler == 'auto':
        sampler = 'gibbs' if model.conjugate else 'aux'
    if sampler == 'gibbs' and not model.conjugate:
        raise ContractError("模型含非共轭核块，不能使用折叠 Gibbs 分配")

    if verbose:
        print("=" * 60)
        print(f"MCMC: N={pattern.N}, 核块 {[b.family for b in model.blocks]}, 分配方式 {sampler}")
        print(f"  迭代 {cfg.iterations}, 预烧 {cfg.burn_in}, 稀疏 {cfg.thin}, 种子 {cfg.seed}")
        print("=" * 60)

    state = initial_state(pattern, model, cfg, rng)
    chain = []
    bar = tqdm(range(1, cfg.iterations + 1), disable=not verbose, desc="MCMC", unit="轮")
    for it in bar:
        state = replace(state, iteration=it)
        if sampler == 'gibbs':
            state = gibbs_allocation_step(state, x, y, model, rng)
        else:
            state = neal_aux_allocation_step(state, x, y, model, cfg.aux_count, rng)
        state = update_cluster_params(state, x, y, model, rng)
        state = update_hyperparams(state, model, rng)
        state = update_alpha(state, cfg.alpha_prior, rng)
        if it <= cfg.burn_in:
            state = _adapt(state, model, cfg)
        if cfg.debug:
            state.check()

        if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            _check_finite(state, x, y, model)
            chain.append(state.snapshot())
            if verbose:
                bar.set_postfix(m=state.m, alpha=f"{state.alpha:.2f}")

    if verbose:
        ms = [st.m for st in chain]
        print(f"  ✓ 保存 {len(chain)} 个状态, 平均分量数 {np.mean(ms) if ms else 0:.2f}")
    return chain


def run_chains(pattern, model, cfg=None, chains=1, verbose=True):
    """
    用独立随机流并发运行多条链

    各链种子由 SeedSequence(cfg.seed).spawn(chains) 派生；chains=1 时等同 run_mcmc
    """
    cfg = (cfg or McmcConfig()).validate()
    if chains < 1:
        raise ConfigError(f"chains={chains} 必须不小于 1")
    if chains == 1:
        return [run_mcmc(pattern, model, cfg, verbose=verbose)]
    streams = [np.random.default_rng(seq) for seq in np.random.SeedSequence(cfg.seed).spawn(chains)]
    with ThreadPoolExecutor(max_workers=chains) as pool:
        futures = [pool.submit(run_mcmc, pattern, model, cfg, rng, verbose and k == 0)
                   for k, rng in enumerate(streams)]
        return [f.result() for f in futures]


def save_chain(chain, path):
    """每个保存状态写一行 JSON（浮点数按 repr 精度写出，可逐位还原）"""
    with open(path, 'w', encoding='utf-8') as f:
        for state in chain:
            f.write(json.dumps(state.to_dict(), ensure_ascii=False))
            f.write('\n')
    return path


def load_chain(path):
    chain = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                chain.append(ChainState.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataFormatError(f"{path} 第 {lineno} 行无法解析: {e}") from e
    return chain
