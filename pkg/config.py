"""
标记泊松过程混合模型工具 - 配置文件
"""

import os

from dotenv import load_dotenv

load_dotenv()

# 项目根目录
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# 目录配置
DATA_DIR = os.getenv('PPMIX_DATA_DIR', os.path.join(BASE_DIR, 'data'))        # 数据目录
OUTPUT_DIR = os.getenv('PPMIX_OUTPUT_DIR', os.path.join(BASE_DIR, 'output'))  # 输出目录
PRESET_DIR = os.path.join(BASE_DIR, 'presets')                                # 预设配置

# 默认随机种子
DEFAULT_SEED = int(os.getenv('PPMIX_SEED', '0'))

# MCMC 配置（几百个事件的拟合几分钟内完成）
MCMC_CONFIG = {
    'iterations': 5000,
    'burn_in': 1000,
    'thin': 4,
    'seed': DEFAULT_SEED,
    'proposal_scale': 0.25,   # 变换坐标上的随机游走步长
    'aux_count': 3,           # 非共轭分配步的辅助分量个数
    'adapt_target': 0.3,      # 预烧期步长自适应的目标接受率
    'alpha_prior': (2.0, 1.0),
    'debug': False,
}

# 截断配置
TRUNCATION_CONFIG = {
    'tolerance': 1e-6,
    'prior_draws': 10000,
    'max_level': 500,
}

# 泛函计算配置
FUNCTIONAL_CONFIG = {
    'quantiles': (0.05, 0.95),  # 90% 区间
    'draws_per_state': 1,
    'grid_size': 100,
}

# 模型检验配置
DIAGNOSTIC_CONFIG = {
    'band': 0.9,
}

# 核函数配置
KERNEL_CONFIG = {
    'beta_shape': 2.0,            # 逆伽马基测度的形状参数 c
    'monotone_base': (1.0, 1.0),  # 单调核 θ 的 Beta 基测度
}

# 命令行退出码
EXIT_CODES = {
    'ok': 0,
    'validation': 1,
    'numeric': 2,
}
