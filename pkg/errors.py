"""
异常定义
校验类错误（退出码 1）与数值运行错误（退出码 2）分成两支
"""


class PpmixError(ValueError):
    """所有 ppmix 异常的基类"""

    exit_code = 2


class ValidationError(PpmixError):
    """输入、参数或配置不合法"""

    exit_code = 1


class BoundaryError(ValidationError):
    """事件落在观测窗口边界上或窗口之外"""

    def __init__(self, index, location, window):
        self.index = index
        super().__init__(f"事件 #{index} 的位置 {location} 不在开窗口 {window} 内")


class ParameterError(ValidationError):
    """核参数或基测度超参数越界"""


class SupportError(ValidationError):
    """标记值不在其取值空间内"""


class ContractError(ValidationError):
    """调用方违反了接口约定（例如对非共轭族调用共轭更新）"""


class DataFormatError(ValidationError):
    """数据文件无法解析、缺列等"""


class ConfigError(ValidationError):
    """运行配置不合法，problems 中列出全部问题"""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        lines = '\n'.join(f"  - {p}" for p in self.problems)
        super().__init__(f"配置校验失败（共 {len(self.problems)} 处）:\n{lines}")


class NumericError(PpmixError):
    """运行期数值失败"""

    exit_code = 2


class ImproperPosteriorError(NumericError):
    """参考先验下 N=0，后验不正常"""


class DominationError(NumericError):
    """稀释法中强度超过了控制上界"""


class UnderflowError(NumericError):
    """条件化时边际密度下溢为 0"""


class NonFiniteLikelihoodError(NumericError):
    """MCMC 中出现非有限对数似然"""

    def __init__(self, iteration, index, detail=''):
        self.iteration = iteration
        self.index = index
        msg = f"第 {iteration} 次迭代, 事件 #{index}: 对数似然非有限"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SingularCovarianceError(NumericError):
    """协方差矩阵 Cholesky 分解失败（非正定）"""
