"""
项目内的异常类型

所有领域异常都继承自 BMEmbedError，命令行入口据此映射退出码：
ValidationError 及其子类 → 2，其他 BMEmbedError 以及未预期的 RuntimeError、ValueError → 3
"""


class BMEmbedError(Exception):
    """项目异常基类"""


class ValidationError(BMEmbedError, ValueError):
    """输入或配置校验失败"""


class CorpusFormatError(ValidationError):
    """语料文件中某一行格式错误"""

    def __init__(self, message, line_number):
        super().__init__(message)
        self.line_number = line_number


class DuplicateIdError(ValidationError):
    """同一集合内出现重复的标识"""

    def __init__(self, message, item_id):
        super().__init__(message)
        self.item_id = item_id


class LlmResponseError(BMEmbedError, RuntimeError):
    """大模型返回内容无法解析，保留原始响应便于排查"""

    def __init__(self, message, raw_response):
        super().__init__(message)
        self.raw_response = raw_response


class EmbeddingLookupError(BMEmbedError, KeyError):
    """预计算向量库中找不到对应文本"""

    def __init__(self, message, key):
        super().__init__(message)
        self.key = key

    def __str__(self):
        return self.args[0] if self.args else ''


class DegenerateAdapterError(BMEmbedError, ArithmeticError):
    """适配器输出为零向量，无法归一化"""


class TrainingDivergedError(BMEmbedError, RuntimeError):
    """训练过程中损失变为非有限值"""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class StageError(BMEmbedError, RuntimeError):
    """流水线某个阶段执行失败"""

    def __init__(self, message, stage):
        super().__init__(message)
        self.stage = stage
