import os
from dataclasses import dataclass
from fractions import Fraction

from utils.errors import CorpusFormatError, DuplicateIdError, ValidationError
from utils.logger import logger

RUN_QUERY_PREFIX = "#query\t"


@dataclass(frozen=True)
class FusionConfig:
    """RRF 参数：score(d) = Σ 1/(u + rank)，rank 从1开始"""
    u: float = 40

    def __post_init__(self):
        if self.u <= 0:
            error_msg = f"u 必须大于0，实际为 {self.u}"
            logger.error(error_msg)
            raise ValidationError(error_msg)


def _exact(value):
    # 浮点参数按十进制字面值转成分数，40 与 40.0 得到同一结果
    return Fraction(str(value)) if isinstance(value, float) else Fraction(value)


def rrf_fuse(rankings, config=None):
    """
    倒数排名融合

    分数用分数类精确累加后再转成浮点，因此结果与排名列表的先后顺序无关；
    某个排名中没有出现的文档对该排名贡献为0

    Args:
        rankings (list): 若干个按相关度降序排列的 chunk_id 列表
        config (FusionConfig): 融合参数

    Returns:
        list: (chunk_id, 分数) 列表，分数降序，同分按 chunk_id 升序

    Raises:
        ValidationError: 当没有任何排名时抛出
        DuplicateIdError: 当某个排名内出现重复 chunk_id 时抛出
    """
    config = config or FusionConfig()
    if not rankings:
        error_msg = "RRF 至少需要一个排名列表"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    u = _exact(config.u)
    totals = {}
    for position, ranking in enumerate(rankings):
        seen = set()
        for rank, chunk_id in enumerate(ranking, start=1):
            if chunk_id in seen:
                error_msg = f"第{position + 1}个排名中 {chunk_id} 重复出现"
                logger.error(error_msg)
                raise DuplicateIdError(error_msg, chunk_id)
            seen.add(chunk_id)
            totals[chunk_id] = totals.get(chunk_id, Fraction(0)) + 1 / (u + rank)

    ordered = sorted(totals.items(), key=lambda item: (-item[1], item[0]))
    return [(chunk_id, float(score)) for chunk_id, score in ordered]


class FusionRetriever:
    """
    把多个检索器的结果做 RRF 融合

    每个检索器取前 depth 个结果参与融合，最终返回前 k 个
    """

    def __init__(self, retrievers, config=None, depth=100, name="rrf"):
        if not retrievers:
            error_msg = "FusionRetriever 至少需要一个检索器"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        self.retrievers = list(retrievers)
        self.config = config or FusionConfig()
        self.depth = depth
        self.name = name

    def retrieve(self, query_text, k):
        depth = max(self.depth, k)
        rankings = [[cid for cid, _ in r.retrieve(query_text, depth)] for r in self.retrievers]
        return rrf_fuse(rankings, self.config)[:k]


def write_run(path, runs):
    """
    写出检索结果文件：每个查询一段，首行为 #query\\t<query_id>，随后为 rank\\tchunk_id\\tscore

    Args:
        path (str): 输出路径
        runs (dict): query_id → [(chunk_id, 分数)]，按插入顺序写出

    Returns:
        str: 输出路径
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for query_id, entries in runs.items():
            f.write(f"{RUN_QUERY_PREFIX}{query_id}\n")
            for rank, (chunk_id, score) in enumerate(entries, start=1):
                f.write(f"{rank}\t{chunk_id}\t{score!r}\n")
    return path


def read_run(path):
    """
    读取检索结果文件

    Returns:
        dict: query_id → [(chunk_id, 分数)]，按 rank 排列

    Raises:
        FileNotFoundError: 当文件不存在时抛出
        CorpusFormatError: 当某一行格式错误时抛出
    """
    if not os.path.exists(path):
        error_msg = f"检索结果文件不存在: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)

    runs = {}
    current = None
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n')
            if not line.strip():
                continue
            if line.startswith(RUN_QUERY_PREFIX):
                current = line[len(RUN_QUERY_PREFIX):]
                runs[current] = []
                continue
            parts = line.split('\t')
            if current is None or len(parts) != 3:
                error_msg = f"{path} 第{line_number}行格式错误: {line}"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number)
            try:
                rank, chunk_id, score = int(parts[0]), parts[1], float(parts[2])
            except ValueError as e:
                error_msg = f"{path} 第{line_number}行格式错误: {line}"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number) from e
            if rank != len(runs[current]) + 1:
                error_msg = f"{path} 第{line_number}行的 rank 不连续"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number)
            runs[current].append((chunk_id, score))
    return runs


def fuse_runs(runs, config=None, k=None):
    """
    按查询融合多个检索结果文件的内容

    Args:
        runs (list): 多个 read_run 的结果
        config (FusionConfig): 融合参数
        k (int): 每个查询保留的数量，None 表示全部保留

    Returns:
        dict: query_id → [(chunk_id, 分数)]，查询按首次出现的顺序排列
    """
    if not runs:
        error_msg = "至少需要一个检索结果"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    query_ids = list(dict.fromkeys(q for run in runs for q in run))
    fused = {}
    for query_id in query_ids:
        rankings = [[cid for cid, _ in run.get(query_id, [])] for run in runs]
        entries = rrf_fuse(rankings, config)
        fused[query_id] = entries if k is None else entries[:k]
    logger.info(f"RRF 融合完成，共{len(fused)}个查询")
    return fused
