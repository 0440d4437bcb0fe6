import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

from bm25_index import search
from corpus_ingest import tokenize
from utils.errors import CorpusFormatError, ValidationError
from utils.jsonl import read_jsonl, write_jsonl
from utils.logger import logger
from utils.seeding import make_rng

UNIFORM = "uniform"
FINE_TO_COARSE = "fine_to_coarse"
EXPLICIT = "explicit"
STRATEGIES = (UNIFORM, FINE_TO_COARSE, EXPLICIT)


@dataclass(frozen=True)
class PartitionScheme:
    """
    排序列表的分段方式

    Attributes:
        strategy (str): uniform / fine_to_coarse / explicit
        m (int): 分段数，即每个训练样本的段落数
        k (int): BM25 检索深度
        first_len (int): fine_to_coarse 的首段长度权重
        growth (float): fine_to_coarse 相邻段的长度倍率
        boundaries (tuple): explicit 模式下的 (起, 止) 半开区间
        anchor_first (bool): 为真时首段固定为 [0, first_len)，其余段按倍率划分剩余部分
    """
    strategy: str = FINE_TO_COARSE
    m: int = 9
    k: int = 1000
    first_len: int = 3
    growth: float = 2.0
    boundaries: tuple = None
    anchor_first: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            error_msg = f"未知的分段策略: {self.strategy}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.m < 2:
            error_msg = f"分段数 m 必须大于等于2，实际为 {self.m}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.k < self.m:
            error_msg = f"检索深度 k={self.k} 小于分段数 m={self.m}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.strategy == FINE_TO_COARSE:
            if self.first_len < 1:
                error_msg = f"first_len 必须大于等于1，实际为 {self.first_len}"
                logger.error(error_msg)
                raise ValidationError(error_msg)
            if self.growth < 1:
                error_msg = f"growth 必须大于等于1，实际为 {self.growth}"
                logger.error(error_msg)
                raise ValidationError(error_msg)
        if self.strategy == EXPLICIT:
            if not self.boundaries:
                error_msg = "explicit 策略需要给出 boundaries"
                logger.error(error_msg)
                raise ValidationError(error_msg)
            bounds = tuple(tuple(int(x) for x in pair) for pair in self.boundaries)
            object.__setattr__(self, 'boundaries', bounds)
            _check_tiling(bounds, self.k, self.m)


@dataclass
class RankingSample:
    """
    一条训练样本 [q, p_1..p_m, r_1..r_m]

    interval_indices 记录每个段内被抽中的名次（从0开始），用于追溯
    """
    query_id: str
    query_text: str
    passages: list
    scores: list
    interval_indices: list = field(default_factory=list)

    def to_record(self):
        return {
            "query_id": self.query_id,
            "query_text": self.query_text,
            "passages": list(self.passages),
            "scores": list(self.scores),
            "interval_indices": list(self.interval_indices),
        }


def _check_tiling(intervals, k, m):
    if len(intervals) != m:
        error_msg = f"需要 {m} 个区间，实际给出 {len(intervals)} 个"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    expected_start = 0
    for lo, hi in intervals:
        if lo != expected_start or hi <= lo:
            error_msg = f"区间 {[list(i) for i in intervals]} 没有连续、无重叠地覆盖 [0, {k})"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        expected_start = hi
    if expected_start != k:
        error_msg = f"区间 {[list(i) for i in intervals]} 没有覆盖到 {k}"
        logger.error(error_msg)
        raise ValidationError(error_msg)


def _largest_remainder(weights, total):
    """
    把 total 按权重分成整数长度：先取整，再把余数依次分给小数部分最大的段
    （同余数时优先给靠后的段），最后保证每段至少为1
    """
    weights = [Fraction(w) for w in weights]
    weight_sum = sum(weights)
    quotas = [w * total / weight_sum for w in weights]
    lengths = [math.floor(q) for q in quotas]
    remainder = total - sum(lengths)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - lengths[i]), -i))
    for i in order[:remainder]:
        lengths[i] += 1

    while 0 in lengths:
        empty = lengths.index(0)
        donor = lengths.index(max(lengths))
        lengths[donor] -= 1
        lengths[empty] += 1
    return lengths


def _to_intervals(lengths, offset=0):
    intervals = []
    start = offset
    for length in lengths:
        intervals.append((start, start + length))
        start += length
    return intervals


def partition(k, m, scheme):
    """
    把 [0, k) 划分成 m 个连续的半开区间

    - uniform：各段长度相差不超过1，余数分给靠后的段
    - fine_to_coarse：长度按 first_len·growth^(i-1) 的比例缩放到总和为 k，最大余数法取整
    - explicit：k 等于给定边界的终点时原样使用，否则按各段长度比例缩放到 k

    Args:
        k (int): 检索深度（可小于 scheme.k，见可用性规则）
        m (int): 分段数
        scheme (PartitionScheme): 分段方式

    Returns:
        list: m 个 (起, 止) 元组

    Raises:
        ValidationError: 当 m < 2 或 k < m 时抛出
    """
    if m < 2:
        error_msg = f"分段数 m 必须大于等于2，实际为 {m}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if k < m:
        error_msg = f"检索深度 k={k} 小于分段数 m={m}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    if scheme.strategy == UNIFORM:
        return _to_intervals(_largest_remainder([1] * m, k))

    if scheme.strategy == FINE_TO_COARSE:
        if scheme.anchor_first:
            first = max(1, min(scheme.first_len, k - (m - 1)))
            rest = _largest_remainder([Fraction(scheme.growth) ** i for i in range(m - 1)], k - first)
            return [(0, first)] + _to_intervals(rest, offset=first)
        weights = [scheme.first_len * Fraction(scheme.growth) ** i for i in range(m)]
        return _to_intervals(_largest_remainder(weights, k))

    boundaries = list(scheme.boundaries)
    if len(boundaries) != m:
        error_msg = f"explicit 边界有 {len(boundaries)} 段，与 m={m} 不一致"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if boundaries[-1][1] == k:
        return [tuple(pair) for pair in boundaries]
    return _to_intervals(_largest_remainder([hi - lo for lo, hi in boundaries], k))


def sample_ranking_list(query, ranked_list, scheme, rng):
    """
    从排序列表的每个区间中均匀随机抽取一个段落及其 BM25 分数

    排序列表不足 k 条但不少于 m 条时，按实际长度重新划分区间

    Args:
        query (SyntheticQuery): 查询
        ranked_list (RankedList): 该查询的 BM25 排序结果
        scheme (PartitionScheme): 分段方式
        rng (numpy.random.Generator): 随机数流

    Returns:
        RankingSample: 训练样本；排序列表短于 m 时返回 None
    """
    available = len(ranked_list.entries)
    if available < scheme.m:
        logger.warning(f"查询 {query.query_id} 只检索到{available}个块，少于 m={scheme.m}，已跳过（词汇覆盖稀疏）")
        return None

    intervals = partition(min(scheme.k, available), scheme.m, scheme)
    passages, scores, picked = [], [], []
    for lo, hi in intervals:
        rank = int(rng.integers(lo, hi))
        chunk_id, score = ranked_list.entries[rank]
        passages.append(chunk_id)
        scores.append(score)
        picked.append(rank)
    return RankingSample(query_id=query.query_id, query_text=query.text,
                         passages=passages, scores=scores, interval_indices=picked)


def subsample_queries(queries, fraction, seed):
    """
    按比例随机保留一部分查询（保持原顺序），用于“少查询、多列表”的消融实验

    Args:
        queries (list): SyntheticQuery 列表
        fraction (float): 保留比例 (0, 1]
        seed (int): 随机种子

    Returns:
        list: 保留下来的查询
    """
    if not 0 < fraction <= 1:
        error_msg = f"query_fraction 必须在 (0, 1] 内，实际为 {fraction}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if fraction == 1:
        return list(queries)
    size = max(1, round(len(queries) * fraction))
    keep = sorted(make_rng(seed, "query-fraction").choice(len(queries), size=size, replace=False).tolist())
    return [queries[i] for i in keep]


def generate_training_set(queries, index, scheme, lists_per_query=1, seed=0, workers=1):
    """
    对所有查询做 BM25 检索并抽取训练样本

    每个查询的第 j 次抽样使用由 (seed, query_id, j) 派生的独立随机流，
    因此串行与并行结果一致；输出按查询顺序、抽样序号排列

    Args:
        queries (list): SyntheticQuery 列表
        index (InvertedIndex): BM25 索引
        scheme (PartitionScheme): 分段方式
        lists_per_query (int): 每个查询抽取的列表数
        seed (int): 随机种子
        workers (int): 并行线程数

    Returns:
        list: RankingSample 列表
    """
    if lists_per_query < 1:
        error_msg = f"lists_per_query 必须大于等于1，实际为 {lists_per_query}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    def draw(query):
        ranked = search(index, tokenize(query.text, index.tokenizer), scheme.k, query.query_id)
        if len(ranked) < scheme.m:
            logger.warning(f"查询 {query.query_id} 只检索到{len(ranked)}个块，少于 m={scheme.m}，已跳过（词汇覆盖稀疏）")
            return []
        samples = []
        for j in range(lists_per_query):
            sample = sample_ranking_list(query, ranked, scheme, make_rng(seed, query.query_id, j))
            samples.append(sample)
        return samples

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_query = list(executor.map(draw, queries))
    else:
        per_query = [draw(q) for q in queries]

    samples = [s for group in per_query for s in group]
    skipped = sum(1 for group in per_query if not group)
    logger.info(f"训练样本生成完成: {len(samples)}条，跳过查询{skipped}个 (k={scheme.k}, m={scheme.m}, 策略={scheme.strategy})")
    return samples


def save_training_set(path, samples):
    """写出训练样本文件"""
    count = write_jsonl(path, (s.to_record() for s in samples))
    logger.info(f"训练样本已保存: {path}，共{count}条")
    return path


def load_training_set(path):
    """
    读取训练样本文件

    Raises:
        CorpusFormatError: 当记录缺少字段或段落与分数长度不一致时抛出
    """
    samples = []
    for line_number, record in read_jsonl(path):
        try:
            sample = RankingSample(
                query_id=str(record["query_id"]),
                query_text=str(record["query_text"]),
                passages=[str(p) for p in record["passages"]],
                scores=[float(s) for s in record["scores"]],
                interval_indices=[int(i) for i in record.get("interval_indices", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            error_msg = f"{path} 第{line_number}行不是合法的训练样本: {str(e)}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number) from e
        if len(sample.passages) != len(sample.scores):
            error_msg = f"{path} 第{line_number}行的段落数与分数个数不一致"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number)
        samples.append(sample)
    return samples
