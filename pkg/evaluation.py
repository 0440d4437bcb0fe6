import csv
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field

import torch
from scipy.stats import spearmanr

from corpus_ingest import tokenize
from embedding_provider import DenseEncoder
from utils.errors import CorpusFormatError, ValidationError
from utils.jsonl import read_jsonl, write_json
from utils.logger import logger
from utils.seeding import make_rng

RETRIEVAL_COLUMNS = ["method", "hit@1", "hit@4", "hit@10", "map@10",
                     "alignment_raw", "alignment_norm", "uniformity_abs"]


@dataclass
class EvalQuery:
    query_id: str
    text: str
    gold_spans: list = field(default_factory=list)
    gold_chunk_ids: list = field(default_factory=list)


@dataclass(frozen=True)
class EvalConfig:
    """
    评估配置

    Attributes:
        theta (float): 证据片段与块的词元重合比例阈值
        uniformity_sample (int): 计算均匀性时抽取的块数上限
        seed (int): 均匀性抽样种子
        sts_path (str): 可选的 STS 数据文件 {text1, text2, score}
    """
    theta: float = 0.6
    uniformity_sample: int = 512
    seed: int = 0
    sts_path: str = None

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            error_msg = f"theta 必须在 (0, 1] 内，实际为 {self.theta}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.uniformity_sample < 2:
            error_msg = f"uniformity_sample 至少为2，实际为 {self.uniformity_sample}"
            logger.error(error_msg)
            raise ValidationError(error_msg)


@dataclass
class AlignmentResult:
    raw: float
    normalized: float
    skipped: int = 0


@dataclass
class EvalReport:
    method: str
    n_queries: int
    n_unmatchable: int
    hit_at_1: float
    hit_at_4: float
    hit_at_10: float
    map_at_10: float
    alignment_raw: float = None
    alignment_norm: float = None
    uniformity_abs: float = None
    sts_spearman: float = None
    per_query: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def retrieval_row(self):
        return {
            "method": self.method,
            "hit@1": self.hit_at_1,
            "hit@4": self.hit_at_4,
            "hit@10": self.hit_at_10,
            "map@10": self.map_at_10,
            "alignment_raw": self.alignment_raw,
            "alignment_norm": self.alignment_norm,
            "uniformity_abs": self.uniformity_abs,
        }


def load_gold(path):
    """
    读取评估用的标准答案文件，每行 {query_id, query, evidence:[...], chunk_ids:[...]?}

    Raises:
        CorpusFormatError: 当缺少字段或没有任何证据时抛出
    """
    queries = []
    for line_number, record in read_jsonl(path):
        try:
            query = EvalQuery(
                query_id=str(record["query_id"]),
                text=str(record["query"]),
                gold_spans=[str(s) for s in record.get("evidence", [])],
                gold_chunk_ids=[str(c) for c in record.get("chunk_ids", [])],
            )
        except (KeyError, TypeError) as e:
            error_msg = f"{path} 第{line_number}行不是合法的标准答案记录: {str(e)}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number) from e
        if not query.gold_spans and not query.gold_chunk_ids:
            error_msg = f"{path} 第{line_number}行没有任何证据"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number)
        queries.append(query)
    return queries


class EvidenceMatcher:
    """
    把证据文本片段映射到相关块

    同一文档的块按顺序拼接后的词元序列与文档词元序列一致。
    片段能作为连续词元序列找到时，按每个块覆盖的片段词元比例判断，
    比例不低于 theta 的块为相关块，都不够时取比例最大的块；
    此外任何与片段的词袋重合比例不低于 theta 的块也是相关块，两种规则的结果取并集
    """

    def __init__(self, chunks, theta=0.6, tokenizer=None):
        self.theta = theta
        self.tokenizer = tokenizer
        self._chunk_bags = {}
        self._doc_tokens = {}
        self._doc_owner = {}
        self._first_token = {}

        by_doc = {}
        for chunk in sorted(chunks, key=lambda c: c.chunk_id):
            by_doc.setdefault(chunk.doc_id, []).append(chunk)
        for doc_id, doc_chunks in by_doc.items():
            tokens, owners = [], []
            for chunk in doc_chunks:
                chunk_tokens = tokenize(chunk.text, tokenizer)
                self._chunk_bags[chunk.chunk_id] = Counter(chunk_tokens)
                tokens.extend(chunk_tokens)
                owners.extend([chunk.chunk_id] * len(chunk_tokens))
            self._doc_tokens[doc_id] = tokens
            self._doc_owner[doc_id] = owners
            for position, token in enumerate(tokens):
                self._first_token.setdefault(token, []).append((doc_id, position))

    def _verbatim(self, span_tokens):
        relevant = set()
        length = len(span_tokens)
        for doc_id, start in self._first_token.get(span_tokens[0], ()):
            tokens = self._doc_tokens[doc_id]
            if tokens[start:start + length] != span_tokens:
                continue
            shares = Counter(self._doc_owner[doc_id][start:start + length])
            cleared = {cid for cid, count in shares.items() if count >= self.theta * length}
            if not cleared:
                best = max(shares.values())
                cleared = {min(cid for cid, count in shares.items() if count == best)}
            relevant |= cleared
        return relevant

    def _bag_overlap(self, span_tokens):
        span_bag = Counter(span_tokens)
        length = len(span_tokens)
        return {cid for cid, bag in self._chunk_bags.items()
                if sum((span_bag & bag).values()) >= self.theta * length}

    def match(self, span):
        span_tokens = tokenize(span, self.tokenizer)
        if not span_tokens:
            return set()
        return self._verbatim(span_tokens) | self._bag_overlap(span_tokens)


def match_evidence(gold_spans, chunks, theta=0.6, tokenizer=None, matcher=None):
    """
    求证据片段对应的相关块集合

    Args:
        gold_spans (list): 证据文本片段
        chunks (list): 全部 Chunk
        theta (float): 重合比例阈值
        tokenizer (TokenizerConfig): 分词配置
        matcher (EvidenceMatcher): 预先构建的匹配器，批量评估时复用

    Returns:
        set: 相关 chunk_id 集合；为空表示该查询无法匹配
    """
    matcher = matcher or EvidenceMatcher(chunks, theta, tokenizer)
    relevant = set()
    for span in gold_spans:
        relevant |= matcher.match(span)
    return relevant


def hit_at_k(run, relevant, k):
    """前 k 个结果中有任一相关块时为1，否则为0"""
    return int(any(chunk_id in relevant for chunk_id in run[:k]))


def map_at_10(run, relevant):
    """
    单个查询的 AP@10 = (1/min(|相关|,10)) · Σ_{i≤10} precision@i · rel(i)，对查询取平均即为 MAP@10

    Args:
        run (list): 按相关度降序的 chunk_id 列表
        relevant (set): 相关 chunk_id 集合

    Returns:
        float: [0, 1] 内的值
    """
    if not relevant:
        return 0.0
    found = 0
    total = 0.0
    for i, chunk_id in enumerate(run[:10], start=1):
        if chunk_id in relevant:
            found += 1
            total += found / i
    return total / min(len(relevant), 10)


def _unit_rows(vectors):
    x = torch.as_tensor(vectors, dtype=torch.float64)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    norms = x.norm(dim=1, keepdim=True)
    return torch.where(norms > 0, x / norms.clamp(min=1e-300), x)


def alignment(query_vecs, positive_vecs, database):
    """
    对齐度：正例对的平均平方欧氏距离，以及按查询到库中最近向量的平方距离归一化后的版本

    所有向量先做 L2 归一化；最近向量与查询距离为0的正例对不参与归一化版本并计数

    Args:
        query_vecs: (n, d) 查询向量
        positive_vecs: (n, d) 对应的正例向量
        database: (N, d) 检索库向量

    Returns:
        AlignmentResult: raw、normalized 与被跳过的对数

    Raises:
        ValidationError: 当正例对为空或数量不一致时抛出
    """
    q = _unit_rows(query_vecs)
    p = _unit_rows(positive_vecs)
    if q.shape[0] == 0 or q.shape != p.shape:
        error_msg = f"正例对为空或形状不一致: {tuple(q.shape)} vs {tuple(p.shape)}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    db = _unit_rows(database)

    pair_dist = ((q - p) ** 2).sum(dim=1)
    # 逐条按差的平方和计算，与 pair_dist 的算法一致，正例恰为最近向量时比值严格为1
    nearest = torch.stack([((db - row) ** 2).sum(dim=1).min() for row in q])
    valid = nearest > 0
    skipped = int((~valid).sum())
    if skipped:
        logger.warning(f"对齐度计算中有{skipped}个正例对的最近库向量与查询重合，已跳过")
    normalized = float((pair_dist[valid] / nearest[valid]).mean()) if valid.any() else 0.0
    return AlignmentResult(raw=float(pair_dist.mean()), normalized=normalized, skipped=skipped)


def uniformity(vectors):
    """
    均匀性 |log mean exp(-2‖x-y‖²)|，对所有无序的不同向量对求平均

    Raises:
        ValidationError: 当向量少于2个时抛出
    """
    x = _unit_rows(vectors)
    if x.shape[0] < 2:
        error_msg = f"计算均匀性至少需要2个向量，实际为{x.shape[0]}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    value = torch.pdist(x, p=2).pow(2).mul(-2).exp().mean().log()
    return abs(float(value))


def spearman_sts(similarities, gold_scores):
    """
    模型相似度与人工评分之间的 Spearman 秩相关（同值取平均秩）

    Raises:
        ValidationError: 当样本少于3对、长度不一致或任一侧为常数时抛出
    """
    sims = [float(s) for s in similarities]
    gold = [float(g) for g in gold_scores]
    if len(sims) != len(gold) or len(sims) < 3:
        error_msg = f"STS 评估至少需要3对等长数据，实际为 {len(sims)} / {len(gold)}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if len(set(sims)) == 1 or len(set(gold)) == 1:
        error_msg = "相似度或评分为常数，Spearman 相关系数无定义"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    return float(spearmanr(sims, gold).correlation)


def evaluate_sts(path, encoder):
    """读取 {text1, text2, score} 文件，返回余弦相似度与评分的 Spearman 相关"""
    pairs = [record for _, record in read_jsonl(path)]
    left = encoder.encode_passages([str(r["text1"]) for r in pairs])
    right = encoder.encode_passages([str(r["text2"]) for r in pairs])
    sims = (left * right).sum(dim=1).tolist()
    return spearman_sts(sims, [r["score"] for r in pairs])


class DenseRetriever:
    """
    精确的余弦相似度检索：对全部块向量暴力计算

    块按 chunk_id 排序后编码一次；同分时按 chunk_id 升序
    """

    def __init__(self, encoder, chunks, name="dense"):
        self.encoder = encoder
        self.name = name
        ordered = sorted(chunks, key=lambda c: c.chunk_id)
        self.chunk_ids = [c.chunk_id for c in ordered]
        self.chunk_texts = [c.text for c in ordered]
        logger.info(f"正在编码{len(ordered)}个块用于稠密检索 ({name})")
        self.matrix = encoder.encode_passages(self.chunk_texts)

    def retrieve(self, query_text, k):
        query = self.encoder.encode_queries([query_text])[0]
        sims = self.matrix @ query
        order = torch.sort(sims, descending=True, stable=True).indices[:k].tolist()
        return [(self.chunk_ids[i], float(sims[i])) for i in order]


class RunRetriever:
    """把已有检索结果文件包装成检索器，按 query_id 查找"""

    def __init__(self, run, name="run"):
        self.run = run
        self.name = name

    def lookup(self, query_id, k):
        return self.run.get(query_id, [])[:k]


def _encoder_of(source):
    if isinstance(source, DenseEncoder):
        return source
    return getattr(source, "encoder", None)


def _geometry(encoder, scored, chunks, config):
    texts = {c.chunk_id: c.text for c in chunks}
    pair_queries, pair_passages = [], []
    for query, relevant in scored:
        for chunk_id in sorted(relevant):
            pair_queries.append(query.text)
            pair_passages.append(texts[chunk_id])

    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    database = encoder.encode_passages([c.text for c in ordered])
    result = alignment(encoder.encode_queries(pair_queries), encoder.encode_passages(pair_passages), database)

    size = min(config.uniformity_sample, len(ordered))
    picked = sorted(make_rng(config.seed, "uniformity").choice(len(ordered), size=size, replace=False).tolist())
    spread = uniformity(database[picked])
    return result, spread


def evaluate(source, queries, chunks, config=None, method="dense", tokenizer=None, with_geometry=True):
    """
    计算检索指标与向量几何指标

    Args:
        source: 检索来源，可以是 DenseEncoder（内部构建精确余弦检索）、带 retrieve(text, k) 的检索器，
            或 RunRetriever（按 query_id 读取已有结果）
        queries (list): EvalQuery 列表
        chunks (list): 全部 Chunk，检索结果与证据都必须在这个集合内
        config (EvalConfig): 评估配置
        method (str): 报告中的方法名
        tokenizer (TokenizerConfig): 证据匹配所用分词配置
        with_geometry (bool): 是否计算对齐度、均匀性和 STS

    Returns:
        EvalReport: 评估报告；只有在能拿到编码器时才计算对齐度、均匀性和 STS

    Raises:
        ValidationError: 当查询为空或所有查询都无法匹配证据时抛出
    """
    config = config or EvalConfig()
    if not queries:
        error_msg = "评估查询集为空"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    retriever = DenseRetriever(source, chunks, name=method) if isinstance(source, DenseEncoder) else source
    encoder = _encoder_of(retriever)
    known = {c.chunk_id for c in chunks}
    matcher = EvidenceMatcher(chunks, config.theta, tokenizer)

    scored = []
    unmatchable = 0
    for query in queries:
        relevant = match_evidence(query.gold_spans, chunks, matcher=matcher)
        relevant |= {cid for cid in query.gold_chunk_ids if cid in known}
        if not relevant:
            unmatchable += 1
            continue
        scored.append((query, relevant))
    if unmatchable:
        logger.warning(f"{unmatchable}个查询的证据无法匹配到任何块，已排除")
    if not scored:
        error_msg = "没有可评估的查询：全部证据都无法匹配"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    per_query = []
    for query, relevant in scored:
        if isinstance(retriever, RunRetriever):
            entries = retriever.lookup(query.query_id, 10)
        else:
            entries = retriever.retrieve(query.text, 10)
        run = [cid for cid, _ in entries]
        per_query.append({
            "query_id": query.query_id,
            "hit@1": hit_at_k(run, relevant, 1),
            "hit@4": hit_at_k(run, relevant, 4),
            "hit@10": hit_at_k(run, relevant, 10),
            "ap@10": map_at_10(run, relevant),
            "n_relevant": len(relevant),
        })

    n = len(per_query)
    report = EvalReport(
        method=method,
        n_queries=n,
        n_unmatchable=unmatchable,
        hit_at_1=sum(row["hit@1"] for row in per_query) / n,
        hit_at_4=sum(row["hit@4"] for row in per_query) / n,
        hit_at_10=sum(row["hit@10"] for row in per_query) / n,
        map_at_10=math.fsum(row["ap@10"] for row in per_query) / n,
        per_query=per_query,
    )

    if encoder is not None and with_geometry:
        aligned, spread = _geometry(encoder, scored, chunks, config)
        report.alignment_raw = aligned.raw
        report.alignment_norm = aligned.normalized
        report.uniformity_abs = spread
        if config.sts_path:
            report.sts_spearman = evaluate_sts(config.sts_path, encoder)

    logger.info(f"评估完成 [{method}]: hit@1={report.hit_at_1:.4f}, hit@4={report.hit_at_4:.4f}, "
                f"hit@10={report.hit_at_10:.4f}, map@10={report.map_at_10:.4f}, 查询数={n}")
    return report


def write_report_json(path, report):
    return write_json(path, report.to_dict())


def write_per_query_csv(path, report):
    """写出逐查询的指标表"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    columns = ["query_id", "hit@1", "hit@4", "hit@10", "ap@10", "n_relevant"]
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for row in report.per_query:
            writer.writerow(row)
    return path


def write_retrieval_csv(path, reports):
    """写出方法对比表，每个报告一行"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=RETRIEVAL_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for report in reports:
            row = report.retrieval_row()
            writer.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in row.items()})
    return path


def plot_alignment_uniformity(path, reports, labels=None):
    """
    画出各报告的 (归一化对齐度, 均匀性) 散点图并保存为 SVG

    点默认以方法名标注，给出 labels 时按位置使用其中的标签；没有几何指标的报告被跳过

    Returns:
        str: 输出路径
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = labels or [r.method for r in reports]
    points = [(r, label) for r, label in zip(reports, labels)
              if r.alignment_norm is not None and r.uniformity_abs is not None]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    plt.rcParams['svg.hashsalt'] = 'bmembed'
    fig, ax = plt.subplots(figsize=(5, 4))
    for report, label in points:
        ax.scatter(report.alignment_norm, report.uniformity_abs, s=40)
        ax.annotate(label, (report.alignment_norm, report.uniformity_abs),
                    textcoords="offset points", xytext=(5, 5), fontsize=9)
    ax.set_xlabel("alignment (normalized)")
    ax.set_ylabel("|uniformity|")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"对齐度-均匀性散点图已保存: {path}")
    return path
