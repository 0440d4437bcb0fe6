import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field

from corpus_ingest import TokenizerConfig, tokenize
from utils.errors import CorpusFormatError, ValidationError
from utils.logger import logger

INDEX_FORMAT = "bmembed-bm25"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 < 0:
            error_msg = f"k1 必须非负，实际为 {self.k1}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if not 0.0 <= self.b <= 1.0:
            error_msg = f"b 必须在 [0, 1] 内，实际为 {self.b}"
            logger.error(error_msg)
            raise ValidationError(error_msg)


@dataclass
class InvertedIndex:
    """
    BM25 倒排索引，构建后只读

    postings: 词 → [(chunk_id, 词频)]，按 chunk_id 升序
    chunk_lengths: chunk_id → 词元数
    """
    postings: dict
    chunk_lengths: dict
    avg_length: float
    n_chunks: int
    params: Bm25Params = field(default_factory=Bm25Params)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    _term_freqs: dict = field(default=None, init=False, repr=False, compare=False)

    def term_freqs(self, chunk_id):
        """返回某个块的 词 → 词频 映射（首次调用时由倒排表反推并缓存）"""
        if self._term_freqs is None:
            per_chunk = {cid: {} for cid in self.chunk_lengths}
            for term, plist in self.postings.items():
                for cid, tf in plist:
                    per_chunk[cid][term] = tf
            self._term_freqs = per_chunk
        return self._term_freqs[chunk_id]


@dataclass
class RankedList:
    query_id: str
    entries: list  # [(chunk_id, score)]，分数降序

    @property
    def chunk_ids(self):
        return [cid for cid, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def build_index(chunks, params=None, tokenizer=None):
    """
    对切块建立倒排索引

    Args:
        chunks (list): Chunk 列表
        params (Bm25Params): BM25 参数，默认 k1=1.2, b=0.75
        tokenizer (TokenizerConfig): 分词配置

    Returns:
        InvertedIndex: 倒排索引

    Raises:
        ValidationError: 当块集合为空或块ID重复时抛出
    """
    params = params or Bm25Params()
    tokenizer = tokenizer or TokenizerConfig()
    if not chunks:
        error_msg = "无法对空的块集合建立索引"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    postings = {}
    chunk_lengths = {}
    for chunk in sorted(chunks, key=lambda c: c.chunk_id):
        if chunk.chunk_id in chunk_lengths:
            error_msg = f"块ID重复: {chunk.chunk_id}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        tokens = tokenize(chunk.text, tokenizer)
        chunk_lengths[chunk.chunk_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((chunk.chunk_id, tf))

    # 块按ID升序遍历，倒排表天然有序；词表按字典序排列以保证重建结果一致
    postings = {term: postings[term] for term in sorted(postings)}
    n_chunks = len(chunk_lengths)
    avg_length = sum(chunk_lengths.values()) / n_chunks
    if avg_length <= 0:
        error_msg = "所有块都不含词元，无法建立索引"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    logger.info(f"索引构建完成: {n_chunks}个块，{len(postings)}个词，平均长度{avg_length:.2f}")
    return InvertedIndex(postings=postings, chunk_lengths=chunk_lengths, avg_length=avg_length,
                         n_chunks=n_chunks, params=params, tokenizer=tokenizer)


def idf(index, term):
    """
    逆文档频率 ln((N - df + 0.5) / (df + 0.5) + 1)，对任何词都非负

    Args:
        index (InvertedIndex): 倒排索引
        term (str): 词

    Returns:
        float: idf 值，未出现过的词 df=0
    """
    df = len(index.postings.get(term, ()))
    return math.log((index.n_chunks - df + 0.5) / (df + 0.5) + 1)


def bm25_score(index, query_tokens, chunk_id):
    """
    计算查询对某个块的 BM25 分数

    查询中重复出现的词按出现次数重复累加

    Args:
        index (InvertedIndex): 倒排索引
        query_tokens (list): 查询词元
        chunk_id (str): 块ID

    Returns:
        float: BM25 分数

    Raises:
        ValidationError: 当块ID不在索引中时抛出
    """
    if chunk_id not in index.chunk_lengths:
        error_msg = f"索引中不存在块: {chunk_id}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    k1 = index.params.k1
    b = index.params.b
    length = index.chunk_lengths[chunk_id]
    freqs = index.term_freqs(chunk_id)
    score = 0.0
    for term in query_tokens:
        tf = freqs.get(term, 0)
        if tf == 0:
            continue
        score += idf(index, term) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * length / index.avg_length))
    return score


def search(index, query_tokens, k, query_id=""):
    """
    返回 BM25 分数最高的 k 个块

    分数降序，同分按 chunk_id 升序；分数为0的块不进入排序

    Args:
        index (InvertedIndex): 倒排索引
        query_tokens (list): 查询词元
        k (int): 返回数量上限
        query_id (str): 查询ID

    Returns:
        RankedList: 排序结果

    Raises:
        ValidationError: 当 k 小于1时抛出
    """
    if k < 1:
        error_msg = f"k 必须大于等于1，实际为 {k}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    candidates = set()
    for term in set(query_tokens):
        candidates.update(cid for cid, _ in index.postings.get(term, ()))

    scored = []
    for chunk_id in candidates:
        score = bm25_score(index, query_tokens, chunk_id)
        if score > 0:
            scored.append((chunk_id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RankedList(query_id=query_id, entries=scored[:k])


class Bm25Retriever:
    """对文本查询做 BM25 检索的包装，供评估、融合和扰动实验统一调用"""

    name = "bm25"

    def __init__(self, index):
        self.index = index

    def retrieve(self, query_text, k):
        tokens = tokenize(query_text, self.index.tokenizer)
        return search(self.index, tokens, k).entries


def save_index(index, path):
    """
    把索引写成带版本头的行式JSON文件

    Args:
        index (InvertedIndex): 倒排索引
        path (str): 输出路径

    Returns:
        str: 输出路径
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "params": {"k1": index.params.k1, "b": index.params.b},
        "n_chunks": index.n_chunks,
        "avg_length": index.avg_length,
        "tokenizer": {"lowercase": index.tokenizer.lowercase},
    }
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(header, ensure_ascii=False) + '\n')
        for chunk_id, length in index.chunk_lengths.items():
            f.write(json.dumps({"chunk_id": chunk_id, "length": length}, ensure_ascii=False) + '\n')
        for term, plist in index.postings.items():
            f.write(json.dumps({"term": term, "postings": [[cid, tf] for cid, tf in plist]},
                               ensure_ascii=False) + '\n')
    logger.info(f"索引已保存: {path}")
    return path


def load_index(path):
    """
    读取 save_index 写出的索引文件

    Raises:
        FileNotFoundError: 当文件不存在时抛出
        CorpusFormatError: 当文件头或记录格式不符时抛出
    """
    if not os.path.exists(path):
        error_msg = f"索引文件不存在: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)

    chunk_lengths = {}
    postings = {}
    with open(path, 'r', encoding='utf-8') as f:
        header = json.loads(f.readline() or 'null')
        if not isinstance(header, dict) or header.get("format") != INDEX_FORMAT:
            error_msg = f"不是有效的索引文件: {path}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, 1)
        if header.get("version") != INDEX_VERSION:
            error_msg = f"不支持的索引版本: {header.get('version')}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, 1)
        for line_number, line in enumerate(f, start=2):
            record = json.loads(line)
            if "chunk_id" in record:
                chunk_lengths[record["chunk_id"]] = int(record["length"])
            elif "term" in record:
                postings[record["term"]] = [(cid, int(tf)) for cid, tf in record["postings"]]
            else:
                error_msg = f"{path} 第{line_number}行无法识别"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number)

    params = Bm25Params(**header["params"])
    tokenizer = TokenizerConfig(**header.get("tokenizer", {}))
    return InvertedIndex(postings=postings, chunk_lengths=chunk_lengths, avg_length=float(header["avg_length"]),
                         n_chunks=int(header["n_chunks"]), params=params, tokenizer=tokenizer)


def write_search_tsv(ranked_list, stream):
    """按 rank\\tchunk_id\\tscore 输出检索结果，rank 从1开始"""
    for rank, (chunk_id, score) in enumerate(ranked_list.entries, start=1):
        stream.write(f"{rank}\t{chunk_id}\t{score!r}\n")
