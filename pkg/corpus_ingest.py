import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from utils.errors import CorpusFormatError, DuplicateIdError, ValidationError
from utils.jsonl import read_jsonl, write_jsonl
from utils.logger import logger

# 字母/数字的最长连续片段，不含下划线
TOKEN_PATTERN = re.compile(r'[^\W_]+')


@dataclass(frozen=True)
class TokenizerConfig:
    """分词配置：按 Unicode 字母/数字的最长连续片段切分，不做词干化和停用词过滤"""
    lowercase: bool = True


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Chunk:
    """
    语料切块，检索和相关性标注的基本单位

    char_start/char_end 是在父文档中的字符区间，text 恰好等于 doc.text[char_start:char_end]
    """
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    char_start: int
    char_end: int

    def to_record(self):
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "text": self.text,
            "token_count": self.token_count,
            "char_start": self.char_start,
            "char_end": self.char_end,
        }


def _token_spans(text, config):
    spans = []
    for match in TOKEN_PATTERN.finditer(text):
        token = match.group(0)
        if config.lowercase:
            token = token.lower()
        spans.append((token, match.start(), match.end()))
    return spans


def tokenize(text, config=None):
    """
    对文本分词

    Args:
        text (str): 输入文本
        config (TokenizerConfig): 分词配置，默认小写化

    Returns:
        list: 词元列表，空输入返回空列表
    """
    config = config or TokenizerConfig()
    if not text:
        return []
    return [token for token, _, _ in _token_spans(text, config)]


def chunk_document(doc, chunk_size, config=None):
    """
    按固定词元数把文档切成互不重叠的块

    只有最后一块可能不足 chunk_size；块边界落在词元边界上，
    所有块的词元序列拼接后等于整篇文档的词元序列

    Args:
        doc (Document): 文档
        chunk_size (int): 每块最大词元数
        config (TokenizerConfig): 分词配置

    Returns:
        list: Chunk 列表，没有任何词元的文档返回空列表

    Raises:
        ValidationError: 当 chunk_size 小于1时抛出
    """
    if chunk_size < 1:
        error_msg = f"chunk_size 必须大于等于1，实际为 {chunk_size}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    config = config or TokenizerConfig()
    spans = _token_spans(doc.text, config)
    if not spans:
        logger.warning(f"文档 {doc.doc_id} 不含任何词元，已跳过")
        return []

    chunks = []
    for ordinal, start in enumerate(range(0, len(spans), chunk_size)):
        window = spans[start:start + chunk_size]
        char_start = window[0][1]
        char_end = window[-1][2]
        chunks.append(Chunk(
            chunk_id=f"{doc.doc_id}_chunk{ordinal:04d}",
            doc_id=doc.doc_id,
            text=doc.text[char_start:char_end],
            token_count=len(window),
            char_start=char_start,
            char_end=char_end,
        ))
    return chunks


def chunk_corpus(documents, chunk_size, config=None, workers=1):
    """
    对整个语料切块，可多线程并行，输出顺序始终与输入文档顺序一致

    Args:
        documents (list): Document 列表
        chunk_size (int): 每块最大词元数
        config (TokenizerConfig): 分词配置
        workers (int): 并行线程数

    Returns:
        list: 全部 Chunk，按文档顺序、块序号排列
    """
    config = config or TokenizerConfig()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_doc = list(executor.map(lambda d: chunk_document(d, chunk_size, config), documents))
    else:
        per_doc = [chunk_document(d, chunk_size, config) for d in documents]

    chunks = [chunk for doc_chunks in per_doc for chunk in doc_chunks]
    logger.info(f"切块完成: {len(documents)}篇文档 → {len(chunks)}个块 (chunk_size={chunk_size})")
    return chunks


def load_corpus(path):
    """
    读取语料文件（UTF-8，每行一个JSON对象，字段 id、text，可选 meta）

    Args:
        path (str): 语料文件路径

    Returns:
        list: Document 列表，保持文件中的顺序

    Raises:
        FileNotFoundError: 当文件不存在时抛出
        CorpusFormatError: 当某一行缺少字段或字段类型错误时抛出（含行号）
        DuplicateIdError: 当出现重复的文档ID时抛出
    """
    documents = []
    seen = set()
    for line_number, record in read_jsonl(path):
        doc_id = record.get("id")
        text = record.get("text")
        meta = record.get("meta", {})
        if not isinstance(doc_id, str) or not doc_id:
            error_msg = f"{path} 第{line_number}行缺少字符串字段 id"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number)
        if not isinstance(text, str) or not text:
            error_msg = f"{path} 第{line_number}行缺少非空字符串字段 text"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number)
        if not isinstance(meta, dict):
            error_msg = f"{path} 第{line_number}行的 meta 必须是对象"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number)
        if doc_id in seen:
            error_msg = f"{path} 第{line_number}行出现重复的文档ID: {doc_id}"
            logger.error(error_msg)
            raise DuplicateIdError(error_msg, doc_id)
        seen.add(doc_id)
        documents.append(Document(doc_id=doc_id, text=text,
                                  metadata={str(k): str(v) for k, v in meta.items()}))

    logger.info(f"语料加载完成: {path}，共{len(documents)}篇文档")
    return documents


def save_chunks(path, chunks):
    """写出块存储文件（每行一个块）"""
    count = write_jsonl(path, (chunk.to_record() for chunk in chunks))
    logger.info(f"块存储已写出: {path}，共{count}块")
    return path


def load_chunks(path):
    """
    读取块存储文件

    Raises:
        CorpusFormatError: 当某一行缺少字段时抛出
        DuplicateIdError: 当块ID重复时抛出
    """
    chunks = []
    seen = set()
    for line_number, record in read_jsonl(path):
        try:
            chunk = Chunk(
                chunk_id=str(record["chunk_id"]),
                doc_id=str(record["doc_id"]),
                text=str(record["text"]),
                token_count=int(record["token_count"]),
                char_start=int(record["char_start"]),
                char_end=int(record["char_end"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            error_msg = f"{path} 第{line_number}行不是合法的块记录: {str(e)}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number) from e
        if chunk.chunk_id in seen:
            error_msg = f"{path} 第{line_number}行出现重复的块ID: {chunk.chunk_id}"
            logger.error(error_msg)
            raise DuplicateIdError(error_msg, chunk.chunk_id)
        seen.add(chunk.chunk_id)
        chunks.append(chunk)
    return chunks
