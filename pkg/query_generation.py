import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from llm_client import fold_whitespace, render_prompt
from utils.errors import CorpusFormatError, LlmResponseError, ValidationError
from utils.jsonl import read_jsonl, write_jsonl
from utils.logger import logger
from utils.seeding import make_rng

FINE_GRAINED = "fine-grained"
GENERAL = "general"

_LABEL = re.compile(r'\*{0,2}\[\s*([A-Za-z][A-Za-z ]*?)\s*\]\*{0,2}\s*:\*{0,2}')
_LABEL_ALIASES = {
    "event": "event",
    "envent": "event",
    "topic": "topic",
    "original context": "context",
    "context": "context",
    "type": "type",
    "question": "question",
}
_TRAILING_NOISE = re.compile(r'^\s*(\d+[.)]?|#+.*|[-*_=]+)?\s*$')
_NUMBERED_ITEM = re.compile(r'(?m)^\s*\d+[.)]\s+')
_QUOTES = '"\'“”‘’'


@dataclass
class DomainEvent:
    event: str
    topic: str = ""
    original_context: list = field(default_factory=list)
    event_type: str = FINE_GRAINED


@dataclass
class SyntheticQuery:
    query_id: str
    text: str
    source_event: DomainEvent
    evidence: list
    source_doc_id: str

    def to_record(self):
        return {
            "query_id": self.query_id,
            "text": self.text,
            "evidence": list(self.evidence),
            "doc_id": self.source_doc_id,
            "event": self.source_event.event,
            "topic": self.source_event.topic,
            "event_type": self.source_event.event_type,
        }


def _clean_value(value):
    lines = value.strip().split('\n')
    while lines and _TRAILING_NOISE.match(lines[-1]):
        lines.pop()
    return '\n'.join(lines).strip().strip('*').strip()


def _scan_records(raw_text):
    """
    按字段标签扫描文本，同一个标签在当前记录中再次出现时开启新记录，
    因此字段顺序可以任意，未知标签被忽略
    """
    matches = list(_LABEL.finditer(raw_text or ""))
    records = []
    current = {}
    for i, match in enumerate(matches):
        label = _LABEL_ALIASES.get(' '.join(match.group(1).lower().split()))
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw_text)
        if label is None:
            continue
        if label in current:
            records.append(current)
            current = {}
        current[label] = _clean_value(raw_text[match.end():end])
    if current:
        records.append(current)
    return records


def _strip_passage(passage):
    passage = passage.strip()
    for _ in range(3):
        passage = passage.strip(_QUOTES).strip()
        for ellipsis in ("...", "…"):
            if passage.startswith(ellipsis):
                passage = passage[len(ellipsis):].strip()
            if passage.endswith(ellipsis):
                passage = passage[:-len(ellipsis)].strip()
    return passage


def _split_contexts(value):
    items = _NUMBERED_ITEM.split(value)
    passages = [_strip_passage(item) for item in items]
    return [p for p in passages if p]


def parse_event_block(raw_text):
    """
    解析事件抽取的模型输出

    识别编号块、方括号字段标签和多行原文片段；缺少 [Topic] 时主题为空；
    文本中没有任何 [Event]: 标签时返回空列表，不会抛出异常

    Args:
        raw_text (str): 模型原始输出

    Returns:
        list: DomainEvent 列表，保持输出顺序
    """
    events = []
    for record in _scan_records(raw_text):
        event_text = fold_whitespace(record.get("event", ""))
        if not event_text:
            continue
        event_type = GENERAL if GENERAL in record.get("type", "").lower() else FINE_GRAINED
        events.append(DomainEvent(
            event=event_text,
            topic=fold_whitespace(record.get("topic", "")),
            original_context=_split_contexts(record.get("context", "")),
            event_type=event_type,
        ))
    return events


def parse_question_block(raw_text):
    """
    解析问题生成的模型输出

    Args:
        raw_text (str): 模型原始输出

    Returns:
        list: (事件文本, 问题) 列表，事件文本可能为空

    Raises:
        LlmResponseError: 当输出中没有任何 [Question]: 标签时抛出
    """
    pairs = []
    for record in _scan_records(raw_text):
        question = fold_whitespace(record.get("question", ""))
        if question:
            pairs.append((fold_whitespace(record.get("event", "")), question))
    if not pairs:
        error_msg = "问题生成结果中缺少 [Question]: 标签"
        logger.error(error_msg)
        raise LlmResponseError(error_msg, raw_text)
    return pairs


def extract_events(document, llm):
    """
    调用大模型抽取文档中的事件

    原文片段在空白折叠后必须能在文档中找到，找不到的片段被丢弃；
    没有任何有效片段的事件被丢弃

    Args:
        document (Document): 文档
        llm (LlmClient): 大模型客户端

    Returns:
        list: DomainEvent 列表，细粒度事件在前

    Raises:
        ValidationError: 当文档为空时抛出
        LlmResponseError: 当模型输出非空但没有任何事件标签时抛出
    """
    if not document.text or not document.text.strip():
        error_msg = f"文档 {document.doc_id} 为空，无法抽取事件"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    raw = llm.complete(render_prompt("event_extraction", doc=document.text))
    logger.debug(f"文档 {document.doc_id} 事件抽取原始输出: {raw}")
    if not raw or not raw.strip():
        logger.warning(f"文档 {document.doc_id} 事件抽取返回为空")
        return []

    parsed = parse_event_block(raw)
    if not parsed and '[Event]' not in raw:
        error_msg = f"文档 {document.doc_id} 的事件抽取结果无法解析"
        logger.error(error_msg)
        raise LlmResponseError(error_msg, raw)

    folded_doc = fold_whitespace(document.text)
    events = []
    for event in parsed:
        located = [p for p in event.original_context if fold_whitespace(p) in folded_doc]
        dropped = len(event.original_context) - len(located)
        if dropped:
            logger.warning(f"文档 {document.doc_id} 事件「{event.event}」有{dropped}个原文片段在文档中找不到，已丢弃")
        if not located:
            logger.warning(f"文档 {document.doc_id} 事件「{event.event}」没有可定位的原文片段，已丢弃")
            continue
        event.original_context = [fold_whitespace(p) for p in located]
        events.append(event)

    # 细粒度事件在前，各自保持原有顺序
    events.sort(key=lambda e: e.event_type != FINE_GRAINED)
    if not events:
        logger.warning(f"文档 {document.doc_id} 未抽取到任何事件")
    return events


def _format_events(events):
    return "\n\n".join(f"{i}. [Event]: {e.event}\n[Topic]: {e.topic}" for i, e in enumerate(events, start=1))


def synthesize_queries(document, events, llm, start_index=0):
    """
    针对事件生成查询问题，每个问题携带其事件的原文片段作为证据

    问题与事件的对应关系优先按事件文本匹配，匹配不到时按输出顺序对应

    Args:
        document (Document): 源文档
        events (list): DomainEvent 列表
        llm (LlmClient): 大模型客户端
        start_index (int): 查询ID编号起点

    Returns:
        list: SyntheticQuery 列表

    Raises:
        ValidationError: 当事件列表为空时抛出
        LlmResponseError: 当输出中缺少 [Question]: 标签时抛出
    """
    if not events:
        error_msg = f"文档 {document.doc_id} 没有事件，无法生成问题"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    raw = llm.complete(render_prompt("query_synthesis", doc=document.text, event=_format_events(events)))
    logger.debug(f"文档 {document.doc_id} 问题生成原始输出: {raw}")
    pairs = parse_question_block(raw)

    by_text = {e.event.lower(): i for i, e in enumerate(events)}
    queries = []
    for ordinal, (event_text, question) in enumerate(pairs):
        index = by_text.get(event_text.lower())
        if index is None:
            if ordinal >= len(events):
                logger.warning(f"文档 {document.doc_id} 的问题「{question}」无法对应到事件，已丢弃")
                continue
            index = ordinal
        event = events[index]
        queries.append(SyntheticQuery(
            query_id=f"{document.doc_id}-q{start_index + len(queries):03d}",
            text=question,
            source_event=event,
            evidence=list(event.original_context),
            source_doc_id=document.doc_id,
        ))
    return queries


class QueryGenerator:
    """
    领域查询生成器：对每篇文档先抽取事件，再生成问题

    文档之间可以并发调用大模型，结果按文档顺序合并；
    跨文档按问题原文精确去重，超过 max_queries 时均匀随机抽样
    """

    def __init__(self, llm, max_workers=4):
        self.llm = llm
        self.max_workers = max_workers

    def _generate_for_document(self, document):
        try:
            events = extract_events(document, self.llm)
            if not events:
                return []
            return synthesize_queries(document, events, self.llm)
        except LlmResponseError as e:
            logger.warning(f"文档 {document.doc_id} 的模型输出无法解析，已跳过: {str(e)}")
            return []

    def generate(self, documents, max_queries=None, seed=0, progress_callback=None):
        """
        为整个语料生成查询

        Args:
            documents (list): Document 列表
            max_queries (int): 查询数量上限，None 表示不限
            seed (int): 抽样种子
            progress_callback (callable): 进度回调函数

        Returns:
            list: SyntheticQuery 列表
        """
        total = len(documents)
        logger.info(f"开始生成领域查询，共{total}篇文档")
        results = []
        with ThreadPoolExecutor(max_workers=max(1, self.max_workers)) as executor:
            for i, doc_queries in enumerate(executor.map(self._generate_for_document, documents)):
                results.append(doc_queries)
                if progress_callback:
                    progress_callback(int((i + 1) / total * 100))

        queries = []
        seen = set()
        duplicates = 0
        for doc_queries in results:
            for query in doc_queries:
                if query.text in seen:
                    duplicates += 1
                    continue
                seen.add(query.text)
                queries.append(query)
        if duplicates:
            logger.info(f"去除重复问题{duplicates}个")

        if max_queries is not None and len(queries) > max_queries:
            rng = make_rng(seed, "max-queries")
            keep = sorted(rng.choice(len(queries), size=max_queries, replace=False).tolist())
            logger.info(f"问题数{len(queries)}超过上限{max_queries}，均匀抽样保留")
            queries = [queries[i] for i in keep]

        logger.info(f"领域查询生成完成，共{len(queries)}个")
        return queries


def save_queries(path, queries):
    """写出查询存储文件"""
    count = write_jsonl(path, (q.to_record() for q in queries))
    logger.info(f"查询已保存: {path}，共{count}个")
    return path


def load_queries(path):
    """
    读取查询存储文件

    Raises:
        CorpusFormatError: 当某一行缺少 query_id / text / evidence 时抛出
    """
    queries = []
    for line_number, record in read_jsonl(path):
        try:
            evidence = [str(e) for e in record["evidence"]]
            event = DomainEvent(
                event=record.get("event", "") or record["text"],
                topic=record.get("topic", ""),
                original_context=evidence,
                event_type=record.get("event_type", FINE_GRAINED),
            )
            queries.append(SyntheticQuery(
                query_id=str(record["query_id"]),
                text=str(record["text"]),
                source_event=event,
                evidence=evidence,
                source_doc_id=str(record.get("doc_id", "")),
            ))
        except (KeyError, TypeError) as e:
            error_msg = f"{path} 第{line_number}行不是合法的查询记录: {str(e)}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number) from e
    return queries
