import csv
import math
import os
import re
from dataclasses import dataclass, field, replace

from corpus_ingest import tokenize
from evaluation import evaluate
from llm_client import StubLlmClient, render_prompt
from utils.errors import CorpusFormatError, LlmResponseError, ValidationError
from utils.jsonl import read_jsonl, write_jsonl
from utils.logger import logger

MASK_TOKEN = "[MASK]"
VARIANTS = ("original", "masked", "substituted")
METRICS = ("hit@1", "hit@4", "hit@10", "map@10")
_WORD_BEFORE = r'(?<![^\W_])'
_WORD_AFTER = r'(?![^\W_])'


@dataclass
class PerturbedQuerySet:
    """单个查询的三种变体：原文、关键词替换为 [MASK]、关键词替换为同义词"""
    query_id: str
    original: str
    masked: str
    substituted: str
    keywords: list = field(default_factory=list)
    synonyms: dict = field(default_factory=dict)

    def variant(self, name):
        return getattr(self, name)

    def to_record(self):
        return {
            "query_id": self.query_id,
            "original": self.original,
            "masked": self.masked,
            "substituted": self.substituted,
            "keywords": list(self.keywords),
            "synonyms": dict(self.synonyms),
        }


def _contains_phrase(text_tokens, phrase_tokens):
    n = len(phrase_tokens)
    if n == 0:
        return False
    return any(text_tokens[i:i + n] == phrase_tokens for i in range(len(text_tokens) - n + 1))


def _split_list(raw):
    raw = (raw or "").strip()
    if raw.lower().startswith("keywords:"):
        raw = raw[len("keywords:"):]
    items = []
    for item in re.split(r'[,\n]', raw):
        item = item.strip().strip('"\'“”‘’*').strip()
        item = re.sub(r'^\d+[.)]\s*', '', item)
        if item:
            items.append(item)
    return items


def _idf_of(idf):
    if idf is None:
        return lambda term: 1.0
    if callable(idf):
        return idf
    return lambda term: idf.get(term, 0.0)


def extract_keywords(query, evidence, llm=None, idf=None, limit=5):
    """
    抽取查询与证据共有的关键词

    有 llm 时使用关键词抽取提示词并解析逗号分隔的结果；没有 llm 时取两者共有的词元，
    按 idf 从高到低取前 limit 个（同值按在查询中出现的先后）。
    每个关键词都必须同时出现在查询和证据中，不满足的被丢弃

    Args:
        query (str): 查询
        evidence (list|str): 证据片段
        llm (LlmClient): 大模型客户端，None 表示使用离线规则
        idf: 词元 → idf，可以是函数或字典
        limit (int): 离线规则下的关键词数量上限

    Returns:
        list: 关键词列表，可能为空

    Raises:
        ValidationError: 当证据为空时抛出
    """
    paragraph = evidence if isinstance(evidence, str) else " ".join(evidence)
    if not paragraph.strip():
        error_msg = "证据为空，无法抽取关键词"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    query_tokens = tokenize(query)
    evidence_tokens = tokenize(paragraph)
    if llm is None:
        shared = set(evidence_tokens)
        first_seen = {}
        for position, token in enumerate(query_tokens):
            if token in shared:
                first_seen.setdefault(token, position)
        idf_fn = _idf_of(idf)
        ranked = sorted(first_seen, key=lambda t: (-idf_fn(t), first_seen[t]))
        return ranked[:limit]

    raw = llm.complete(render_prompt("keyword_extraction", query=query, paragraph=paragraph))
    logger.debug(f"关键词抽取原始输出: {raw}")
    keywords = []
    seen = set()
    for keyword in _split_list(raw):
        tokens = tokenize(keyword)
        if not (_contains_phrase(query_tokens, tokens) and _contains_phrase(evidence_tokens, tokens)):
            logger.warning(f"关键词「{keyword}」没有同时出现在查询和证据中，已丢弃")
            continue
        if keyword.lower() not in seen:
            seen.add(keyword.lower())
            keywords.append(keyword)
    return keywords


def generate_synonyms(query, keywords, llm=None, lexicon=None, seed=0):
    """
    为每个关键词生成一个保持语义的替换词

    有 llm 时使用同义词生成提示词，返回数量必须与关键词一致；
    否则查同义词表，表中没有的关键词用确定性的伪词替换

    Returns:
        dict: 关键词 → 替换词

    Raises:
        LlmResponseError: 当模型返回的替换词数量与关键词数量不一致时抛出
    """
    if not keywords:
        return {}
    if llm is None:
        offline = StubLlmClient(seed=seed, synonyms=lexicon)
        return {k: offline.substitute_for(k) for k in keywords}

    raw = llm.complete(render_prompt("synonym_generation", query=query, keywords=", ".join(keywords)))
    logger.debug(f"同义词生成原始输出: {raw}")
    substitutes = _split_list(raw)
    if len(substitutes) != len(keywords):
        error_msg = f"同义词数量 {len(substitutes)} 与关键词数量 {len(keywords)} 不一致"
        logger.error(error_msg)
        raise LlmResponseError(error_msg, raw)
    return dict(zip(keywords, substitutes))


def _phrase_pattern(phrases):
    ordered = sorted(set(phrases), key=lambda p: (-len(p), p.lower()))
    alternatives = [r'\s+'.join(re.escape(part) for part in phrase.split()) for phrase in ordered]
    return re.compile(_WORD_BEFORE + '(' + '|'.join(alternatives) + ')' + _WORD_AFTER, re.IGNORECASE)


def mask_keywords(query, keywords):
    """
    把查询中每个关键词的所有出现替换为 [MASK]

    不区分大小写，整词/整短语匹配，重叠时较长的关键词优先

    Args:
        query (str): 查询
        keywords (list): 关键词

    Returns:
        str: 遮蔽后的查询
    """
    phrases = [k for k in keywords if k.strip()]
    if not phrases:
        return query
    return _phrase_pattern(phrases).sub(MASK_TOKEN, query)


def substitute_keywords(query, synonym_map, keywords=None):
    """
    按映射把关键词替换为同义词，较长的关键词优先

    Args:
        query (str): 查询
        synonym_map (dict): 关键词 → 替换词
        keywords (list): 需要替换的关键词，默认为映射中的全部键

    Returns:
        str: 替换后的查询

    Raises:
        ValidationError: 当映射缺少某个关键词时抛出
    """
    keywords = list(synonym_map) if keywords is None else list(keywords)
    lookup = {' '.join(k.split()).lower(): v for k, v in synonym_map.items()}
    missing = [k for k in keywords if ' '.join(k.split()).lower() not in lookup]
    if missing:
        error_msg = f"同义词映射缺少关键词: {', '.join(missing)}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    phrases = [k for k in keywords if k.strip()]
    if not phrases:
        return query
    pattern = _phrase_pattern(phrases)
    return pattern.sub(lambda m: lookup[' '.join(m.group(0).split()).lower()], query)


def build_perturbed_queries(queries, llm=None, idf=None, lexicon=None, seed=0):
    """
    为评估查询生成遮蔽与同义替换变体

    没有任何关键词的查询不进入扰动实验

    Args:
        queries (list): EvalQuery 列表，证据片段作为抽取关键词的段落
        llm (LlmClient): 大模型客户端，None 表示离线规则
        idf: 词元 → idf
        lexicon (dict): 离线同义词表
        seed (int): 伪词种子

    Returns:
        list: PerturbedQuerySet 列表
    """
    variants = []
    excluded = 0
    for query in queries:
        if not query.gold_spans:
            excluded += 1
            continue
        keywords = extract_keywords(query.text, query.gold_spans, llm=llm, idf=idf)
        if not keywords:
            excluded += 1
            continue
        synonyms = generate_synonyms(query.text, keywords, llm=llm, lexicon=lexicon, seed=seed)
        variants.append(PerturbedQuerySet(
            query_id=query.query_id,
            original=query.text,
            masked=mask_keywords(query.text, keywords),
            substituted=substitute_keywords(query.text, synonyms, keywords),
            keywords=keywords,
            synonyms=synonyms,
        ))
    if excluded:
        logger.warning(f"{excluded}个查询没有可用的关键词，不参与扰动实验")
    logger.info(f"扰动查询生成完成，共{len(variants)}个")
    return variants


def save_variants(path, variants):
    count = write_jsonl(path, (v.to_record() for v in variants))
    logger.info(f"扰动查询已保存: {path}，共{count}条")
    return path


def load_variants(path):
    variants = []
    for line_number, record in read_jsonl(path):
        try:
            variants.append(PerturbedQuerySet(
                query_id=str(record["query_id"]),
                original=str(record["original"]),
                masked=str(record["masked"]),
                substituted=str(record["substituted"]),
                keywords=list(record["keywords"]),
                synonyms=dict(record["synonyms"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            error_msg = f"{path} 第{line_number}行不是合法的扰动查询记录: {str(e)}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, line_number) from e
    return variants


def run_perturbation_eval(methods, variants, gold, chunks, config=None):
    """
    在原文、遮蔽、同义替换三组查询上评估各检索方法，并计算相对原文的下降值

    三组查询使用同一个查询子集（有关键词的查询），下降值 = 原文指标 - 变体指标

    Args:
        methods (dict): 方法名 → 检索器
        variants (list): PerturbedQuerySet 列表
        gold (list): EvalQuery 列表，提供证据
        chunks (list): 全部 Chunk
        config (EvalConfig): 评估配置

    Returns:
        list: 每个 方法×变体 一行，包含四项指标及对应的 drop_ 列
    """
    if not variants:
        error_msg = "没有可用的扰动查询"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    by_id = {q.query_id: q for q in gold}
    subset = [v for v in variants if v.query_id in by_id]

    rows = []
    for name, retriever in methods.items():
        baseline = None
        for variant_name in VARIANTS:
            queries = [replace(by_id[v.query_id], text=v.variant(variant_name)) for v in subset]
            report = evaluate(retriever, queries, chunks, config, method=name, with_geometry=False)
            values = {"hit@1": report.hit_at_1, "hit@4": report.hit_at_4,
                      "hit@10": report.hit_at_10, "map@10": report.map_at_10}
            if baseline is None:
                baseline = values
            row = {"method": name, "variant": variant_name, "n_queries": report.n_queries}
            row.update(values)
            row.update({f"drop_{m}": baseline[m] - values[m] for m in METRICS})
            rows.append(row)
            logger.info(f"扰动评估 [{name} / {variant_name}]: map@10={values['map@10']:.4f}, "
                        f"下降={row['drop_map@10']:.4f}")
    return rows


def write_perturbation_csv(path, rows):
    """写出扰动实验结果表"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    columns = ["method", "variant", "n_queries"] + list(METRICS) + [f"drop_{m}" for m in METRICS]
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) and math.isfinite(v) else v)
                             for k, v in row.items()})
    return path
