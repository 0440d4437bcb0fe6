import hashlib
import math
import os
import re
import subprocess
from collections import Counter
from typing import Protocol

import httpx

from corpus_ingest import tokenize
from utils.http import get_env_str, post_with_retry
from utils.logger import logger

PROMPT_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'prompts')
PROMPT_NAMES = ("event_extraction", "query_synthesis", "keyword_extraction", "synonym_generation")
_PLACEHOLDER = re.compile(r'\{(doc|event|query|paragraph|keywords)\}')
_SENTENCE_SPLIT = re.compile(r'(?<=[.!?])\s+')


def load_prompt(name):
    """
    读取 prompts/ 下的提示词模板

    Args:
        name (str): 模板名，见 PROMPT_NAMES

    Returns:
        str: 模板文本
    """
    if name not in PROMPT_NAMES:
        error_msg = f"未知的提示词模板: {name}"
        logger.error(error_msg)
        raise ValueError(error_msg)
    with open(os.path.join(PROMPT_DIR, f'{name}.txt'), 'r', encoding='utf-8') as f:
        return f.read()


def render_prompt(name, **fields):
    """
    填充模板占位符（单遍替换，填入的内容不会被再次解析）

    Args:
        name (str): 模板名
        **fields: doc / event / query / paragraph / keywords

    Returns:
        str: 完整提示词
    """
    template = load_prompt(name)
    return _PLACEHOLDER.sub(lambda m: fields.get(m.group(1), m.group(0)), template)


def fold_whitespace(text):
    """把连续空白折叠为单个空格并去掉首尾空白"""
    return ' '.join(text.split())


class LlmClient(Protocol):
    """大模型客户端接口：输入提示词，返回补全文本"""

    def complete(self, prompt: str) -> str:
        ...


class HttpChatClient:
    """
    兼容 chat-completions 协议的远程客户端

    endpoint / model / api_key 未显式传入时从环境变量
    BMEMBED_LLM_ENDPOINT / BMEMBED_LLM_MODEL / BMEMBED_LLM_API_KEY 读取
    """

    def __init__(self, endpoint=None, model=None, api_key=None, timeout=120.0,
                 max_attempts=5, base_delay=1.0, http_client=None):
        self.endpoint = endpoint or get_env_str('BMEMBED_LLM_ENDPOINT', 'https://api.openai.com/v1/chat/completions')
        self.model = model or get_env_str('BMEMBED_LLM_MODEL', 'gpt-4o-mini')
        self.api_key = api_key if api_key is not None else get_env_str('BMEMBED_LLM_API_KEY')
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.client = http_client or httpx.Client(timeout=timeout)

    def complete(self, prompt):
        """
        发送单轮对话请求

        Args:
            prompt (str): 提示词

        Returns:
            str: 模型回复文本

        Raises:
            RuntimeError: 当请求重试耗尽或响应结构不符时抛出
        """
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        data = post_with_retry(self.client, self.endpoint, payload, headers,
                               max_attempts=self.max_attempts, base_delay=self.base_delay)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            error_msg = f"无法解析 chat-completions 响应: {str(data)[:200]}"
            logger.error(error_msg)
            raise RuntimeError(error_msg) from e
        logger.debug(f"模型输出: {content}")
        return content or ""


class OllamaClient:
    """
    通过本地 ollama 命令行调用模型

    需要预先安装 Ollama 并拉取模型，例如: ollama pull llama3
    """

    def __init__(self, model_name="llama3"):
        self.model_name = model_name

    def complete(self, prompt):
        """
        执行 ollama run 并返回输出

        Raises:
            RuntimeError: 当未指定模型或输出为空时抛出
            subprocess.CalledProcessError: 当命令执行失败时抛出
        """
        if not self.model_name:
            error_msg = "未指定Ollama模型名称"
            logger.error(error_msg)
            raise RuntimeError(error_msg)

        cmd = ["ollama", "run", self.model_name, prompt]
        try:
            logger.debug(f"执行Ollama命令: ollama run {self.model_name}")
            result = subprocess.run(cmd, capture_output=True, text=True, check=True, encoding='utf-8')
            logger.debug(f"Ollama输出: {result.stdout}")

            if not result.stdout or not result.stdout.strip():
                error_msg = "Ollama返回结果为空"
                logger.error(error_msg)
                raise RuntimeError(error_msg)
            return result.stdout.strip()

        except subprocess.CalledProcessError as e:
            error_msg = f"Ollama命令执行失败: {str(e)}\n错误输出: {e.stderr}"
            logger.error(error_msg)
            raise
        except FileNotFoundError as e:
            error_msg = "未找到ollama命令，请先安装 Ollama 并加入 PATH"
            logger.error(error_msg)
            raise RuntimeError(error_msg) from e


def _between(text, start, end):
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.rfind(end)
    if j < i:
        return text[i:]
    return text[i:j]


class StubLlmClient:
    """
    离线确定性替身，按提示词模板的类型生成符合格式的回复

    - 事件抽取：取文档中词元 idf 之和最高的3个句子作为事件，按文档顺序输出
    - 问题生成：每个事件生成 "What does the document say about <t1> and <t2>?"，t1/t2 为事件中 idf 最高的两个词
    - 关键词抽取：查询与段落共有的词按 idf 取前5个
    - 同义词生成：优先查同义词表，否则生成与原词不共享词元的伪词

    输出只取决于 (提示词, seed, 构造时给定的 idf 表和同义词表)
    """

    def __init__(self, idf=None, seed=0, synonyms=None, events_per_doc=3, keywords_per_query=5):
        self.idf = idf
        self.seed = seed
        self.synonyms = {k.lower(): v for k, v in (synonyms or {}).items()}
        self.events_per_doc = events_per_doc
        self.keywords_per_query = keywords_per_query
        self._headers = {name: load_prompt(name).split('\n', 1)[0] for name in PROMPT_NAMES}

    def complete(self, prompt):
        if prompt.startswith(self._headers["event_extraction"]):
            doc = _between(prompt, "The document is:\n", "\nPlease return the extracted event")
            return self._extract_events(doc)
        if prompt.startswith(self._headers["query_synthesis"]):
            doc = _between(prompt, "Document:\n\n", "\n\nEvent:\n\n")
            events = _between(prompt, "\n\nEvent:\n\n", "\n\nYour question towards given event:")
            return self._synthesize(doc, events)
        if prompt.startswith(self._headers["keyword_extraction"]):
            query = _between(prompt, "Query:\n\n", "\n\nParagraph:\n\n")
            paragraph = _between(prompt, "\n\nParagraph:\n\n", "\n\nkeywords:")
            return self._keywords(query, paragraph)
        if prompt.startswith(self._headers["synonym_generation"]):
            keywords = _between(prompt, "\n\nKeywords:\n\n", "\n\nYour substituted keywords:")
            return self._synonyms(keywords)
        logger.warning("StubLlmClient 收到无法识别的提示词，返回空结果")
        return ""

    def _idf_table(self, sentences):
        if self.idf is not None:
            return self.idf
        # 没有语料级 idf 时，用文档内句子频率近似
        n = len(sentences)
        sentence_freq = Counter()
        for sentence in sentences:
            sentence_freq.update(set(tokenize(sentence)))
        return lambda term: math.log((n - sentence_freq[term] + 0.5) / (sentence_freq[term] + 0.5) + 1)

    def _tie_key(self, term):
        return hashlib.sha256(f"{self.seed}\x00{term}".encode('utf-8')).hexdigest()

    def _top_terms(self, tokens, idf_fn, limit):
        first_seen = {}
        for position, token in enumerate(tokens):
            first_seen.setdefault(token, position)
        ranked = sorted(first_seen, key=lambda t: (-idf_fn(t), self._tie_key(t), first_seen[t]))
        return ranked[:limit]

    def _extract_events(self, doc):
        doc = fold_whitespace(doc)
        if not doc:
            return ""
        sentences = [s for s in _SENTENCE_SPLIT.split(doc) if tokenize(s)]
        idf_fn = self._idf_table(sentences)
        scored = [(sum(idf_fn(t) for t in tokenize(s)), -i) for i, s in enumerate(sentences)]
        top = sorted(range(len(sentences)), key=lambda i: scored[i], reverse=True)[:self.events_per_doc]

        blocks = []
        for number, i in enumerate(sorted(top), start=1):
            sentence = sentences[i]
            topic = self._top_terms(tokenize(sentence), idf_fn, 1)
            blocks.append(
                f"{number}.\n[Event]: {sentence}\n\n[Topic]: {topic[0] if topic else ''}\n\n"
                f"[Original context]: 1. {sentence}\n\n[Type]: Fine-grained\n"
            )
        return "\n".join(blocks)

    def _synthesize(self, doc, events_block):
        sentences = [s for s in _SENTENCE_SPLIT.split(fold_whitespace(doc)) if tokenize(s)]
        idf_fn = self._idf_table(sentences or [doc])
        lines = []
        for number, match in enumerate(re.finditer(r'\[Event\]:[ \t]*(.+)', events_block), start=1):
            event = match.group(1).strip()
            terms = self._top_terms(tokenize(event), idf_fn, 2)
            if not terms:
                continue
            about = " and ".join(terms)
            lines.append(f"{number}. [Event]: {event}\n[Question]: What does the document say about {about}?")
        return "\n\n".join(lines)

    def _keywords(self, query, paragraph):
        paragraph_tokens = set(tokenize(paragraph))
        shared = [t for t in tokenize(query) if t in paragraph_tokens]
        if not shared:
            return ""
        idf_fn = self._idf_table([query, paragraph])
        return ", ".join(self._top_terms(shared, idf_fn, self.keywords_per_query))

    def _synonyms(self, keywords_block):
        keywords = [k.strip() for k in keywords_block.split(',') if k.strip()]
        return ", ".join(self.substitute_for(k) for k in keywords)

    def substitute_for(self, keyword):
        """同义词表中有则返回表中替换词，否则返回确定性的伪词"""
        found = self.synonyms.get(keyword.lower())
        if found:
            return found
        return "syn" + hashlib.sha256(f"{self.seed}\x00{keyword.lower()}".encode('utf-8')).hexdigest()[:8]
