import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np
import torch

from corpus_ingest import tokenize
from utils.errors import CorpusFormatError, DegenerateAdapterError, EmbeddingLookupError, ValidationError
from utils.http import get_env_str, post_with_retry
from utils.logger import logger
from utils.seeding import make_rng

STORE_MAGIC = b"BMEV"
STORE_VERSION = 1
STORE_HEADER = struct.Struct("<4sIIQ")

CHECKPOINT_MAGIC = b"BMAD"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = struct.Struct("<4sII16sQ")


@dataclass
class EmbeddingVector:
    """单条文本的向量；empty 为真表示输入为空文本，values 为零向量"""
    values: torch.Tensor
    empty: bool = False


class EmbeddingProvider(Protocol):
    """基础向量接口，同一实例内同一文本总是得到同一向量"""

    def dim(self) -> int:
        ...

    def embed_batch(self, texts: list) -> torch.Tensor:
        ...


def text_key(text):
    """预计算向量库的键：文本原文的 SHA-256"""
    return hashlib.sha256(text.encode('utf-8')).digest()


class ToyEmbedder:
    """
    哈希词袋向量，用于离线测试

    每个词元映射到一个由 (seed, 词元) 决定的固定随机单位向量，
    文本向量为词元向量之和再做 L2 归一化；空文本返回零向量
    """

    def __init__(self, dim=256, seed=0, tokenizer=None):
        if dim < 1:
            error_msg = f"向量维度必须大于等于1，实际为 {dim}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        self._dim = dim
        self.seed = seed
        self.tokenizer = tokenizer
        self._token_vectors = {}
        self._lock = threading.Lock()

    def dim(self):
        return self._dim

    def _token_vector(self, token):
        with self._lock:
            vector = self._token_vectors.get(token)
            if vector is None:
                raw = make_rng("toy-embedder", self.seed, token).standard_normal(self._dim)
                vector = raw / np.linalg.norm(raw)
                self._token_vectors[token] = vector
            return vector

    def embed_batch(self, texts):
        rows = np.zeros((len(texts), self._dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = tokenize(text, self.tokenizer)
            if not tokens:
                continue
            total = np.zeros(self._dim, dtype=np.float64)
            for token in tokens:
                total += self._token_vector(token)
            norm = np.linalg.norm(total)
            if norm > 0:
                rows[i] = total / norm
        return torch.from_numpy(rows.astype(np.float32))


class PrecomputedEmbeddingStore:
    """
    预计算向量库（二进制文件）

    文件头 {magic, version, d, count}，随后每条记录为 32 字节 SHA-256 键 + d 个小端 float32
    """

    def __init__(self, path):
        if not os.path.exists(path):
            error_msg = f"向量库文件不存在: {path}"
            logger.error(error_msg)
            raise FileNotFoundError(error_msg)
        self.path = path
        with open(path, 'rb') as f:
            header = f.read(STORE_HEADER.size)
            if len(header) != STORE_HEADER.size:
                error_msg = f"向量库文件头不完整: {path}"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, 1)
            magic, version, dim, count = STORE_HEADER.unpack(header)
            if magic != STORE_MAGIC or version != STORE_VERSION:
                error_msg = f"不是受支持的向量库文件: {path}"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, 1)
            record = np.dtype([("key", "S32"), ("values", "<f4", (dim,))])
            body = np.frombuffer(f.read(), dtype=record, count=count)
        self._dim = dim
        self._vectors = {bytes(row["key"]).ljust(32, b"\x00"): np.array(row["values"]) for row in body}
        logger.info(f"向量库加载完成: {path}，{count}条，维度{dim}")

    def dim(self):
        return self._dim

    def embed_batch(self, texts):
        rows = []
        for text in texts:
            key = text_key(text)
            vector = self._vectors.get(key)
            if vector is None:
                error_msg = f"向量库中缺少文本键 {key.hex()}"
                logger.error(error_msg)
                raise EmbeddingLookupError(error_msg, key.hex())
            rows.append(vector)
        if not rows:
            return torch.zeros((0, self._dim), dtype=torch.float32)
        return torch.from_numpy(np.stack(rows).astype(np.float32))


def write_embedding_store(path, texts, vectors):
    """
    把文本及其向量写成预计算向量库文件，同一文本只保留一条

    Args:
        path (str): 输出路径
        texts (list): 文本列表
        vectors (torch.Tensor): (n, d) 向量矩阵

    Returns:
        str: 输出路径
    """
    vectors = np.asarray(vectors.detach().cpu().numpy() if isinstance(vectors, torch.Tensor) else vectors,
                         dtype='<f4')
    unique = {}
    for text, vector in zip(texts, vectors):
        unique.setdefault(text_key(text), vector)
    dim = vectors.shape[1]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, dim, len(unique)))
        for key in sorted(unique):
            f.write(key)
            f.write(unique[key].astype('<f4').tobytes())
    logger.info(f"向量库已写出: {path}，{len(unique)}条")
    return path


class RemoteEmbeddingClient:
    """
    远程向量接口客户端（OpenAI 兼容的 embeddings 协议）

    endpoint / model / api_key 未显式传入时从环境变量
    BMEMBED_EMBED_ENDPOINT / BMEMBED_EMBED_MODEL / BMEMBED_EMBED_API_KEY 读取
    """

    def __init__(self, dim, endpoint=None, model=None, api_key=None, batch_size=64,
                 timeout=120.0, max_attempts=5, base_delay=1.0, http_client=None):
        self._dim = dim
        self.endpoint = endpoint or get_env_str('BMEMBED_EMBED_ENDPOINT', 'https://api.openai.com/v1/embeddings')
        self.model = model or get_env_str('BMEMBED_EMBED_MODEL', 'text-embedding-3-small')
        self.api_key = api_key if api_key is not None else get_env_str('BMEMBED_EMBED_API_KEY')
        self.batch_size = batch_size
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.client = http_client or httpx.Client(timeout=timeout)

    def dim(self):
        return self._dim

    def embed_batch(self, texts):
        """
        分批请求向量

        Raises:
            RuntimeError: 当请求重试耗尽、响应缺失或维度不符时抛出
        """
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        rows = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            data = post_with_retry(self.client, self.endpoint, {"model": self.model, "input": batch}, headers,
                                   max_attempts=self.max_attempts, base_delay=self.base_delay)
            try:
                items = sorted(data["data"], key=lambda item: item.get("index", 0))
                vectors = [item["embedding"] for item in items]
            except (KeyError, TypeError) as e:
                error_msg = f"无法解析向量接口响应: {str(data)[:200]}"
                logger.error(error_msg)
                raise RuntimeError(error_msg) from e
            if len(vectors) != len(batch) or any(len(v) != self._dim for v in vectors):
                error_msg = f"向量接口返回的条数或维度不符: 期望{len(batch)}×{self._dim}"
                logger.error(error_msg)
                raise RuntimeError(error_msg)
            rows.extend(vectors)
        if not rows:
            return torch.zeros((0, self._dim), dtype=torch.float32)
        return torch.tensor(rows, dtype=torch.float32)


class HuggingFaceEmbedder:
    """
    基于 transformers 的本地向量模型，取最后一层隐状态的均值池化

    自动检测 CUDA 设备，可手动关闭 GPU
    """

    def __init__(self, model_name, use_gpu=True, max_length=512, batch_size=16):
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            error_msg = "transformers 未安装，请先运行: pip install transformers"
            logger.error(error_msg)
            raise ModuleNotFoundError(error_msg) from e

        cuda_available = torch.cuda.is_available()
        self.device = "cuda" if (cuda_available and use_gpu) else "cpu"
        if self.device == "cuda":
            logger.info(f"GPU加速已启用，使用设备: {torch.cuda.get_device_name(0)}")
        elif cuda_available:
            logger.info("GPU加速已手动禁用，使用CPU模式")
        else:
            logger.info("未检测到可用的CUDA设备，使用CPU模式")

        logger.info(f"正在加载向量模型({model_name})到{self.device}设备")
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name).to(self.device)
        self.model.eval()
        self.max_length = max_length
        self.batch_size = batch_size
        self._dim = int(self.model.config.hidden_size)
        self._lock = threading.Lock()

    def dim(self):
        return self._dim

    @torch.no_grad()
    def embed_batch(self, texts):
        rows = []
        with self._lock:
            for start in range(0, len(texts), self.batch_size):
                batch = list(texts[start:start + self.batch_size])
                encoded = self.tokenizer(batch, padding=True, truncation=True,
                                         max_length=self.max_length, return_tensors="pt").to(self.device)
                hidden = self.model(**encoded).last_hidden_state
                mask = encoded["attention_mask"].unsqueeze(-1).to(hidden.dtype)
                pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
                rows.append(pooled.float().cpu())
        if not rows:
            return torch.zeros((0, self._dim), dtype=torch.float32)
        return torch.cat(rows, dim=0)


def embed(provider, text):
    """
    计算单条文本的向量

    Args:
        provider (EmbeddingProvider): 向量提供者
        text (str): 文本

    Returns:
        EmbeddingVector: 向量；空文本返回零向量并标记 empty
    """
    if not text or not text.strip():
        return EmbeddingVector(values=torch.zeros(provider.dim(), dtype=torch.float32), empty=True)
    values = provider.embed_batch([text])[0]
    if not torch.isfinite(values).all():
        error_msg = "向量中含有非有限值"
        logger.error(error_msg)
        raise ValueError(error_msg)
    return EmbeddingVector(values=values)


@dataclass
class AdapterParams:
    """残差投影适配器 adapted(x) = normalize(x + W·x)，W 为 d×d 矩阵，W=0 时为恒等映射"""
    W: torch.Tensor

    @classmethod
    def zeros(cls, dim):
        return cls(W=torch.zeros((dim, dim), dtype=torch.float64))

    @property
    def dim(self):
        return self.W.shape[0]


def adapt(params, x):
    """
    对基础向量应用适配器

    Args:
        params (AdapterParams): 适配器参数，None 表示不做变换只归一化
        x (torch.Tensor): (d,) 或 (n, d) 基础向量

    Returns:
        torch.Tensor: 单位长度的 float64 向量

    Raises:
        ValidationError: 当维度不符时抛出
        DegenerateAdapterError: 当 x + W·x 为零向量时抛出
    """
    x = x.to(torch.float64)
    if params is None:
        u = x
    else:
        if x.shape[-1] != params.dim:
            error_msg = f"向量维度 {x.shape[-1]} 与适配器维度 {params.dim} 不一致"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        u = x + x @ params.W.T
    norms = u.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        error_msg = "适配器输出为零向量，无法归一化"
        logger.error(error_msg)
        raise DegenerateAdapterError(error_msg)
    return u / norms


def cosine_similarity(a, b):
    """
    余弦相似度 dot(a,b)/(‖a‖‖b‖)，结果截断到 [-1, 1]

    Raises:
        ValidationError: 当任一向量为零向量时抛出
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    norm_a = a.norm()
    norm_b = b.norm()
    if norm_a == 0 or norm_b == 0:
        error_msg = "零向量无法计算余弦相似度"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    value = torch.dot(a, b) / (norm_a * norm_b)
    return float(value.clamp(-1.0, 1.0))


class DenseEncoder:
    """
    基础向量 + 可选适配器的编码器，输出单位长度的 float64 向量

    基础向量按文本缓存；空文本编码为零向量（不经过适配器）；
    instruction 只加在查询文本前
    """

    def __init__(self, provider, params=None, instruction="", cache=True):
        self.provider = provider
        self.params = params
        self.instruction = instruction
        self._cache = {} if cache else None
        self._lock = threading.Lock()

    def base_vectors(self, texts):
        """返回 (n, d) float32 基础向量，命中缓存的文本不再重复计算"""
        if self._cache is None:
            return self.provider.embed_batch(list(texts))
        with self._lock:
            missing = list(dict.fromkeys(t for t in texts if t not in self._cache))
        if missing:
            computed = self.provider.embed_batch(missing)
            with self._lock:
                for text, row in zip(missing, computed):
                    self._cache[text] = row
        with self._lock:
            rows = [self._cache[t] for t in texts]
        if not rows:
            return torch.zeros((0, self.provider.dim()), dtype=torch.float32)
        return torch.stack(rows)

    def encode(self, texts):
        base = self.base_vectors(texts).to(torch.float64)
        out = torch.zeros_like(base)
        nonzero = base.norm(dim=-1) > 0
        if nonzero.any():
            out[nonzero] = adapt(self.params, base[nonzero])
        return out

    def encode_queries(self, texts):
        return self.encode([self.instruction + t for t in texts])

    def encode_passages(self, texts):
        return self.encode(texts)

    def with_params(self, params):
        """共享基础向量缓存、换用另一组适配器参数的编码器"""
        clone = DenseEncoder(self.provider, params=params, instruction=self.instruction, cache=False)
        clone._cache = self._cache
        clone._lock = self._lock
        return clone


def save_adapter(path, params, loss, step):
    """
    保存适配器检查点：文件头 {magic, version, d, 损失类型, 步数} + 行优先的小端 float32 W

    Returns:
        str: 输出路径
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    weights = np.ascontiguousarray(params.W.detach().cpu().numpy().astype('<f4'))
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.dim,
                                       loss.encode('ascii')[:16], int(step)))
        f.write(weights.tobytes())
    logger.info(f"适配器检查点已保存: {path} (d={params.dim}, loss={loss}, step={step})")
    return path


def load_adapter(path):
    """
    读取适配器检查点

    Returns:
        tuple: (AdapterParams, dict) 第二项为 {"loss", "step"}

    Raises:
        FileNotFoundError: 当文件不存在时抛出
        CorpusFormatError: 当文件头或数据长度不符时抛出
    """
    if not os.path.exists(path):
        error_msg = f"检查点文件不存在: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    with open(path, 'rb') as f:
        header = f.read(CHECKPOINT_HEADER.size)
        if len(header) != CHECKPOINT_HEADER.size:
            error_msg = f"检查点文件头不完整: {path}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, 1)
        magic, version, dim, loss, step = CHECKPOINT_HEADER.unpack(header)
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            error_msg = f"不是受支持的检查点文件: {path}"
            logger.error(error_msg)
            raise CorpusFormatError(error_msg, 1)
        body = np.frombuffer(f.read(), dtype='<f4')
    if body.size != dim * dim:
        error_msg = f"检查点数据长度 {body.size} 与维度 {dim} 不符"
        logger.error(error_msg)
        raise CorpusFormatError(error_msg, 1)
    weights = torch.from_numpy(body.reshape(dim, dim).astype(np.float64))
    meta = {"loss": loss.rstrip(b"\x00").decode('ascii'), "step": step}
    return AdapterParams(W=weights), meta
