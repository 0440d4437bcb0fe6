import os
import tempfile

# 日志写到临时目录，必须在导入任何项目模块之前设置
os.environ.setdefault("BMEMBED_LOG_DIR", os.path.join(tempfile.gettempdir(), "bmembed-test-logs"))

import pytest
import torch

from corpus_ingest import Document, chunk_corpus
from embedding_provider import DenseEncoder, ToyEmbedder


class FixedProvider:
    """按文本查表返回预先给定向量的提供者，未登记的文本返回零向量"""

    def __init__(self, vectors, dim=None):
        self.vectors = {text: torch.as_tensor(v, dtype=torch.float32) for text, v in vectors.items()}
        self._dim = dim or len(next(iter(self.vectors.values())))
        self.calls = 0

    def dim(self):
        return self._dim

    def embed_batch(self, texts):
        self.calls += 1
        rows = [self.vectors.get(t, torch.zeros(self._dim)) for t in texts]
        if not rows:
            return torch.zeros((0, self._dim))
        return torch.stack(rows)


class CannedLlm:
    """按提示词中出现的关键字返回预设回复，并记录收到的提示词"""

    def __init__(self, replies):
        self.replies = replies
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        for marker, reply in self.replies.items():
            if marker in prompt:
                return reply(prompt) if callable(reply) else reply
        return ""


@pytest.fixture
def fixed_provider():
    return FixedProvider


@pytest.fixture
def canned_llm():
    return CannedLlm


@pytest.fixture
def tiny_documents():
    return [
        Document("alpha", "The PHX-121 compressor is assembled at the Lorvik facility. It operates at 400 kilopascals."),
        Document("beta", "Technicians replace the gasket of the QRL-480 every 12 weeks. The QRL-480 is a pump."),
        Document("gamma", "Field crews call the PHX-121 the phoenix karika. Glossary sheet one."),
        Document("delta", "Spare units are stored in climate controlled racks near the loading bay."),
    ]


@pytest.fixture
def tiny_chunks(tiny_documents):
    return chunk_corpus(tiny_documents, chunk_size=8)


@pytest.fixture
def toy_encoder():
    return DenseEncoder(ToyEmbedder(dim=32, seed=3))
