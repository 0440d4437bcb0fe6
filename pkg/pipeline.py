import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from bm25_index import Bm25Params, Bm25Retriever, build_index, idf, load_index, save_index
from corpus_ingest import TokenizerConfig, chunk_corpus, load_chunks, load_corpus, save_chunks
from embedding_provider import (AdapterParams, DenseEncoder, HuggingFaceEmbedder, PrecomputedEmbeddingStore,
                                RemoteEmbeddingClient, ToyEmbedder, load_adapter, save_adapter)
from evaluation import (DenseRetriever, EvalConfig, EvalQuery, EvalReport, evaluate, load_gold,
                        plot_alignment_uniformity, write_per_query_csv, write_report_json, write_retrieval_csv)
from fusion import FusionConfig, FusionRetriever, write_run
from listwise_trainer import INFONCE, ContrastivePair, TrainConfig, train, write_loss_curve
from llm_client import HttpChatClient, OllamaClient, StubLlmClient
from perturbation_harness import build_perturbed_queries, run_perturbation_eval, save_variants, write_perturbation_csv
from query_generation import QueryGenerator, load_queries, save_queries
from relevance_sampler import (PartitionScheme, generate_training_set, load_training_set, save_training_set,
                               subsample_queries)
from utils.errors import BMEmbedError, StageError, ValidationError
from utils.jsonl import read_json, write_json
from utils.logger import logger
from utils.seeding import derive_seed

TOOL_VERSION = "1.0.0"
STAGES = ("ingest", "index", "genqueries", "sample", "train", "train_cl", "eval_base", "eval_adapted", "eval_cl",
          "fuse", "perturb")
SKIPPABLE = ("genqueries", "train_cl", "eval_cl", "fuse", "perturb")
QUERY_SOURCES = ("stub", "http", "ollama", "file")
PROVIDER_KINDS = ("toy", "store", "remote", "hf")
METHOD_ORDER = ("BM25", "Base", "CL", "BMEmbed", "RRF", "RRF+BMEmbed")
EVAL_FILES = {
    "BM25": "bm25",
    "Base": "base",
    "CL": "cl",
    "BMEmbed": "bmembed",
    "RRF": "rrf",
    "RRF+BMEmbed": "rrf_bmembed",
}


@dataclass
class TokenizerSection:
    lowercase: bool = True


@dataclass
class Bm25Section:
    k1: float = 1.2
    b: float = 0.75


@dataclass
class SamplingSection:
    strategy: str = "fine_to_coarse"
    m: int = 9
    k: int = 1000
    first_len: int = 3
    growth: float = 2.0
    boundaries: list = None
    anchor_first: bool = False
    lists_per_query: int = 1
    query_fraction: float = 1.0
    workers: int = 1


@dataclass
class QueriesSection:
    source: str = "stub"
    path: str = None
    max_queries: int = None
    workers: int = 4
    model: str = None
    endpoint: str = None


@dataclass
class TrainingSection:
    loss: str = "listnet"
    alpha: float = 1.0
    infonce_tau: float = 0.05
    lr: float = 1e-4
    steps: int = 1000
    optimizer: str = "adam"
    normalize_scores: bool = False
    resample_each_epoch: bool = True
    listwise_batch: int = 1
    infonce_batch: int = 16


@dataclass
class ContrastiveSection:
    """对照基线：证据为正例、批内其他证据为负例的 InfoNCE 适配器；steps/lr 为空时沿用 training"""
    tau: float = 0.05
    batch: int = 16
    steps: int = None
    lr: float = None


@dataclass
class ProviderSection:
    kind: str = "toy"
    dim: int = 256
    seed: int = 0
    path: str = None
    model: str = None
    endpoint: str = None
    instruction: str = ""
    use_gpu: bool = True


@dataclass
class EvaluationSection:
    gold_path: str = None
    theta: float = 0.6
    uniformity_sample: int = 512
    sts_path: str = None


@dataclass
class FusionSection:
    u: float = 40
    depth: int = 100


@dataclass
class PerturbationSection:
    lexicon_path: str = None
    use_llm: bool = False


@dataclass
class PipelineConfig:
    """
    流水线配置，从一个 JSON 文件加载

    所有相对路径都相对于配置文件所在目录解析；base_dir 不参与配置哈希
    """
    corpus_path: str = None
    chunk_size: int = 256
    seed: int = 0
    output_dir: str = "runs"
    skip_stages: list = field(default_factory=list)
    workers: int = 1
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    bm25: Bm25Section = field(default_factory=Bm25Section)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    queries: QueriesSection = field(default_factory=QueriesSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    provider: ProviderSection = field(default_factory=ProviderSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    base_dir: str = field(default=".", compare=False, repr=False)

    def to_dict(self):
        data = asdict(self)
        data.pop("base_dir")
        return data

    def config_hash(self):
        """规范化 JSON（键排序、无多余空白）的 SHA-256"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'), ensure_ascii=False)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def resolve(self, path):
        if path is None:
            return None
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def run_dir(self):
        return os.path.join(self.resolve(self.output_dir), f"run-{self.config_hash()[:12]}")

    def partition_scheme(self):
        s = self.sampling
        boundaries = tuple(tuple(pair) for pair in s.boundaries) if s.boundaries else None
        return PartitionScheme(strategy=s.strategy, m=s.m, k=s.k, first_len=s.first_len, growth=s.growth,
                               boundaries=boundaries, anchor_first=s.anchor_first)

    def train_config(self):
        t = self.training
        return TrainConfig(loss=t.loss, alpha=t.alpha, infonce_tau=t.infonce_tau, lr=t.lr, steps=t.steps,
                           seed=self.seed, optimizer=t.optimizer, resample_each_epoch=t.resample_each_epoch,
                           normalize_scores=t.normalize_scores, listwise_batch=t.listwise_batch,
                           infonce_batch=t.infonce_batch)

    def contrastive_config(self):
        c = self.contrastive
        t = self.training
        return TrainConfig(loss=INFONCE, infonce_tau=c.tau, lr=t.lr if c.lr is None else c.lr,
                           steps=t.steps if c.steps is None else c.steps, seed=self.seed,
                           optimizer=t.optimizer, infonce_batch=c.batch)

    def eval_config(self):
        e = self.evaluation
        return EvalConfig(theta=e.theta, uniformity_sample=e.uniformity_sample, seed=self.seed,
                          sts_path=self.resolve(e.sts_path))

    def validate(self):
        """
        在执行任何阶段之前校验配置

        Raises:
            ValidationError: 当任一配置项不合法时抛出
        """
        if not self.corpus_path:
            error_msg = "缺少 corpus_path"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.chunk_size < 1:
            error_msg = f"chunk_size 必须大于等于1，实际为 {self.chunk_size}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        Bm25Params(k1=self.bm25.k1, b=self.bm25.b)
        self.partition_scheme()
        self.train_config()
        self.contrastive_config()
        self.eval_config()
        FusionConfig(u=self.fusion.u)
        if not 0 < self.sampling.query_fraction <= 1:
            error_msg = f"sampling.query_fraction 必须在 (0, 1] 内，实际为 {self.sampling.query_fraction}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.queries.source not in QUERY_SOURCES:
            error_msg = f"queries.source 必须是 {QUERY_SOURCES} 之一，实际为 {self.queries.source}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.queries.source == "file" and not self.queries.path:
            error_msg = "queries.source 为 file 时必须给出 queries.path"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.provider.kind not in PROVIDER_KINDS:
            error_msg = f"provider.kind 必须是 {PROVIDER_KINDS} 之一，实际为 {self.provider.kind}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if self.provider.kind in ("store", "hf") and not (self.provider.path or self.provider.model):
            error_msg = f"provider.kind 为 {self.provider.kind} 时必须给出 path 或 model"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        for stage in self.skip_stages:
            if stage not in SKIPPABLE:
                error_msg = f"阶段 {stage} 不能跳过，可跳过的阶段: {SKIPPABLE}"
                logger.error(error_msg)
                raise ValidationError(error_msg)
        if "genqueries" in self.skip_stages and self.queries.source != "file":
            error_msg = "只有 queries.source 为 file 时才能跳过 genqueries"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        if "train_cl" in self.skip_stages and "eval_cl" not in self.skip_stages:
            error_msg = "跳过 train_cl 时必须同时跳过 eval_cl"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        return self


def _build_section(cls, data, key_path):
    if not isinstance(data, dict):
        error_msg = f"配置项 {key_path or '<root>'} 必须是对象"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    known = {f.name: f for f in fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - set(known))
    if unknown:
        prefix = f"{key_path}." if key_path else ""
        error_msg = f"未知的配置项: {', '.join(prefix + k for k in unknown)}"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    values = {}
    for name, value in data.items():
        f = known[name]
        if is_dataclass(f.type):
            values[name] = _build_section(f.type, value, f"{key_path}.{name}" if key_path else name)
        else:
            values[name] = value
    return cls(**values)


def config_from_dict(data, base_dir="."):
    config = _build_section(PipelineConfig, data, "")
    config.base_dir = base_dir
    return config


def load_config(path, seed=None, output_dir=None):
    """
    读取并校验流水线配置

    Args:
        path (str): 配置文件路径
        seed (int): 覆盖配置中的 seed
        output_dir (str): 覆盖配置中的 output_dir

    Returns:
        PipelineConfig: 校验通过的配置

    Raises:
        ValidationError: 当配置含有未知键或取值不合法时抛出
    """
    data = read_json(path)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = os.path.abspath(output_dir)
    config = config_from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    return config.validate()


@dataclass
class RunManifest:
    """
    一次运行的清单：配置哈希、各阶段完成情况与产物路径（相对运行目录）

    运行目录下的每个文件（包括清单自身、配置快照和报告）都登记在 artifacts 中
    """
    config_hash: str
    run_dir: str
    tool_version: str = TOOL_VERSION
    stages: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def path(self, name):
        return os.path.join(self.run_dir, self.artifacts[name])

    def register(self, name, relative):
        """登记一个产物并返回其绝对路径，所在目录不存在时创建"""
        self.artifacts[name] = relative
        path = os.path.join(self.run_dir, relative)
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        return path

    def is_complete(self, stage):
        record = self.stages.get(stage)
        if not record or record.get("status") != "complete":
            return False
        return all(os.path.exists(os.path.join(self.run_dir, p)) for p in record.get("artifacts", []))

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "stages": self.stages,
            "artifacts": self.artifacts,
        }

    def save(self):
        return write_json(self.register("manifest", "manifest.json"), self.to_dict())

    @classmethod
    def load(cls, run_dir):
        data = read_json(os.path.join(run_dir, "manifest.json"))
        return cls(config_hash=data["config_hash"], run_dir=run_dir, tool_version=data.get("tool_version", ""),
                   stages=data.get("stages", {}), artifacts=data.get("artifacts", {}))


def build_provider(section, base_dir="."):
    """按配置创建基础向量提供者"""
    resolve = lambda p: p if p is None or os.path.isabs(p) else os.path.join(base_dir, p)
    if section.kind == "toy":
        return ToyEmbedder(dim=section.dim, seed=section.seed)
    if section.kind == "store":
        return PrecomputedEmbeddingStore(resolve(section.path))
    if section.kind == "remote":
        return RemoteEmbeddingClient(dim=section.dim, endpoint=section.endpoint, model=section.model)
    return HuggingFaceEmbedder(section.model or resolve(section.path), use_gpu=section.use_gpu)


def build_llm(section, index=None, seed=0, lexicon=None):
    """按配置创建大模型客户端；stub 使用语料级 idf"""
    if section.source == "http":
        return HttpChatClient(endpoint=section.endpoint, model=section.model)
    if section.source == "ollama":
        return OllamaClient(model_name=section.model or "llama3")
    idf_fn = (lambda term: idf(index, term)) if index is not None else None
    return StubLlmClient(idf=idf_fn, seed=seed, synonyms=lexicon)


class Pipeline:
    """
    按顺序执行各阶段，每个阶段完成后立即写清单

    清单中已完成且产物齐全的阶段在重跑时被跳过
    """

    def __init__(self, config, progress_callback=None):
        self.config = config
        self.progress_callback = progress_callback
        run_dir = config.run_dir()
        os.makedirs(run_dir, exist_ok=True)
        manifest_path = os.path.join(run_dir, "manifest.json")
        if os.path.exists(manifest_path):
            manifest = RunManifest.load(run_dir)
            if manifest.config_hash != config.config_hash():
                error_msg = f"运行目录 {run_dir} 的配置哈希与当前配置不一致"
                logger.error(error_msg)
                raise ValidationError(error_msg)
        else:
            manifest = RunManifest(config_hash=config.config_hash(), run_dir=run_dir)
            write_json(manifest.register("config", "config.json"), config.to_dict())
            manifest.save()
        self.manifest = manifest
        self._cache = {}
        self._provider = None

    def _artifact(self, name, relative):
        return self.manifest.register(name, relative)

    # 惰性加载各阶段产物，跳过的阶段不会重复计算
    def _documents(self):
        if "documents" not in self._cache:
            self._cache["documents"] = load_corpus(self.config.resolve(self.config.corpus_path))
        return self._cache["documents"]

    def _chunks(self):
        if "chunks" not in self._cache:
            self._cache["chunks"] = load_chunks(self.manifest.path("chunks"))
        return self._cache["chunks"]

    def _index(self):
        if "index" not in self._cache:
            self._cache["index"] = load_index(self.manifest.path("index"))
        return self._cache["index"]

    def _queries(self):
        if "queries" not in self._cache:
            if "queries" in self.manifest.artifacts:
                self._cache["queries"] = load_queries(self.manifest.path("queries"))
            else:
                self._cache["queries"] = load_queries(self.config.resolve(self.config.queries.path))
        return self._cache["queries"]

    def _lexicon(self):
        path = self.config.resolve(self.config.perturbation.lexicon_path)
        return read_json(path) if path else None

    def _gold(self):
        if "gold" not in self._cache:
            gold_path = self.config.resolve(self.config.evaluation.gold_path)
            if gold_path:
                self._cache["gold"] = load_gold(gold_path)
            else:
                logger.warning("未配置 evaluation.gold_path，使用合成查询及其证据作为评估集")
                self._cache["gold"] = [EvalQuery(query_id=q.query_id, text=q.text, gold_spans=list(q.evidence))
                                       for q in self._queries()]
        return self._cache["gold"]

    def _encoder(self):
        if self._provider is None:
            provider = build_provider(self.config.provider, self.config.base_dir)
            self._provider = DenseEncoder(provider, instruction=self.config.provider.instruction)
        return self._provider

    def _adapted_encoder(self):
        # 评估从检查点读取参数
        params, _ = load_adapter(self.manifest.path("adapter"))
        return self._encoder().with_params(params)

    def _cl_encoder(self):
        params, _ = load_adapter(self.manifest.path("adapter_cl"))
        return self._encoder().with_params(params)

    def _evaluate(self, name, retriever, queries, chunks):
        report = evaluate(retriever, queries, chunks, self.config.eval_config(), method=name,
                          tokenizer=TokenizerConfig(lowercase=self.config.tokenizer.lowercase))
        stem = EVAL_FILES[name]
        write_report_json(self._artifact(f"eval_{stem}", f"eval/{stem}.json"), report)
        write_per_query_csv(self._artifact(f"eval_{stem}_queries", f"eval/{stem}_queries.csv"), report)
        runs = {}
        for query in queries:
            runs[query.query_id] = retriever.retrieve(query.text, 10)
        write_run(self._artifact(f"run_{stem}", f"runs/{stem}.tsv"), runs)
        return [f"eval/{stem}.json", f"eval/{stem}_queries.csv", f"runs/{stem}.tsv"]

    def stage_ingest(self):
        tokenizer = TokenizerConfig(lowercase=self.config.tokenizer.lowercase)
        chunks = chunk_corpus(self._documents(), self.config.chunk_size, tokenizer, workers=self.config.workers)
        save_chunks(self._artifact("chunks", "chunks.jsonl"), chunks)
        self._cache["chunks"] = chunks
        return ["chunks.jsonl"]

    def stage_index(self):
        tokenizer = TokenizerConfig(lowercase=self.config.tokenizer.lowercase)
        index = build_index(self._chunks(), Bm25Params(k1=self.config.bm25.k1, b=self.config.bm25.b), tokenizer)
        save_index(index, self._artifact("index", "index.jsonl"))
        self._cache["index"] = index
        return ["index.jsonl"]

    def stage_genqueries(self):
        section = self.config.queries
        if section.source == "file":
            queries = load_queries(self.config.resolve(section.path))
        else:
            llm = build_llm(section, self._index(), self.config.seed)
            generator = QueryGenerator(llm, max_workers=section.workers)
            queries = generator.generate(self._documents(), max_queries=section.max_queries, seed=self.config.seed,
                                         progress_callback=self.progress_callback)
        if not queries:
            error_msg = "没有生成任何查询"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        save_queries(self._artifact("queries", "queries.jsonl"), queries)
        self._cache["queries"] = queries
        return ["queries.jsonl"]

    def _sample(self, seed):
        section = self.config.sampling
        queries = subsample_queries(self._queries(), section.query_fraction, self.config.seed)
        return generate_training_set(queries, self._index(), self.config.partition_scheme(),
                                     lists_per_query=section.lists_per_query, seed=seed, workers=section.workers)

    def stage_sample(self):
        samples = self._sample(self.config.seed)
        if not samples:
            error_msg = "没有生成任何训练样本，请检查 k、m 与语料规模"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        save_training_set(self._artifact("samples", "samples.jsonl"), samples)
        return ["samples.jsonl"]

    def stage_train(self):
        train_config = self.config.train_config()
        encoder = self._encoder()
        chunk_texts = {c.chunk_id: c.text for c in self._chunks()}
        resample = None
        if train_config.loss == INFONCE:
            samples = [ContrastivePair(query_text=q.text, positive_text=" ".join(q.evidence))
                       for q in self._queries() if q.evidence]
        else:
            samples = load_training_set(self.manifest.path("samples"))
            resample = lambda epoch: self._sample(derive_seed(self.config.seed, "epoch", epoch))

        params = AdapterParams.zeros(encoder.provider.dim())
        trained, reports = train(samples, encoder, params, train_config, chunk_texts=chunk_texts,
                                 resample=resample, progress_callback=self.progress_callback)
        final_step = reports[-1].step if reports else 0
        save_adapter(self._artifact("adapter", "adapter.bin"), trained, train_config.loss, final_step)
        write_loss_curve(self._artifact("loss_curve", "loss_curve.csv"), reports)
        return ["adapter.bin", "loss_curve.csv"]

    def stage_train_cl(self):
        """对照基线：合成查询与其证据组成正例对，批内其他证据作负例，用 InfoNCE 训练同结构的适配器"""
        train_config = self.config.contrastive_config()
        encoder = self._encoder()
        pairs = [ContrastivePair(query_text=q.text, positive_text=" ".join(q.evidence))
                 for q in self._queries() if q.evidence]
        if not pairs:
            error_msg = "没有带证据的查询，无法训练对比学习基线"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        trained, reports = train(pairs, encoder, AdapterParams.zeros(encoder.provider.dim()), train_config,
                                 progress_callback=self.progress_callback)
        final_step = reports[-1].step if reports else 0
        save_adapter(self._artifact("adapter_cl", "cl/adapter.bin"), trained, train_config.loss, final_step)
        write_loss_curve(self._artifact("loss_curve_cl", "cl/loss_curve.csv"), reports)
        return ["cl/adapter.bin", "cl/loss_curve.csv"]

    def stage_eval_base(self):
        chunks = self._chunks()
        gold = self._gold()
        produced = self._evaluate("BM25", Bm25Retriever(self._index()), gold, chunks)
        produced += self._evaluate("Base", DenseRetriever(self._encoder(), chunks, name="Base"), gold, chunks)
        return produced

    def stage_eval_adapted(self):
        chunks = self._chunks()
        retriever = DenseRetriever(self._adapted_encoder(), chunks, name="BMEmbed")
        return self._evaluate("BMEmbed", retriever, self._gold(), chunks)

    def stage_eval_cl(self):
        chunks = self._chunks()
        return self._evaluate("CL", DenseRetriever(self._cl_encoder(), chunks, name="CL"), self._gold(), chunks)

    def _fusion(self, dense):
        return FusionRetriever([Bm25Retriever(self._index()), dense], FusionConfig(u=self.config.fusion.u),
                               depth=self.config.fusion.depth)

    def stage_fuse(self):
        chunks = self._chunks()
        gold = self._gold()
        base = DenseRetriever(self._encoder(), chunks, name="Base")
        adapted = DenseRetriever(self._adapted_encoder(), chunks, name="BMEmbed")
        produced = self._evaluate("RRF", self._fusion(base), gold, chunks)
        produced += self._evaluate("RRF+BMEmbed", self._fusion(adapted), gold, chunks)
        return produced

    def stage_perturb(self):
        chunks = self._chunks()
        gold = self._gold()
        index = self._index()
        llm = build_llm(self.config.queries, index, self.config.seed) if self.config.perturbation.use_llm else None
        variants = build_perturbed_queries(gold, llm=llm, idf=lambda term: idf(index, term),
                                           lexicon=self._lexicon(), seed=self.config.seed)
        save_variants(self._artifact("variants", "perturb/variants.jsonl"), variants)
        methods = {
            "BM25": Bm25Retriever(index),
            "Base": DenseRetriever(self._encoder(), chunks, name="Base"),
            "BMEmbed": DenseRetriever(self._adapted_encoder(), chunks, name="BMEmbed"),
        }
        rows = run_perturbation_eval(methods, variants, gold, chunks, self.config.eval_config())
        write_perturbation_csv(self._artifact("perturbation_csv", "perturb/perturbation.csv"), rows)
        write_json(self._artifact("perturbation", "perturb/perturbation.json"), rows)
        return ["perturb/variants.jsonl", "perturb/perturbation.csv", "perturb/perturbation.json"]

    def run(self):
        skip = set(self.config.skip_stages)
        for number, stage in enumerate(STAGES, start=1):
            if stage in skip:
                logger.info(f"[{number}/{len(STAGES)}] 阶段 {stage} 按配置跳过")
                if stage == "genqueries":
                    self._queries()
                continue
            if self.manifest.is_complete(stage):
                logger.info(f"[{number}/{len(STAGES)}] 阶段 {stage} 已完成，跳过")
                continue
            logger.info(f"[{number}/{len(STAGES)}] 开始阶段 {stage}")
            try:
                produced = getattr(self, f"stage_{stage}")()
            except ValidationError:
                logger.error(f"阶段 {stage} 输入校验失败", exc_info=True)
                raise
            except BMEmbedError as e:
                error_msg = f"阶段 {stage} 失败: {str(e)}"
                logger.error(error_msg)
                raise StageError(error_msg, stage) from e
            except Exception as e:
                error_msg = f"阶段 {stage} 出现未知错误: {str(e)}"
                logger.error(error_msg, exc_info=True)
                raise StageError(error_msg, stage) from e
            self.manifest.stages[stage] = {"status": "complete", "artifacts": produced}
            self.manifest.save()
            logger.info(f"阶段 {stage} 完成")
        self.manifest.save()
        return self.manifest


def run_pipeline(config, progress_callback=None, report=True):
    """
    执行完整流水线：ingest → index → genqueries → sample → train → train_cl → eval_base → eval_adapted → eval_cl → fuse → perturb

    Args:
        config (PipelineConfig): 已校验的配置
        progress_callback (callable): 进度回调函数
        report (bool): 完成后是否生成报告

    Returns:
        RunManifest: 运行清单

    Raises:
        ValidationError: 当配置或某阶段输入不合法时抛出
        StageError: 当某阶段执行失败时抛出，已完成阶段的产物保留
    """
    config.validate()
    logger.info(f"流水线开始，运行目录: {config.run_dir()}")
    manifest = Pipeline(config, progress_callback).run()
    if report:
        emit_report(manifest)
    return manifest


def _load_report(path):
    data = read_json(path)
    return EvalReport(**data)


def emit_report(manifest):
    """
    汇总评估结果，生成报告目录 report/：report.json、retrieval.csv、perturbation.csv 与对齐度-均匀性散点图

    报告中的数值直接取自各评估 JSON

    Returns:
        dict: 报告文件路径

    Raises:
        StageError: 当评估阶段未完成或评估产物缺失时抛出
    """
    for stage in ("eval_base", "eval_adapted"):
        if not manifest.is_complete(stage):
            error_msg = f"阶段 {stage} 未完成，无法生成报告"
            logger.error(error_msg)
            raise StageError(error_msg, stage)

    reports = []
    for method in METHOD_ORDER:
        key = f"eval_{EVAL_FILES[method]}"
        if key not in manifest.artifacts:
            continue
        path = manifest.path(key)
        if not os.path.exists(path):
            error_msg = f"评估结果缺失: {path}"
            logger.error(error_msg)
            raise StageError(error_msg, "report")
        reports.append(_load_report(path))

    perturbation = read_json(manifest.path("perturbation")) if "perturbation" in manifest.artifacts else None

    payload = {
        "config_hash": manifest.config_hash,
        "tool_version": manifest.tool_version,
        "methods": [r.retrieval_row() for r in reports],
        "perturbation": perturbation,
    }
    outputs = {
        "report": write_json(manifest.register("report", "report/report.json"), payload),
        "retrieval": write_retrieval_csv(manifest.register("report_retrieval", "report/retrieval.csv"), reports),
        "scatter": plot_alignment_uniformity(manifest.register("report_scatter", "report/alignment_uniformity.svg"),
                                             reports),
    }
    if perturbation is not None:
        outputs["perturbation"] = write_perturbation_csv(
            manifest.register("report_perturbation", "report/perturbation.csv"), perturbation)
    manifest.save()
    logger.info(f"报告已生成: {os.path.join(manifest.run_dir, 'report')}")
    return outputs
