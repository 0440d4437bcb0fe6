import argparse
import sys

from utils.errors import BMEmbedError, ValidationError
from utils.logger import logger

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def exception_hook(exctype, value, traceback):
    """
    全局异常处理钩子

    捕获所有未处理的异常并记录日志
    """
    logger.error("未捕获的异常", exc_info=(exctype, value, traceback))


def _add_provider_args(parser):
    parser.add_argument("--provider", default="toy", choices=["toy", "store", "remote", "hf"], help="向量提供者")
    parser.add_argument("--provider-path", default=None, help="向量库文件或本地模型目录")
    parser.add_argument("--provider-model", default=None, help="远程或 transformers 模型名")
    parser.add_argument("--dim", type=int, default=256, help="向量维度（toy/remote）")
    parser.add_argument("--instruction", default="", help="加在查询前的指令文本")


def _encoder_from_args(args, adapter_path=None):
    from embedding_provider import DenseEncoder, load_adapter
    from pipeline import ProviderSection, build_provider

    section = ProviderSection(kind=args.provider, dim=args.dim, path=args.provider_path,
                              model=args.provider_model, instruction=args.instruction)
    encoder = DenseEncoder(build_provider(section), instruction=args.instruction)
    if adapter_path:
        params, meta = load_adapter(adapter_path)
        logger.info(f"已加载适配器: {adapter_path} (loss={meta['loss']}, step={meta['step']})")
        encoder = encoder.with_params(params)
    return encoder


def _parse_boundaries(text):
    if not text:
        return None
    pairs = []
    for item in text.split(","):
        lo, hi = item.split("-")
        pairs.append((int(lo), int(hi)))
    return tuple(pairs)


def cmd_ingest(args):
    from corpus_ingest import TokenizerConfig, chunk_corpus, load_corpus, save_chunks

    documents = load_corpus(args.corpus)
    chunks = chunk_corpus(documents, args.chunk_size, TokenizerConfig(lowercase=not args.no_lowercase),
                          workers=args.workers)
    save_chunks(args.out, chunks)


def cmd_index(args):
    from bm25_index import Bm25Params, build_index, save_index
    from corpus_ingest import TokenizerConfig, load_chunks

    index = build_index(load_chunks(args.chunks), Bm25Params(k1=args.k1, b=args.b),
                        TokenizerConfig(lowercase=not args.no_lowercase))
    save_index(index, args.out)


def cmd_search(args):
    from bm25_index import load_index, search, write_search_tsv
    from corpus_ingest import tokenize

    index = load_index(args.index)
    write_search_tsv(search(index, tokenize(args.query, index.tokenizer), args.k), sys.stdout)


def cmd_genqueries(args):
    from bm25_index import load_index
    from corpus_ingest import load_corpus
    from pipeline import QueriesSection, build_llm
    from query_generation import QueryGenerator, save_queries

    index = load_index(args.index) if args.index else None
    section = QueriesSection(source=args.source, model=args.model, endpoint=args.endpoint, workers=args.workers)
    generator = QueryGenerator(build_llm(section, index, args.seed), max_workers=args.workers)
    queries = generator.generate(load_corpus(args.corpus), max_queries=args.max_queries, seed=args.seed)
    save_queries(args.out, queries)


def cmd_sample(args):
    from bm25_index import load_index
    from query_generation import load_queries
    from relevance_sampler import PartitionScheme, generate_training_set, save_training_set, subsample_queries

    scheme = PartitionScheme(strategy=args.strategy, m=args.m, k=args.k, first_len=args.first_len,
                             growth=args.growth, boundaries=_parse_boundaries(args.boundaries),
                             anchor_first=args.anchor_first)
    queries = subsample_queries(load_queries(args.queries), args.query_fraction, args.seed)
    samples = generate_training_set(queries, load_index(args.index), scheme, lists_per_query=args.lists_per_query,
                                    seed=args.seed, workers=args.workers)
    save_training_set(args.out, samples)


def cmd_train(args):
    from corpus_ingest import load_chunks
    from embedding_provider import AdapterParams, save_adapter
    from listwise_trainer import INFONCE, ContrastivePair, TrainConfig, train, write_loss_curve
    from query_generation import load_queries
    from relevance_sampler import load_training_set

    config = TrainConfig(loss=args.loss, alpha=args.alpha, infonce_tau=args.tau, lr=args.lr, steps=args.steps,
                         seed=args.seed, optimizer=args.optimizer, normalize_scores=args.normalize_scores)
    encoder = _encoder_from_args(args)
    if config.loss == INFONCE:
        if not args.queries:
            error_msg = "infonce 训练需要 --queries"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        samples = [ContrastivePair(q.text, " ".join(q.evidence)) for q in load_queries(args.queries) if q.evidence]
        chunk_texts = None
    else:
        if not (args.samples and args.chunks):
            error_msg = f"{config.loss} 训练需要 --samples 与 --chunks"
            logger.error(error_msg)
            raise ValidationError(error_msg)
        samples = load_training_set(args.samples)
        chunk_texts = {c.chunk_id: c.text for c in load_chunks(args.chunks)}

    trained, reports = train(samples, encoder, AdapterParams.zeros(encoder.provider.dim()), config,
                             chunk_texts=chunk_texts)
    save_adapter(args.out, trained, config.loss, reports[-1].step if reports else 0)
    if args.loss_curve:
        write_loss_curve(args.loss_curve, reports)


def cmd_eval(args):
    from corpus_ingest import load_chunks
    from evaluation import DenseRetriever, EvalConfig, RunRetriever, evaluate, load_gold, write_report_json
    from fusion import read_run

    chunks = load_chunks(args.chunks)
    if args.run:
        source = RunRetriever(read_run(args.run), name=args.method)
    else:
        source = DenseRetriever(_encoder_from_args(args, args.adapter), chunks, name=args.method)
    config = EvalConfig(theta=args.theta, seed=args.seed, sts_path=args.sts)
    report = evaluate(source, load_gold(args.gold), chunks, config, method=args.method)
    write_report_json(args.out, report)


def cmd_fuse(args):
    from fusion import FusionConfig, fuse_runs, read_run, write_run

    runs = [read_run(args.bm25_run), read_run(args.dense_run)]
    write_run(args.out, fuse_runs(runs, FusionConfig(u=args.u), k=args.k))


def cmd_perturb(args):
    from bm25_index import Bm25Retriever, idf, load_index
    from corpus_ingest import load_chunks
    from evaluation import DenseRetriever, EvalConfig, load_gold
    from perturbation_harness import build_perturbed_queries, run_perturbation_eval, save_variants, write_perturbation_csv
    from utils.jsonl import read_json

    chunks = load_chunks(args.chunks)
    index = load_index(args.index)
    gold = load_gold(args.gold)
    lexicon = read_json(args.lexicon) if args.lexicon else None
    variants = build_perturbed_queries(gold, idf=lambda term: idf(index, term), lexicon=lexicon, seed=args.seed)
    if args.variants_out:
        save_variants(args.variants_out, variants)

    methods = {}
    for name in [m.strip() for m in args.methods.split(",") if m.strip()]:
        if name == "bm25":
            methods[name] = Bm25Retriever(index)
        elif name == "dense":
            methods[name] = DenseRetriever(_encoder_from_args(args), chunks, name=name)
        elif name == "dense+adapter":
            if not args.adapter:
                error_msg = "dense+adapter 需要 --adapter"
                logger.error(error_msg)
                raise ValidationError(error_msg)
            methods[name] = DenseRetriever(_encoder_from_args(args, args.adapter), chunks, name=name)
        else:
            error_msg = f"未知的检索方法: {name}"
            logger.error(error_msg)
            raise ValidationError(error_msg)
    rows = run_perturbation_eval(methods, variants, gold, chunks, EvalConfig(seed=args.seed))
    write_perturbation_csv(args.out, rows)


def cmd_run(args):
    from pipeline import load_config, run_pipeline

    manifest = run_pipeline(load_config(args.config, seed=args.seed, output_dir=args.out_dir))
    print(manifest.run_dir)


def cmd_sweep(args):
    from sweep import SWEEP_PRESETS, expand_grid, parse_assignment, run_sweep

    if args.preset and args.set:
        error_msg = "--preset 与 --set 不能同时使用"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    if args.preset:
        overrides_list = SWEEP_PRESETS[args.preset]
    elif args.set:
        overrides_list = expand_grid(dict(parse_assignment(text) for text in args.set))
    else:
        error_msg = "需要 --preset 或至少一个 --set"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    outputs = run_sweep(args.config, overrides_list, output_dir=args.out_dir, seed=args.seed,
                        name=args.name or args.preset)
    for name, path in outputs.items():
        print(f"{name}\t{path}")


def cmd_report(args):
    from pipeline import RunManifest, emit_report

    outputs = emit_report(RunManifest.load(args.run_dir))
    for name, path in outputs.items():
        print(f"{name}\t{path}")


def cmd_make_fixture(args):
    from jargon_fixture import build_jargon_fixture

    paths = build_jargon_fixture(args.out_dir, n_docs=args.n_docs, seed=args.seed)
    for name, path in paths.items():
        print(f"{name}\t{path}")


def cmd_check_env(args):
    from check_env import main as check_env_main

    check_env_main()


def build_parser():
    parser = argparse.ArgumentParser(prog="bmembed", description="基于 BM25 排序列表的领域向量模型适配工具")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="读取语料并切块")
    p.add_argument("--corpus", required=True)
    p.add_argument("--chunk-size", type=int, default=256)
    p.add_argument("--no-lowercase", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="构建 BM25 倒排索引")
    p.add_argument("--chunks", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--no-lowercase", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="BM25 检索，输出 rank\\tchunk_id\\tscore")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("genqueries", help="用大模型生成领域查询")
    p.add_argument("--corpus", required=True)
    p.add_argument("--source", default="stub", choices=["stub", "http", "ollama"])
    p.add_argument("--index", default=None, help="stub 使用的索引（提供 idf）")
    p.add_argument("--model", default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--max-queries", type=int, default=None)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genqueries)

    p = sub.add_parser("sample", help="从 BM25 排序列表中抽取训练样本")
    p.add_argument("--queries", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--strategy", default="fine_to_coarse", choices=["uniform", "fine_to_coarse", "explicit"])
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--m", type=int, default=9)
    p.add_argument("--first-len", type=int, default=3)
    p.add_argument("--growth", type=float, default=2.0)
    p.add_argument("--boundaries", default=None, help="explicit 模式的区间，如 0-2,2-6,6-12,12-20")
    p.add_argument("--anchor-first", action="store_true")
    p.add_argument("--lists-per-query", type=int, default=1)
    p.add_argument("--query-fraction", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="训练适配器")
    p.add_argument("--samples", default=None)
    p.add_argument("--chunks", default=None)
    p.add_argument("--queries", default=None, help="infonce 使用的查询文件")
    p.add_argument("--loss", default="listnet", choices=["listnet", "listmle", "infonce"])
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--normalize-scores", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-curve", default=None)
    p.add_argument("--out", required=True)
    _add_provider_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="评估检索结果或向量模型")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--run", default=None, help="检索结果文件")
    source.add_argument("--adapter", default=None, help="适配器检查点")
    p.add_argument("--chunks", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--method", default="dense")
    p.add_argument("--theta", type=float, default=0.6)
    p.add_argument("--sts", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_provider_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="RRF 融合两个检索结果")
    p.add_argument("--bm25-run", required=True)
    p.add_argument("--dense-run", required=True)
    p.add_argument("--u", type=float, default=40)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("perturb", help="查询扰动实验")
    p.add_argument("--gold", required=True)
    p.add_argument("--chunks", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--methods", default="bm25,dense")
    p.add_argument("--adapter", default=None)
    p.add_argument("--lexicon", default=None)
    p.add_argument("--variants-out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_provider_args(p)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("run", help="按配置文件执行完整流水线")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="在一份配置上按参数网格执行多次流水线并汇总")
    p.add_argument("--config", required=True)
    p.add_argument("--preset", default=None, choices=["partition", "depth", "temperature", "queries"])
    p.add_argument("--set", action="append", default=[], metavar="KEY=V1,V2",
                   help="点号配置键与候选取值，可重复，多个键取笛卡尔积")
    p.add_argument("--name", default=None, help="扫描名，决定输出目录 sweep-<name>")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="为已完成的运行生成报告")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-fixture", help="生成行话语料测试集")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-docs", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("check-env", help="检查运行环境")
    p.set_defaults(func=cmd_check_env)
    return parser


def main(argv=None):
    """
    命令行入口

    Returns:
        int: 退出码，0 成功，2 输入校验失败，3 阶段执行失败
    """
    sys.excepthook = exception_hook
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValidationError, FileNotFoundError) as e:
        logger.error(f"输入校验失败: {str(e)}")
        return EXIT_VALIDATION
    except (BMEmbedError, RuntimeError, ValueError) as e:
        logger.error(f"执行失败: {str(e)}", exc_info=True)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
