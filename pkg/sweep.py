import copy
import csv
import hashlib
import itertools
import json
import os

from evaluation import EvalReport, RETRIEVAL_COLUMNS, plot_alignment_uniformity
from pipeline import config_from_dict, run_pipeline
from utils.errors import ValidationError
from utils.jsonl import read_json, write_json
from utils.logger import logger


def expand_grid(assignments):
    """
    把 {键: [取值...]} 展开成覆盖项的笛卡尔积，键按给定顺序，最后一个键变化最快

    Returns:
        list: 每个元素是一组 {键: 取值} 覆盖项
    """
    keys = list(assignments)
    for key in keys:
        if not assignments[key]:
            error_msg = f"扫描参数 {key} 没有任何取值"
            logger.error(error_msg)
            raise ValidationError(error_msg)
    return [dict(zip(keys, values)) for values in itertools.product(*(assignments[k] for k in keys))]


SWEEP_PRESETS = {
    # 区间数与两种划分策略
    "partition": expand_grid({
        "sampling.k": [1000],
        "training.alpha": [1.0],
        "sampling.strategy": ["fine_to_coarse", "uniform"],
        "sampling.m": [6, 7, 8, 9, 10],
    }),
    # 排序列表深度
    "depth": expand_grid({
        "sampling.m": [10],
        "training.alpha": [1.0],
        "sampling.strategy": ["fine_to_coarse", "uniform"],
        "sampling.k": [1000, 500, 200],
    }),
    # 温度 1/alpha 取 0.1、0.2、0.5、0.7、1.0
    "temperature": expand_grid({
        "sampling.k": [500],
        "sampling.m": [10],
        "sampling.strategy": ["fine_to_coarse"],
        "training.alpha": [10.0, 5.0, 2.0, 1 / 0.7, 1.0],
    }),
    # 查询数减半时每个查询多抽一倍的列表，训练样本总数不变
    "queries": [
        {"sampling.query_fraction": fraction, "sampling.lists_per_query": lists}
        for fraction, lists in ((1.0, 1), (0.5, 2), (0.25, 4))
    ],
}


def parse_assignment(text):
    """
    解析命令行的 key=v1,v2 形式，取值优先按 JSON 解析，失败时作为字符串

    Returns:
        tuple: (键, 取值列表)
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not sep or not key or not values:
        error_msg = f"扫描参数格式应为 key=v1,v2，实际为 {text!r}"
        logger.error(error_msg)
        raise ValidationError(error_msg)

    def _value(item):
        try:
            return json.loads(item)
        except json.JSONDecodeError:
            return item

    return key, [_value(v) for v in values]


def apply_overrides(data, overrides):
    """
    返回应用了点号键覆盖项的配置副本，原配置不变

    Raises:
        ValidationError: 当路径上的某一级不是对象时抛出
    """
    result = copy.deepcopy(data)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = result
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                error_msg = f"覆盖项 {dotted} 的上级 {part} 不是对象"
                logger.error(error_msg)
                raise ValidationError(error_msg)
        node[parts[-1]] = value
    return result


def sweep_label(overrides):
    if not overrides:
        return "default"
    return " ".join(f"{key.split('.')[-1]}={value:g}" if isinstance(value, float) else f"{key.split('.')[-1]}={value}"
                    for key, value in overrides.items())


def _sweep_name(overrides_list):
    canonical = json.dumps(overrides_list, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def run_sweep(config_path, overrides_list, output_dir=None, seed=None, name=None, progress_callback=None):
    """
    在同一份基础配置上依次应用每组覆盖项并执行完整流水线，汇总各次运行的 BMEmbed 指标

    所有配置在第一次运行开始之前全部校验；各次运行仍是普通的可续跑运行目录，
    中途失败后重新执行同一扫描会跳过已完成的阶段

    输出目录 sweep-<name>/ 下写 sweep.csv、sweep.json 与各次运行的对齐度-均匀性散点图

    Args:
        config_path (str): 基础配置文件
        overrides_list (list): 覆盖项列表，每项是 {点号键: 取值}
        output_dir (str): 覆盖配置中的 output_dir
        seed (int): 覆盖配置中的 seed
        name (str): 扫描名，缺省时取覆盖项的哈希
        progress_callback (callable): 进度回调函数

    Returns:
        dict: 汇总文件路径

    Raises:
        ValidationError: 当任一组覆盖项得到的配置不合法时抛出
        StageError: 当某次运行失败时抛出
    """
    if not overrides_list:
        error_msg = "扫描至少需要一组覆盖项"
        logger.error(error_msg)
        raise ValidationError(error_msg)
    base = read_json(config_path)
    if seed is not None:
        base["seed"] = seed
    if output_dir is not None:
        base["output_dir"] = os.path.abspath(output_dir)
    base_dir = os.path.dirname(os.path.abspath(config_path))

    configs = []
    for overrides in overrides_list:
        try:
            configs.append(config_from_dict(apply_overrides(base, overrides), base_dir=base_dir).validate())
        except ValidationError as e:
            error_msg = f"扫描配置 {sweep_label(overrides)} 不合法: {str(e)}"
            logger.error(error_msg)
            raise ValidationError(error_msg) from e

    sweep_dir = os.path.join(configs[0].resolve(configs[0].output_dir), f"sweep-{name or _sweep_name(overrides_list)}")
    keys = list(dict.fromkeys(key for overrides in overrides_list for key in overrides))
    rows = []
    reports = []
    labels = []
    for number, (overrides, config) in enumerate(zip(overrides_list, configs), start=1):
        label = sweep_label(overrides)
        logger.info(f"[{number}/{len(configs)}] 扫描运行 {label}")
        manifest = run_pipeline(config, progress_callback=progress_callback)
        report = EvalReport(**read_json(manifest.path("eval_bmembed")))
        row = {"label": label, "run_dir": os.path.relpath(manifest.run_dir, os.path.dirname(sweep_dir))}
        row.update({key: overrides.get(key) for key in keys})
        row.update(report.retrieval_row())
        rows.append(row)
        reports.append(report)
        labels.append(label)

    os.makedirs(sweep_dir, exist_ok=True)
    csv_path = os.path.join(sweep_dir, "sweep.csv")
    with open(csv_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=["label", "run_dir"] + keys + RETRIEVAL_COLUMNS, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in row.items()})
    outputs = {
        "csv": csv_path,
        "json": write_json(os.path.join(sweep_dir, "sweep.json"), {"config": os.path.abspath(config_path),
                                                                   "runs": rows}),
        "scatter": plot_alignment_uniformity(os.path.join(sweep_dir, "alignment_uniformity.svg"), reports,
                                             labels=labels),
    }
    logger.info(f"扫描完成，共 {len(rows)} 次运行: {sweep_dir}")
    return outputs
