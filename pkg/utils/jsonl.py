import json
import os

from utils.errors import CorpusFormatError
from utils.logger import logger


def read_jsonl(path):
    """
    逐行读取行式JSON文件

    空行会被跳过；任何一行无法解析或不是JSON对象时抛出带行号的异常

    Args:
        path (str): 文件路径

    Yields:
        tuple: (行号, dict) 行号从1开始

    Raises:
        FileNotFoundError: 当文件不存在时抛出
        CorpusFormatError: 当某一行格式错误时抛出
    """
    if not os.path.exists(path):
        error_msg = f"文件不存在: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)

    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                error_msg = f"{path} 第{line_number}行不是合法的JSON: {e.msg}"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number) from e
            if not isinstance(record, dict):
                error_msg = f"{path} 第{line_number}行应为JSON对象"
                logger.error(error_msg)
                raise CorpusFormatError(error_msg, line_number)
            yield line_number, record


def write_jsonl(path, records):
    """
    将记录写成行式JSON，输出字节稳定（键顺序保持插入顺序，不转义非ASCII字符）

    Args:
        path (str): 输出路径
        records (iterable): dict 序列

    Returns:
        int: 写出的记录数
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False))
            f.write('\n')
            count += 1
    return count


def write_json(path, payload):
    """写出缩进格式的JSON文档（键排序，保证重复运行字节一致）"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write('\n')
    return path


def read_json(path):
    """读取JSON文档"""
    if not os.path.exists(path):
        error_msg = f"文件不存在: {path}"
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
