"""
可复现的随机数流

所有随机抽样都使用 numpy 的 Philox 计数器型生成器。每条流的 128 位密钥
由 SHA-256(各组成部分以 NUL 连接) 的前 16 字节得到，因此同一个 (seed, 查询ID, 轮次)
在任何平台、串行或并行执行下都得到同一条流。
"""
import hashlib

import numpy as np


def derive_seed(*parts):
    """
    由任意组成部分派生出一个 128 位整数种子

    Args:
        *parts: 种子、查询ID、轮次等，统一转成字符串参与哈希

    Returns:
        int: 0 <= 值 < 2**128
    """
    payload = '\x00'.join(str(part) for part in parts).encode('utf-8')
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:16], 'little')


def make_rng(*parts):
    """
    创建一条独立的 Philox 随机数流

    Args:
        *parts: 参与派生密钥的组成部分

    Returns:
        numpy.random.Generator: 随机数生成器
    """
    return np.random.Generator(np.random.Philox(key=derive_seed(*parts)))
