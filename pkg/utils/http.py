import os
import time

import httpx

from utils.logger import logger

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def get_env_str(name, default=''):
    """读取字符串环境变量，未设置时返回默认值"""
    value = os.environ.get(name)
    return value if value else default


def post_with_retry(client, url, payload, headers=None, max_attempts=5, base_delay=1.0, sleep=time.sleep):
    """
    发送POST请求，对429和5xx响应以及网络异常做指数退避重试

    第 n 次失败后等待 base_delay * 2**n 秒

    Args:
        client (httpx.Client): HTTP客户端
        url (str): 请求地址
        payload (dict): JSON请求体
        headers (dict): 请求头
        max_attempts (int): 最大尝试次数
        base_delay (float): 初始退避时间（秒）
        sleep (callable): 等待函数，测试时可替换

    Returns:
        dict: 响应JSON

    Raises:
        RuntimeError: 重试耗尽或遇到不可重试的错误时抛出
    """
    last_error = None
    for attempt in range(max_attempts):
        try:
            response = client.post(url, json=payload, headers=headers or {})
        except httpx.HTTPError as e:
            last_error = f"网络错误: {str(e)}"
            logger.warning(f"请求 {url} 第{attempt + 1}次失败: {last_error}")
        else:
            if response.status_code == 200:
                return response.json()
            if response.status_code not in RETRYABLE_STATUS:
                error_msg = f"请求 {url} 失败: HTTP {response.status_code}: {response.text[:200]}"
                logger.error(error_msg)
                raise RuntimeError(error_msg)
            last_error = f"HTTP {response.status_code}"
            logger.warning(f"请求 {url} 第{attempt + 1}次失败: {last_error}")

        if attempt < max_attempts - 1:
            wait_time = base_delay * (2 ** attempt)
            logger.info(f"{wait_time:.1f}秒后重试")
            sleep(wait_time)

    error_msg = f"请求 {url} 在{max_attempts}次尝试后仍失败: {last_error}"
    logger.error(error_msg)
    raise RuntimeError(error_msg)
