import os
import logging
from datetime import datetime

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logger():
    """
    配置并初始化日志系统

    创建日志目录（如果不存在），设置日志格式和输出文件
    日志文件名格式：logs/bmembed_YYYYMMDD.log
    日志目录可通过环境变量 BMEMBED_LOG_DIR 指定，级别可通过 BMEMBED_LOG_LEVEL 指定

    Returns:
        logging.Logger: 配置好的日志记录器实例
    """
    log_dir = os.environ.get('BMEMBED_LOG_DIR', 'logs')
    level_name = os.environ.get('BMEMBED_LOG_LEVEL', 'INFO').upper()

    # 创建日志记录器
    logger = logging.getLogger('bmembed')
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    logger.propagate = False

    # 重复调用时不再追加处理器
    if logger.handlers:
        return logger

    # 确保日志目录存在
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    # 配置日志文件名（使用当前日期）
    log_file = os.path.join(log_dir, f'bmembed_{datetime.now().strftime("%Y%m%d")}.log')

    # 文件处理器，使用UTF-8编码
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)

    # 控制台处理器
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(console_handler)

    return logger

# 创建全局日志记录器实例
logger = setup_logger()
