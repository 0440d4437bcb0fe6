# utils模块初始化文件
# 包含日志、异常、行式JSON读写、随机种子和HTTP重试等通用工具
