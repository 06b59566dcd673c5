"""
数据模型与网络结构定义
"""
