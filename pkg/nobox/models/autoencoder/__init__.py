"""自编码替代模型"""
