"""
数据模块 - 图像读写、辅助集采样、混沌变换
"""
