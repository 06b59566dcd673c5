"""
核心配置和工具模块
"""
