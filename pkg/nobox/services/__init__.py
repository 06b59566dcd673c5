"""
应用层服务 - 训练、攻击、评估、报告与流水线编排
"""
