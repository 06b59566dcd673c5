"""
nobox - 无盒对抗攻击工具集

在不超过 40 张辅助图像上训练自编码替代模型，生成可迁移到未知受害者模型的对抗样本。
"""

__version__ = "1.0.0"
