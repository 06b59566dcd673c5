"""有监督基线分类器"""
