"""玩具受害者模型库"""
