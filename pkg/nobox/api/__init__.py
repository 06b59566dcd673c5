"""
HTTP 接口 - 参考远程受害者服务
"""
