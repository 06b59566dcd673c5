"""
速率限制模块

服务端：参考受害者服务使用 slowapi 实现基于 IP 的请求速率限制。
客户端：远程评估客户端使用 AsyncRateLimiter 串行化请求并控制发送间隔。
"""
import asyncio
import time
from typing import Optional

from slowapi import Limiter
from slowapi.util import get_remote_address


def make_limiter(default_limit: str) -> Limiter:
    """每个服务实例单独持有限速状态，例如 "120/minute" """
    return Limiter(key_func=get_remote_address, default_limits=[default_limit])


class AsyncRateLimiter:
    """
    客户端限速器

    每次 acquire() 占用一个 1 / rate 秒的发送时段并在时段结束时返回，
    N 次请求总耗时不小于 N / rate 秒；
    rate 为 None 或 0 表示不限速。
    """

    def __init__(self, rate_per_second: Optional[float] = None):
        if rate_per_second is not None and rate_per_second < 0:
            raise ValueError("rate_per_second 不能为负数")
        self.interval = 1.0 / rate_per_second if rate_per_second else 0.0
        self._lock = asyncio.Lock()
        self._next_slot: Optional[float] = None

    async def acquire(self):
        """等待下一个可用的发送时刻"""
        async with self._lock:
            if not self.interval:
                return
            now = time.monotonic()
            start = now if self._next_slot is None else max(now, self._next_slot)
            self._next_slot = start + self.interval
            await asyncio.sleep(self._next_slot - now)

    async def __aenter__(self):
        await self.acquire()
        return self

    async def __aexit__(self, exc_type, exc, tb):
        return False
