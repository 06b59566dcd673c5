"""
远程受害者评估客户端

以 PNG 字节 POST 到远程分类服务，记录 top-1 标签并计算准确率。仅用于评估，生成对抗样本时从不调用。
请求串行发送并受客户端限速约束；5xx 与网络错误按指数退避重试，仍失败则跳过该样本并把报告标记为不完整；
鉴权失败立即终止。每次请求与响应都写入审计日志（令牌经日志过滤器脱敏）。
"""
import asyncio
import time
from functools import wraps
from typing import Optional, Sequence, Tuple, Type

import httpx
from loguru import logger

from nobox.core.exceptions import (
    EmptyEvaluationError,
    RemoteVictimAuthError,
    RemoteVictimError,
    RemoteVictimUnavailableError,
)
from nobox.core.rate_limit import AsyncRateLimiter
from nobox.data.loader import encode_png
from nobox.models.schemas import EvalReport, ImageTensor

AUTH_FAILURE_STATUS = (401, 403)


def retry_on_failure(
    max_retries: int = 3,
    delay: float = 1.0,
    backoff: float = 2.0,
    retry_on: Tuple[Type[Exception], ...] = (RemoteVictimUnavailableError,),
):
    """
    重试装饰器：只对 retry_on 中的异常重试

    Args:
        max_retries: 最大重试次数
        delay: 初始延迟（秒）
        backoff: 延迟递增倍数
    """
    def decorator(func):
        @wraps(func)
        async def wrapper(*args, **kwargs):
            current_delay = delay
            for attempt in range(max_retries + 1):
                try:
                    return await func(*args, **kwargs)
                except retry_on as e:
                    if attempt == max_retries:
                        logger.error(f"{func.__name__} 已重试 {max_retries} 次仍失败: {e}")
                        raise
                    logger.warning(
                        f"{func.__name__} 第 {attempt + 1} 次失败，"
                        f" {current_delay:.1f}s 后重试: {e}"
                    )
                    await asyncio.sleep(current_delay)
                    current_delay *= backoff
        return wrapper
    return decorator


class RemoteVictimClient:
    """远程受害者服务客户端"""

    def __init__(
        self,
        endpoint: str,
        token: str = "",
        rate_limit: Optional[float] = 2.0,
        timeout: float = 30.0,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.limiter = AsyncRateLimiter(rate_limit)
        headers = {"Content-Type": "image/png"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.AsyncClient(headers=headers, timeout=timeout, transport=transport)

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc, tb):
        await self.close()

    async def close(self):
        await self._client.aclose()

    async def predict(self, image: ImageTensor, item: int = 0) -> int:
        """发送一张图像，返回远程服务给出的 top-1 标签"""
        await self.limiter.acquire()
        start = time.perf_counter()
        try:
            response = await self._client.post(self.endpoint, content=encode_png(image))
        except httpx.TransportError as e:
            logger.warning(f"[audit] #{item} POST {self.endpoint} 网络错误: {e!r}")
            raise RemoteVictimUnavailableError(f"第 {item} 个样本请求失败: {e!r}") from e
        latency = (time.perf_counter() - start) * 1000

        logger.info(f"[audit] #{item} POST {self.endpoint} → {response.status_code} ({latency:.1f}ms) {response.text[:200]}")
        if response.status_code in AUTH_FAILURE_STATUS:
            raise RemoteVictimAuthError(f"远程受害者服务鉴权失败: HTTP {response.status_code}")
        if response.status_code >= 500:
            raise RemoteVictimUnavailableError(f"第 {item} 个样本服务端错误: HTTP {response.status_code}")
        if response.status_code != 200:
            raise RemoteVictimError(f"第 {item} 个样本请求被拒绝: HTTP {response.status_code}")
        try:
            return int(response.json()["label"])
        except (ValueError, KeyError, TypeError) as e:
            raise RemoteVictimError(f"第 {item} 个样本的响应格式无效: {response.text[:200]}") from e


async def remote_victim_eval(
    endpoint: str,
    examples: Sequence[Tuple[ImageTensor, int]],
    token: str = "",
    rate_limit: Optional[float] = 2.0,
    max_retries: int = 3,
    backoff: float = 1.0,
    timeout: float = 30.0,
    transport: Optional[httpx.AsyncBaseTransport] = None,
    victim_name: str = "remote",
    method: str = "",
    config_hash: str = "",
    seed: int = 0,
) -> EvalReport:
    """
    远程评估

    Returns:
        EvalReport；有样本最终失败时 complete=False，failed_items 记录其序号，
        准确率只在成功评分的样本上计算
    """
    if not examples:
        raise EmptyEvaluationError("评估样本为空")
    report = EvalReport(method=method, config_hash=config_hash, seed=seed)
    correct, scored = 0, 0

    async with RemoteVictimClient(endpoint, token, rate_limit, timeout, transport) as client:
        predict = retry_on_failure(max_retries=max_retries, delay=backoff)(client.predict)
        for item, (image, label) in enumerate(examples):
            try:
                predicted = await predict(image, item)
            except RemoteVictimAuthError:
                raise
            except RemoteVictimError as e:
                logger.error(f"跳过第 {item} 个样本: {e}")
                report.failed_items.append(item)
                continue
            scored += 1
            correct += int(predicted == int(label))

    report.complete = not report.failed_items
    if scored:
        report.add(victim_name, correct, scored)
    logger.info(
        f"远程评估完成: {correct}/{scored} 正确，失败 {len(report.failed_items)} 个"
        + ("" if report.complete else "（报告不完整）")
    )
    return report
