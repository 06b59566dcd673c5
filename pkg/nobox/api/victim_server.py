"""
参考远程受害者服务

把一个训练好的玩具受害者挂到 HTTP 接口后面（Bearer 令牌鉴权 + slowapi 限速），
用于演示与测试远程评估客户端。接口说明见 docs/REMOTE_VICTIM_API.md。
"""
import secrets
from typing import Optional, Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from loguru import logger
from slowapi import _rate_limit_exceeded_handler
from slowapi.errors import RateLimitExceeded
from slowapi.middleware import SlowAPIMiddleware

from nobox.core.config import settings
from nobox.core.middleware import GlobalExceptionHandler, RequestLoggingMiddleware, error_response
from nobox.core.rate_limit import make_limiter
from nobox.data.loader import decode_png_bytes
from nobox.models.victims.zoo import VictimClassifier


def _authorized(request: Request, token: str) -> bool:
    if not token:
        return True
    header = request.headers.get("authorization", "")
    scheme, _, credential = header.partition(" ")
    return scheme.lower() == "bearer" and secrets.compare_digest(credential.strip(), token)


def create_victim_app(
    victim: VictimClassifier,
    token: Optional[str] = None,
    rate_limit: Optional[str] = None,
    expected_shape: Optional[Sequence[int]] = None,
) -> FastAPI:
    """
    创建受害者服务应用

    Args:
        victim: 被托管的受害者分类器
        token: Bearer 令牌，空字符串表示不鉴权（默认取 VICTIM_SERVER_TOKEN）
        rate_limit: slowapi 限速表达式（默认取 VICTIM_SERVER_RATE_LIMIT）
        expected_shape: 期望输入形状 [C, H, W]
    """
    token = settings.VICTIM_SERVER_TOKEN if token is None else token
    limiter = make_limiter(rate_limit or settings.VICTIM_SERVER_RATE_LIMIT)
    shape = tuple(expected_shape) if expected_shape else tuple(victim.metadata.get("input_shape", ())) or None

    app = FastAPI(title=f"{settings.APP_NAME} victim", version=settings.APP_VERSION)
    app.state.limiter = limiter
    app.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)
    app.add_middleware(SlowAPIMiddleware)
    app.add_middleware(GlobalExceptionHandler)
    app.add_middleware(RequestLoggingMiddleware)

    @app.get("/health")
    async def health_check():
        return {"status": "healthy", "victim": victim.name}

    @app.post("/v1/predict")
    async def predict(request: Request):
        """请求体为 PNG 字节，返回 top-1 标签"""
        if not _authorized(request, token):
            return error_response(401, "鉴权失败", "unauthorized")
        image = decode_png_bytes(await request.body(), shape)
        label = int(victim.predict(image.unsqueeze(0))[0])
        return JSONResponse({"label": label, "name": victim.name})

    logger.info(f"受害者服务已创建: {victim.name}（鉴权 {'开启' if token else '关闭'}）")
    return app
