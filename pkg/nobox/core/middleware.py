"""
参考受害者服务的中间件 - 全局异常处理、请求审计日志
"""
import time
import traceback

from fastapi import Request, Response
from fastapi.responses import JSONResponse
from loguru import logger
from starlette.exceptions import HTTPException as StarletteHTTPException
from starlette.middleware.base import BaseHTTPMiddleware

from nobox.core.exceptions import NoBoxError


def error_response(status_code: int, message: str, error_type: str) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={
            "success": False,
            "error": {"code": status_code, "message": message, "type": error_type},
        },
    )


class GlobalExceptionHandler(BaseHTTPMiddleware):
    """
    全局异常处理中间件

    业务异常返回 400 与异常信息，其余异常只记录堆栈、对外返回通用 500。
    """

    async def dispatch(self, request: Request, call_next) -> Response:
        try:
            return await call_next(request)
        except StarletteHTTPException as e:
            return error_response(e.status_code, str(e.detail), "http_error")
        except NoBoxError as e:
            logger.warning(f"请求处理失败: {request.method} {request.url.path}: {e}")
            return error_response(400, str(e), type(e).__name__)
        except Exception:
            logger.error(f"未处理的异常: {request.method} {request.url.path}\n{traceback.format_exc()}")
            return error_response(500, "服务器内部错误，请稍后重试", "internal_error")


class RequestLoggingMiddleware(BaseHTTPMiddleware):
    """请求审计日志：来源、方法、路径、状态码、耗时"""

    SKIP_PATH_PREFIXES = ("/docs", "/redoc", "/openapi.json", "/health")

    async def dispatch(self, request: Request, call_next) -> Response:
        if request.url.path.startswith(self.SKIP_PATH_PREFIXES):
            return await call_next(request)

        start_time = time.time()
        client_ip = request.client.host if request.client else "unknown"
        response = await call_next(request)
        process_time = time.time() - start_time

        log = logger.warning if response.status_code >= 400 else logger.info
        log(
            f"[audit] {client_ip} | {request.method} {request.url.path} | "
            f"{response.status_code} | 耗时 {process_time:.3f}s"
        )
        response.headers["X-Process-Time"] = f"{process_time:.3f}"
        return response
