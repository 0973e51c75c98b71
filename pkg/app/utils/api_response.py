from flask import jsonify

from app.utils.errors import BracketError, ConfigError, ConvergenceError


def success(data=None, message="成功", code=200):
    return jsonify({"code": code, "message": message, "data": data}), code


def error(message="请求失败", code=400, data=None):
    return jsonify({"code": code, "message": message, "data": data}), code


def estimator_error(exc: Exception):
    """领域异常 → 响应：配置/参数错误 400（带字段路径），不收敛 422"""
    if isinstance(exc, ConfigError):
        return error(message=str(exc), code=400, data={"field": exc.field, "reason": exc.reason})
    if isinstance(exc, (ConvergenceError, BracketError)):
        data = {"notes": list(getattr(exc, "__notes__", []))}
        if isinstance(exc, BracketError):
            data["diagnostics"] = {k: v for k, v in exc.diagnostics.items() if k != "evaluations"}
        return error(message=str(exc), code=422, data=data)
    return error(message=str(exc), code=400)
