import os
import uuid
from datetime import datetime, timezone

from flask import Blueprint, current_app, request

from app.models.database import ExperimentRun, db, init_database
from app.services.harness import check_sweep, parse_config, run_experiment, sweep_and_fit, write_reports
from app.utils.api_response import error, estimator_error, success
from app.utils.errors import BracketError, ConvergenceError

experiments_bp = Blueprint("experiments", __name__)

SUMMARY_FIELDS = ("eps", "estimate", "std_error", "total_cost", "oracle", "abs_error")


def _with_defaults(data: dict, run_id: str | None = None) -> dict:
    """请求体未给出的字段取应用配置中的默认值"""
    data = dict(data)
    data.setdefault("threads", current_app.config.get("MLMC_THREADS", 1))
    if run_id is not None:
        data.setdefault("output_dir", os.path.join(current_app.config.get("MLMC_OUTPUT_DIR", "output"), run_id))
    mlmc = dict(data.get("mlmc") or {})
    mlmc.setdefault("pilot_samples", current_app.config.get("MLMC_PILOT_SAMPLES", 10_000))
    mlmc.setdefault("max_level", current_app.config.get("MLMC_MAX_LEVEL", 10))
    data["mlmc"] = mlmc
    return data


def _summarize(records) -> list[dict]:
    return [
        {
            "replicate": record.replicate,
            "seed": record.seed,
            "results": [{key: block.get(key) for key in SUMMARY_FIELDS} for block in record.results],
        }
        for record in records
    ]


@experiments_bp.route("/v1/experiments/validate", methods=["POST"])
def validate_experiment():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        return error(message="请求体必须为 JSON 对象")
    try:
        config = parse_config(_with_defaults(data))
    except ValueError as exc:
        return estimator_error(exc)
    return success(message="配置有效", data={"config": config.to_dict(), "config_hash": config.config_hash()})


@experiments_bp.route("/v1/experiments", methods=["POST"])
def create_experiment():
    """同步运行实验：登记运行记录 → 运行 → 写报告 → 更新状态"""
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        return error(message="请求体必须为 JSON 对象")

    run_id = str(uuid.uuid4())
    try:
        config = parse_config(_with_defaults(data, run_id))
    except ValueError as exc:
        return estimator_error(exc)

    try:
        init_database()
        run = ExperimentRun(
            id=run_id,
            experiment=config.experiment,
            config_hash=config.config_hash(),
            seed=config.seed,
            status="running",
            config=config.to_dict(),
            output_dir=config.output_dir,
        )
        db.session.add(run)
        db.session.commit()
    except Exception as exc:
        db.session.rollback()
        current_app.logger.exception("登记实验失败: %s", exc)
        return error(message=f"登记实验失败: {str(exc)}", code=500)

    try:
        records = run_experiment(config)
        write_reports(records, config.output_dir)
    except (ValueError, ConvergenceError, BracketError) as exc:
        _finish(run, "failed", error_text=str(exc))
        return estimator_error(exc)
    except Exception as exc:
        current_app.logger.exception("实验运行失败: %s", exc)
        _finish(run, "failed", error_text=str(exc))
        return error(message=f"实验运行失败: {str(exc)}", code=500)

    _finish(run, "completed", summary=_summarize(records))
    return success(message="实验完成", data={"run": run.to_dict()})


def _finish(run: ExperimentRun, status: str, summary=None, error_text: str | None = None) -> None:
    try:
        run.status = status
        run.summary = summary
        run.error = error_text
        run.completed_at = datetime.now(timezone.utc)
        db.session.commit()
    except Exception as exc:
        db.session.rollback()
        current_app.logger.exception("更新实验状态失败: %s", exc)


@experiments_bp.route("/v1/experiments/sweep", methods=["POST"])
def sweep_experiment():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        return error(message="请求体必须为 JSON 对象")
    try:
        config = parse_config(_with_defaults(data))
        check_sweep(config)
        result = sweep_and_fit(config)
    except (ValueError, ConvergenceError, BracketError) as exc:
        return estimator_error(exc)
    return success(message="开销扫描完成", data=result.to_dict())


@experiments_bp.route("/v1/experiments", methods=["GET"])
def list_experiments():
    experiment = (request.args.get("experiment") or "").strip()
    try:
        init_database()
        stmt = ExperimentRun.query
        if experiment:
            stmt = stmt.filter(ExperimentRun.experiment == experiment)
        runs = stmt.order_by(ExperimentRun.created_at.desc()).all()
    except Exception as exc:
        current_app.logger.exception("查询实验列表失败: %s", exc)
        return error(message=f"查询实验失败: {str(exc)}", code=500)

    return success(data={"items": [run.to_dict() for run in runs]})


@experiments_bp.route("/v1/experiments/<run_id>", methods=["GET"])
def get_experiment(run_id: str):
    try:
        init_database()
        run = ExperimentRun.query.filter_by(id=run_id).first()
    except Exception as exc:
        current_app.logger.exception("查询实验失败: %s", exc)
        return error(message=f"查询实验失败: {str(exc)}", code=500)
    if run is None:
        return error(message="实验不存在", code=404)
    return success(data={"run": run.to_dict(include_config=True)})


@experiments_bp.route("/v1/experiments/<run_id>", methods=["DELETE"])
def delete_experiment(run_id: str):
    try:
        init_database()
        run = ExperimentRun.query.filter_by(id=run_id).first()
        if run is None:
            return error(message="实验不存在", code=404)
        db.session.delete(run)
        db.session.commit()
    except Exception as exc:
        db.session.rollback()
        current_app.logger.exception("删除实验失败: %s", exc)
        return error(message=f"删除实验失败: {str(exc)}", code=500)

    return success(message="实验记录删除成功", data={"run_id": run_id})
