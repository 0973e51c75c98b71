import uuid
from datetime import datetime, timezone

from flask_sqlalchemy import SQLAlchemy

db = SQLAlchemy()

RUN_STATUSES = ("running", "completed", "failed")


class ExperimentRun(db.Model):
    """实验运行记录表（仅 HTTP 接口写入）"""

    __tablename__ = "experiment_runs"

    id = db.Column(db.String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    experiment = db.Column(db.String(32), nullable=False, index=True)
    config_hash = db.Column(db.String(64), nullable=False, index=True)
    seed = db.Column(db.Integer, nullable=False, default=0)
    status = db.Column(db.String(16), nullable=False, default="running")  # running / completed / failed
    config = db.Column(db.JSON, nullable=False)  # 规范化后的实验配置
    summary = db.Column(db.JSON, nullable=True)  # 每个重复实验、每个 eps 的摘要
    error = db.Column(db.Text, nullable=True)
    output_dir = db.Column(db.String(512), nullable=True)
    created_at = db.Column(db.DateTime, default=lambda: datetime.now(timezone.utc))
    completed_at = db.Column(db.DateTime, nullable=True)

    def to_dict(self, include_config: bool = False):
        data = {
            "id": self.id,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "status": self.status,
            "summary": self.summary,
            "error": self.error,
            "output_dir": self.output_dir,
            "created_at": self.created_at.isoformat() if self.created_at else None,
            "completed_at": self.completed_at.isoformat() if self.completed_at else None,
        }
        if include_config:
            data["config"] = self.config
        return data


def init_database() -> None:
    """初始化表结构（幂等）。"""
    db.create_all()
