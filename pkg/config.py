import os
from dotenv import load_dotenv

load_dotenv(".env")
if not os.getenv("DATABASE_URL"):
    # 兼容仅维护 .env.example 的本地开发场景
    load_dotenv(".env.example")


class Config:
    """基础配置"""

    SECRET_KEY = os.getenv("SECRET_KEY")

    # 数据库（实验运行记录）
    SQLALCHEMY_DATABASE_URI = os.getenv("DATABASE_URL", "sqlite:///mlmc_runs.db")
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # 实验输出
    MLMC_OUTPUT_DIR = os.getenv("MLMC_OUTPUT_DIR", "output")
    MLMC_THREADS = int(os.getenv("MLMC_THREADS", 1))
    MLMC_LOG_LEVEL = os.getenv("MLMC_LOG_LEVEL", "INFO")

    # 估计器默认值（实验配置未给出时使用）
    MLMC_PILOT_SAMPLES = int(os.getenv("MLMC_PILOT_SAMPLES", 10_000))
    MLMC_MAX_LEVEL = int(os.getenv("MLMC_MAX_LEVEL", 10))


class DevelopmentConfig(Config):
    """开发环境配置"""

    DEBUG = True


class ProductionConfig(Config):
    """生产环境配置"""

    DEBUG = False


class TestingConfig(Config):
    """测试环境配置"""

    TESTING = True
    SQLALCHEMY_DATABASE_URI = "sqlite:///:memory:"


config_map = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
}


def get_config():
    """根据环境变量获取配置"""
    env = os.getenv("FLASK_ENV", "development")
    return config_map.get(env, DevelopmentConfig)
