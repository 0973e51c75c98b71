"""实验服务入口：python run.py"""

import logging
import os

from app import create_app
from config import get_config

config = get_config()
logging.basicConfig(level=config.MLMC_LOG_LEVEL.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
app = create_app(config)

if __name__ == "__main__":
    app.run(
        debug=getattr(config, "DEBUG", False),
        host=os.getenv("MLMC_HOST", "127.0.0.1"),
        port=int(os.getenv("MLMC_PORT", 5000)),
    )
