import logging
import os

FORMAT = "[%(asctime)s] [%(name)s] %(message)s"


def setup_logging(default_level="WARNING"):
    """LOG_LEVEL 環境変数があればそちらを優先"""
    level = os.getenv("LOG_LEVEL", default_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format=FORMAT, force=True)
