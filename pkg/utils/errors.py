"""シミュレータ共通の例外"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_WORKFLOW = 4


class SimError(Exception):
    exit_code = 1


class ConfigError(SimError):
    """設定値エラー（キー名つき）"""
    exit_code = EXIT_CONFIG

    def __init__(self, message, key=None):
        self.key = key
        if key:
            message = f"{key}: {message}"
        super().__init__(message)


class DataIOError(SimError):
    exit_code = EXIT_IO


class PipelineError(SimError):
    """検出パイプラインのどの段で失敗したかを保持する"""
    exit_code = EXIT_WORKFLOW

    def __init__(self, message, stage=None):
        self.stage = stage
        if stage:
            message = f"[{stage}] {message}"
        super().__init__(message)


class SegmentationError(PipelineError):
    def __init__(self, message):
        super().__init__(message, stage="segment")


class PlannerError(SimError):
    exit_code = EXIT_WORKFLOW


class WorkflowFault(SimError):
    exit_code = EXIT_WORKFLOW


class SensorStall(SimError):
    exit_code = EXIT_WORKFLOW
