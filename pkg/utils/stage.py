import time
from contextlib import contextmanager

from utils.errors import PipelineError, SimError


class StageTracker:
    """現在の処理ステップと各ステップの所要時間を記録する

    失敗したステップ名は PipelineError.stage に載せて呼び出し元へ返す。
    """

    def __init__(self):
        self.current_step = 'init'
        self.timings = {}

    @contextmanager
    def step(self, name):
        self.current_step = name
        step_start = time.perf_counter()
        try:
            yield
        except PipelineError as e:
            if e.stage is None:
                raise PipelineError(str(e), stage=name) from e
            raise
        except SimError:
            # 設定エラーなどはそのまま
            raise
        except Exception as e:
            raise PipelineError(str(e), stage=name) from e
        finally:
            self.timings[name] = round(time.perf_counter() - step_start, 4)
