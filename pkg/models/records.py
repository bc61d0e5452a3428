"""試行結果などの共通データ型"""
from dataclasses import dataclass, field
from enum import Enum, IntEnum


class FlapState(str, Enum):
    NON_DETACHABLE = 'NonDetachable'
    DETACHABLE = 'Detachable'

    @property
    def detachable(self):
        return self is FlapState.DETACHABLE


class CaseLabel(IntEnum):
    # 1: 成功・取り外し可 / 2: 膜損傷 / 3: 残存あり（手で取り外せる）/ 4: 残存あり（取り外せない）
    CASE1 = 1
    CASE2 = 2
    CASE3 = 3
    CASE4 = 4

    @property
    def success(self):
        return self in (CaseLabel.CASE1, CaseLabel.CASE3)


@dataclass
class TrialRecord:
    trial_id: int
    seed: int
    successful: bool
    detachable: bool
    case: int
    total_time: float
    palpation_time: float
    halted: bool
    valid: bool = True
    verdict: str = ''
    reason: str = ''
    events: list = field(default_factory=list, repr=False)
    phases: dict = field(default_factory=dict, repr=False)

    @property
    def palpation_fraction(self):
        if self.total_time <= 0:
            return 0.0
        return self.palpation_time / self.total_time


@dataclass(frozen=True)
class BatchSummary:
    n_trials: int
    success_ratio: float
    detachable_ratio: float
    mean_total_time: float
    mean_palpation_time: float
    mean_palpation_fraction: float
    case_histogram: dict
