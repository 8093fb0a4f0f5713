from enum import Enum
from typing import Any, ClassVar, Dict, List, Optional

from pydantic import BaseModel, Field

from app.apis.utils import wilson_interval


class EstimateMode(str, Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"


class StageStatus(str, Enum):
    GREEN = "green"
    FAILED = "failed"
    SKIPPED = "skipped"


class TestReport(BaseModel):
    __test__: ClassVar[bool] = False  # not a pytest class

    passes: int
    trials: int
    estimate: float
    ci_lo: float
    ci_hi: float
    mode: EstimateMode
    seed: Optional[int] = None
    # Side measurements (A = A' frequency, |A ∩ A'| histogram, ...); never serialized
    diagnostics: Dict[str, Any] = Field(default_factory=dict, exclude=True)

    @classmethod
    def monte_carlo(cls, passes: int, trials: int, seed: Optional[int], **diagnostics) -> "TestReport":
        lo, hi = wilson_interval(passes, trials)
        return cls(
            passes=passes,
            trials=trials,
            estimate=passes / trials if trials else 0.0,
            ci_lo=lo,
            ci_hi=hi,
            mode=EstimateMode.MONTE_CARLO,
            seed=seed,
            diagnostics=diagnostics,
        )

    @classmethod
    def exact(cls, passes: int, trials: int, estimate: Optional[float] = None, **diagnostics) -> "TestReport":
        value = passes / trials if estimate is None else estimate
        return cls(
            passes=passes,
            trials=trials,
            estimate=value,
            ci_lo=value,
            ci_hi=value,
            mode=EstimateMode.EXACT,
            seed=None,
            diagnostics=diagnostics,
        )

    def covers(self, value: float, slack: float = 0.0) -> bool:
        return self.ci_lo - slack <= value <= self.ci_hi + slack


class StageReport(BaseModel):
    stage: str
    status: StageStatus
    metrics: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None


class CriterionVerdict(BaseModel):
    criterion: str
    passed: bool
    detail: str = ""


class SpectralReport(BaseModel):
    level_i: int
    level_j: int
    second_eigenvalue: float
    second_singular: float
    method: str
    iterations: int
    residual: float
    bound: float
    within_bound: bool

    @property
    def gap(self) -> float:
        """λ₂ − j/i; the poly(i)γ slack is not modelled."""
        return self.second_eigenvalue - self.bound

    def to_csv_row(self) -> str:
        return (
            f"{self.level_i},{self.level_j},{self.second_eigenvalue:.12g},"
            f"{self.second_singular:.12g},{self.method},{self.residual:.3e}"
        )


SPECTRAL_CSV_HEADER = "level_i,level_j,lambda2,sigma2,method,residual"


class CoboundaryReport(BaseModel):
    xi_hat: float
    strong_xi_hat: Optional[float] = None
    best_value: float
    best_assignment: List[int]
    best_g: Optional[List[List[int]]] = None
    c_hat: float
    # ĉ over edges that carry a genuine constraint; arbitrary edges hold the identity
    c_hat_working: float
    arbitrary_mass: float = 0.0
    method: str
    value_method: str
