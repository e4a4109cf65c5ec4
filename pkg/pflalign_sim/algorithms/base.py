from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, replace
from pflalign_sim._compat import StrEnum
from typing import ClassVar, TypedDict

import numpy as np
from numpy.typing import NDArray

from ..data import ClientDataset
from ..errors import AlgorithmError
from ..models import ModelSpec
from ..params import DEFAULT_EPSILON, ParamVector, zeros


class Algorithm(StrEnum):
    PFLALIGN = "pflalign"
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDDYN = "feddyn"
    FEDSAM = "fedsam"
    FEDYOGI = "fedyogi"


STATEFUL_ALGORITHMS = frozenset({Algorithm.SCAFFOLD, Algorithm.FEDDYN})


@dataclass(kw_only=True, frozen=True)
class LocalConfig:
    local_steps: int = 5
    batch_size: int = 4
    lr: float = 4e-2
    beta: float = 0.9
    epsilon: float = DEFAULT_EPSILON
    prox_mu: float = 0.01
    sam_rho: float = 0.05
    dyn_alpha: float = 0.01
    clip_preconditioner: bool = True
    personal_init: bool = True
    align_correction: bool = True
    precondition: bool = True

    def __post_init__(self):
        if self.local_steps < 1:
            raise AlgorithmError("local_steps must be at least 1")
        if self.batch_size < 1:
            raise AlgorithmError("batch_size must be at least 1")
        if self.lr <= 0:
            raise AlgorithmError("lr must be positive")
        if not 0 < self.beta < 1:
            raise AlgorithmError(f"beta must lie in (0, 1), got {self.beta}")
        if self.epsilon <= 0:
            raise AlgorithmError("epsilon must be positive")
        if min(self.prox_mu, self.sam_rho, self.dyn_alpha) < 0:
            raise AlgorithmError("prox_mu, sam_rho and dyn_alpha must be nonnegative")


@dataclass(kw_only=True, frozen=True)
class ClientState:
    """State owned by one client and carried across rounds."""

    client_id: int
    delta: ParamVector
    v: ParamVector
    P: ParamVector
    control: ParamVector | None = None

    @classmethod
    def initial(
        cls, client_id: int, num_params: int, with_control: bool = False
    ) -> "ClientState":
        return cls(
            client_id=client_id,
            delta=zeros(num_params),
            v=zeros(num_params),
            P=zeros(num_params),
            control=zeros(num_params) if with_control else None,
        )

    def replace(self, **kwargs) -> "ClientState":
        return replace(self, **kwargs)


@dataclass(kw_only=True, frozen=True)
class StepTrace:
    """Per-step record of one local round; rows are steps."""

    losses: NDArray[np.float64]
    grads: NDArray[np.float64]
    m: NDArray[np.float64] | None = None
    v: NDArray[np.float64] | None = None
    gamma: NDArray[np.float64] | None = None
    P: NDArray[np.float64] | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)

    def to_json(self) -> dict:
        def _row_means(rows):
            return None if rows is None else rows.mean(axis=1).tolist()

        return {
            "loss": self.losses.tolist(),
            "grad_norm": np.linalg.norm(self.grads, axis=1).tolist(),
            "mean_gamma": _row_means(self.gamma),
            "mean_P": _row_means(self.P),
        }


@dataclass(kw_only=True, frozen=True)
class LocalResult:
    """What a client hands back to the server after one local round."""

    params: ParamVector
    state: ClientState
    trace: StepTrace
    batch_indices: NDArray[np.int64]
    control_delta: ParamVector | None = None

    @property
    def train_loss(self) -> float:
        return float(np.mean(self.trace.losses))

    def replace(self, **kwargs) -> "LocalResult":
        """Returns a new LocalResult with the given fields replaced."""
        return replace(self, **kwargs)


class AlgorithmParam(TypedDict):
    name: str
    hyperparameters: list[str]


class BaseLocalAlgorithm(metaclass=ABCMeta):
    """Abstract base class for client-side update rules."""

    name: ClassVar[Algorithm]
    hyperparameters: ClassVar[tuple[str, ...]] = ()

    @abstractmethod
    def __call__(
        self,
        *,
        state: ClientState,
        global_params: ParamVector,
        data: ClientDataset,
        cfg: LocalConfig,
        model: ModelSpec,
        batch_seed: int,
        server_control: ParamVector | None = None,
    ) -> LocalResult:
        """Runs one local round for a single client."""
        ...

    def to_params(self) -> AlgorithmParam:
        return {"name": str(self.name), "hyperparameters": list(self.hyperparameters)}
