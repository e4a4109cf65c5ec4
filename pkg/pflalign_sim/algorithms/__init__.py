from .base import (
    STATEFUL_ALGORITHMS,
    Algorithm,
    ClientState,
    LocalConfig,
    LocalResult,
    StepTrace,
)
from .collection import AlgorithmCollection
from .feddyn import FedDyn, feddyn_local
from .pflalign import PFLAlign, pflalign_local_round
from .precondition import alignment_gamma, precondition_step
from .scaffold import Scaffold, scaffold_local
from .sgd import (
    FedAvg,
    FedProx,
    FedSAM,
    FedYogi,
    fedavg_local,
    fedprox_local,
    fedsam_local,
)


def default_collection() -> AlgorithmCollection:
    return AlgorithmCollection(
        PFLAlign(),
        FedAvg(),
        FedProx(),
        Scaffold(),
        FedDyn(),
        FedSAM(),
        FedYogi(),
    )


__all__ = [
    "STATEFUL_ALGORITHMS",
    "Algorithm",
    "AlgorithmCollection",
    "ClientState",
    "FedAvg",
    "FedDyn",
    "FedProx",
    "FedSAM",
    "FedYogi",
    "LocalConfig",
    "LocalResult",
    "PFLAlign",
    "Scaffold",
    "StepTrace",
    "alignment_gamma",
    "default_collection",
    "fedavg_local",
    "feddyn_local",
    "fedprox_local",
    "fedsam_local",
    "pflalign_local_round",
    "precondition_step",
    "scaffold_local",
]
