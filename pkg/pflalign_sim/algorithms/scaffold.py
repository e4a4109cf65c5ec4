from typing import ClassVar

from ..data import ClientDataset
from ..errors import AlgorithmError
from ..models import ModelSpec
from ..params import ParamVector, check_same_length, freeze, zeros
from .base import Algorithm, BaseLocalAlgorithm, ClientState, LocalConfig, LocalResult
from .sgd import local_sgd


def scaffold_local(
    global_params: ParamVector,
    c_global: ParamVector,
    state: ClientState,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> LocalResult:
    """
    SGD on the drift-corrected direction g - c_k + c_global, followed by the
    difference-quotient control update

        c_k' = c_k - c_global + (global - w_T) / (T lr)
    """
    c_k = state.control if state.control is not None else zeros(len(global_params))
    check_same_length(global_params, c_global, c_k)
    correction = c_global - c_k

    def direction(w, g, batch):
        return g + correction

    params, trace, indices = local_sgd(
        global_params, data, cfg, model, batch_seed, direction
    )
    c_new = freeze(
        c_k - c_global + (global_params - params) / (cfg.local_steps * cfg.lr),
        "control variate",
    )
    return LocalResult(
        params=params,
        state=state.replace(
            delta=freeze(params - global_params, "delta"), control=c_new
        ),
        trace=trace,
        batch_indices=indices,
        control_delta=freeze(c_new - c_k, "control delta"),
    )


class Scaffold(BaseLocalAlgorithm):
    name: ClassVar[Algorithm] = Algorithm.SCAFFOLD

    def __call__(
        self,
        *,
        state,
        global_params,
        data,
        cfg,
        model,
        batch_seed,
        server_control=None,
    ) -> LocalResult:
        if server_control is None:
            raise AlgorithmError("scaffold needs the server control variate")
        return scaffold_local(
            global_params, server_control, state, data, cfg, model, batch_seed
        )
