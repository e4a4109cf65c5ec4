from typing import ClassVar

from ..data import ClientDataset
from ..models import ModelSpec
from ..params import ParamVector, check_same_length, freeze, zeros
from .base import Algorithm, BaseLocalAlgorithm, ClientState, LocalConfig, LocalResult
from .sgd import local_sgd


def feddyn_local(
    global_params: ParamVector,
    state: ClientState,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> LocalResult:
    """
    SGD on loss - <lambda_k, w> + (alpha/2) ||w - global||^2, then

        lambda_k' = lambda_k - alpha (w_T - global)
    """
    dual = state.control if state.control is not None else zeros(len(global_params))
    check_same_length(global_params, dual)
    alpha = cfg.dyn_alpha

    def direction(w, g, batch):
        step = g - dual
        if alpha:
            step = step + alpha * (w - global_params)
        return step

    params, trace, indices = local_sgd(
        global_params, data, cfg, model, batch_seed, direction
    )
    new_dual = freeze(dual - alpha * (params - global_params), "dual")
    return LocalResult(
        params=params,
        state=state.replace(
            delta=freeze(params - global_params, "delta"), control=new_dual
        ),
        trace=trace,
        batch_indices=indices,
    )


class FedDyn(BaseLocalAlgorithm):
    name: ClassVar[Algorithm] = Algorithm.FEDDYN
    hyperparameters: ClassVar[tuple[str, ...]] = ("dyn_alpha",)

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
        return feddyn_local(global_params, state, data, cfg, model, batch_seed)
