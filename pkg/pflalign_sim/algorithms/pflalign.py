import logging
from typing import ClassVar

import numpy as np

from ..data import ClientDataset, minibatch_indices
from ..errors import ShapeMismatchError
from ..models import ModelSpec, loss_and_grad
from ..params import ParamVector, check_same_length, freeze, zeros
from .base import (
    Algorithm,
    BaseLocalAlgorithm,
    ClientState,
    LocalConfig,
    LocalResult,
    StepTrace,
)
from .precondition import alignment_gamma, precondition_step

logger = logging.getLogger(__name__)


def pflalign_local_round(
    state: ClientState,
    global_params: ParamVector,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> LocalResult:
    """
    Client body of pFLAlign.

    Starts from the personalized initialization w_0 = w + delta, runs T
    preconditioned steps with the gated correction -(1/T) gamma * delta, and
    stores the new offset w_T - w. The offset used by the gate and by the
    correction is the round-start delta for every step; m restarts at 0 while
    v and P carry over from the previous round.

    The ablation switches in `cfg` start from the global model instead
    (`personal_init`), drop the gated correction (`align_correction`) or step
    with P = 1 while still tracking the moments (`precondition`).
    """
    check_same_length(global_params, state.delta, state.v, state.P)
    if len(global_params) != model.num_params:
        raise ShapeMismatchError(
            f"global model has {len(global_params)} parameters, model expects {model.num_params}"
        )
    steps = cfg.local_steps
    indices = minibatch_indices(batch_seed, data.size, steps, cfg.batch_size)
    delta = state.delta

    w = global_params + delta if cfg.personal_init else global_params
    m = zeros(len(w))
    v, P = state.v, state.P
    losses, grads, ms, vs, gammas, Ps = [], [], [], [], [], []
    for t in range(steps):
        loss, g = loss_and_grad(model, w, data.train.take(indices[t]))
        m, v, _, P = precondition_step(
            m, v, P, g, cfg.beta, cfg.epsilon, clip=cfg.clip_preconditioner
        )
        gamma = alignment_gamma(m, v, delta, cfg.epsilon)
        scale = P if cfg.precondition else np.ones_like(P)
        w = w - cfg.lr * (scale * g)
        if cfg.align_correction:
            w = w - (gamma * delta) / steps
        losses.append(loss)
        grads.append(g)
        ms.append(m)
        vs.append(v)
        gammas.append(gamma)
        Ps.append(P)

    final = freeze(w, "client parameters")
    new_state = state.replace(delta=freeze(final - global_params, "delta"), v=v, P=P)
    logger.debug(
        "pflalign client=%d loss=%.6g mean_gamma=%.4f mean_P=%.4g",
        state.client_id,
        losses[-1],
        float(np.mean(gammas[-1])),
        float(np.mean(P)),
    )
    return LocalResult(
        params=final,
        state=new_state,
        trace=StepTrace(
            losses=np.asarray(losses),
            grads=np.stack(grads),
            m=np.stack(ms),
            v=np.stack(vs),
            gamma=np.stack(gammas),
            P=np.stack(Ps),
        ),
        batch_indices=indices,
    )


class PFLAlign(BaseLocalAlgorithm):
    """Personalized initialization, moment-based preconditioning and gated offset correction."""

    name: ClassVar[Algorithm] = Algorithm.PFLALIGN
    hyperparameters: ClassVar[tuple[str, ...]] = (
        "beta",
        "epsilon",
        "clip_preconditioner",
        "personal_init",
        "align_correction",
        "precondition",
    )

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
        return pflalign_local_round(state, global_params, data, cfg, model, batch_seed)
