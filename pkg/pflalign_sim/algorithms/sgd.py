"""Plain minibatch SGD from the global model and its FedProx / FedSAM variants."""

from collections.abc import Callable
from typing import ClassVar

import numpy as np
from numpy.typing import NDArray

from ..data import ClientDataset, minibatch_indices
from ..models import Minibatch, ModelSpec, loss_and_grad
from ..params import ParamVector, check_same_length, freeze
from .base import (
    Algorithm,
    BaseLocalAlgorithm,
    ClientState,
    LocalConfig,
    LocalResult,
    StepTrace,
)

# (w, g, batch) -> update direction
Direction = Callable[[ParamVector, ParamVector, Minibatch], ParamVector]


def local_sgd(
    global_params: ParamVector,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
    direction: Direction | None = None,
) -> tuple[ParamVector, StepTrace, NDArray[np.int64]]:
    """T steps of w <- w - lr * direction(w, g, batch) starting at the global model."""
    indices = minibatch_indices(batch_seed, data.size, cfg.local_steps, cfg.batch_size)
    w = global_params
    losses, grads = [], []
    for t in range(cfg.local_steps):
        batch = data.train.take(indices[t])
        loss, g = loss_and_grad(model, w, batch)
        step = g if direction is None else direction(w, g, batch)
        w = w - cfg.lr * step
        losses.append(loss)
        grads.append(g)
    trace = StepTrace(losses=np.asarray(losses), grads=np.stack(grads))
    return freeze(w, "client parameters"), trace, indices


def fedavg_local(
    global_params: ParamVector,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> ParamVector:
    params, _, _ = local_sgd(global_params, data, cfg, model, batch_seed)
    return params


def proximal_direction(global_params: ParamVector, mu: float) -> Direction | None:
    if mu == 0:
        return None

    def direction(w, g, batch):
        return g + mu * (w - global_params)

    return direction


def fedprox_local(
    global_params: ParamVector,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> ParamVector:
    """SGD on loss + (mu/2) ||w - global||^2."""
    direction = proximal_direction(global_params, cfg.prox_mu)
    params, _, _ = local_sgd(global_params, data, cfg, model, batch_seed, direction)
    return params


def sharpness_direction(model: ModelSpec, rho: float) -> Direction | None:
    if rho == 0:
        return None

    def direction(w, g, batch):
        grad_norm = float(np.linalg.norm(g))
        if grad_norm == 0:
            return g
        _, g_sam = loss_and_grad(model, w + rho * g / grad_norm, batch)
        return g_sam

    return direction


def fedsam_local(
    global_params: ParamVector,
    data: ClientDataset,
    cfg: LocalConfig,
    model: ModelSpec,
    batch_seed: int,
) -> ParamVector:
    """Each step takes the gradient at the ascent point w + rho g / ||g|| on the same batch."""
    direction = sharpness_direction(model, cfg.sam_rho)
    params, _, _ = local_sgd(global_params, data, cfg, model, batch_seed, direction)
    return params


class FedAvg(BaseLocalAlgorithm):
    name: ClassVar[Algorithm] = Algorithm.FEDAVG

    def _direction(self, global_params: ParamVector, cfg: LocalConfig, model: ModelSpec):
        return None

    def __call__(
        self,
        *,
        state: ClientState,
        global_params,
        data,
        cfg,
        model,
        batch_seed,
        server_control=None,
    ) -> LocalResult:
        check_same_length(state.delta, global_params)
        params, trace, indices = local_sgd(
            global_params,
            data,
            cfg,
            model,
            batch_seed,
            self._direction(global_params, cfg, model),
        )
        return LocalResult(
            params=params,
            state=state.replace(delta=freeze(params - global_params, "delta")),
            trace=trace,
            batch_indices=indices,
        )


class FedYogi(FedAvg):
    """Local side of FedYogi is plain SGD; the adaptive rule runs on the server."""

    name: ClassVar[Algorithm] = Algorithm.FEDYOGI


class FedProx(FedAvg):
    name: ClassVar[Algorithm] = Algorithm.FEDPROX
    hyperparameters: ClassVar[tuple[str, ...]] = ("prox_mu",)

    def _direction(self, global_params, cfg, model):
        return proximal_direction(global_params, cfg.prox_mu)


class FedSAM(FedAvg):
    name: ClassVar[Algorithm] = Algorithm.FEDSAM
    hyperparameters: ClassVar[tuple[str, ...]] = ("sam_rho",)

    def _direction(self, global_params, cfg, model):
        return sharpness_direction(model, cfg.sam_rho)
