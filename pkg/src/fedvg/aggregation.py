"""Server-side aggregation and the client-side hooks of the baseline strategies.

Every strategy is an instance of the general rule::

    theta_g <- (theta_g - sum_k s_k * delta_k) + R

with ``delta_k = theta_g - theta_k``. The client weights ``s_k`` come from a
weighting scheme (data size, validation gradients, or their mean) and the
regulariser ``R`` plus the local-objective hooks come from the base strategy.
Adding a strategy means adding an enum member and its branches below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .data import Dataset
from .errors import InputError
from .nn import GradSet, LayeredParams
from .scoring import (
    DEFAULT_EPSILON,
    Granularity,
    NormKind,
    ScoreVector,
    delta_norm,
    layer_norms,
    scores_from_layer_norms,
    validation_gradient,
)


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    FEDAVGM = "fedavgm"
    FEDPROX = "fedprox"
    SCAFFOLD = "scaffold"
    FEDDYN = "feddyn"


class Weighting(str, Enum):
    SIZE = "size"
    FEDVG = "fedvg"
    MEAN = "mean"


def parse_strategy(name: str, weighting: str | None = None) -> tuple[Strategy, Weighting]:
    """``fedvg`` -> FedAvg rules + FedVG weights; ``<base>+fedvg`` -> base rules + mean of both weights."""
    name = name.strip().lower()
    if name == "fedvg":
        base, default = Strategy.FEDAVG, Weighting.FEDVG
    elif name.endswith("+fedvg"):
        base, default = Strategy(name[: -len("+fedvg")]), Weighting.MEAN
    else:
        base, default = Strategy(name), Weighting.SIZE
    return base, Weighting(weighting) if weighting else default


@dataclass
class Hyperparams:
    server_momentum: float = 0.9
    mu: float = 0.01
    feddyn_alpha: float = 0.1
    max_grad_norm: float = 10.0
    global_lr: float = 1.0
    # regulariser weight of the FedDyn server step; None means feddyn_alpha
    feddyn_beta: float | None = None


@dataclass
class FedVGConfig:
    norm: NormKind = NormKind.L1
    granularity: Granularity = Granularity.MODELWISE
    epsilon: float = DEFAULT_EPSILON
    # inner norm of the delta variant
    delta_inner: NormKind = NormKind.L2
    val_batch_size: int | None = None


@dataclass
class ClientUpdate:
    client_id: int
    delta: LayeredParams
    n_k: int
    payload: dict[str, Any] = field(default_factory=dict)


@dataclass
class StrategyState:
    strategy: Strategy
    hyper: Hyperparams
    num_clients: int
    momentum: LayeredParams | None = None
    control: LayeredParams | None = None
    client_controls: dict[int, LayeredParams] = field(default_factory=dict)
    drift: LayeredParams | None = None
    client_grads: dict[int, LayeredParams] = field(default_factory=dict)


def init_state(strategy, global_params: LayeredParams, num_clients: int,
               hyper: Hyperparams | None = None) -> StrategyState:
    strategy = Strategy(strategy)
    state = StrategyState(strategy, hyper or Hyperparams(), num_clients)
    if strategy is Strategy.SCAFFOLD:
        state.control = global_params.zeros_like()
    return state


# -- client-side hooks -------------------------------------------------------


def _sq_dist(a: LayeredParams, b: LayeredParams) -> float:
    d = (a - b).flat()
    return float(d @ d)


def local_objective(strategy, base_loss: float, theta: LayeredParams, theta_g: LayeredParams,
                    state: StrategyState | None = None, client_id: int = 0) -> float:
    """Value of the strategy's local objective at ``theta``."""
    strategy = Strategy(strategy)
    theta.check_congruent(theta_g)
    if strategy is Strategy.FEDPROX:
        return base_loss + 0.5 * state.hyper.mu * _sq_dist(theta, theta_g)
    if strategy is Strategy.FEDDYN:
        alpha = state.hyper.feddyn_alpha
        lin = 0.0
        if client_id in state.client_grads:
            lin = float(state.client_grads[client_id].flat() @ theta.flat())
        return base_loss - lin + 0.5 * alpha * _sq_dist(theta, theta_g)
    return base_loss


def scaffold_correct(grad: GradSet, c: GradSet, c_k: GradSet) -> GradSet:
    """g - c_k + c."""
    return grad.zip_with(c_k, np.subtract).zip_with(c, np.add)


def clip_by_global_norm(grad: GradSet, max_norm: float) -> GradSet:
    flat = grad.flat()
    norm = float(np.sqrt(flat @ flat))
    if norm > max_norm:
        return grad.scale(max_norm / norm)
    return grad


def local_gradient(strategy, grad: GradSet, theta: LayeredParams, theta_g: LayeredParams,
                   state: StrategyState | None = None, client_id: int = 0) -> GradSet:
    """Gradient actually used by a local SGD step, given the base-loss gradient."""
    strategy = Strategy(strategy)
    if strategy is Strategy.FEDPROX:
        mu = state.hyper.mu
        return grad + (theta - theta_g).scale(mu)
    if strategy is Strategy.FEDDYN:
        alpha = state.hyper.feddyn_alpha
        g = grad + (theta - theta_g).scale(alpha)
        prev = state.client_grads.get(client_id)
        if prev is not None:
            g = g - prev
        return clip_by_global_norm(g, state.hyper.max_grad_norm)
    if strategy is Strategy.SCAFFOLD:
        c_k = state.client_controls.get(client_id)
        if c_k is None:
            c_k = state.control.zeros_like()
        return scaffold_correct(grad, state.control, c_k)
    return grad


def client_payload(strategy, state: StrategyState | None, client_id: int, delta: LayeredParams,
                   steps: int, lr: float) -> dict[str, Any]:
    """Per-client state produced by local training, applied by the server afterwards."""
    strategy = Strategy(strategy)
    if strategy is Strategy.SCAFFOLD:
        c_k = state.client_controls.get(client_id)
        if c_k is None:
            c_k = state.control.zeros_like()
        if steps == 0 or lr == 0:
            return {"control_delta": c_k.zeros_like()}
        new_c_k = (c_k - state.control) + delta.scale(1.0 / (steps * lr))
        return {"control_delta": new_c_k - c_k}
    if strategy is Strategy.FEDDYN:
        prev = state.client_grads.get(client_id)
        step = delta.scale(state.hyper.feddyn_alpha)
        return {"feddyn_grad": step if prev is None else prev + step}
    return {}


# -- weights -----------------------------------------------------------------


def _check_normalised(w: ScoreVector) -> None:
    for group in w.groups():
        total = math.fsum(group.values())
        if abs(total - 1.0) > 1e-9:
            raise InputError(f"weight group sums to {total}, not 1")


def fedavg_weights(updates: list[ClientUpdate]) -> ScoreVector:
    """s_k = n_k / sum of n_j over the sampled clients."""
    if not updates:
        raise InputError("no client updates")
    total = sum(u.n_k for u in updates)
    if total <= 0:
        raise InputError("client sample counts sum to zero")
    return ScoreVector({u.client_id: u.n_k / total for u in updates})


def fedvg_weights(client_params: dict[int, LayeredParams], topology, global_val: Dataset,
                  config: FedVGConfig | None = None, global_params: LayeredParams | None = None) -> ScoreVector:
    """Inverse mean validation-gradient-norm weights, computed server-side."""
    config = config or FedVGConfig()
    if not client_params:
        raise InputError("no client models to score")
    norm = NormKind(config.norm)
    per_layer: dict[int, dict[str, float]] = {}
    if norm is NormKind.DELTA:
        if global_params is None:
            raise InputError("delta norm needs the global parameters")
        for k, theta in client_params.items():
            per_layer[k] = delta_norm(global_params, theta, config.delta_inner, k).per_layer_norms
    else:
        if len(global_val) == 0:
            raise InputError("FedVG weighting needs a non-empty validation set")
        for k, theta in client_params.items():
            _, grads = validation_gradient(theta, topology, global_val, config.val_batch_size)
            per_layer[k] = layer_norms(grads, norm)
    return scores_from_layer_norms(per_layer, config.granularity, topology.block_map, config.epsilon)


def hybrid_mean_weights(w1: ScoreVector, w2: ScoreVector) -> ScoreVector:
    """Elementwise mean of two weightings over the same clients and granularity."""
    if w1.clients != w2.clients:
        raise InputError(f"client sets differ: {w1.clients} vs {w2.clients}")
    if w1.granularity != w2.granularity or (w1.table is None) != (w2.table is None):
        raise InputError("granularities differ")
    scores = {k: 0.5 * (w1.scores[k] + w2.scores[k]) for k in w1.scores}
    table = None
    if w1.table is not None:
        if list(w1.table) != list(w2.table):
            raise InputError("weight groups differ")
        table = {g: {k: 0.5 * (w1.table[g][k] + w2.table[g][k]) for k in w1.table[g]} for g in w1.table}
    norms = w2.norms or w1.norms
    return ScoreVector(scores, w1.granularity, table, w1.layer_groups, dict(norms))


# -- server side -------------------------------------------------------------


def weighted_delta(global_params: LayeredParams, updates: list[ClientUpdate], weights: ScoreVector) -> LayeredParams:
    """sum_k s_k * delta_k, per layer with that layer's weight group, in update order."""
    if not updates:
        raise InputError("no client updates")
    ids = [u.client_id for u in updates]
    if sorted(ids) != sorted(weights.clients) or len(set(ids)) != len(ids):
        raise InputError(f"weights cover {weights.clients}, updates come from {ids}")
    _check_normalised(weights)
    for u in updates:
        global_params.check_congruent(u.delta)
    layers = []
    for lid in global_params:
        w = weights.weights_for_layer(lid)
        acc = None
        for u in updates:
            term = [w[u.client_id] * t for t in u.delta[lid]]
            acc = term if acc is None else [a + b for a, b in zip(acc, term)]
        layers.append((lid, acc))
    return LayeredParams(layers)


def server_regularizer(strategy, state: StrategyState | None, pre_update: LayeredParams,
                       post_update: LayeredParams, step: LayeredParams | None = None) -> LayeredParams | None:
    """Strategy term R added after the weighted step; ``None`` means R = 0.

    ``step`` is sum_k s_k delta_k when the caller has it (avoids re-deriving it
    as ``pre_update - post_update``). Updates ``state`` in place.
    """
    strategy = Strategy(strategy)
    if state is not None and state.strategy is not strategy:
        raise InputError(f"state belongs to {state.strategy.value}, not {strategy.value}")
    if strategy in (Strategy.FEDAVG, Strategy.FEDPROX):
        return None
    if step is None:
        step = pre_update - post_update
    if strategy is Strategy.FEDAVGM:
        m = state.hyper.server_momentum
        if state.momentum is None:
            state.momentum = step.zeros_like()
        state.momentum = state.momentum.zip_with(step, lambda v, d: m * v + d)
        return step - state.momentum
    if strategy is Strategy.SCAFFOLD:
        return step.scale(1.0 - state.hyper.global_lr)
    # FedDyn: R = beta * (theta_g^{t+1} - theta_g^t)
    beta = state.hyper.feddyn_beta
    if beta is None:
        beta = state.hyper.feddyn_alpha
    state.drift = post_update - pre_update
    return state.drift.scale(beta)


def scaffold_server_update(state: StrategyState, updates: list[ClientUpdate]) -> StrategyState:
    """c_k += dc_k for each sampled client; c += (1/K) * sum dc_k."""
    total = None
    for u in updates:
        dc = u.payload["control_delta"]
        c_k = state.client_controls.get(u.client_id)
        state.client_controls[u.client_id] = dc if c_k is None else c_k + dc
        total = dc if total is None else total + dc
    if total is not None:
        state.control = state.control + total.scale(1.0 / state.num_clients)
    return state


def apply_client_payloads(state: StrategyState | None, updates: list[ClientUpdate]) -> None:
    if state is None:
        return
    if state.strategy is Strategy.SCAFFOLD:
        scaffold_server_update(state, updates)
    elif state.strategy is Strategy.FEDDYN:
        for u in updates:
            state.client_grads[u.client_id] = u.payload["feddyn_grad"]


def aggregate(global_params: LayeredParams, updates: list[ClientUpdate], weights: ScoreVector,
              state: StrategyState | None = None) -> LayeredParams:
    """New global model. Strategy state (if any) is advanced in place."""
    step = weighted_delta(global_params, updates, weights)
    stepped = global_params - step
    strategy = state.strategy if state is not None else Strategy.FEDAVG
    reg = server_regularizer(strategy, state, global_params, stepped, step)
    new = stepped if reg is None else stepped + reg
    apply_client_payloads(state, updates)
    return new

