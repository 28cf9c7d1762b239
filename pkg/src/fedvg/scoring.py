"""Validation-gradient norms and the inverse-norm client scores built from them.

A client whose model has a small mean layerwise validation-gradient norm sits in
a flat region of the validation loss and gets a large aggregation weight::

    G_k = mean over layers l of ||grad_l L_val(theta_k)||
    s_k = (1 / (G_k + eps)) / sum_j (1 / (G_j + eps))

Scores can be computed once per model, once per layer, or once per block of
layers; each group of weights sums to one over the participating clients.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import Dataset
from .errors import InputError, NumericError, StructuralError
from .nn import GradSet, LayeredParams, backward

DEFAULT_EPSILON = 1e-8


class NormKind(str, Enum):
    L1 = "l1"
    L2 = "l2"
    SPECTRAL = "spectral"
    DELTA = "delta"


class Granularity(str, Enum):
    MODELWISE = "modelwise"
    LAYERWISE = "layerwise"
    BLOCKWISE = "blockwise"


@dataclass
class ClientNormProfile:
    client_id: int
    per_layer_norms: dict[str, float]
    mean_norm: float


@dataclass
class ScoreVector:
    """Normalised client weights.

    ``scores`` always holds one weight per client. For layerwise/blockwise
    granularity ``table`` maps group id -> {client: weight} and ``layer_groups``
    maps each layer id to its group; ``scores`` is then the mean of the rows.
    """

    scores: dict[int, float]
    granularity: Granularity = Granularity.MODELWISE
    table: dict[str, dict[int, float]] | None = None
    layer_groups: dict[str, str] | None = None
    norms: dict[int, float] = field(default_factory=dict)

    @property
    def clients(self) -> list[int]:
        return list(self.scores)

    def groups(self) -> list[dict[int, float]]:
        return [self.scores] if self.table is None else list(self.table.values())

    def weights_for_layer(self, layer_id: str) -> dict[int, float]:
        if self.table is None:
            return self.scores
        try:
            return self.table[self.layer_groups[layer_id]]
        except KeyError:
            raise StructuralError(f"no weight group for layer {layer_id!r}") from None

    def broadcast(self, granularity: Granularity, layer_groups: dict[str, str]) -> ScoreVector:
        """Repeat modelwise weights for every group of ``layer_groups``."""
        if self.table is not None:
            raise InputError("only modelwise scores can be broadcast")
        table = {g: dict(self.scores) for g in dict.fromkeys(layer_groups.values())}
        return ScoreVector(dict(self.scores), Granularity(granularity), table, dict(layer_groups), dict(self.norms))


# -- norms -------------------------------------------------------------------


def vector_norm(values, kind) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise InputError("norm of an empty vector")
    if not np.isfinite(v).all():
        raise NumericError("non-finite entry in norm input")
    kind = NormKind(kind)
    if kind is NormKind.L1:
        return float(np.abs(v).sum())
    if kind is NormKind.L2:
        return float(np.sqrt(np.dot(v, v)))
    raise InputError(f"vector_norm supports l1 and l2, not {kind.value}")


def _power_iterate(gram: np.ndarray, v: np.ndarray, tol: float, max_iters: int) -> float:
    est = 0.0
    for _ in range(max_iters):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = float(np.sqrt(v @ gram @ v))
        if abs(new - est) < tol * max(new, 1.0):
            return new
        est = new
    return est


def spectral_norm(matrix, tol: float = 1e-10, max_iters: int = 1000) -> float:
    """Largest singular value by power iteration on G^T G.

    Rank >= 3 inputs are reshaped to (shape[0], -1). Starts from the normalised
    all-ones vector; if that start is annihilated, retries from the basis vector
    of the heaviest column so a non-zero matrix never reports zero.
    """
    g = np.asarray(matrix, dtype=np.float64)
    if g.ndim < 2 or g.size == 0:
        raise InputError("spectral norm needs a non-empty tensor of rank >= 2")
    if not np.isfinite(g).all():
        raise NumericError("non-finite entry in spectral norm input")
    g = g.reshape(g.shape[0], -1)
    if not g.any():
        return 0.0
    gram = g.T @ g
    n = gram.shape[0]
    sigma = _power_iterate(gram, np.full(n, 1.0 / np.sqrt(n)), tol, max_iters)
    if sigma == 0.0:
        start = np.zeros(n)
        start[int(np.argmax((g * g).sum(axis=0)))] = 1.0
        sigma = _power_iterate(gram, start, tol, max_iters)
    return sigma


def layer_norms(grads: GradSet, kind) -> dict[str, float]:
    """Norm of each layer's gradient. Spectral skips layers without rank >= 2 tensors."""
    kind = NormKind(kind)
    out: dict[str, float] = {}
    for lid, tensors in grads.items():
        if kind is NormKind.SPECTRAL:
            mats = [t for t in tensors if t.ndim >= 2]
            if mats:
                out[lid] = float(np.mean([spectral_norm(t) for t in mats]))
        elif kind is NormKind.DELTA:
            raise InputError("delta norm consumes parameter differences; use delta_norm")
        else:
            out[lid] = vector_norm(grads.layer_flat(lid), kind)
    if not out:
        raise InputError(f"no layer qualifies for the {kind.value} norm")
    return out


def _profile(client_id: int, per_layer: dict[str, float]) -> ClientNormProfile:
    return ClientNormProfile(client_id, per_layer, math.fsum(per_layer.values()) / len(per_layer))


def mean_layerwise_grad_norm(grads: GradSet, kind=NormKind.L1, client_id: int = 0) -> ClientNormProfile:
    return _profile(client_id, layer_norms(grads, kind))


def delta_norm(global_params: LayeredParams, client_params: LayeredParams, kind=NormKind.L2,
               client_id: int = 0) -> ClientNormProfile:
    """Mean over layers of ||theta_g^l - theta_k^l|| (l1 or l2 on the flattened layer)."""
    kind = NormKind(kind)
    if kind not in (NormKind.L1, NormKind.L2):
        raise InputError("delta norm supports l1 or l2 inner norms")
    diff = global_params - client_params
    return _profile(client_id, {lid: vector_norm(diff.layer_flat(lid), kind) for lid in diff})


# -- scores ------------------------------------------------------------------


def _inverse_normalise(norms: dict[int, float], epsilon: float) -> dict[int, float]:
    if not norms:
        raise InputError("cannot score an empty client set")
    if epsilon < 0:
        raise InputError("epsilon must be non-negative")
    for k, g in norms.items():
        if not (g >= 0 and math.isfinite(g)):
            raise InputError(f"norm of client {k} must be finite and non-negative, got {g}")
    shifted = {k: g + epsilon for k, g in norms.items()}
    zeros = [k for k, v in shifted.items() if v == 0.0]
    if zeros:
        # eps -> 0 limit: all mass shared by the zero-norm clients
        return {k: (1.0 / len(zeros) if k in zeros else 0.0) for k in norms}
    raw = {k: 1.0 / v for k, v in shifted.items()}
    total = math.fsum(raw.values())
    return {k: r / total for k, r in raw.items()}


def scores_from_norms(norms: dict[int, float], epsilon: float = DEFAULT_EPSILON) -> ScoreVector:
    return ScoreVector(_inverse_normalise(norms, epsilon), Granularity.MODELWISE, norms=dict(norms))


def _grouped(per_layer: dict[int, dict[str, float]], layer_groups: dict[str, str], epsilon: float,
             granularity: Granularity) -> ScoreVector:
    clients = list(per_layer)
    if not clients:
        raise InputError("cannot score an empty client set")
    layers = list(per_layer[clients[0]])
    for k in clients:
        if list(per_layer[k]) != layers:
            raise StructuralError(f"client {k} has layers {list(per_layer[k])}, expected {layers}")
    uncovered = [lid for lid in layers if lid not in layer_groups]
    if uncovered:
        raise StructuralError(f"layers without a block: {uncovered}")
    members: dict[str, list[str]] = {}
    for lid in layers:
        members.setdefault(layer_groups[lid], []).append(lid)
    table = {}
    for gid, lids in members.items():
        group_norms = {k: math.fsum(per_layer[k][lid] for lid in lids) / len(lids) for k in clients}
        table[gid] = _inverse_normalise(group_norms, epsilon)
    rows = list(table.values())
    scores = {k: math.fsum(r[k] for r in rows) / len(rows) for k in clients}
    norms = {k: math.fsum(per_layer[k].values()) / len(layers) for k in clients}
    return ScoreVector(scores, granularity, table, {lid: layer_groups[lid] for lid in layers}, norms)


def _norm_table(grad_sets: dict[int, GradSet], kind) -> dict[int, dict[str, float]]:
    items = list(grad_sets.items())
    if not items:
        raise InputError("cannot score an empty client set")
    ref = items[0][1]
    for _, g in items[1:]:
        ref.check_congruent(g)
    return {k: layer_norms(g, kind) for k, g in items}


def layerwise_scores(grad_sets: dict[int, GradSet], kind=NormKind.L1,
                     epsilon: float = DEFAULT_EPSILON) -> ScoreVector:
    per_layer = _norm_table(grad_sets, kind)
    return scores_from_layer_norms(per_layer, Granularity.LAYERWISE, epsilon=epsilon)


def blockwise_scores(grad_sets: dict[int, GradSet], block_map: dict[str, str], kind=NormKind.L1,
                     epsilon: float = DEFAULT_EPSILON) -> ScoreVector:
    per_layer = _norm_table(grad_sets, kind)
    return scores_from_layer_norms(per_layer, Granularity.BLOCKWISE, block_map, epsilon)


def scores_from_layer_norms(per_layer: dict[int, dict[str, float]], granularity,
                            block_map: dict[str, str] | None = None,
                            epsilon: float = DEFAULT_EPSILON) -> ScoreVector:
    """Scores at any granularity from a client -> layer -> norm table."""
    granularity = Granularity(granularity)
    if granularity is Granularity.MODELWISE:
        profiles = {k: _profile(k, v).mean_norm for k, v in per_layer.items()}
        return scores_from_norms(profiles, epsilon)
    if granularity is Granularity.LAYERWISE:
        first = next(iter(per_layer.values()), {})
        return _grouped(per_layer, {lid: lid for lid in first}, epsilon, granularity)
    if block_map is None:
        raise InputError("blockwise scoring needs a block map")
    return _grouped(per_layer, block_map, epsilon, granularity)


def norm_heatmap(grad_sets: dict[int, GradSet], kind=NormKind.L1):
    """(client_ids, layer_ids, matrix) with one row per client, columns in model order."""
    per_layer = _norm_table(grad_sets, kind)
    clients = list(per_layer)
    layers = list(per_layer[clients[0]])
    matrix = np.array([[per_layer[k][lid] for lid in layers] for k in clients])
    return clients, layers, matrix


def heatmap_csv(clients, layers, matrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client", *layers])
    for k, row in zip(clients, matrix):
        w.writerow([k, *(format(float(v), ".17g") for v in row)])
    return buf.getvalue()


# -- gradients on a dataset --------------------------------------------------


def validation_gradient(params: LayeredParams, topology, ds: Dataset, batch_size: int | None = None):
    """(mean loss, mean gradient) of cross-entropy over the whole dataset."""
    n = len(ds)
    if n == 0:
        raise InputError("validation set is empty")
    if batch_size is None or batch_size >= n:
        return backward(params, ds.features, ds.labels, topology)
    loss_acc, grad_acc = 0.0, None
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        loss, g = backward(params, ds.features[sl], ds.labels[sl], topology)
        frac = ds.labels[sl].size / n
        loss_acc += frac * loss
        g = g.scale(frac)
        grad_acc = g if grad_acc is None else grad_acc + g
    return loss_acc, grad_acc


def per_sample_grads(params: LayeredParams, topology, ds: Dataset):
    for i in range(len(ds)):
        yield backward(params, ds.features[i:i + 1], ds.labels[i:i + 1], topology)[1]


def fisher_diag_from_grads(grads) -> LayeredParams:
    """Mean of the squared per-sample gradients."""
    acc, n = None, 0
    for g in grads:
        sq = g.map(np.square)
        acc = sq if acc is None else acc + sq
        n += 1
    if n == 0:
        raise InputError("fisher_diag needs a non-empty dataset")
    return acc.scale(1.0 / n)


def fisher_diag(params: LayeredParams, topology, ds: Dataset) -> LayeredParams:
    """Empirical Joint Fisher: mean over samples of squared per-sample CE gradients."""
    return fisher_diag_from_grads(per_sample_grads(params, topology, ds))
