"""Desk-scale federated split learning.

A small tanh classifier is cut at a per-terminal split layer. Terminals run the
prefix, send a randomly masked activation to the server, the server trains one
shared tail, and masked split gradients flow back. Client prefixes are averaged
every few rounds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream, SimConfig, SystemAction
from .netphys import PayloadGeometry
from .nn import global_norm, mlp_backward, mlp_forward

DEFAULT_WIDTHS = (16, 32, 32, 24, 24, 16, 16, 4)
N_CLASSES = 4


class TrainingDiverged(FloatingPointError):
    """A non-finite loss showed up; the round cannot be applied."""


# model -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LayeredModel:
    """Dense tanh network; ``params`` is ``[W1, b1, ..., WL, bL]``."""

    layer_widths: tuple[int, ...]
    params: tuple[np.ndarray, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "params", tuple(np.asarray(p, dtype=float) for p in self.params))
        if len(self.params) != 2 * (len(widths) - 1):
            raise ValueError("need one weight and one bias per layer")
        for j in range(self.n_layers):
            w, b = self.params[2 * j], self.params[2 * j + 1]
            if w.shape != (widths[j], widths[j + 1]) or b.shape != (widths[j + 1],):
                raise ValueError(f"layer {j + 1} has shapes {w.shape}, {b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layers(self, first: int, last: int) -> list[np.ndarray]:
        """Flat params of layers ``first..last`` (1-based, inclusive)."""
        return list(self.params[2 * (first - 1): 2 * last])

    def with_layers(self, first: int, new_params) -> "LayeredModel":
        p = list(self.params)
        p[2 * (first - 1): 2 * (first - 1) + len(new_params)] = new_params
        return LayeredModel(self.layer_widths, tuple(p))

    def logits(self, x) -> np.ndarray:
        return mlp_forward(self.params, x, linear_out=True)[0]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


def init_model(rng: RngStream, widths=DEFAULT_WIDTHS) -> LayeredModel:
    g = rng.generator()
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        params += [g.uniform(-lim, lim, (fan_in, fan_out)), np.zeros(fan_out)]
    return LayeredModel(tuple(widths), tuple(params))


@dataclass(frozen=True, eq=False)
class SplitView:
    split_idx: int
    client_prefix: tuple[np.ndarray, ...]
    server_tail: tuple[np.ndarray, ...]


def split_view(model: LayeredModel, split_idx: int) -> SplitView:
    if not 1 <= split_idx < model.n_layers:
        raise ValueError(f"split {split_idx} outside 1..{model.n_layers - 1}")
    return SplitView(split_idx, tuple(model.layers(1, split_idx)),
                     tuple(model.layers(split_idx + 1, model.n_layers)))


# forward / compression / backward -------------------------------------------


def client_forward(x_batch, model: LayeredModel, split_idx: int):
    """Prefix output ``S`` at the split layer and the activation cache."""
    x = np.asarray(x_batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.layer_widths[0]:
        raise ValueError(f"input must be (batch, {model.layer_widths[0]}), got {x.shape}")
    return mlp_forward(model.layers(1, split_idx), x, linear_out=False)


@dataclass(frozen=True, eq=False)
class CompressionMask:
    kept: np.ndarray
    keep_fraction: float

    @property
    def scale(self) -> float:
        return 0.0 if self.keep_fraction <= 0 else 1.0 / self.keep_fraction

    def apply(self, a) -> np.ndarray:
        return np.asarray(a) * self.kept * self.scale


def kept_count(width: int, q: float) -> int:
    """Round-half-up of ``(1 - q) * width``."""
    return int(np.floor((1.0 - q) * width + 0.5))


def compress(S, q: float, rng: RngStream):
    """Keep a random subset of coordinates (shared by the batch), rescaled by 1/(1-q)."""
    S = np.asarray(S, dtype=float)
    width = S.shape[-1]
    k = kept_count(width, q)
    kept = np.zeros(width, dtype=bool)
    kept[rng.permutation(width)[:k]] = True
    mask = CompressionMask(kept, 0.0 if k == 0 else 1.0 - float(q))
    return mask.apply(S), mask


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=int)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = max(len(y), 1)
    loss = -logp[np.arange(len(y)), y].sum() / n
    d = np.exp(logp)
    d[np.arange(len(y)), y] -= 1.0
    return float(loss), d / n


@dataclass(frozen=True, eq=False)
class ServerResult:
    loss: float
    per_terminal_loss: np.ndarray
    model: LayeredModel
    split_grads: list[np.ndarray]


def server_step(payloads, labels, model: LayeredModel, splits, weights, lr_server: float,
                masks=None) -> ServerResult:
    """Train the shared tail on every scheduled payload.

    ``weights`` are the batch-size weights of the scheduled terminals and should
    sum to one. Returned split gradients are masked like the uplink when
    ``masks`` is given.
    """
    if len(payloads) == 0:
        raise ValueError("server_step needs at least one scheduled terminal")
    L = model.n_layers
    total = [np.zeros_like(p) for p in model.params]
    losses, grads_out = [], []
    for n, (S, y, ell, w) in enumerate(zip(payloads, labels, splits, weights)):
        tail = model.layers(ell + 1, L)
        out, acts = mlp_forward(tail, S, linear_out=True)
        loss, dlogits = cross_entropy(out, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite server loss for payload {n}")
        g, dS = mlp_backward(tail, acts, dlogits, linear_out=True)
        off = 2 * ell
        for i, gi in enumerate(g):
            total[off + i] += w * gi
        losses.append(loss)
        grads_out.append(dS if masks is None else masks[n].apply(dS))
    new = tuple(p - lr_server * g for p, g in zip(model.params, total))
    per = np.asarray(losses)
    return ServerResult(float(np.dot(weights, per)), per, LayeredModel(model.layer_widths, new), grads_out)


def client_gradients(cache, split_grad, model: LayeredModel, split_idx: int) -> list[np.ndarray]:
    prefix = model.layers(1, split_idx)
    if np.shape(split_grad)[-1] != model.layer_widths[split_idx]:
        raise ValueError("split gradient width does not match the split layer")
    return mlp_backward(prefix, cache, split_grad, linear_out=False)[0]


def client_step(cache, split_grad, model: LayeredModel, split_idx: int, lr_client: float,
                scheduled: bool = True) -> LayeredModel:
    """One SGD step on the prefix; unscheduled terminals are returned untouched."""
    if not scheduled:
        return model
    g = client_gradients(cache, split_grad, model, split_idx)
    prefix = model.layers(1, split_idx)
    return model.with_layers(1, [p - lr_client * gi for p, gi in zip(prefix, g)])


def fed_average(prefixes, weights) -> list[list[np.ndarray]]:
    """Layer-wise weighted average over the clients that own each layer.

    ``prefixes[n]`` is a flat ``[W1, b1, ...]`` list whose length fixes client
    ``n``'s depth. Each layer is averaged over its owners with their weights
    renormalized on that subset; owners then receive the average. A layer whose
    owners all carry zero weight is left alone.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("aggregation weights must be >= 0")
    out = [list(p) for p in prefixes]
    depth = max((len(p) // 2 for p in prefixes), default=0)
    for d in range(depth):
        owners = [n for n, p in enumerate(prefixes) if len(p) // 2 > d]
        tot = w[owners].sum()
        if tot <= 0:
            continue
        for k in (2 * d, 2 * d + 1):
            avg = sum((w[n] / tot) * prefixes[n][k] for n in owners)
            for n in owners:
                out[n][k] = avg
    return out


def evaluate_success(model: LayeredModel, inputs, labels) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) hits the label."""
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("evaluation set is empty")
    pred = np.argmax(model.logits(inputs), axis=1)
    return float(np.mean(pred == y))


def build_geometry(widths=DEFAULT_WIDTHS, *, bytes_per_element: int = 4, payload_scale: float = 2.5e4,
                   batch: int = 8) -> PayloadGeometry:
    """Payload, compute and memory tables indexed by split layer (entry 0 is NaN)."""
    if payload_scale <= 0:
        raise ValueError("payload_scale must be > 0")
    widths = tuple(getattr(widths, "layer_widths", widths))
    w = np.asarray(widths, dtype=float)
    macs = np.concatenate([[np.nan], np.cumsum(w[:-1] * w[1:])])
    params = np.concatenate([[np.nan], np.cumsum((w[:-1] + 1) * w[1:])])
    cache = np.concatenate([[np.nan], np.cumsum(w[1:])])
    psi = w * 32.0 * payload_scale
    psi[0] = np.nan
    mem = (params + batch * cache) * bytes_per_element * payload_scale
    return PayloadGeometry(act_bits_per_sample=psi, macs_per_sample=macs, mem_bytes=mem)


# data ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShardedData:
    shards_x: tuple[np.ndarray, ...]
    shards_y: tuple[np.ndarray, ...]
    eval_x: np.ndarray
    eval_y: np.ndarray

    @property
    def n_terminals(self) -> int:
        return len(self.shards_x)

    def pooled(self):
        return np.concatenate(self.shards_x), np.concatenate(self.shards_y)

    def reference(self, per_shard: int = 32):
        """Fixed slice of every shard, used to track the training loss cheaply."""
        return (np.concatenate([x[:per_shard] for x in self.shards_x]),
                np.concatenate([y[:per_shard] for y in self.shards_y]))


def make_dataset(n_terminals: int, shard_size: int, rng: RngStream, *, dim: int = 16,
                 separation: float = 2.2, alpha: float = 0.5, n_eval: int = 400) -> ShardedData:
    """Gaussian mixture with simplex class means; Dirichlet label skew per shard."""
    g = rng.generator()
    simplex = np.eye(N_CLASSES) - 1.0 / N_CLASSES
    simplex /= np.linalg.norm(simplex[0])
    basis, _ = np.linalg.qr(g.standard_normal((dim, N_CLASSES)))
    means = separation * simplex @ basis.T

    def draw(labels):
        return means[labels] + g.standard_normal((len(labels), dim))

    xs, ys = [], []
    for _ in range(n_terminals):
        props = g.dirichlet(np.full(N_CLASSES, alpha))
        y = g.choice(N_CLASSES, size=shard_size, p=props)
        xs.append(draw(y))
        ys.append(y)
    ey = g.integers(0, N_CLASSES, n_eval)
    return ShardedData(tuple(xs), tuple(ys), draw(ey), ey)


def save_samples_csv(inputs, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for row, y in zip(np.asarray(inputs), np.asarray(labels)):
            wr.writerow([repr(float(v)) for v in row] + [int(y)])


def load_samples_csv(path):
    rows = list(csv.reader(Path(path).open()))
    x = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([int(r[-1]) for r in rows])
    return x, y


# round engine ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainStats:
    batch_loss: float
    per_terminal_loss: np.ndarray
    grad_norms: np.ndarray


class SplitTrainer:
    """Server tail, client prefixes and the bookkeeping that ties them together.

    Client ``n`` owns layers ``1..owned[n]``, the deepest split it has trained
    since the last aggregation. For any layer it does not own, its view is the
    server's copy, which is also what it downloads when scheduled deeper. The
    global model averages every client's view layer by layer.
    """

    def __init__(self, cfg: SimConfig, data: ShardedData, rng: RngStream, widths=DEFAULT_WIDTHS):
        self.cfg = cfg
        self.data = data
        self.max_split = max(cfg.split_set)
        self.server = init_model(rng, widths)
        self.clients = [self.server] * cfg.n_terminals
        self.owned = np.zeros(cfg.n_terminals, dtype=int)
        self.batch = np.full(cfg.n_terminals, cfg.batch_size)
        self.omega = self.batch / self.batch.sum()
        self.ref_x, self.ref_y = data.reference()

    def _view(self, n: int) -> list[np.ndarray]:
        d = self.owned[n]
        return self.clients[n].layers(1, d) + self.server.layers(d + 1, self.max_split)

    def global_model(self) -> LayeredModel:
        avg = fed_average([self._view(n) for n in range(len(self.clients))], self.omega)[0]
        return self.server.with_layers(1, avg)

    def train_round(self, action: SystemAction, rng: RngStream) -> TrainStats:
        x_sched = np.asarray(action.scheduled, dtype=bool)
        sched = np.flatnonzero(x_sched)
        if sched.size == 0:
            raise ValueError("empty schedule reached the trainer")
        splits = np.asarray(action.split)
        q = np.asarray(action.compression)
        payloads, labels, masks, caches = [], [], [], []
        for n in sched:
            ell = int(splits[n])
            if ell > self.owned[n]:
                lo = self.owned[n] + 1
                self.clients[n] = self.clients[n].with_layers(lo, self.server.layers(lo, ell))
                self.owned[n] = ell
            idx = rng.integers(0, len(self.data.shards_y[n]), int(self.batch[n]))
            S, cache = client_forward(self.data.shards_x[n][idx], self.clients[n], ell)
            S_t, mask = compress(S, float(q[n]), rng)
            payloads.append(S_t)
            labels.append(self.data.shards_y[n][idx])
            masks.append(mask)
            caches.append(cache)
        w = self.batch[sched] / self.batch[sched].sum()
        res = server_step(payloads, labels, self.server, splits[sched], w, self.cfg.lr_server, masks)
        norms = np.zeros(len(self.clients))
        for k, n in enumerate(sched):
            ell = int(splits[n])
            g = client_gradients(caches[k], res.split_grads[k], self.clients[n], ell)
            norms[n] = global_norm(g)
            prefix = self.clients[n].layers(1, ell)
            self.clients[n] = self.clients[n].with_layers(
                1, [p - self.cfg.lr_client * gi for p, gi in zip(prefix, g)])
        self.server = res.model
        per = np.full(len(self.clients), np.nan)
        per[sched] = res.per_terminal_loss
        return TrainStats(res.loss, per, norms)

    def aggregate(self) -> None:
        g = self.global_model()
        self.server = g
        self.clients = [g] * len(self.clients)
        self.owned[:] = 0

    def reference_loss(self) -> float:
        loss = cross_entropy(self.global_model().logits(self.ref_x), self.ref_y)[0]
        if not np.isfinite(loss):
            raise TrainingDiverged("reference loss is not finite")
        return loss

    def pooled_loss(self) -> float:
        x, y = self.data.pooled()
        return cross_entropy(self.global_model().logits(x), y)[0]

    def evaluate(self) -> float:
        return evaluate_success(self.global_model(), self.data.eval_x, self.data.eval_y)
