"""Cluster-routed attention: memory bank, K-Means centroids and the routed layer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .attention import NO_MASK, MaskSpec, TokenGroup, TransformerLayer, encode_indexed
from .sliding import LayerState, flatten_state, unflatten_state

log = logging.getLogger(__name__)


class MemoryBank:
    """Bounded FIFO of recent hidden-state rows (ring buffer, oldest evicted first)."""

    def __init__(self, capacity: int, d: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.d = d
        self._buf = np.zeros((0, d))
        self._start = 0
        self._len = 0
        self.total_pushed = 0

    def __len__(self) -> int:
        return self._len

    def push(self, rows) -> "MemoryBank":
        if isinstance(rows, Tensor):
            rows = rows.detach().to(torch.float64).cpu().numpy()
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.d:
            raise ValueError(f"rows of width {rows.shape[-1]} pushed into bank of width {self.d}")
        n = len(rows)
        if n == 0:
            return self
        self.total_pushed += n
        if len(self._buf) < self.capacity:
            # grow lazily; large capacities are rarely filled in short runs
            need = min(self.capacity, self._len + n)
            if need > len(self._buf):
                ordered = self.rows()
                self._buf = np.zeros((max(need, min(self.capacity, 2 * len(self._buf))), self.d))
                self._buf[: self._len] = ordered
                self._start = 0
        rows = rows[-self.capacity :]
        n = len(rows)
        cap = len(self._buf)
        end = (self._start + self._len) % cap if cap else 0
        first = min(n, cap - end)
        self._buf[end : end + first] = rows[:first]
        self._buf[: n - first] = rows[first:]
        overflow = max(0, self._len + n - self.capacity)
        self._start = (self._start + overflow) % cap
        self._len = min(self.capacity, self._len + n)
        return self

    def rows(self) -> np.ndarray:
        """Contents oldest to newest."""
        if self._len == 0:
            return np.zeros((0, self.d))
        idx = (self._start + np.arange(self._len)) % len(self._buf)
        return self._buf[idx]

    def state_dict(self) -> dict:
        return {"rows": self.rows(), "total_pushed": self.total_pushed}

    def load_state_dict(self, sd: dict) -> None:
        rows = np.asarray(sd["rows"], dtype=np.float64).reshape(-1, self.d)
        self._buf = np.zeros((0, self.d))
        self._start = self._len = 0
        self.total_pushed = 0
        self.push(rows)
        self.total_pushed = int(sd["total_pushed"])


def memory_push(bank: MemoryBank, rows) -> MemoryBank:
    return bank.push(rows)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_history: list[float]

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (points * points).sum(1)[:, None] - 2.0 * points @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(points: np.ndarray, p: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, p):
        total = closest.sum()
        if total > 0:
            i = int(rng.choice(n, p=closest / total))
        else:
            i = int(rng.integers(n))
        chosen.append(i)
        closest = np.minimum(closest, ((points - points[i]) ** 2).sum(1))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, iters: int) -> KMeansResult:
    p = len(centroids)
    labels = _sq_dists(points, centroids).argmin(1)
    history = [float(((points - centroids[labels]) ** 2).sum())]
    for _ in range(iters):
        new = centroids.copy()
        for j in range(p):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(0)
        err = ((points - new[labels]) ** 2).sum(1)
        for j in range(p):
            if not (labels == j).any():
                far = int(err.argmax())
                new[j] = points[far]
                err[far] = 0.0
        new_labels = _sq_dists(points, new).argmin(1)
        sse = float(((points - new[new_labels]) ** 2).sum())
        centroids = new
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        history.append(sse)
        if converged:
            break
    return KMeansResult(centroids, labels, history)


def kmeans(points, p: int, iters: int = 20, seed: int = 0, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts.

    Empty clusters are re-seeded at the point farthest from its centroid.
    A single start lands in a poor local optimum often enough on small data
    that several restarts are the default.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if len(points) < p:
        raise ValueError(f"{len(points)} points cannot form {p} clusters")
    if p < 1:
        raise ValueError("need at least one cluster")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        res = _lloyd(points, _kmeans_pp(points, p, rng), iters)
        if best is None or res.sse < best.sse:
            best = res
    return best


@dataclass
class Centroids:
    vectors: np.ndarray
    epoch: int = 0

    @property
    def p(self) -> int:
        return len(self.vectors)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm centroid")
    return a / norms


def order_centroids_greedy(raw, epoch: int = 0) -> Centroids:
    """Nearest-neighbour tour by cosine: start at raw[0], then repeatedly the
    unused centroid most similar to the previous pick (lowest index on ties)."""
    raw = np.asarray(raw, dtype=np.float64)
    if len(raw) < 1:
        raise ValueError("need at least one centroid")
    unit = _unit_rows(raw)
    sims = unit @ unit.T
    used = np.zeros(len(raw), dtype=bool)
    tour = [0]
    used[0] = True
    for _ in range(1, len(raw)):
        cand = np.where(used, -np.inf, sims[tour[-1]])
        nxt = int(cand.argmax())
        tour.append(nxt)
        used[nxt] = True
    return Centroids(raw[tour].copy(), epoch)


def initial_centroids(p: int, d: int, seed: int) -> Centroids:
    """Tour-ordered unit random vectors used before the first K-Means refresh."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((p, d))
    return order_centroids_greedy(v / np.linalg.norm(v, axis=1, keepdims=True))


def _cosine_argmax(h: Tensor, directions: Tensor) -> Tensor:
    norms = h.norm(dim=-1, keepdim=True)
    unit = h / torch.where(norms > 0, norms, torch.ones_like(norms))
    sims = unit @ directions.T
    # zero rows give all-zero similarities; argmax then returns 0
    return sims.argmax(dim=-1)


def assign_clusters(h: Tensor, c: Centroids) -> Tensor:
    """Index of the max-cosine centroid per row; ties and zero rows go to the lowest index."""
    with torch.no_grad():
        vec = torch.as_tensor(c.vectors, dtype=h.dtype)
        if vec.shape[-1] != h.shape[-1]:
            raise ValueError(f"centroid width {vec.shape[-1]} != row width {h.shape[-1]}")
        vn = vec.norm(dim=-1, keepdim=True)
        if (vn == 0).any():
            raise ValueError("zero-norm centroid")
        return _cosine_argmax(h.detach(), vec / vn)


@dataclass
class ClusterRoute:
    """Routing of T flat rows: assignment v, stable sort u, its inverse, and chunks of u.

    All index tensors carry a leading batch axis: v, u, inverse are (B, T).
    """

    v: Tensor
    u: Tensor
    inverse: Tensor
    m: int
    groups: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_assignment(cls, v: Tensor, m: int) -> "ClusterRoute":
        if v.dim() == 1:
            v = v.unsqueeze(0)
        u = torch.sort(v, dim=-1, stable=True).indices
        inverse = torch.empty_like(u)
        inverse.scatter_(-1, u, torch.arange(u.shape[-1]).expand_as(u).contiguous())
        T = u.shape[-1]
        groups = [u[:, s : s + m] for s in range(0, T, m)]
        return cls(v, u, inverse, m, groups)


def sort_and_chunk(h: Tensor, v: Tensor, m: int, positions: Tensor | None = None) -> tuple[list[TokenGroup], ClusterRoute]:
    """Stable-sort rows by cluster id and cut the sorted sequence into chunks of m.

    ``h`` is (B, T, d) (or (T, d)), ``positions`` the original position of each
    flat row, (T,) or (B, T). The last chunk is ragged when m does not divide T.
    """
    squeeze = h.dim() == 2
    if squeeze:
        h = h.unsqueeze(0)
    B, T, d = h.shape
    if v.shape[-1] != T:
        raise ValueError(f"{v.shape[-1]} assignments for {T} rows")
    if positions is None:
        positions = torch.arange(T)
    positions = positions.expand(B, T)
    route = ClusterRoute.from_assignment(v.expand(B, T) if v.dim() == 1 else v, m)
    chunks = []
    for a in route.groups:
        rows = torch.gather(h, 1, a.unsqueeze(-1).expand(B, a.shape[1], d))
        grp = TokenGroup(rows[0] if squeeze else rows, torch.gather(positions, 1, a)[0] if squeeze else torch.gather(positions, 1, a))
        chunks.append(grp)
    return chunks, route


def scatter_back(outputs: list[TokenGroup] | list[Tensor], route: ClusterRoute) -> Tensor:
    """Concatenate chunk outputs and undo the sort so row i is input row i."""
    tensors = [o.states if isinstance(o, TokenGroup) else o for o in outputs]
    sizes = [g.shape[1] for g in route.groups]
    if [t.shape[-2] for t in tensors] != sizes:
        raise ValueError("chunk outputs do not match route groups")
    squeeze = tensors[0].dim() == 2
    cat = torch.cat([t.unsqueeze(0) if squeeze else t for t in tensors], dim=1)
    B, T, d = cat.shape
    out = torch.gather(cat, 1, route.inverse.expand(B, T).unsqueeze(-1).expand(B, T, d))
    return out[0] if squeeze else out


@dataclass
class UpdateSchedule:
    """Centroid refresh every ``frequency`` iterations; None means never.

    Refreshes run on a bank of up to ``memory_size`` rows, so they default
    to a single K-Means start.
    """

    frequency: int | None = 1
    kmeans_iters: int = 20
    seed: int = 0
    n_init: int = 1

    def __post_init__(self):
        if self.frequency is not None and self.frequency < 1:
            raise ValueError("frequency must be >= 1 (or None for never)")

    def fires(self, iteration: int) -> bool:
        return self.frequency is not None and iteration % self.frequency == 0


def maybe_update_centroids(
    bank: MemoryBank,
    schedule: UpdateSchedule,
    iteration: int,
    current: Centroids,
) -> Centroids | None:
    """K-Means on the bank then tour ordering when the schedule fires, else None."""
    if not schedule.fires(iteration):
        return None
    p = current.p
    if len(bank) < p:
        log.warning("centroid refresh at iteration %d skipped: bank holds %d rows < p=%d", iteration, len(bank), p)
        return None
    res = kmeans(bank.rows(), p, schedule.kmeans_iters, seed=schedule.seed, n_init=schedule.n_init)
    raw = res.centroids
    norms = np.linalg.norm(raw, axis=1)
    if (norms == 0).any():
        # a zero centroid cannot define a cosine; keep the old direction for it
        raw = np.where(norms[:, None] == 0, current.vectors, raw)
    return order_centroids_greedy(raw, epoch=current.epoch + 1)


def routed_layer(
    state: LayerState,
    layer: TransformerLayer,
    assign: Callable[[Tensor], Tensor],
    m: int,
    mask: MaskSpec = NO_MASK,
    route: ClusterRoute | None = None,
) -> tuple[LayerState, ClusterRoute]:
    """Flatten, route with ``assign``, encode each sorted chunk, scatter back, unflatten.

    A precomputed ``route`` bypasses ``assign`` (used to hold routing fixed).
    """
    h, positions = flatten_state(state)
    if route is None:
        route = ClusterRoute.from_assignment(assign(h), m)
    B, T, d = h.shape
    u = route.u.expand(B, T)
    full = (T // m) * m
    outs = []
    if full:
        idx = u[:, :full].reshape(B, T // m, m)
        outs.append(encode_indexed(layer, h, positions, idx, mask).reshape(B, full, d))
    if full < T:
        idx = u[:, full:].reshape(B, 1, T - full)
        outs.append(encode_indexed(layer, h, positions, idx, mask).reshape(B, T - full, d))
    in_sorted_order = torch.cat(outs, dim=1)
    inverse = route.inverse.expand(B, T)
    out = torch.gather(in_sorted_order, 1, inverse.unsqueeze(-1).expand(B, T, d))
    return unflatten_state(out, state.layout), route


def cluster_former_layer(
    state: LayerState,
    c: Centroids,
    layer: TransformerLayer,
    mask: MaskSpec = NO_MASK,
) -> LayerState:
    out, _ = routed_layer(state, layer, lambda h: assign_clusters(h, c), state.layout.m, mask)
    return out


class RoutedLayer(nn.Module):
    """Common body of content-routed layers; subclasses supply ``assign``.

    With ``freeze_routes`` set, the first route computed is cached and reused,
    which holds the non-differentiable routing fixed for gradient checks.
    """

    kind = "routed"

    def __init__(self, layer: TransformerLayer, m: int):
        super().__init__()
        self.layer = layer
        self.m = m
        self.freeze_routes = False
        self.last_route: ClusterRoute | None = None

    def assign(self, h: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, state: LayerState, mask: MaskSpec = NO_MASK) -> LayerState:
        cached = self.last_route if self.freeze_routes else None
        out, route = routed_layer(state, self.layer, self.assign, self.m, mask, cached)
        self.last_route = route
        return out


class ClusterFormerLayer(RoutedLayer):
    kind = "cluster-former"

    def __init__(self, layer: TransformerLayer, m: int, p: int, memory_size: int, seed: int, schedule: UpdateSchedule | None = None):
        super().__init__(layer, m)
        d = layer.cfg.d
        self.bank = MemoryBank(memory_size, d)
        self.centroids = initial_centroids(p, d, seed)
        self.schedule = schedule or UpdateSchedule(frequency=None, seed=seed)

    @property
    def p(self) -> int:
        return self.centroids.p

    def assign(self, h: Tensor) -> Tensor:
        return assign_clusters(h, self.centroids)

    def refresh(self, iteration: int) -> bool:
        new = maybe_update_centroids(self.bank, self.schedule, iteration, self.centroids)
        if new is None:
            return False
        self.centroids = new
        return True
