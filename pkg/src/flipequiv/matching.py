"""Activation matching: channel statistics, correlation, exact assignment."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from flipequiv import model as M
from flipequiv import symmetry as S
from flipequiv import tensor as T

DEAD_TOLERANCE = 1e-7


# --------------------------------------------------------------------------
# Streaming statistics
# --------------------------------------------------------------------------


@dataclass
class LayerStats:
    """Running count, channel means and centred cross-product matrix."""

    count: int
    mean: np.ndarray
    m2: np.ndarray  # sum over observations of (x - mean)(x - mean)^T
    split: int | None = None  # channels [0, split) belong to net A, the rest to net B

    @classmethod
    def empty(cls, channels: int, split: int | None = None) -> "LayerStats":
        return cls(0, np.zeros(channels), np.zeros((channels, channels)), split)

    @classmethod
    def from_observations(cls, obs: np.ndarray, split: int | None = None) -> "LayerStats":
        mean = obs.mean(axis=0)
        c = obs - mean
        return cls(obs.shape[0], mean, c.T @ c, split)

    def merge(self, other: "LayerStats") -> "LayerStats":
        if self.mean.shape != other.mean.shape:
            raise T.ShapeError("cannot merge statistics of different widths")
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / n)
        return LayerStats(n, mean, m2, self.split)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.m2), 0.0) / max(self.count, 1))

    def dead(self, tol: float = DEAD_TOLERANCE) -> np.ndarray:
        return self.std < tol


@dataclass
class ActivationStats:
    layers: dict[int, LayerStats]
    samples: int = 0

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        if self.layers.keys() != other.layers.keys():
            raise ValueError("layer sets differ")
        return ActivationStats({k: self.layers[k].merge(other.layers[k]) for k in self.layers}, self.samples + other.samples)


def capture_points(net_or_layers) -> list[int]:
    """Post-ReLU layer index for every channel interface (the producer itself if no ReLU follows)."""
    layers = getattr(net_or_layers, "layers", net_or_layers)
    out = []
    for f in M.channel_interfaces(layers):
        if f.relu is not None:
            out.append(f.relu)
        else:
            out.append(f.bn[-1] if f.bn else f.producer)
    return out


def _observations(act: np.ndarray) -> np.ndarray:
    # [N, C, H, W] -> [N*H*W, C]; [N, C] stays
    if act.ndim == 4:
        return act.transpose(0, 2, 3, 1).reshape(-1, act.shape[1])
    return act


def collect_activations(
    net: M.Network,
    dataset,
    layer_ids=None,
    max_samples: int | None = None,
    partner: M.Network | None = None,
    batch_size: int = 256,
) -> ActivationStats:
    """One pass of eval-mode statistics over the first ``max_samples`` samples.

    With ``partner`` the channels of both nets are stacked (A first) so that
    cross-network correlations are available from a single accumulator.
    """
    images, _ = M._images_labels(dataset)
    images = np.asarray(images)
    if max_samples is not None:
        images = images[:max_samples]
    if len(images) == 0:
        raise ValueError("collect_activations needs a non-empty dataset")
    if partner is not None and not net.same_architecture(partner):
        raise ValueError("partner network has a different architecture")
    layer_ids = capture_points(net) if layer_ids is None else list(layer_ids)
    stats: ActivationStats | None = None
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        _, cap = M.forward(net, xb, capture=layer_ids)
        if partner is not None:
            _, cap_b = M.forward(partner, xb, capture=layer_ids)
        part = {}
        for lid in layer_ids:
            obs = _observations(cap[lid])
            split = None
            if partner is not None:
                split = obs.shape[1]
                obs = np.concatenate([obs, _observations(cap_b[lid])], axis=1)
            part[lid] = LayerStats.from_observations(obs, split)
        chunk = ActivationStats(part, len(xb))
        stats = chunk if stats is None else stats.merge(chunk)
    return stats


def correlation_matrix(stats: ActivationStats, layer: int, tol: float = DEAD_TOLERANCE) -> np.ndarray:
    """Pearson correlations; for joint statistics the [A channels, B channels] block.

    Rows and columns of dead channels are zero.
    """
    ls = stats.layers[layer]
    std = ls.std
    live = std >= tol
    denom = np.outer(std, std) * ls.count
    corr = np.zeros_like(ls.m2)
    ok = np.outer(live, live)
    corr[ok] = ls.m2[ok] / denom[ok]
    corr = np.clip(corr, -1.0, 1.0)
    if ls.split is None:
        return corr
    return corr[: ls.split, ls.split :]


# --------------------------------------------------------------------------
# Exact assignment
# --------------------------------------------------------------------------


def _hungarian_min(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method.  Returns (row->col, u, v)."""
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _reassign(adj, row_to_col, col_to_row, row, fixed) -> bool:
    """Kuhn augmenting search: rematch ``row`` using only rows not in ``fixed``."""
    visited = np.zeros(len(col_to_row), dtype=bool)

    def attempt(r):
        for c in np.flatnonzero(adj[r]):
            if visited[c]:
                continue
            visited[c] = True
            owner = col_to_row[c]
            if owner < 0 or (owner not in fixed and attempt(owner)):
                row_to_col[r], col_to_row[c] = c, r
                return True
        return False

    return attempt(row)


def solve_assignment(similarity) -> tuple[np.ndarray, float]:
    """Permutation maximising ``sum_i similarity[i, perm[i]]``.

    Exact (Hungarian, O(n^3)).  Among optimal permutations the
    lexicographically smallest is returned: rows are fixed in order to the
    smallest column that still admits a perfect matching inside the
    equality subgraph of the optimal dual.
    """
    s = np.asarray(similarity, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise T.ShapeError(f"similarity must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity has non-finite entries")
    n = s.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    cost = -s
    perm, u, v = _hungarian_min(cost)
    scale = max(1.0, float(np.abs(s).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= 1e-12 * scale * n
    tight[np.arange(n), perm] = True
    # lexicographic repair inside the equality subgraph
    row_to_col = perm.copy()
    col_to_row = T.invert_permutation(perm)
    fixed: set[int] = set()
    for i in range(n):
        fixed.add(i)
        for j in np.flatnonzero(tight[i]):
            if j == row_to_col[i]:
                break
            owner = col_to_row[j]
            if owner in fixed:
                continue
            trial_rc, trial_cr = row_to_col.copy(), col_to_row.copy()
            trial_cr[trial_rc[i]] = -1
            trial_rc[i], trial_cr[j] = j, i
            if _reassign(tight, trial_rc, trial_cr, owner, fixed):
                row_to_col, col_to_row = trial_rc, trial_cr
                break
    out = row_to_col
    total = float(s[np.arange(n), out].sum())
    hung_total = float(s[np.arange(n), perm].sum())
    if total < hung_total:  # only possible through a spurious near-tie
        out, total = perm, hung_total
    return out, total


# --------------------------------------------------------------------------
# Network matching
# --------------------------------------------------------------------------


@dataclass
class MatchResult:
    perms: list[np.ndarray]
    layers: list[int]  # capture points
    correlations: list[np.ndarray]  # matched correlation per channel of A
    dead_a: list[np.ndarray]
    dead_b: list[np.ndarray]
    meta: dict = field(default_factory=lambda: {"capture": "post-relu", "statistic": "pearson"})

    @property
    def mean_correlation(self) -> list[float]:
        return [float(c.mean()) if c.size else float("nan") for c in self.correlations]

    def channel_permutation(self) -> S.ChannelPermutation:
        return S.ChannelPermutation(self.perms)

    def to_dict(self) -> dict:
        return {
            "layers": [int(l) for l in self.layers],
            "perms": [[int(v) for v in p] for p in self.perms],
            "correlations": [[float(v) for v in c] for c in self.correlations],
            "mean_correlation": self.mean_correlation,
            "dead_a": [[bool(v) for v in d] for d in self.dead_a],
            "dead_b": [[bool(v) for v in d] for d in self.dead_b],
            "order_histogram": order_histogram(self),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchResult":
        arr = lambda xs, dt: [np.asarray(x, dtype=dt) for x in xs]  # noqa: E731
        return cls(
            arr(d["perms"], np.int64),
            list(d["layers"]),
            arr(d["correlations"], np.float64),
            arr(d["dead_a"], bool),
            arr(d["dead_b"], bool),
            dict(d.get("meta", {})),
        )


def match_networks(
    net_a: M.Network,
    net_b: M.Network,
    dataset,
    layer_ids=None,
    max_samples: int | None = 1024,
    tol: float = DEAD_TOLERANCE,
) -> MatchResult:
    """Per-interface permutations aligning ``net_b``'s channels to ``net_a``'s.

    ``perms[j][i]`` is the channel of B that plays the role of A's channel
    ``i``, so ``apply_perms(net_b, perms)`` is aligned with A.
    """
    if not net_a.same_architecture(net_b):
        raise ValueError("match_networks needs identical architectures")
    points = capture_points(net_a)
    if layer_ids is not None:
        wanted = set(layer_ids)
        unknown = wanted - set(points)
        if unknown:
            raise ValueError(f"layers {sorted(unknown)} are not capture points {points}")
    else:
        wanted = set(points)
    stats = collect_activations(net_a, dataset, [p for p in points if p in wanted], max_samples, partner=net_b)
    perms, corrs, dead_a, dead_b = [], [], [], []
    for lid, f in zip(points, M.channel_interfaces(net_a.layers)):
        if lid not in wanted:
            perms.append(np.arange(f.channels))
            corrs.append(np.full(f.channels, np.nan))
            dead_a.append(np.zeros(f.channels, bool))
            dead_b.append(np.zeros(f.channels, bool))
            continue
        ls = stats.layers[lid]
        dead = ls.dead(tol)
        c = correlation_matrix(stats, lid, tol)
        perm, _ = solve_assignment(c)
        perms.append(perm)
        corrs.append(c[np.arange(c.shape[0]), perm])
        dead_a.append(dead[: ls.split])
        dead_b.append(dead[ls.split :])
    return MatchResult(perms, points, corrs, dead_a, dead_b)


def order_histogram(match) -> list[dict[str, int]]:
    """Per layer: channels whose permutation cycle has length 1, 2 or more."""
    perms = match.perms if hasattr(match, "perms") else match
    out = []
    for p in perms:
        lengths = S.cycle_lengths(p)
        out.append({"1": int((lengths == 1).sum()), "2": int((lengths == 2).sum()), ">2": int((lengths > 2).sum())})
    return out
