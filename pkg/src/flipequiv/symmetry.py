"""Horizontal-flip group machinery: flipped twins, the kernel constraint and GCNNs.

Channel permutations follow the package convention (destination index ->
source index).  For a kernel ``psi`` of shape [Cout, Cin, k, k] the
product ``P1 psi P0^T`` is ``psi[p1][:, p0]``.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from flipequiv import model as M
from flipequiv import tensor as T


@dataclass(frozen=True)
class FlipAction:
    """Mirror along one spatial axis; an order-2 action (S2)."""

    axis: int = -1

    def __call__(self, x):
        return T.hflip(x, self.axis)


def flip_network(net: M.Network) -> M.Network:
    """Copy of ``net`` with every convolution kernel mirrored horizontally.

    For nets whose strided windows cover odd widths symmetrically and that
    end in global pooling, ``flip_network(net)(x) == net(hflip(x))``.
    """
    out = net.copy()
    for i, layer in enumerate(net.layers):
        if isinstance(layer, M.Conv2d):
            out.params[f"{i}.weight"] = T.hflip(net.params[f"{i}.weight"], -1)
    return out


@dataclass
class ChannelPermutation:
    """One permutation per channel interface of a network (see ``model.channel_interfaces``)."""

    perms: list[np.ndarray]

    def __post_init__(self):
        self.perms = [T.check_permutation(p) for p in self.perms]

    def __len__(self):
        return len(self.perms)

    def __iter__(self):
        return iter(self.perms)

    def __getitem__(self, j):
        return self.perms[j]

    @classmethod
    def identity(cls, net_or_layers) -> "ChannelPermutation":
        layers = getattr(net_or_layers, "layers", net_or_layers)
        return cls([np.arange(f.channels) for f in M.channel_interfaces(layers)])

    @classmethod
    def random(cls, net_or_layers, rng) -> "ChannelPermutation":
        layers = getattr(net_or_layers, "layers", net_or_layers)
        return cls([rng.permutation(f.channels) for f in M.channel_interfaces(layers)])

    def inverse(self) -> "ChannelPermutation":
        return ChannelPermutation([T.invert_permutation(p) for p in self.perms])

    def orders(self) -> list[int]:
        return [permutation_order(p) for p in self.perms]

    def to_list(self) -> list[list[int]]:
        return [[int(v) for v in p] for p in self.perms]


# --------------------------------------------------------------------------
# Kernel constraint
# --------------------------------------------------------------------------


def _as_kernel(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return w[:, :, None, None]
    if w.ndim != 4:
        raise T.ShapeError(f"kernel must be rank 2 or 4, got shape {w.shape}")
    return w


def _perm_or_identity(p, n):
    return np.arange(n) if p is None else T.check_permutation(p, n)


def permute_kernel(psi, p0=None, p1=None):
    """``P1 psi P0^T``: output channels by ``p1``, input channels by ``p0``."""
    k = _as_kernel(psi)
    p1 = _perm_or_identity(p1, k.shape[0])
    p0 = _perm_or_identity(p0, k.shape[1])
    out = k[p1][:, p0]
    return out.reshape(np.shape(psi))


def is_involution(p) -> bool:
    p = T.check_permutation(p)
    return bool(np.array_equal(p[p], np.arange(p.size)))


def kernel_constraint_residual(psi, p0=None, p1=None) -> float:
    """``|tau(psi) - P1 psi P0^T|_F / |psi|_F`` (0 for a zero kernel)."""
    k = _as_kernel(psi)
    try:
        diff = T.hflip(k, -1) - _as_kernel(permute_kernel(k, p0, p1))
    except ValueError as exc:
        raise T.ShapeError(f"permutation sizes do not match kernel {k.shape}: {exc}") from exc
    norm = np.linalg.norm(k)
    return 0.0 if norm == 0 else float(np.linalg.norm(diff) / norm)


def project_to_gcnn(psi, p0=None, p1=None):
    """Orthogonal projection onto kernels satisfying ``tau(psi) = P1 psi P0^T``.

    ``psi' = (psi + P1 tau(psi) P0^T) / 2``; needs both permutations to be
    involutions so that the map is idempotent.
    """
    k = _as_kernel(psi)
    for name, p in (("p0", p0), ("p1", p1)):
        if p is not None and not is_involution(p):
            raise ValueError(f"{name} is not an involution")
    proj = 0.5 * (k + _as_kernel(permute_kernel(T.hflip(k, -1), p0, p1)))
    return proj.reshape(np.shape(psi))


def project_vector(v, p=None):
    """Channel vectors (biases, BN parameters) invariant under ``p``."""
    v = np.asarray(v, dtype=np.float64)
    if p is None:
        return v.copy()
    return 0.5 * (v + v[T.check_permutation(p, v.size)])


# --------------------------------------------------------------------------
# GCNN specs and constraints
# --------------------------------------------------------------------------


def regular_pairing(channels: int) -> np.ndarray:
    """Fixed-point-free involution pairing (0,1), (2,3), ..."""
    if channels % 2:
        raise ValueError(f"a regular pairing needs an even channel count, got {channels}")
    p = np.arange(channels)
    p[0::2] += 1
    p[1::2] -= 1
    return p


def pairing_from_pairs(channels: int, pairs) -> np.ndarray:
    p = np.arange(channels)
    for a, b in pairs:
        p[a], p[b] = b, a
    if not is_involution(p):
        raise ValueError("pairs overlap")
    return p


@dataclass
class GcnnSpec:
    """One channel involution per constrained interface (fixed points = invariant channels)."""

    pairings: list[np.ndarray]

    def __post_init__(self):
        self.pairings = [T.check_permutation(p) for p in self.pairings]
        for j, p in enumerate(self.pairings):
            if not is_involution(p):
                raise ValueError(f"pairing {j} is not an involution")

    @classmethod
    def regular(cls, layers, count: int | None = None) -> "GcnnSpec":
        ifaces = M.channel_interfaces(layers)
        count = len(ifaces) if count is None else count
        return cls([regular_pairing(f.channels) for f in ifaces[:count]])

    def counts(self) -> list[dict[str, int]]:
        out = []
        for p in self.pairings:
            fixed = int((p == np.arange(p.size)).sum())
            out.append({"invariant": fixed, "regular": p.size - fixed})
        return out


@dataclass
class ConstraintEntry:
    layer: int
    p_in: np.ndarray | None = None  # None = identity
    p_out: np.ndarray | None = None
    bn: tuple[int, ...] = ()


@dataclass
class GcnnConstraint:
    """Constrained layers of a (partial) GCNN; :meth:`project` enforces them in place."""

    entries: list[ConstraintEntry]
    mode: str = "full"
    spec: GcnnSpec | None = None

    def project(self, net: M.Network) -> M.Network:
        p = net.params
        for e in self.entries:
            w = f"{e.layer}.weight"
            p[w] = project_to_gcnn(p[w], e.p_in, e.p_out)
            b = f"{e.layer}.bias"
            if b in p:
                p[b] = project_vector(p[b], e.p_out)
            for i in e.bn:
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    p[f"{i}.{name}"] = project_vector(p[f"{i}.{name}"], e.p_out)
        return net

    def residuals(self, net: M.Network) -> dict[int, float]:
        return {e.layer: kernel_constraint_residual(net.params[f"{e.layer}.weight"], e.p_in, e.p_out) for e in self.entries}

    def to_dict(self) -> dict:
        def enc(p):
            return None if p is None else [int(v) for v in p]

        return {
            "mode": self.mode,
            "pairings": [enc(p) for p in self.spec.pairings] if self.spec is not None else None,
            "entries": [{"layer": e.layer, "p_in": enc(e.p_in), "p_out": enc(e.p_out), "bn": list(e.bn)} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GcnnConstraint":
        def dec(p):
            return None if p is None else np.asarray(p, dtype=np.int64)

        entries = [ConstraintEntry(e["layer"], dec(e["p_in"]), dec(e["p_out"]), tuple(e["bn"])) for e in d["entries"]]
        spec = GcnnSpec([dec(p) for p in d["pairings"]]) if d.get("pairings") is not None else None
        return cls(entries, d.get("mode", "full"), spec)


class GcnnSpecError(ValueError):
    pass


def build_constraint(layers, input_shape, spec: GcnnSpec | None = None, mode: str = "full", partial_layers: int = 2):
    """Constraint for ``layers``.

    ``full``: every hidden interface is constrained, the first layer lifts
    from the identity on input channels and the head must be invariant.
    ``partial``: only the first ``partial_layers`` producers are G-layers;
    everything after them is free.
    """
    if mode not in ("full", "partial"):
        raise ValueError(f"mode must be 'full' or 'partial', got {mode!r}")
    problems = M.flip_equivariance_violations(layers, input_shape)
    if problems:
        raise GcnnSpecError("constrained nets need mirror-symmetric window sweeps: " + "; ".join(problems))
    ifaces = M.channel_interfaces(layers)
    n_constrained = len(ifaces) if mode == "full" else min(partial_layers, len(ifaces))
    if spec is None:
        spec = GcnnSpec.regular(layers, n_constrained)
    if len(spec.pairings) != n_constrained:
        raise GcnnSpecError(f"spec has {len(spec.pairings)} pairings, {n_constrained} interfaces are constrained")
    entries = []
    for j in range(n_constrained):
        f = ifaces[j]
        if spec.pairings[j].size != f.channels:
            raise GcnnSpecError(f"pairing {j} has {spec.pairings[j].size} entries, layer {f.producer} has {f.channels} channels")
        if j > 0 and ifaces[j - 1].consumer != f.producer:
            raise GcnnSpecError(f"interfaces {j - 1} and {j} are not adjacent")
        p_in = spec.pairings[j - 1] if j > 0 else None
        entries.append(ConstraintEntry(f.producer, p_in, spec.pairings[j], f.bn))
    if mode == "full" and ifaces:
        last = ifaces[-1]
        head = layers[last.consumer]
        between = layers[last.producer + 1 : last.consumer]
        if isinstance(head, M.Linear) and not any(isinstance(l, M.GlobalAvgPool) for l in between):
            raise GcnnSpecError("an invariant head needs global average pooling before the final linear layer")
        entries.append(ConstraintEntry(last.consumer, spec.pairings[-1], None))
    return GcnnConstraint(entries, mode, spec)


def make_gcnn(layers, input_shape, rng, spec: GcnnSpec | None = None, mode: str = "full", partial_layers: int = 2):
    """Initialised network whose constrained kernels already satisfy the constraint."""
    constraint = build_constraint(layers, input_shape, spec, mode, partial_layers)
    net = M.init_network(layers, input_shape, rng)
    net.constraint = constraint
    constraint.project(net)
    return net


# --------------------------------------------------------------------------
# Permutation orders
# --------------------------------------------------------------------------


def cycle_lengths(perm) -> np.ndarray:
    """Length of the cycle each position belongs to."""
    p = T.check_permutation(perm)
    out = np.zeros(p.size, dtype=np.int64)
    for start in range(p.size):
        if out[start]:
            continue
        cycle = [start]
        j = p[start]
        while j != start:
            cycle.append(j)
            j = p[j]
        out[cycle] = len(cycle)
    return out


def permutation_order(perm) -> int:
    lengths = set(cycle_lengths(perm).tolist()) or {1}
    return math.lcm(*lengths)


def cycle_histogram(perm) -> dict[int, int]:
    """Number of channels lying on cycles of each length."""
    return dict(sorted(Counter(cycle_lengths(perm).tolist()).items()))
