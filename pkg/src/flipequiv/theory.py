"""Numerical verifiers and constructive witnesses for the layerwise-equivariance results.

"For all x" statements are checked on the probe vectors the proofs
themselves use (which are guaranteed to refute false claims) plus random
probes.  Everything runs in float64 with absolute tolerance ``TOL``.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from flipequiv import model as M
from flipequiv import tensor as T

TOL = 1e-9
J2 = np.array([[0.0, 1.0], [1.0, 0.0]])


def _relu(x):
    return np.maximum(x, 0.0)


def _square(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise T.ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def _check_invertible(a, name):
    if np.linalg.matrix_rank(a) < a.shape[0]:
        raise np.linalg.LinAlgError(f"{name} is singular")


def perm_matrix(perm) -> np.ndarray:
    """Matrix with ``(P x)[i] = x[perm[i]]``."""
    p = T.check_permutation(perm)
    m = np.zeros((p.size, p.size))
    m[np.arange(p.size), p] = 1.0
    return m


def random_scaled_perm(n: int, rng, low: float = 0.5, high: float = 2.0):
    perm = rng.permutation(n)
    d = rng.uniform(low, high, n)
    return perm, d, perm_matrix(perm) @ np.diag(d)


# --------------------------------------------------------------------------
# Scaled permutations and ReLU commutation
# --------------------------------------------------------------------------


@dataclass
class ScaledPermDecomposition:
    perm: np.ndarray  # A[i, perm[i]] is the only large entry of row i
    scales: np.ndarray  # D diagonal, indexed by column
    residual: float
    ok: bool = True

    @property
    def matrix(self) -> np.ndarray:
        return perm_matrix(self.perm) @ np.diag(self.scales)


@dataclass
class Refusal:
    witness: tuple[int, int]
    reason: str
    ok: bool = False


def decompose_scaled_perm(a, tol: float = TOL):
    """Split ``A = P D`` or refuse with the first offending (row, col)."""
    a = _square(a, "A")
    n = a.shape[0]
    big = np.abs(a) > tol
    for i in range(n):
        cols = np.flatnonzero(big[i])
        if cols.size == 0:
            return Refusal((i, -1), "row has no entry above tolerance")
        if cols.size > 1:
            return Refusal((i, int(cols[1])), "row has more than one entry above tolerance")
        if a[i, cols[0]] < 0:
            return Refusal((i, int(cols[0])), "entry is negative")
    for j in range(n):
        rows = np.flatnonzero(big[:, j])
        if rows.size != 1:
            return Refusal((int(rows[1]) if rows.size else -1, j), "column does not have exactly one entry above tolerance")
    perm = big.argmax(axis=1)
    scales = np.empty(n)
    scales[perm] = a[np.arange(n), perm]
    dec = ScaledPermDecomposition(perm, scales, 0.0)
    dec.residual = float(np.abs(a - dec.matrix).max())
    return dec


@dataclass
class ProbeResult:
    ok: bool
    probes: int
    max_deviation: float
    witness: np.ndarray | None = None
    witness_kind: str | None = None  # which probe family produced the witness

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "probes": self.probes,
            "max_deviation": self.max_deviation,
            "witness": None if self.witness is None else self.witness.tolist(),
            "witness_kind": self.witness_kind,
        }


def relu_probes(a) -> list[tuple[str, np.ndarray]]:
    """Canonical vectors, their negatives, and the proof's pairwise vectors."""
    n = a.shape[0]
    eye = np.eye(n)
    out = [("canonical", eye[k]) for k in range(n)] + [("canonical", -eye[k]) for k in range(n)]
    for i in range(n):
        for k in range(n):
            for k2 in range(n):
                if k != k2 and (a[i, k] != 0 or a[i, k2] != 0):
                    out.append(("pairwise", a[i, k] * eye[k2] - a[i, k2] * eye[k]))
    return out


def verify_relu_commutation(a, b, probe_count: int = 100, rng=None, tol: float = TOL) -> ProbeResult:
    """Check ``ReLU(A x) == B ReLU(x)`` on structured then random probes."""
    a, b = _square(a, "A"), _square(b, "B")
    if a.shape != b.shape:
        raise T.ShapeError(f"A and B differ in size: {a.shape} vs {b.shape}")
    rng = T.make_rng(0) if rng is None else rng
    probes = relu_probes(a) + [("random", x) for x in rng.standard_normal((probe_count, a.shape[0]))]
    worst = 0.0
    for kind, x in probes:
        dev = float(np.abs(_relu(a @ x) - b @ _relu(x)).max())
        worst = max(worst, dev)
        if dev >= tol:
            return ProbeResult(False, len(probes), dev, x, kind)
    return ProbeResult(True, len(probes), worst)


@dataclass
class AffineResult:
    ok: bool
    probes: int
    failed_probe: str | None
    failed_index: int | None
    forced_zero: bool  # if every probe passed then a and b vanished

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_affine_relu(a_mat, a_vec, b_mat, b_vec, probe_count: int = 100, rng=None, tol: float = TOL) -> AffineResult:
    """Check ``ReLU(A x + a) == B ReLU(x) + b`` on the four proof probes and random ones."""
    A, B = _square(a_mat, "A"), _square(b_mat, "B")
    a, b = np.asarray(a_vec, dtype=np.float64), np.asarray(b_vec, dtype=np.float64)
    if A.shape != B.shape or a.shape != (A.shape[0],) or b.shape != (A.shape[0],):
        raise T.ShapeError("inconsistent shapes for A, a, B, b")
    _check_invertible(A, "A")
    rng = T.make_rng(0) if rng is None else rng
    ainv_a = np.linalg.solve(A, a)
    probes = [("0", np.zeros_like(a)), ("A^-1 a", ainv_a), ("-A^-1 a", -ainv_a), ("-2 A^-1 a", -2 * ainv_a)]
    probes += [(f"random[{i}]", x) for i, x in enumerate(rng.standard_normal((probe_count, a.size)))]
    for idx, (name, x) in enumerate(probes):
        dev = np.abs(_relu(A @ x + a) - (B @ _relu(x) + b)).max()
        if dev >= tol:
            return AffineResult(False, len(probes), name, idx, True)
    forced = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)) < tol
    return AffineResult(True, len(probes), None, None, bool(forced))


# --------------------------------------------------------------------------
# Two-layer networks
# --------------------------------------------------------------------------


@dataclass
class TwoLayerNet:
    w1: np.ndarray
    w2: np.ndarray
    a: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.w1 = np.atleast_2d(np.asarray(self.w1, dtype=np.float64))
        self.w2 = np.atleast_2d(np.asarray(self.w2, dtype=np.float64))
        if self.w2.shape[1] != self.w1.shape[0]:
            raise T.ShapeError(f"W2 {self.w2.shape} does not compose with W1 {self.w1.shape}")

    def __call__(self, x):
        # x: [..., d] -> [..., out]
        h = x @ self.w1.T
        if self.a is not None:
            h = h + self.a
        y = _relu(h) @ self.w2.T
        if self.b is not None:
            y = y + self.b
        return y


@dataclass
class Prop1Result:
    rho0: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    ok: bool
    max_deviation: float


def check_two_layer_equivariance(w1, w2, rho0, rho2, probes: int = 100, rng=None, tol: float = TOL):
    """Max over random x of ``|f(rho0 x) - rho2 f(x)|`` and whether it is below ``tol``."""
    rng = T.make_rng(0) if rng is None else rng
    net = TwoLayerNet(w1, w2)
    x = rng.standard_normal((probes, net.w1.shape[1]))
    dev = float(np.abs(net(x @ np.asarray(rho0).T) - net(x) @ np.asarray(rho2).T).max())
    return dev < tol, dev


def construct_prop1_reps(w1, w2, perm, scales, probes: int = 100, rng=None, tol: float = TOL) -> Prop1Result:
    """Input/output representations induced by a hidden scaled permutation ``P D``."""
    w1, w2 = _square(w1, "W1"), _square(w2, "W2")
    _check_invertible(w1, "W1")
    _check_invertible(w2, "W2")
    pd = perm_matrix(perm) @ np.diag(np.asarray(scales, dtype=np.float64))
    rho0 = np.linalg.solve(w1, pd @ w1)
    rho2 = w2 @ pd @ np.linalg.inv(w2)
    scale = max(1.0, float(np.abs(w2).max() * np.abs(pd).max() * np.abs(w1).max()))
    ok, dev = check_two_layer_equivariance(w1, w2, rho0, rho2, probes, rng, tol * scale)
    return Prop1Result(rho0, pd, rho2, ok, dev)


@dataclass
class Prop2Result:
    structure_ok: bool
    invariance_ok: bool
    hidden: np.ndarray  # W1 rho0 W1^-1
    max_deviation: float
    reason: str = ""

    @property
    def ok(self):
        return self.structure_ok and self.invariance_ok


def verify_invariant_2layer(w1, signs, rho0, probes: int = 100, rng=None, tol: float = 1e-7) -> Prop2Result:
    """Block-permutation structure of ``W1 rho0 W1^-1`` and invariance of ``signs . ReLU(W1 x)``.

    ``signs`` must list the +1 entries before the -1 entries.
    """
    w1 = _square(w1, "W1")
    _check_invertible(w1, "W1")
    signs = np.asarray(signs, dtype=np.float64)
    if signs.shape != (w1.shape[0],) or not np.all(np.abs(signs) == 1):
        raise ValueError("signs must be a +-1 vector matching W1")
    m_plus = int((signs > 0).sum())
    if not np.all(signs[:m_plus] > 0):
        raise ValueError("signs must list positives first")
    hidden = w1 @ np.asarray(rho0, dtype=np.float64) @ np.linalg.inv(w1)
    reason = ""
    rounded = np.round(hidden)
    is_perm = np.abs(hidden - rounded).max() < tol and np.all((rounded == 0) | (rounded == 1))
    is_perm = is_perm and np.all(rounded.sum(0) == 1) and np.all(rounded.sum(1) == 1)
    structure_ok = bool(is_perm)
    if not is_perm:
        reason = "hidden action is not a permutation"
    else:
        cols = rounded.argmax(axis=1)
        mixes = (np.arange(len(cols)) < m_plus) != (cols < m_plus)
        if mixes.any():
            structure_ok = False
            reason = f"row {int(np.flatnonzero(mixes)[0])} mixes the positive and negative blocks"
    ok, dev = check_two_layer_equivariance(w1, signs[None, :], rho0, np.eye(1), probes, rng, tol)
    return Prop2Result(structure_ok, ok, hidden, dev, reason)


def block_perm_rep(w1, m_plus: int, perm_plus, perm_minus) -> np.ndarray:
    """``rho0 = W1^-1 diag(P+, P-) W1``."""
    w1 = _square(w1, "W1")
    perm = np.concatenate([np.asarray(perm_plus), m_plus + np.asarray(perm_minus, dtype=np.int64)])
    return np.linalg.solve(w1, perm_matrix(perm) @ w1)


# --------------------------------------------------------------------------
# 2x2 canonicalisation
# --------------------------------------------------------------------------


@dataclass
class Canonical2x2:
    w1: np.ndarray
    w2: np.ndarray
    rho1: np.ndarray  # order <= 2 scaled permutation on the hidden layer
    case: str
    grid_deviation: float
    ok: bool = True


@dataclass
class NotInvariant:
    witness: np.ndarray
    deviation: float
    ok: bool = False


def _grid(points: int = 81, radius: float = 2.0) -> np.ndarray:
    g = np.linspace(-radius, radius, points)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _layerwise_rho(w1, w2, tol):
    for name, rho in (("identity", np.eye(2)), ("swap", J2)):
        if np.abs(rho @ w1 - w1 @ J2).max() <= tol and np.abs(w2 @ rho - w2).max() <= tol:
            return name, rho
    return None, None


def canonicalize_2x2_invariant_net(w1, w2, grid_tol: float = TOL, grid_points: int = 81):
    """Rewrite a swap-invariant ``W2 ReLU(W1 x)`` (2-2-1) as a layerwise equivariant net.

    Returns :class:`Canonical2x2` or a :class:`NotInvariant` certificate.
    The construction follows the case split of the existence proof:
    factor ``|W2|`` into the rows of ``W1``; drop hidden units that cannot
    reach the output; a full-rank remainder must have swapped rows
    (hidden action = swap); a rank-1 remainder is either row-wise
    constant, a single symmetric row, the zero function (rewritten as the
    zero net) or the antisymmetric pair ``[[c, -c], [-c, c]]``.
    """
    w1 = np.asarray(w1, dtype=np.float64).reshape(2, 2)
    w2 = np.asarray(w2, dtype=np.float64).reshape(1, 2)
    grid = _grid(grid_points)
    f = TwoLayerNet(w1, w2)
    scale = max(1.0, float(np.abs(w1).sum() * np.abs(w2).sum()))
    y, yj = f(grid), f(grid @ J2.T)
    dev = np.abs(y - yj).ravel()
    if dev.max() > grid_tol * scale:
        k = int(dev.argmax())
        return NotInvariant(grid[k], float(dev[k]))

    # factor non-negative scales through the ReLU
    mag = np.abs(w2[0])
    w1t = w1 * mag[:, None]
    w2t = np.sign(w2)
    dead = (mag == 0) | (np.abs(w1t).max(axis=1) == 0)
    w1t[dead] = 0.0
    w2t[0, dead] = 0.0
    tol = grid_tol * scale

    rank = np.linalg.matrix_rank(w1t, tol=tol)
    if rank == 0:
        case = "zero"
    elif np.all(np.abs(y) <= tol):
        # Example-1 style degeneracy: the net computes 0, use the zero net
        case = "zero-function"
        w1t, w2t = np.zeros((2, 2)), np.zeros((1, 2))
    elif rank == 2:
        case = "full-rank"
    elif (~dead).sum() == 1:
        case = "rank-1-single-row"
    elif np.all(np.abs(w1t[:, 0] - w1t[:, 1]) <= tol):
        case = "rank-1-rowwise-constant"
    else:
        case = "rank-1-antisymmetric"
    name, rho = _layerwise_rho(w1t, w2t, tol)
    if rho is None:
        raise ArithmeticError("invariant 2x2 net without a layerwise form; this contradicts the construction")
    g_dev = float(np.abs(TwoLayerNet(w1t, w2t)(grid) - y).max())
    return Canonical2x2(w1t, w2t, rho, case, g_dev, g_dev <= tol)


# --------------------------------------------------------------------------
# Finite groups and actions
# --------------------------------------------------------------------------


@dataclass
class FiniteGroup:
    table: np.ndarray  # table[h, g] = index of h*g
    identity: int = 0
    name: str = ""

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)

    @property
    def order(self) -> int:
        return self.table.shape[0]

    def validate(self) -> None:
        n = self.order
        if self.table.shape != (n, n):
            raise ValueError("multiplication table must be square")
        full = np.arange(n)
        for r in range(n):
            if not (np.array_equal(np.sort(self.table[r]), full) and np.array_equal(np.sort(self.table[:, r]), full)):
                raise ValueError("multiplication table is not a Latin square")
        if not (np.array_equal(self.table[self.identity], full) and np.array_equal(self.table[:, self.identity], full)):
            raise ValueError("identity row/column is not the identity map")
        if n <= 16:
            t = self.table
            if not np.array_equal(t[t[:, :, None], np.arange(n)[None, None, :]], t[np.arange(n)[:, None, None], t[None, :, :]]):
                raise ValueError("multiplication is not associative")

    def inverse(self, g: int) -> int:
        return int(np.flatnonzero(self.table[g] == self.identity)[0])

    @classmethod
    def from_permutations(cls, perms, name: str = "") -> "FiniteGroup":
        """Group table of a closed list of permutations; composition ``(h g)(x) = h(g(x))``."""
        perms = [tuple(int(v) for v in p) for p in perms]
        index = {p: i for i, p in enumerate(perms)}
        n = len(perms)
        table = np.empty((n, n), dtype=np.int64)
        for i, h in enumerate(perms):
            for j, g in enumerate(perms):
                table[i, j] = index[tuple(h[g[x]] for x in range(len(g)))]
        ident = index[tuple(range(len(perms[0])))]
        grp = cls(table, ident, name)
        grp.validate()
        return grp


def _closure(gens, size):
    ident = tuple(range(size))
    seen = [ident]
    frontier = [ident]
    while frontier:
        new = []
        for p in frontier:
            for g in gens:
                q = tuple(g[p[x]] for x in range(size))
                if q not in seen:
                    seen.append(q)
                    new.append(q)
        frontier = new
    return seen


def cyclic_group(n: int) -> FiniteGroup:
    gen = tuple((x + 1) % n for x in range(n))
    return FiniteGroup.from_permutations(_closure([gen], n), f"C{n}")


def klein_group() -> FiniteGroup:
    return FiniteGroup.from_permutations(_closure([(1, 0, 3, 2), (2, 3, 0, 1)], 4), "V4")


def symmetric3() -> FiniteGroup:
    return FiniteGroup.from_permutations(_closure([(1, 0, 2), (1, 2, 0)], 3), "S3")


def small_groups() -> list[FiniteGroup]:
    """Every group of order at most 6, up to isomorphism."""
    return [cyclic_group(n) for n in range(1, 7)] + [klein_group(), symmetric3()]


def subgroups(group: FiniteGroup) -> list[tuple[int, ...]]:
    n, t = group.order, group.table
    out = []
    others = [g for g in range(n) if g != group.identity]
    for r in range(len(others) + 1):
        for combo in itertools.combinations(others, r):
            s = set(combo) | {group.identity}
            if all(t[a, b] in s for a in s for b in s):
                out.append(tuple(sorted(s)))
    return out


@dataclass
class FiniteAction:
    group: FiniteGroup
    table: np.ndarray  # table[g, x]

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.table.shape[1]

    def __call__(self, g, x):
        return self.table[g, x]

    def axiom_violation(self):
        """First (g, h, x) breaking an axiom, or None."""
        m = self.size
        if self.table.shape != (self.group.order, m) or (m and (self.table.min() < 0 or self.table.max() >= m)):
            return ("shape", None, None)
        for x in range(m):
            if self.table[self.group.identity, x] != x:
                return ("identity", None, x)
        t = self.group.table
        for h in range(self.group.order):
            for g in range(self.group.order):
                lhs = self.table[t[h, g]]
                rhs = self.table[h][self.table[g]]
                bad = np.flatnonzero(lhs != rhs)
                if bad.size:
                    return ("compatibility", (h, g), int(bad[0]))
        return None

    def is_valid(self) -> bool:
        return self.axiom_violation() is None


def coset_action(group: FiniteGroup, sub) -> FiniteAction:
    """Left multiplication on the left cosets ``g H``."""
    sub = tuple(sub)
    t = group.table
    cosets: list[frozenset] = []
    for g in range(group.order):
        c = frozenset(int(t[g, h]) for h in sub)
        if c not in cosets:
            cosets.append(c)
    index = {c: i for i, c in enumerate(cosets)}
    rep = [min(c) for c in cosets]
    table = np.array([[index[frozenset(int(t[t[g, r], h]) for h in sub)] for r in rep] for g in range(group.order)])
    return FiniteAction(group, table)


def disjoint_union(actions) -> FiniteAction:
    actions = list(actions)
    group = actions[0].group
    offset, cols = 0, []
    for a in actions:
        cols.append(a.table + offset)
        offset += a.size
    table = np.concatenate(cols, axis=1) if cols else np.zeros((group.order, 0), dtype=np.int64)
    return FiniteAction(group, table)


def all_actions(group: FiniteGroup, max_size: int = 6) -> list[FiniteAction]:
    """Every action on at most ``max_size`` points up to isomorphism (unions of coset actions)."""
    transitive = [coset_action(group, h) for h in subgroups(group)]
    transitive = [a for a in transitive if a.size <= max_size]
    out = []

    def extend(start, chosen, size):
        if chosen:
            out.append(disjoint_union(chosen))
        for i in range(start, len(transitive)):
            if size + transitive[i].size <= max_size:
                extend(i, chosen + [transitive[i]], size + transitive[i].size)

    extend(0, [], 0)
    return out


def relabel(action: FiniteAction, phi) -> FiniteAction:
    return transfer_action(phi, action)


class NotEquivariant(ValueError):
    def __init__(self, g, x):
        super().__init__(f"composite is not equivariant at g={g}, x={x}")
        self.g, self.x = g, x


def is_equivariant(f, alpha_in: FiniteAction, alpha_out: FiniteAction):
    """First (g, x) with ``f(alpha_in(g, x)) != alpha_out(g, f(x))`` or None."""
    f = np.asarray(f)
    lhs = f[alpha_in.table]
    rhs = alpha_out.table[:, f]
    bad = np.argwhere(lhs != rhs)
    return None if bad.size == 0 else (int(bad[0, 0]), int(bad[0, 1]))


def transfer_action(phi, alpha_x: FiniteAction) -> FiniteAction:
    """``alpha_Y(g, y) = phi(alpha_X(g, phi^-1(y)))`` for a bijection ``phi``."""
    phi = np.asarray(phi)
    try:
        phi = T.check_permutation(phi, alpha_x.size)
    except ValueError as exc:
        raise ValueError(f"phi is not a bijection: {exc}") from exc
    inv = T.invert_permutation(phi)
    return FiniteAction(alpha_x.group, phi[alpha_x.table[:, inv]])


def transfer_is_unique(phi, alpha_x: FiniteAction, alpha_y: FiniteAction) -> bool:
    """Every entry of ``alpha_y`` is forced: changing any single value breaks equivariance."""
    phi = np.asarray(phi)
    for g in range(alpha_y.group.order):
        for y in range(alpha_y.size):
            for z in range(alpha_y.size):
                if z == alpha_y.table[g, y]:
                    continue
                trial = alpha_y.table.copy()
                trial[g, y] = z
                if is_equivariant(phi, alpha_x, FiniteAction(alpha_y.group, trial)) is None:
                    return False
    return True


@dataclass
class QuotientResult:
    classes: list[tuple[int, ...]]  # elements of phi(X) grouped by psi value
    action: FiniteAction
    phi_q: np.ndarray  # X -> class index
    psi_q: np.ndarray  # class index -> Z


def quotient_action(phi, psi, alpha_x: FiniteAction, alpha_z: FiniteAction) -> QuotientResult:
    """Action on ``phi(X)`` modulo the kernel relation of ``psi``."""
    phi, psi = np.asarray(phi, dtype=np.int64), np.asarray(psi, dtype=np.int64)
    comp = psi[phi]
    bad = is_equivariant(comp, alpha_x, alpha_z)
    if bad is not None:
        raise NotEquivariant(*bad)
    image = sorted(set(phi.tolist()))
    by_value: dict[int, list[int]] = {}
    for y in image:
        by_value.setdefault(int(psi[y]), []).append(y)
    classes = sorted(tuple(v) for v in by_value.values())
    class_of_z = {int(psi[c[0]]): k for k, c in enumerate(classes)}
    psi_q = np.array([psi[c[0]] for c in classes], dtype=np.int64)
    # alpha_Z never leaves psi(phi(X)), so the restricted inverse is defined
    table = np.empty((alpha_x.group.order, len(classes)), dtype=np.int64)
    for g in range(alpha_x.group.order):
        for k, z in enumerate(psi_q):
            moved = int(alpha_z.table[g, z])
            if moved not in class_of_z:
                raise ArithmeticError(f"alpha_Z moves {z} outside psi(phi(X))")
            table[g, k] = class_of_z[moved]
    phi_q = np.array([class_of_z[int(psi[y])] for y in phi], dtype=np.int64)
    return QuotientResult(classes, FiniteAction(alpha_x.group, table), phi_q, psi_q)


def equivariant_map(alpha_x: FiniteAction, alpha_z: FiniteAction, rng):
    """Random equivariant X -> Z (orbit by orbit), or None if none exists."""
    m = alpha_x.size
    out = -np.ones(m, dtype=np.int64)
    stab_z = [set(np.flatnonzero(alpha_z.table[:, z] == z).tolist()) for z in range(alpha_z.size)]
    for x0 in range(m):
        if out[x0] >= 0:
            continue
        stab = set(np.flatnonzero(alpha_x.table[:, x0] == x0).tolist())
        cands = [z for z in range(alpha_z.size) if stab <= stab_z[z]]
        if not cands:
            return None
        z0 = cands[int(rng.integers(len(cands)))]
        for g in range(alpha_x.group.order):
            out[alpha_x.table[g, x0]] = alpha_z.table[g, z0]
    return out


def random_factorisation(comp, z_size: int, rng, max_y: int = 6):
    """Split ``comp: X -> Z`` into ``psi o phi`` through a set Y of at most ``max_y`` points."""
    comp = np.asarray(comp)
    blocks = []
    for z in sorted(set(comp.tolist())):
        members = np.flatnonzero(comp == z)
        labels = rng.integers(0, len(members), len(members))
        for lab in sorted(set(labels.tolist())):
            blocks.append((z, members[labels == lab]))
    if len(blocks) > max_y:
        # merge surplus blocks with equal z value
        merged: dict[int, list] = {}
        for z, mem in blocks:
            merged.setdefault(z, []).append(mem)
        blocks = [(z, np.concatenate(v)) for z, v in merged.items()]
    y_size = int(rng.integers(len(blocks), max(len(blocks), max_y) + 1))
    labels = rng.permutation(y_size)
    phi = np.empty(comp.size, dtype=np.int64)
    psi = rng.integers(0, z_size, y_size)
    for k, (z, mem) in enumerate(blocks):
        phi[mem] = labels[k]
        psi[labels[k]] = z
    return phi, psi


# --------------------------------------------------------------------------
# Answering the capacity question
# --------------------------------------------------------------------------


def example_equiv_bad(samples) -> dict:
    """Approximate ``s(x) = |x|`` with a scalar 1-1-1 ReLU net.

    Sign-flip equivariance forces ``W1 = 0`` (the hidden representation
    must be trivial), so the constrained net is identically 0; the free
    net ``W1 = W2 = 1`` is compared against it.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    target = np.abs(x)
    err_equiv = float(np.mean(np.abs(0.0 - target))) if x.size else 0.0
    err_free = float(np.mean(np.abs(_relu(x) - target))) if x.size else 0.0
    ratio = err_free / err_equiv if err_equiv > 0 else None
    return {"error_equivariant": err_equiv, "error_free": err_free, "ratio": ratio, "samples": int(x.size)}


def equivariant_scalar_weights(rho_in: float, rho_hidden: float) -> bool:
    """Whether a nonzero scalar W can satisfy ``rho_hidden W = W rho_in``."""
    return rho_hidden == rho_in


def single_filter_net(kernel, num_classes: int = 2, bias: float = 0.0, pad: int | None = None, input_shape=(1, 33, 33)):
    """Conv(1 filter)-ReLU-GAP-Linear with the given kernel; head ``[+1, -1, 0, ...]``."""
    kernel = np.asarray(kernel, dtype=np.float64)
    k = kernel.shape[-1]
    pad = k // 2 if pad is None else pad
    layers = [M.Conv2d(input_shape[0], 1, k, 1, pad), M.ReLU(), M.GlobalAvgPool(), M.Linear(1, num_classes)]
    head = np.zeros((num_classes, 1))
    head[0, 0] = 1.0
    if num_classes > 1:
        head[1, 0] = -1.0
    params = {
        "0.weight": np.broadcast_to(kernel, (1, input_shape[0], k, k)).copy(),
        "0.bias": np.array([bias]),
        "3.weight": head,
        "3.bias": np.zeros(num_classes),
    }
    return M.Network(layers, input_shape, params)


def cooccurrence_probe(net, data, probes, sample_count: int | None = None) -> dict:
    """Flip-invariance error on the cooccurrence data vs on single-orientation probes."""
    n = len(data.images) if sample_count is None else sample_count
    on_data, skipped_d = M.invariance_error(net, data, min(n, len(data.images)), return_skipped=True)
    on_probes, skipped_p = M.invariance_error(net, probes, min(n, len(probes.images)), return_skipped=True)
    return {
        "invariance_error_on_data": on_data,
        "invariance_error_on_probes": on_probes,
        "skipped_data": skipped_d,
        "skipped_probes": skipped_p,
    }


# --------------------------------------------------------------------------
# Battery
# --------------------------------------------------------------------------

SUITES = ("relu", "affine", "prop1", "prop2", "canon2x2", "actions", "elesedy")


def _entry(name, checks, failures, t0, **extra):
    return {"suite": name, "pass": not failures, "checks": checks, "failures": failures[:10], "seconds": round(time.perf_counter() - t0, 3), **extra}


def _suite_relu(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    for k in range(trials):
        n = int(rng.integers(2, 7))
        perm, d, pd = random_scaled_perm(n, rng)
        res = verify_relu_commutation(pd, pd, rng=rng)
        dec = decompose_scaled_perm(pd + rng.uniform(-1e-12, 1e-12, pd.shape) * (pd == 0))
        checks += 2
        if not res.ok:
            failures.append({"case": k, "kind": "PD pair rejected", "witness": res.witness.tolist()})
        if not dec.ok or not np.array_equal(dec.perm, perm):
            failures.append({"case": k, "kind": "decomposition failed"})
    refuted_structured = 0
    for k in range(trials):
        n = int(rng.integers(2, 7))
        perm, d, pd = random_scaled_perm(n, rng)
        a = pd.copy()
        i = int(rng.integers(n))
        j = int(rng.choice([c for c in range(n) if c != perm[i]]))
        a[i, j] = rng.uniform(0.5, 2.0)  # second positive entry in row i
        res = verify_relu_commutation(a, a, probe_count=0, rng=rng)
        checks += 2
        if res.ok:
            failures.append({"case": k, "kind": "non-PD pair accepted"})
        else:
            refuted_structured += 1
        if decompose_scaled_perm(a).ok:
            failures.append({"case": k, "kind": "non-PD decomposed"})
    # same scales, different permutations
    for k in range(trials // 2):
        n = int(rng.integers(2, 7))
        perm, d, pd = random_scaled_perm(n, rng)
        perm2 = np.roll(perm, 1)
        res = verify_relu_commutation(pd, perm_matrix(perm2) @ np.diag(d), probe_count=0, rng=rng)
        checks += 1
        if res.ok:
            failures.append({"case": k, "kind": "mismatched permutations accepted"})
    return _entry("relu", checks, failures, t0, refuted_by_proof_probes=refuted_structured)


def _suite_affine(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    for k in range(trials):
        n = int(rng.integers(1, 6))
        _, _, pd = random_scaled_perm(n, rng)
        zero = verify_affine_relu(pd, np.zeros(n), pd, np.zeros(n), rng=rng)
        a = rng.standard_normal(n)
        b = _relu(a)  # chosen so that the x = 0 probe passes
        res = verify_affine_relu(pd, a, pd, b, rng=rng)
        b_only = verify_affine_relu(pd, np.zeros(n), pd, rng.standard_normal(n), rng=rng)
        checks += 3
        if not zero.ok:
            failures.append({"case": k, "kind": "a=b=0 rejected"})
        if res.ok or res.failed_index is None or res.failed_index > 3:
            failures.append({"case": k, "kind": "nonzero a not refuted by the proof probes"})
        if b_only.ok:
            failures.append({"case": k, "kind": "nonzero b accepted"})
    return _entry("affine", checks, failures, t0)


def _random_invertible(n, rng):
    while True:
        w = rng.standard_normal((n, n))
        if np.linalg.cond(w) < 1e3:
            return w


def _suite_prop1(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    for k in range(trials):
        n = int(rng.integers(2, 6))
        w1, w2 = _random_invertible(n, rng), _random_invertible(n, rng)
        perm, d, _ = random_scaled_perm(n, rng)
        res = construct_prop1_reps(w1, w2, perm, d, probes=100, rng=rng)
        checks += 1
        if not res.ok:
            failures.append({"case": k, "kind": "equivariance failed", "deviation": res.max_deviation})
        bad_rho0 = res.rho0 + 0.5 * rng.standard_normal((n, n))
        ok, _ = check_two_layer_equivariance(w1, w2, bad_rho0, res.rho2, 100, rng, 1e-6)
        checks += 1
        if ok:
            failures.append({"case": k, "kind": "non-conjugate rho0 accepted"})
    return _entry("prop1", checks, failures, t0)


def _suite_prop2(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    for k in range(trials):
        n = int(rng.integers(2, 6))
        m_plus = int(rng.integers(1, n))  # both blocks non-empty
        w1 = _random_invertible(n, rng)
        signs = np.r_[np.ones(m_plus), -np.ones(n - m_plus)]
        good = block_perm_rep(w1, m_plus, rng.permutation(m_plus), rng.permutation(n - m_plus))
        res = verify_invariant_2layer(w1, signs, good, rng=rng)
        checks += 1
        if not res.ok:
            failures.append({"case": k, "kind": "planted positive rejected", "reason": res.reason})
        # negative: a transposition across the blocks
        perm = np.arange(n)
        i, j = int(rng.integers(m_plus)), int(rng.integers(m_plus, n))
        perm[i], perm[j] = j, i
        bad = np.linalg.solve(w1, perm_matrix(perm) @ w1)
        res = verify_invariant_2layer(w1, signs, bad, rng=rng)
        checks += 1
        if res.structure_ok or res.invariance_ok:
            failures.append({"case": k, "kind": "planted negative accepted"})
    return _entry("prop2", checks, failures, t0)


def invariant_2x2_examples(rng, count: int = 20):
    """Swap-invariant 2-2-1 nets covering every case of the construction."""
    out = [("zero-head", np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros((1, 2)))]
    for _ in range(count):
        p, q, c = rng.standard_normal(), rng.standard_normal(), rng.uniform(0.2, 3.0)
        out.append(("swapped-rows", np.array([[p, q], [q, p]]), np.array([[c, c]])))
        t = rng.standard_normal()
        out.append(("rowwise-constant", np.array([[t, t], [2 * t, 2 * t]]), rng.standard_normal((1, 2))))
        out.append(("single-symmetric-row", np.array([[t, t], [0.0, 0.0]]), np.array([[rng.standard_normal(), 0.0]])))
        u, c2 = rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)
        out.append(("zero-function", np.array([[u, -u / 2], [u, -u / 2]]), np.array([[c2, -c2]])))
        out.append(("antisymmetric", np.array([[u, -u], [-u, u]]), np.array([[c2, c2]])))
        out.append(("dead-unit", np.array([[u, u], [p, q]]), np.array([[c2, 0.0]])))
    return out


def _suite_canon(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    for label, w1, w2 in invariant_2x2_examples(rng, max(1, trials // 5)):
        res = canonicalize_2x2_invariant_net(w1, w2)
        checks += 1
        if not res.ok:
            failures.append({"kind": f"{label} not canonicalised"})
            continue
        if label == "zero-head" and (np.any(res.w1 != 0) or np.any(res.w2 != 0)):
            failures.append({"kind": "zero-head net not rewritten to the zero net"})
        if np.abs(res.rho1 @ res.w1 - res.w1 @ J2).max() > TOL or np.abs(res.w2 @ res.rho1 - res.w2).max() > TOL:
            failures.append({"kind": f"{label} output not layerwise equivariant"})
    for _ in range(max(1, trials // 5)):
        w1 = rng.standard_normal((2, 2))
        w2 = rng.standard_normal((1, 2))
        res = canonicalize_2x2_invariant_net(w1, w2)
        checks += 1
        if res.ok:
            failures.append({"kind": "generic net accepted as invariant", "w1": w1.tolist()})
    return _entry("canon2x2", checks, failures, t0)


def _suite_actions(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    cases = 0
    for group in small_groups():
        group.validate()
        actions = all_actions(group, 6)
        for act in actions:
            if not act.is_valid():
                failures.append({"group": group.name, "kind": "catalogue action invalid"})
            m = act.size
            bijections = list(itertools.permutations(range(m))) if m <= 3 else [rng.permutation(m) for _ in range(3)]
            for phi in bijections:
                ay = transfer_action(phi, act)
                checks += 1
                if not ay.is_valid() or is_equivariant(phi, act, ay) is not None:
                    failures.append({"group": group.name, "kind": "transfer failed"})
                if m <= 6 and group.order <= 6 and not transfer_is_unique(phi, act, ay):
                    failures.append({"group": group.name, "kind": "transfer not unique"})
            for az in actions:
                comp = equivariant_map(act, az, rng)
                if comp is None:
                    continue
                phi, psi = random_factorisation(comp, az.size, rng)
                q = quotient_action(phi, psi, act, az)
                cases += 1
                checks += 1
                if not q.action.is_valid():
                    failures.append({"group": group.name, "kind": "quotient action invalid"})
                if is_equivariant(q.phi_q, act, q.action) is not None:
                    failures.append({"group": group.name, "kind": "phi not equivariant through Y'"})
                if is_equivariant(q.psi_q, q.action, az) is not None:
                    failures.append({"group": group.name, "kind": "psi not equivariant through Y'"})
    return _entry("actions", checks, failures, t0, quotient_cases=cases)


def _suite_elesedy(rng, trials):
    t0, checks, failures = time.perf_counter(), 0, []
    two = example_equiv_bad([-1.0, 1.0])
    checks += 1
    if (two["error_equivariant"], two["error_free"]) != (1.0, 0.5):
        failures.append({"kind": "two-point example", "got": two})
    x = rng.uniform(-1, 1, 100_000)
    x = np.concatenate([x, -x])  # exactly symmetric sample
    mc = example_equiv_bad(x)
    checks += 1
    if abs(mc["ratio"] - 0.5) > 0.01:
        failures.append({"kind": "Monte Carlo ratio", "got": mc["ratio"]})
    checks += 1
    if equivariant_scalar_weights(-1.0, 1.0):
        failures.append({"kind": "sign-flip constraint does not force W1 = 0"})
    return _entry("elesedy", checks, failures, t0, monte_carlo_ratio=mc["ratio"])


_SUITE_FNS = {
    "relu": _suite_relu,
    "affine": _suite_affine,
    "prop1": _suite_prop1,
    "prop2": _suite_prop2,
    "canon2x2": _suite_canon,
    "actions": _suite_actions,
    "elesedy": _suite_elesedy,
}
_DEFAULT_TRIALS = {"relu": 100, "affine": 100, "prop1": 100, "prop2": 50, "canon2x2": 100, "actions": 1, "elesedy": 1}


def run_battery(suite: str = "all", trials: int | None = None, seed: int = 0) -> dict:
    """JSON-ready report; ``pass`` is true iff every selected suite passed."""
    names = SUITES if suite == "all" else (suite,)
    unknown = [n for n in names if n not in _SUITE_FNS]
    if unknown:
        raise ValueError(f"unknown suite {unknown[0]!r}; choose from {', '.join(SUITES)} or all")
    rng = T.make_rng(seed)
    entries = [_SUITE_FNS[n](rng, trials if trials is not None else _DEFAULT_TRIALS[n]) for n in names]
    return {"pass": all(e["pass"] for e in entries), "seed": seed, "rng": T.RNG_ALGORITHM, "suites": entries}
