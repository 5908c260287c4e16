"""Weight-space operations: channel permutation, interpolation, REPAIR and barriers."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from flipequiv import matching as MT
from flipequiv import model as M
from flipequiv import symmetry as S
from flipequiv import tensor as T

REPAIR_BATCHES = 16
REPAIR_BATCH_SIZE = 64
REPAIR_MAX_SCALE = 100.0

RESULT_COLUMNS = (
    "run_id",
    "model_kind",
    "seed",
    "accuracy",
    "invariance_error",
    "gcnn_barrier",
    "gcnn_barrier_norepair",
    "absolute_barrier",
)


def _perm_list(net, perms) -> list[np.ndarray]:
    perms = list(perms.perms if isinstance(perms, S.ChannelPermutation) else perms)
    ifaces = M.channel_interfaces(net.layers)
    if len(perms) != len(ifaces):
        raise T.ShapeError(f"network has {len(ifaces)} channel interfaces, got {len(perms)} permutations")
    return [T.check_permutation(p, f.channels) for p, f in zip(perms, ifaces)]


def apply_perms(net: M.Network, perms) -> M.Network:
    """Functionally identical net whose interface ``j`` channels are reordered by ``perms[j]``.

    New channel ``i`` is old channel ``perms[j][i]``: producer rows, biases
    and BN vectors are gathered with the permutation, consumer input
    columns likewise (in blocks of H*W after a Flatten).
    """
    out = net.copy()
    p = out.params
    for f, perm in zip(M.channel_interfaces(net.layers), _perm_list(net, perms)):
        w = f"{f.producer}.weight"
        p[w] = p[w][perm]
        if f"{f.producer}.bias" in p:
            p[f"{f.producer}.bias"] = p[f"{f.producer}.bias"][perm]
        for i in f.bn:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                p[f"{i}.{name}"] = p[f"{i}.{name}"][perm]
        cw = f"{f.consumer}.weight"
        if f.flatten:
            block = net.shapes[f.consumer - 1][0] // f.channels
            idx = (perm[:, None] * block + np.arange(block)[None, :]).reshape(-1)
            p[cw] = p[cw][:, idx]
        else:
            p[cw] = p[cw][:, perm]
    return out


def interpolate(net_a: M.Network, net_b: M.Network, t: float) -> M.Network:
    """``(1-t) theta_A + t theta_B`` over every tensor.

    BN running statistics are interpolated too, but only as a placeholder:
    the barrier pipeline recomputes them from data afterwards.
    """
    if not net_a.same_architecture(net_b):
        raise ValueError("interpolate needs identical architectures")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    out = net_a.copy()
    for k in out.params:
        out.params[k] = (1.0 - t) * net_a.params[k] + t * net_b.params[k]
    out.constraint = None
    return out


# --------------------------------------------------------------------------
# REPAIR
# --------------------------------------------------------------------------


def _preact_point(f: M.Interface) -> int:
    """Layer whose output is the pre-activation of interface ``f``."""
    return f.bn[-1] if f.bn else f.producer


def _channel_stats(net, images, layer, batches, batch_size):
    acc = None
    for b in range(batches):
        xb = images[b * batch_size : (b + 1) * batch_size]
        if len(xb) == 0:
            break
        _, cap = M.forward(net, xb, capture=[layer])
        chunk = MT.LayerStats.from_observations(MT._observations(cap[layer]))
        acc = chunk if acc is None else acc.merge(chunk)
    if acc is None:
        raise ValueError("repair needs a non-empty dataset")
    return acc.mean, acc.std


def repair(
    merged: M.Network,
    net_a: M.Network,
    net_b: M.Network,
    dataset,
    batches: int = REPAIR_BATCHES,
    batch_size: int = REPAIR_BATCH_SIZE,
) -> M.Network:
    """Reset every hidden channel's pre-activation mean/std to the endpoint average.

    Interfaces are corrected front to back, each measured after the earlier
    ones were fixed.  The per-channel affine ``(y - mu) * s + target`` is
    folded into the producing conv (or the BN layer that follows it).
    ``net_b`` must already be aligned with ``net_a``.
    """
    if not (merged.same_architecture(net_a) and merged.same_architecture(net_b)):
        raise ValueError("repair needs three nets of identical architecture")
    images, _ = M._images_labels(dataset)
    images = np.asarray(images)
    out = merged.copy()
    for f in M.channel_interfaces(merged.layers):
        point = _preact_point(f)
        mu_a, sd_a = _channel_stats(net_a, images, point, batches, batch_size)
        mu_b, sd_b = _channel_stats(net_b, images, point, batches, batch_size)
        mu_m, sd_m = _channel_stats(out, images, point, batches, batch_size)
        target_mu = 0.5 * (mu_a + mu_b)
        target_sd = 0.5 * (sd_a + sd_b)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(sd_m > 0, target_sd / sd_m, REPAIR_MAX_SCALE)
        scale = np.minimum(scale, REPAIR_MAX_SCALE)
        shift = target_mu - mu_m * scale
        p = out.params
        if f.bn:
            i = f.bn[-1]
            p[f"{i}.gamma"] = p[f"{i}.gamma"] * scale
            p[f"{i}.beta"] = p[f"{i}.beta"] * scale + shift
        else:
            w = f"{f.producer}.weight"
            shape = (-1,) + (1,) * (p[w].ndim - 1)
            p[w] = p[w] * scale.reshape(shape)
            bname = f"{f.producer}.bias"
            if bname not in p:
                raise ValueError(f"layer {f.producer} has no bias to absorb the REPAIR shift")
            p[bname] = p[bname] * scale + shift
    return out


# --------------------------------------------------------------------------
# Barriers
# --------------------------------------------------------------------------


@dataclass
class BarrierReport:
    zeta_a: float
    zeta_b: float
    zeta_mid: float
    relative: float | None
    absolute: float
    repair_applied: bool = False
    bn_reset_applied: bool = False
    metric: str = "accuracy"
    endpoint_b: str = "permuted"  # zeta_b is measured on the aligned copy of net B

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def barrier(zeta_a: float, zeta_b: float, zeta_mid: float, metric: str = "accuracy", **flags) -> BarrierReport:
    """Relative and absolute drop of ``metric`` at the midpoint."""
    vals = [float(zeta_a), float(zeta_b), float(zeta_mid)]
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("barrier inputs must be finite")
    avg = 0.5 * (vals[0] + vals[1])
    absolute = avg - vals[2]
    relative = absolute / avg if avg != 0 else None
    return BarrierReport(*vals, relative, absolute, metric=metric, **flags)


def _midpoint_pipeline(net_a, aligned_b, dataset, eval_set, repair_on, bn_reset):
    mid = interpolate(net_a, aligned_b, 0.5)
    do_reset = mid.has_batchnorm() if bn_reset is None else bool(bn_reset and mid.has_batchnorm())
    if do_reset:
        mid = M.bn_reset_stats(mid, dataset, REPAIR_BATCHES, REPAIR_BATCH_SIZE)
    if repair_on:
        mid = repair(mid, net_a, aligned_b, dataset)
    za = M.accuracy(net_a, eval_set)
    zb = M.accuracy(aligned_b, eval_set)
    zm = M.accuracy(mid, eval_set)
    return barrier(za, zb, zm, repair_applied=bool(repair_on), bn_reset_applied=do_reset), mid


def gcnn_barrier(
    net: M.Network,
    dataset,
    repair: bool = False,
    bn_reset: bool | None = None,
    eval_set=None,
    perms=None,
    max_samples: int = 1024,
):
    """Barrier between ``net`` and its aligned flipped twin.

    ``dataset`` feeds matching, BN reset and REPAIR; accuracies are taken
    on ``eval_set`` (defaults to ``dataset``).  Known ``perms`` (e.g. a
    GCNN pairing) skip matching.  ``bn_reset=None`` resets iff the net has
    BN layers.  Returns ``(BarrierReport, MatchResult | None)``.
    """
    eval_set = dataset if eval_set is None else eval_set
    twin = S.flip_network(net)
    match = None
    if perms is None:
        match = MT.match_networks(net, twin, dataset, max_samples=max_samples)
        perms = match.perms
    aligned = apply_perms(twin, perms)
    report, _ = _midpoint_pipeline(net, aligned, dataset, eval_set, repair, bn_reset)
    return report, match


def two_net_barrier(
    net_a: M.Network,
    net_b: M.Network,
    dataset,
    repair: bool = False,
    bn_reset: bool | None = None,
    eval_set=None,
    match: bool = True,
    max_samples: int = 1024,
):
    """Same pipeline as :func:`gcnn_barrier` with ``net_b`` in place of the twin."""
    eval_set = dataset if eval_set is None else eval_set
    result = None
    aligned = net_b
    if match:
        result = MT.match_networks(net_a, net_b, dataset, max_samples=max_samples)
        aligned = apply_perms(net_b, result.perms)
    report, _ = _midpoint_pipeline(net_a, aligned, dataset, eval_set, repair, bn_reset)
    return report, result


def append_results_csv(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
