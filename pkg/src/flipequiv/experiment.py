"""Model-kind recipes, seed derivation and the desk-scale protocol shared by the CLI and tests."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from flipequiv import data as D
from flipequiv import model as M
from flipequiv import symmetry as S
from flipequiv import tensor as T

MODEL_KINDS = ("cnn", "cnn-noaug", "cnn-inv", "cnn-late-inv", "gcnn", "pgcnn")
DEFAULT_INV_WEIGHT = 0.3
LATE_INV_FRACTION = 0.2


def sub_seed(seed: int, label: str) -> int:
    """Stable 64-bit seed for a named consumer of randomness."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def train_config(kind: str, seed: int, **overrides) -> M.TrainConfig:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    cfg = M.TrainConfig(seed=sub_seed(seed, "train"))
    if kind == "cnn-noaug":
        cfg = replace(cfg, hflip_aug_prob=0.0)
    elif kind == "cnn-inv":
        cfg = replace(cfg, inv_loss_weight=DEFAULT_INV_WEIGHT)
    elif kind == "cnn-late-inv":
        cfg = replace(cfg, inv_loss_weight=DEFAULT_INV_WEIGHT, inv_loss_start_fraction=LATE_INV_FRACTION)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def build_model(kind: str, seed: int, input_shape=(1, 33, 33), num_classes: int = 4, width: int = 16, batchnorm=False):
    layers = M.mini_vgg(input_shape[0], width, num_classes, batchnorm=batchnorm)
    rng = T.make_rng(sub_seed(seed, "init"))
    if kind == "gcnn":
        net = S.make_gcnn(layers, input_shape, rng, mode="full")
    elif kind == "pgcnn":
        net = S.make_gcnn(layers, input_shape, rng, mode="partial", partial_layers=2)
    elif kind in MODEL_KINDS:
        net = M.init_network(layers, input_shape, rng)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    net.meta["model_kind"] = kind
    return net


@dataclass(frozen=True)
class Protocol:
    """Reduced desk-scale protocol used for the acceptance orderings."""

    per_class: int = 250
    test_per_class: int = 200
    noise_sigma: float = 0.15
    epochs: int = 10
    lr: float = 0.02
    batch_size: int = 16
    data_seed: int = 1

    def datasets(self):
        train = D.gen_flip_invariant(D.DataSpec(per_class=self.per_class, noise_sigma=self.noise_sigma), sub_seed(self.data_seed, "train-data"))
        test = D.gen_flip_invariant(D.DataSpec(per_class=self.test_per_class, noise_sigma=self.noise_sigma), sub_seed(self.data_seed, "test-data"))
        return train, test

    def train(self, kind: str, seed: int, train_set, **overrides):
        net = build_model(kind, seed, train_set.images.shape[1:], train_set.num_classes)
        opts = {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size}
        opts.update({k: v for k, v in overrides.items() if v is not None})
        cfg = train_config(kind, seed, **opts)
        return M.train(net, train_set, cfg)
