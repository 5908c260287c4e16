import numpy as np
import pytest

from conftest import tiny_net
from flipequiv import data as D
from flipequiv import model as M
from flipequiv import symmetry as S
from flipequiv import tensor as T


def test_mini_vgg_shapes_stay_odd():
    net = M.init_network(M.mini_vgg(), (1, 33, 33), T.make_rng(0))
    widths = [s[2] for s in net.shapes if len(s) == 3]
    assert all(w % 2 == 1 for w in widths)
    assert net.shapes[-1] == (4,)
    assert M.flip_equivariance_violations(net.layers, (1, 33, 33)) == []
    assert M.flip_equivariance_violations(net.layers, (1, 32, 32))


def test_channel_interfaces_skip_output():
    layers = M.mini_vgg(batchnorm=True)
    ifaces = M.channel_interfaces(layers)
    assert [f.producer for f in ifaces] == [0, 4, 8]
    assert ifaces[0].bn == (1,) and ifaces[0].relu == 2 and ifaces[0].consumer == 4
    assert ifaces[-1].consumer == len(layers) - 1


def test_network_rejects_bad_params(rng):
    net = tiny_net(rng)
    params = dict(net.params)
    params["0.weight"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(T.ShapeError):
        M.Network(net.layers, net.input_shape, params)
    params = dict(net.params)
    del params["0.bias"]
    with pytest.raises(ValueError, match="missing"):
        M.Network(net.layers, net.input_shape, params)


def test_forward_rejects_wrong_batch(rng):
    net = tiny_net(rng)
    with pytest.raises(T.ShapeError):
        M.forward(net, np.zeros((2, 1, 8, 9)))
    with pytest.raises(ValueError):
        M.forward(net, np.zeros((2, 1, 9, 9)), mode="bogus")


def test_capture_returns_layer_outputs(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((3, 1, 9, 9))
    _, cap = M.forward(net, x, capture=[0, 1])
    np.testing.assert_allclose(cap[1], np.maximum(cap[0], 0))


@pytest.mark.parametrize("batchnorm,flatten,train", [(False, False, True), (True, False, True), (True, False, False), (False, True, True)])
def test_network_gradients_finite_differences(rng, batchnorm, flatten, train):
    net = tiny_net(rng, batchnorm=batchnorm, flatten=flatten, size=7)
    x = rng.standard_normal((3, 1, 7, 7))
    y = np.array([0, 1, 2])
    _, _, _, grads = M.objective(net, x, y, train=train)
    for name in grads:
        base = net.params[name].copy()

        def f(v, name=name):
            net.params[name] = v
            return M.objective(net, x, y, train=train)[0]

        num = T.finite_difference_grad(f, base)
        net.params[name] = base
        # conv biases feeding a train-mode BN have an exactly zero gradient
        if np.linalg.norm(num) < 1e-8:
            assert np.abs(grads[name]).max() < 1e-8, name
        else:
            assert T.relative_error(grads[name], num) < 1e-6, name


def test_invariance_loss_gradient(rng):
    net = tiny_net(rng, size=7)
    x = rng.standard_normal((3, 1, 7, 7))
    y = np.array([0, 1, 2])
    _, _, _, grads = M.objective(net, x, y, inv_weight=0.7, train=False)
    base = net.params["3.weight"].copy()

    def f(v):
        net.params["3.weight"] = v
        return M.objective(net, x, y, inv_weight=0.7, train=False)[0]

    assert T.relative_error(grads["3.weight"], T.finite_difference_grad(f, base)) < 1e-6


def test_cross_entropy_known_value():
    loss, grad = M.cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    with pytest.raises(ValueError):
        M.cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_invariance_error_formula_and_symmetry(rng):
    net = tiny_net(rng)
    x = rng.standard_normal((10, 1, 9, 9))
    la, lb = M.logits_of(net, x), M.logits_of(net, T.hflip(x))
    oracle = np.mean(np.linalg.norm(la - lb, axis=1) / (0.5 * np.linalg.norm(la, axis=1) + 0.5 * np.linalg.norm(lb, axis=1)))
    assert M.invariance_error(net, x, 10) == pytest.approx(oracle, rel=1e-12)
    assert M.invariance_error(net, T.hflip(x), 10) == pytest.approx(oracle, rel=1e-12)
    with pytest.raises(ValueError):
        M.invariance_error(net, x, 11)


def test_invariance_error_skips_zero_logits(rng):
    net = tiny_net(rng)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k]) if not k.endswith("running_var") else net.params[k]
    value, skipped = M.invariance_error(net, rng.standard_normal((4, 1, 9, 9)), 4, return_skipped=True)
    assert np.isnan(value) and skipped == 4


def test_bn_reset_matches_pooled_statistics(rng):
    net = tiny_net(rng, batchnorm=True)
    x = rng.standard_normal((40, 1, 9, 9))
    out = M.bn_reset_stats(net, x, batches=4, batch_size=10)
    # first BN sees the conv output directly, which does not depend on BN statistics
    conv = M.forward(net, x, capture=[0])[1][0]
    np.testing.assert_allclose(out.params["1.running_mean"], conv.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(out.params["1.running_var"], conv.var(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_array_equal(out.params["1.gamma"], net.params["1.gamma"])


def test_training_decreases_loss_on_separable_set():
    ds = D.gen_flip_invariant(D.DataSpec(classes=2, per_class=40, height=9, width=9, noise_sigma=0.0), 3)
    layers = [M.Conv2d(1, 4, 3, 1, 1), M.ReLU(), M.GlobalAvgPool(), M.Linear(4, 2)]
    net = M.init_network(layers, (1, 9, 9), T.make_rng(0))
    cfg = M.TrainConfig(epochs=8, batch_size=80, lr=0.05, momentum=0.0, weight_decay=0.0, hflip_aug_prob=0.0)
    _, metrics = M.train(net, ds, cfg)
    hist = metrics.loss_history
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_training_is_deterministic():
    ds = D.gen_flip_invariant(D.DataSpec(classes=2, per_class=20, height=9, width=9), 3)
    layers = [M.Conv2d(1, 4, 3, 1, 1), M.ReLU(), M.GlobalAvgPool(), M.Linear(4, 2)]
    cfg = M.TrainConfig(epochs=2, batch_size=8, seed=5, inv_loss_weight=0.5)
    a, _ = M.train(M.init_network(layers, (1, 9, 9), T.make_rng(0)), ds, cfg)
    b, _ = M.train(M.init_network(layers, (1, 9, 9), T.make_rng(0)), ds, cfg)
    assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)


def test_large_inv_weight_lowers_invariance_error():
    ds = D.gen_flip_invariant(D.DataSpec(classes=2, per_class=60, height=9, width=9), 4)
    layers = [M.Conv2d(1, 6, 3, 1, 1), M.ReLU(), M.GlobalAvgPool(), M.Linear(6, 2)]
    errs = []
    for lam in (0.0, 10.0):
        net = M.init_network(layers, (1, 9, 9), T.make_rng(0))
        cfg = M.TrainConfig(epochs=6, batch_size=16, lr=0.02, seed=1, hflip_aug_prob=0.0, inv_loss_weight=lam)
        errs.append(M.train(net, ds, cfg)[1].invariance_error)
    assert errs[1] < errs[0]


def test_train_config_validation():
    with pytest.raises(ValueError):
        M.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        M.TrainConfig(hflip_aug_prob=1.5)
    with pytest.raises(ValueError):
        M.TrainConfig(inv_loss_weight=float("nan"))
    assert M.TrainConfig(epochs=10, inv_loss_start_fraction=0.2).inv_loss_start_epoch == 2


def test_training_divergence_is_reported():
    ds = D.gen_flip_invariant(D.DataSpec(classes=2, per_class=8, height=9, width=9), 3)
    layers = [M.Conv2d(1, 4, 3, 1, 1), M.ReLU(), M.GlobalAvgPool(), M.Linear(4, 2)]
    net = M.init_network(layers, (1, 9, 9), T.make_rng(0))
    with np.errstate(all="ignore"), pytest.raises(M.TrainingDiverged):
        M.train(net, ds, M.TrainConfig(epochs=20, batch_size=4, lr=1e150))


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    net = S.make_gcnn(M.mini_vgg(width=4, batchnorm=True), (1, 9, 9), rng)
    net.meta["note"] = "x"
    path = tmp_path / "n.eqnt"
    M.save_checkpoint(net, path)
    back = M.load_checkpoint(path)
    assert M.checkpoint_bytes(back) == path.read_bytes()
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k].astype(np.float32))
    assert back.constraint.to_dict() == net.constraint.to_dict()
    assert back.meta == {"note": "x"}


def test_checkpoint_rejects_corruption(rng):
    raw = M.checkpoint_bytes(tiny_net(rng))
    with pytest.raises(M.CheckpointError, match="magic"):
        M.checkpoint_from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(M.CheckpointError, match="truncated"):
        M.checkpoint_from_bytes(raw[:-8])
