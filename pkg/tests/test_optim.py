"""Unit tests for loss, accuracy, the optimizers, the epoch loop and gradient checking."""

import numpy as np
import pytest

from src.errors import DivergenceError, InvalidArgumentError, ShapeError
from src.io_schemas import NetworkConfig, OptimizerConfig
from src.nn.network import backward, build_network, one_hot
from src.optim import (
    TrainReport,
    Velocity,
    accuracy,
    batch_gd_step,
    cross_entropy_loss,
    evaluate,
    grad_check,
    sgd_epoch,
    train,
)
from src.tensor import make_rng

GRAD_TOLERANCE = 1e-4


def _toy_arrays(n, height, width, seed):
    rng = make_rng(seed)
    x = rng.standard_normal((n, 1, height, width))
    y = (x.reshape(n, -1).mean(axis=1) > 0).astype(np.int64)
    return x, y


def _xor():
    x = np.array([[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    return x, y


# --- loss and accuracy ---------------------------------------------------


def test_cross_entropy_examples():
    """Test uniform, perfect and clamped predictions."""
    assert cross_entropy_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == pytest.approx(0.6931471805599453, abs=1e-15)
    assert cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) == 0.0
    clamped = cross_entropy_loss(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert clamped == pytest.approx(-np.log(1e-12))


def test_cross_entropy_is_batch_mean():
    """Test the loss is the mean of per-example losses."""
    p = np.array([[0.9, 0.1], [0.3, 0.7]])
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert cross_entropy_loss(p, y) == pytest.approx((-np.log(0.9) - np.log(0.3)) / 2)


def test_cross_entropy_errors():
    """Test shape mismatch and empty batches are rejected."""
    with pytest.raises(ShapeError):
        cross_entropy_loss(np.ones((2, 2)) / 2, np.ones((3, 2)))
    with pytest.raises(InvalidArgumentError):
        cross_entropy_loss(np.zeros((0, 2)), np.zeros((0, 2)))


def test_accuracy_examples():
    """Test argmax agreement, ties to the lower class and one-hot labels."""
    p = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert accuracy(p, np.array([0, 1])) == 1.0
    assert accuracy(p, np.array([1, 1])) == 0.5
    assert accuracy(np.array([[0.5, 0.5]]), np.array([0])) == 1.0
    assert accuracy(p, np.array([[1.0, 0.0], [0.0, 1.0]])) == 1.0
    with pytest.raises(InvalidArgumentError):
        accuracy(np.zeros((0, 2)), np.array([]))


# --- update rules --------------------------------------------------------


def test_batch_gd_step_example():
    """Test one plain gradient step."""
    params = {"w": np.array([1.0, 2.0])}
    batch_gd_step(params, {"w": np.array([0.5, -1.0])}, 0.1)
    np.testing.assert_allclose(params["w"], [0.95, 2.1])


def test_batch_gd_step_zero_gradient_is_noop():
    """Test a zero gradient leaves parameters unchanged."""
    params = {"w": np.array([1.0, 2.0])}
    batch_gd_step(params, {"w": np.zeros(2)}, 0.1)
    assert params["w"].tolist() == [1.0, 2.0]


def test_momentum_without_mu_equals_gd():
    """Test mu=0 reduces the momentum rule to plain gradient descent."""
    g = {"w": np.array([0.3, -0.7])}
    a = {"w": np.array([1.0, 1.0])}
    b = {"w": np.array([1.0, 1.0])}
    batch_gd_step(a, g, 0.2)
    Velocity.zeros_like(b).step(b, g, 0.2, 0.0)
    np.testing.assert_allclose(a["w"], b["w"])


def test_momentum_accumulates_velocity():
    """Test the second step carries mu times the first step."""
    params = {"w": np.array([0.0])}
    velocity = Velocity.zeros_like(params)
    velocity.step(params, {"w": np.array([1.0])}, 0.1, 0.9)
    velocity.step(params, {"w": np.array([1.0])}, 0.1, 0.9)
    # v1 = -0.1, v2 = 0.9 * -0.1 - 0.1
    np.testing.assert_allclose(params["w"], [-0.1 + (-0.19)])


def test_non_finite_gradient_names_layer():
    """Test a NaN gradient raises divergence naming the layer."""
    params = {"dense2.weight": np.zeros(2)}
    with pytest.raises(DivergenceError) as err:
        batch_gd_step(params, {"dense2.weight": np.array([np.nan, 0.0])}, 0.1)
    assert err.value.layer == "dense2"


# --- epoch loop ----------------------------------------------------------


def test_sgd_epoch_is_deterministic():
    """Test identical seeds give bitwise identical parameters after an epoch."""
    config = NetworkConfig(num_convs=1, input_height=8, input_width=8, conv_maps=2, conv_kernel=3, hidden_units=4)
    data = _toy_arrays(23, 8, 8, seed=1)
    opt = OptimizerConfig(batch_size=5)
    finals = []
    for _ in range(2):
        net = build_network(config, make_rng(2))
        _, loss = sgd_epoch(net, data, opt, Velocity.zeros_like(net.parameters()), make_rng(3), epoch=1)
        assert np.isfinite(loss)
        finals.append(b"".join(p.tobytes() for p in net.parameters().values()))
    assert finals[0] == finals[1]


def test_sgd_epoch_clamps_batch_size():
    """Test a batch larger than the set is one full batch."""
    net = build_network(NetworkConfig(num_convs=0, input_height=2, input_width=2, hidden_units=3), make_rng(0))
    before = net.denses[0].weight.copy()
    data = _toy_arrays(4, 2, 2, seed=0)
    sgd_epoch(net, data, OptimizerConfig(batch_size=500), Velocity.zeros_like(net.parameters()), make_rng(1))
    assert not np.array_equal(before, net.denses[0].weight)


def _dense_net(seed, dropout_p=0.0):
    config = NetworkConfig(num_convs=0, input_height=3, input_width=3, hidden_units=5, dropout_p=dropout_p)
    return build_network(config, make_rng(seed))


def _record_batches(net, monkeypatch):
    """Wraps ``net.forward`` and returns the list it appends (batch, trace) pairs to."""
    seen = []
    original = net.forward

    def forward(batch, *args, **kwargs):
        trace = original(batch, *args, **kwargs)
        seen.append((batch.copy(), trace))
        return trace

    monkeypatch.setattr(net, "forward", forward)
    return seen


def test_full_batch_epoch_without_momentum_is_one_gd_step():
    """Test mu=0 with batch_size=m matches a single batch gradient step."""
    x, y = _toy_arrays(12, 3, 3, seed=5)
    epoch_net, step_net = _dense_net(0), _dense_net(0)
    opt = OptimizerConfig(alpha=0.1, mu=0.0, batch_size=12)
    sgd_epoch(epoch_net, (x, y), opt, Velocity.zeros_like(epoch_net.parameters()), make_rng(1))

    trace = step_net.forward(x, "train", make_rng(1))
    grads = backward(step_net, trace, one_hot(y, 2))
    batch_gd_step(step_net.parameters(), grads, 0.1)
    for name, p in epoch_net.parameters().items():
        np.testing.assert_allclose(p, step_net.parameters()[name], rtol=0, atol=1e-12)


def test_unit_batches_visit_each_example_once(monkeypatch):
    """Test batch_size=1 sees every example exactly once per epoch."""
    m = 9
    x = np.arange(m, dtype=np.float64)[:, None, None, None] * np.ones((1, 1, 3, 3))
    y = np.arange(m) % 2
    net = _dense_net(0)
    seen = _record_batches(net, monkeypatch)
    sgd_epoch(net, (x, y), OptimizerConfig(batch_size=1), Velocity.zeros_like(net.parameters()), make_rng(2))
    assert [batch.shape[0] for batch, _ in seen] == [1] * m
    assert sorted(int(batch[0, 0, 0, 0]) for batch, _ in seen) == list(range(m))


def test_epoch_loss_is_batch_weighted_mean(monkeypatch):
    """Test the reported loss weights each batch by its size, partial last batch included."""
    m = 23
    x = np.arange(m, dtype=np.float64)[:, None, None, None] * np.full((1, 1, 3, 3), 0.1)
    y = (np.arange(m) % 3 == 0).astype(np.int64)
    net = _dense_net(1, dropout_p=0.5)
    seen = _record_batches(net, monkeypatch)
    _, loss = sgd_epoch(net, (x, y), OptimizerConfig(batch_size=5), Velocity.zeros_like(net.parameters()),
                        make_rng(3))
    assert [batch.shape[0] for batch, _ in seen] == [5, 5, 5, 5, 3]
    total = 0.0
    for batch, trace in seen:
        idx = np.rint(batch[:, 0, 0, 0] / 0.1).astype(np.int64)
        total += cross_entropy_loss(trace.probs, one_hot(y[idx], 2)) * len(idx)
    assert loss == pytest.approx(total / m, rel=1e-12)


def test_train_leaves_validation_set_untouched():
    """Test training never writes into the validation arrays."""
    train_set = _toy_arrays(20, 3, 3, seed=6)
    val_x, val_y = _toy_arrays(8, 3, 3, seed=7)
    before = (val_x.tobytes(), val_y.tobytes())
    train(_dense_net(2, dropout_p=0.5), train_set, (val_x, val_y), train_set,
          OptimizerConfig(batch_size=4, epochs=3), make_rng(4))
    assert (val_x.tobytes(), val_y.tobytes()) == before


def test_evaluate_empty_split():
    """Test evaluation on an empty split fails."""
    net = build_network(NetworkConfig(num_convs=0, input_height=2, input_width=2, hidden_units=3), make_rng(0))
    with pytest.raises(InvalidArgumentError):
        evaluate(net, (np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=np.int64)))


def test_xor_is_learned():
    """Test a one-hidden-layer net fits XOR."""
    x, y = _xor()
    config = NetworkConfig(num_convs=0, input_height=1, input_width=2, hidden_units=8, dropout_p=0.0)
    opt = OptimizerConfig(alpha=0.05, mu=0.9, batch_size=4, epochs=2000)
    accuracies = []
    for seed in range(3):
        report = train(build_network(config, make_rng(seed)), (x, y), (x, y), (x, y), opt, make_rng(seed + 100))
        accuracies.append(report.test_accuracy)
    assert max(accuracies) == 1.0


def test_train_zero_epochs():
    """Test zero epochs still evaluates the test split."""
    data = _toy_arrays(10, 3, 3, seed=4)
    net = build_network(NetworkConfig(num_convs=0, input_height=3, input_width=3, hidden_units=4), make_rng(0))
    report = train(net, data, data, data, OptimizerConfig(epochs=0), make_rng(1))
    assert report.epochs_run == 0
    assert report.test_loss is not None
    lines = report.to_csv(include_timing=False).splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,epoch_seconds"
    assert lines[1].startswith("test,")
    assert len(lines) == 2


def test_train_reports_and_events():
    """Test per-epoch bookkeeping, events and the timing-free CSV."""
    data = _toy_arrays(30, 4, 4, seed=5)
    config = NetworkConfig(num_convs=0, input_height=4, input_width=4, hidden_units=5)
    events = []
    report = train(build_network(config, make_rng(0)), data, data, data, OptimizerConfig(epochs=3, batch_size=8),
                   make_rng(1), seed=7, on_event=lambda kind, payload: events.append(kind))
    assert report.epochs_run == 3
    assert len(report.val_losses) == 3 and len(report.epoch_seconds) == 3
    assert report.seed == 7
    assert events == ["epoch_complete"] * 3 + ["train_complete"]
    csv = report.to_csv(include_timing=False)
    rows = csv.splitlines()
    assert [r.split(",")[0] for r in rows] == ["epoch", "1", "2", "3", "test"]
    assert all(r.endswith(",-") for r in rows[1:])


def test_train_is_reproducible():
    """Test two runs from the same seeds give identical reports without timing."""
    data = _toy_arrays(20, 4, 4, seed=6)
    config = NetworkConfig(num_convs=1, input_height=4, input_width=4, conv_maps=2, conv_kernel=2, hidden_units=3)
    opt = OptimizerConfig(epochs=2, batch_size=6)
    csvs = [
        train(build_network(config, make_rng(9)), data, data, data, opt, make_rng(10)).to_csv(include_timing=False)
        for _ in range(2)
    ]
    assert csvs[0] == csvs[1]


def test_train_divergence_keeps_partial_report():
    """Test an exploding learning rate raises with the completed epochs attached."""
    data = _toy_arrays(40, 3, 3, seed=7)
    net = build_network(NetworkConfig(num_convs=0, input_height=3, input_width=3, hidden_units=6, dropout_p=0.0), make_rng(0))
    events = []
    with pytest.raises(DivergenceError) as err:
        train(net, data, data, data, OptimizerConfig(alpha=1e308, epochs=5, batch_size=4), make_rng(1),
              on_event=lambda kind, payload: events.append(kind))
    partial = err.value.partial_report
    assert isinstance(partial, TrainReport)
    assert partial.epochs_run < 5
    assert partial.test_loss is None
    assert err.value.epoch is not None
    assert events[-1] == "divergence"


def test_train_rejects_empty_split():
    """Test an empty validation split is an invalid argument."""
    data = _toy_arrays(5, 2, 2, seed=0)
    empty = (np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=np.int64))
    net = build_network(NetworkConfig(num_convs=0, input_height=2, input_width=2, hidden_units=2), make_rng(0))
    with pytest.raises(InvalidArgumentError):
        train(net, data, empty, data, OptimizerConfig(epochs=1), make_rng(0))


# --- gradient checking ---------------------------------------------------


@pytest.mark.parametrize(
    "config",
    [
        NetworkConfig(num_convs=0, num_hidden_layers=1, hidden_units=6, dropout_p=0.0, input_height=5, input_width=4),
        NetworkConfig(num_convs=0, num_hidden_layers=3, hidden_units=5, dropout_p=0.0, input_height=4, input_width=4),
        NetworkConfig(num_convs=1, hidden_units=6, dropout_p=0.0, input_height=10, input_width=9, conv_maps=2, conv_kernel=3),
        NetworkConfig(num_convs=2, num_hidden_layers=2, hidden_units=4, dropout_p=0.0, input_height=12, input_width=12,
                      conv_maps=2, conv_kernel=3),
        NetworkConfig(num_convs=3, hidden_units=4, dropout_p=0.0, input_height=20, input_width=20, conv_maps=2,
                      conv_kernel=2),
    ],
    ids=["dense", "dense-deep", "conv1", "conv2", "conv3"],
)
def test_grad_check_layer_combinations(config):
    """Test analytic gradients agree with central differences."""
    net = build_network(config, make_rng(21))
    batch = _toy_arrays(3, config.input_height, config.input_width, seed=22)
    assert grad_check(net, batch) <= GRAD_TOLERANCE


@pytest.mark.parametrize("dropout_p", [0.1, 0.5, 0.7])
def test_grad_check_with_frozen_dropout(dropout_p):
    """Test dropout layers pass with the mask frozen from the trace."""
    config = NetworkConfig(num_convs=1, num_hidden_layers=2, hidden_units=8, dropout_p=dropout_p,
                           input_height=8, input_width=8, conv_maps=2, conv_kernel=3)
    net = build_network(config, make_rng(31))
    batch = _toy_arrays(2, 8, 8, seed=32)
    assert grad_check(net, batch, rng=make_rng(33)) <= GRAD_TOLERANCE


def test_grad_check_restores_parameters():
    """Test perturbations are undone."""
    config = NetworkConfig(num_convs=0, input_height=3, input_width=3, hidden_units=3, dropout_p=0.0)
    net = build_network(config, make_rng(0))
    before = {k: v.copy() for k, v in net.parameters().items()}
    grad_check(net, _toy_arrays(2, 3, 3, seed=1))
    for name, value in net.parameters().items():
        np.testing.assert_array_equal(value, before[name])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
