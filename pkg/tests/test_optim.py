import numpy as np
import pytest

from mtlkit.errors import MissingGradient
from mtlkit.network import Param
from mtlkit.optim import SGD, PlateauConfig
from mtlkit.tensor import Tensor


def param(value, mult=1.0, name="w"):
    return Param(name, Tensor(np.array(value, dtype=np.float64), requires_grad=True), mult)


def test_two_step_hand_trace():
    p = param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    p.tensor.grad = np.array([0.5])
    opt.step()
    assert np.allclose(opt.buffers[0], [-0.05])
    assert np.allclose(p.tensor.data, [0.95])
    p.tensor.grad = np.array([0.5])
    opt.step()
    assert np.allclose(opt.buffers[0], [-0.095])
    assert np.allclose(p.tensor.data, [0.855])


def test_zero_grad_fixed_point():
    p = param([2.0, -1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
    p.tensor.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.tensor.data, [2.0, -1.0])


def test_missing_gradient():
    opt = SGD([param([1.0])], lr=0.1)
    with pytest.raises(MissingGradient):
        opt.step()


def test_grads_zeroed_after_step():
    p = param([1.0])
    opt = SGD([p], lr=0.1)
    p.tensor.grad = np.array([0.5])
    opt.step()
    assert p.tensor.grad is None


def test_multiplier_scales_first_step():
    a, b = param([1.0], mult=1.0), param([1.0], mult=10.0)
    opt = SGD([a, b], lr=0.01, momentum=0.9, weight_decay=0.0)
    a.tensor.grad = np.array([0.3])
    b.tensor.grad = np.array([0.3])
    opt.step()
    moved_a = 1.0 - a.tensor.data[0]
    moved_b = 1.0 - b.tensor.data[0]
    assert abs(moved_b - 10.0 * moved_a) < 1e-15


def test_weight_decay_only_dynamics():
    p = param([2.0])
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5)
    p.tensor.grad = np.zeros(1)
    opt.step()
    assert np.allclose(p.tensor.data, [2.0 * (1 - 0.1 * 0.5)])


def test_quadratic_bowl_convergence():
    p = param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    for _ in range(200):
        p.tensor.grad = p.tensor.data.copy()  # gradient of 0.5 * w^2
        opt.step()
    assert abs(p.tensor.data[0]) < 1e-6


class TestPlateau:
    def make(self, patience=2, lr=0.001):
        return SGD([param([1.0])], lr=lr,
                   plateau=PlateauConfig(patience=patience, rel_threshold=1e-3))

    def test_monotone_improvement_keeps_lr(self):
        opt = self.make()
        for loss in (1.0, 0.9, 0.8):
            lr = opt.plateau_update(loss)
        assert lr == 0.001

    def test_flat_losses_cut_lr(self):
        opt = self.make(patience=2, lr=0.001)
        lrs = [opt.plateau_update(1.0) for _ in range(3)]
        assert lrs[:2] == [0.001, 0.001]
        assert abs(lrs[2] - 0.0001) < 1e-18

    def test_min_lr_floor(self):
        opt = self.make(patience=1, lr=1e-5)
        for _ in range(10):
            lr = opt.plateau_update(1.0)
        assert lr == pytest.approx(1e-6)

    def test_counter_resets_after_cut(self):
        opt = self.make(patience=2)
        for _ in range(3):
            opt.plateau_update(1.0)
        assert opt.bad_epochs == 0
