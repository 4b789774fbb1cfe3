import dataclasses

import numpy as np
import pytest

from kidreg.datagen import PhantomConfig, make_phantom, make_reference_pair
from kidreg.errors import ConfigurationError, DegenerateInputError
from kidreg.geometry import RigidParams, TransformWindow
from kidreg.loss import fim_total
from kidreg.optimizer import OptConfig, optimize_direct
from kidreg.volume import Volume


@pytest.fixture(scope="module")
def pair():
    cfg = PhantomConfig(dims=(16, 28, 36), spacing=3.2, frames_per_cycle=8,
                        n_cycles=1, semi_axes_mm=(20.0, 26.0, 34.0))
    case = make_phantom(cfg, seed=0)
    return make_reference_pair(case, 2, 3)


FAST = OptConfig(max_iter=120, tol=1e-5)


def run(pair, init, cfg=FAST):
    return optimize_direct(pair.fix_img, pair.mov_img, pair.fix_mask,
                           pair.mov_mask, init, cfg)


def loss_at(pair, window):
    return fim_total(pair.fix_img, pair.mov_img, pair.fix_mask,
                     pair.mov_mask, window).total


def test_config_validation():
    with pytest.raises(ConfigurationError):
        OptConfig(tol=0.0)
    with pytest.raises(ConfigurationError):
        OptConfig(max_iter=0)
    with pytest.raises(ConfigurationError):
        OptConfig(method="newton")


def test_init_at_alignment_is_fixed_point(pair):
    init = TransformWindow.identity(3)
    win, bd = run(pair, init)
    assert bd.total <= loss_at(pair, init) + 1e-12
    # aligned init is already optimal here; result stays in its neighborhood
    assert np.all(np.abs(win.as_vector()) < 1.0)


def test_loss_never_exceeds_init(pair):
    init = TransformWindow([RigidParams([0.05, 0, 0], [0, 2.0, -2.0])] * 3)
    win, bd = run(pair, init)
    assert bd.total <= loss_at(pair, init) + 1e-12


def test_breakdown_matches_recomputed_loss_exactly(pair):
    init = TransformWindow([RigidParams([0.03, 0, 0], [0, 1.0, 1.0])] * 3)
    win, bd = run(pair, init)
    again = fim_total(pair.fix_img, pair.mov_img, pair.fix_mask,
                      pair.mov_mask, win)
    assert bd.total == again.total
    assert bd.feature == again.feature
    assert bd.image == again.image
    assert bd.transform == again.transform


def test_recovers_misalignment(pair):
    init = TransformWindow([RigidParams([0.06, 0, 0], [0, 2.5, 3.0])] * 3)
    cfg = OptConfig(max_iter=300, tol=1e-6)
    win, bd = run(pair, init, cfg)
    assert bd.total < loss_at(pair, init) - 0.01
    # middle-frame translation pulled most of the way back toward zero
    assert np.linalg.norm(win.frames[1].trans) < \
        0.6 * np.linalg.norm(init.frames[1].trans)


def test_deterministic(pair):
    init = TransformWindow([RigidParams([0.04, 0, 0], [0, 1.5, 0.0])] * 3)
    w1, b1 = run(pair, init)
    w2, b2 = run(pair, init)
    assert np.array_equal(w1.as_vector(), w2.as_vector())
    assert b1.total == b2.total


def test_fd_grad_mode_decreases_loss(pair):
    init = TransformWindow([RigidParams([0, 0, 0], [0, 3.0, 3.0])] * 3)
    cfg = OptConfig(method="fd-grad", max_iter=15, tol=1e-6)
    win, bd = run(pair, init, cfg)
    assert bd.total <= loss_at(pair, init) + 1e-12


def test_degenerate_input_raises(pair):
    # fixed mask slab with no support makes the feature term undefined
    empty = Volume(np.zeros_like(pair.fix_mask.data), pair.fix_mask.spacing)
    with pytest.raises(DegenerateInputError):
        optimize_direct(pair.fix_img, pair.mov_img, empty, pair.mov_mask,
                        TransformWindow.identity(3), FAST)


def test_bounds_respected(pair):
    init = TransformWindow([RigidParams([0, 0, 0], [0, 1.0, 1.0])] * 3)
    lo = np.array([-0.01] * 3 + [-1.5] * 3)
    hi = np.array([0.01] * 3 + [1.5] * 3)
    cfg = dataclasses.replace(FAST, bounds=(lo, hi))
    win, _ = run(pair, init, cfg)
    v = win.as_vector().reshape(3, 6)
    assert np.all(v >= lo - 1e-9) and np.all(v <= hi + 1e-9)
