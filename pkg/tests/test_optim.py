import numpy as np
import pytest

from prefreach import autodiff as ad
from prefreach.autodiff import Tensor
from prefreach.optim import AdamState, ParamSet, adam_step, load_paramset, save_paramset


def test_zero_gradients_leave_params_unchanged():
    ps = ParamSet()
    w = ps.add("w", np.array([1.0, -2.0]))
    w.grad = np.zeros(2)
    st = AdamState.for_params(ps)
    adam_step(ps, st)
    np.testing.assert_array_equal(w.values, [1.0, -2.0])
    assert st.step == 1


def test_first_update_is_bias_corrected_lr():
    # constant unit gradient: mhat = 1, vhat = 1 -> step of -lr/(1+eps)
    ps = ParamSet()
    w = ps.add("w", np.array(0.0))
    w.grad = np.array(1.0)
    st = AdamState.for_params(ps, learning_rate=0.1)
    adam_step(ps, st)
    assert w.values == pytest.approx(-0.1, abs=1e-8)


def test_quadratic_descent_shrinks():
    ps = ParamSet()
    w = ps.add("w", np.array(1.0))
    st = AdamState.for_params(ps, learning_rate=0.05)
    prev = abs(float(w.values))
    for _ in range(2):
        ps.zero_grad()
        ad.backward(ad.mul(ad.mul(w, w), 0.5))
        adam_step(ps, st)
        cur = abs(float(w.values))
        assert cur < prev
        prev = cur


def test_missing_gradient_names_parameter():
    ps = ParamSet()
    ps.add("hidden.w", np.zeros(3))
    st = AdamState.for_params(ps)
    with pytest.raises(ValueError, match="hidden.w"):
        adam_step(ps, st)


def test_gradients_untouched_by_step():
    ps = ParamSet()
    w = ps.add("w", np.array([1.0]))
    w.grad = np.array([0.5])
    adam_step(ps, AdamState.for_params(ps))
    np.testing.assert_array_equal(w.grad, [0.5])


def test_duplicate_name_rejected():
    ps = ParamSet()
    ps.add("w", np.zeros(1))
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("w", np.zeros(1))


def test_checkpoint_round_trip_byte_stable(tmp_path):
    rng = np.random.default_rng(5)
    ps = ParamSet()
    ps.add("enc.w0", rng.normal(size=(4, 7)))
    ps.add("enc.b0", rng.normal(size=(7,)))
    ps.add("scalar", np.array(3.25))
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_paramset(p1, ps, meta={"seed": 9, "config_hash": "abc"})
    loaded, meta = load_paramset(p1)
    assert meta == {"seed": 9, "config_hash": "abc"}
    assert loaded.names() == ps.names()
    for name, t in ps.items():
        np.testing.assert_array_equal(loaded[name].values, t.values)
    save_paramset(p2, loaded, meta=meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        load_paramset(p)
