import numpy as np
import pytest

from srmamba import tensor as T
from srmamba.gradcheck import finite_diff_check, run_suite, suite_cases
from srmamba.tensor import Tensor


def test_sum_has_negligible_error(rng):
    x = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    rep = finite_diff_check(T.sum_all, x, h=1e-3, tol=1e-4)
    assert rep["pass"] and rep["max_rel_err"] < 1e-10


def test_zero_step_is_rejected(rng):
    x = Tensor(rng.standard_normal(3), dtype=np.float64)
    with pytest.raises(ValueError):
        finite_diff_check(T.sum_all, x, h=0.0)


def test_f32_inputs_are_rejected():
    with pytest.raises(TypeError):
        finite_diff_check(T.sum_all, Tensor(np.ones(2), dtype=np.float32))


def test_corrupted_rule_is_detected(monkeypatch):
    fwd, _ = T.UNARY["silu"]
    monkeypatch.setitem(T.UNARY, "silu", (fwd, lambda x, y: 1.1 * T._d_silu(x, y)))
    res = run_suite(only=["pointwise.silu"])
    assert not res[0].passed


def test_suite_covers_every_required_op():
    names = {c.name.split(".")[0] for c in suite_cases()}
    required = {"pointwise", "matmul", "conv3d", "layer_norm", "trilinear_resize", "selective_scan",
                "abss_forward", "sabmamba_forward", "gsc_forward", "srma_forward", "dice_ce_loss"}
    assert required <= names
