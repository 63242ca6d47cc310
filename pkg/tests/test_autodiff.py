import numpy as np
import pytest

from so3flow import autodiff as ad
from so3flow import so3
from so3flow.autodiff import ParamStore, Tape
from so3flow.flow import FlowConfig, ProductSO3Flow
from so3flow.layers import couple_quat


def scalar_grad(f, x0):
    tape = Tape()
    x = tape.leaf(np.asarray(x0, dtype=np.float64), "x")
    out = f(x)
    tape.backward(out)
    return ad.value_of(out), tape.gradients()["x"]


class TestBasics:
    def test_square_value_and_grad(self):
        val, g = scalar_grad(lambda x: x * x, 3.0)
        assert val == 9.0
        assert g == 6.0

    def test_tanh_at_zero(self):
        val, g = scalar_grad(ad.tanh, 0.0)
        assert val == 0.0
        assert g == 1.0

    def test_division_and_power(self):
        val, g = scalar_grad(lambda x: (x ** 3) / (x + 1.0), 2.0)
        assert val == pytest.approx(8.0 / 3.0)
        # d/dx x^3/(x+1) = (3x^2 (x+1) - x^3) / (x+1)^2
        assert g == pytest.approx((12.0 * 3.0 - 8.0) / 9.0)

    def test_forward_matches_untaped_evaluation(self):
        # the same composite expression on and off the tape agrees to 1e-12
        rng = np.random.default_rng(0)
        q = so3.haar_quat(rng, (32,))
        g_out = rng.standard_normal((32, 3))
        q_plain, ld_plain = couple_quat(q, g_out, role=0)
        tape = Tape()
        qv = tape.leaf(q, "q")
        q_taped, ld_taped = couple_quat(qv, g_out, role=0)
        np.testing.assert_allclose(ad.value_of(q_taped), q_plain, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ad.value_of(ld_taped), ld_plain, rtol=0, atol=1e-12)

    def test_backward_requires_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones(3), "x")
        y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y)

    def test_log_of_non_positive_raises_with_provenance(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, -2.0]), "x")
        with pytest.raises(FloatingPointError, match="node"):
            ad.log(x)

    def test_sqrt_of_negative_raises(self):
        with pytest.raises(FloatingPointError):
            ad.sqrt(np.array([-1.0]))

    def test_unused_parameter_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf(2.0, "x")
        tape.leaf(np.ones(4), "unused")
        tape.backward(x * x)
        grads = tape.gradients()
        assert grads["x"] == 4.0
        np.testing.assert_array_equal(grads["unused"], np.zeros(4))

    def test_clamp_gradient_zero_outside_passthrough_inside(self):
        tape = Tape()
        x = tape.leaf(np.array([-1.0, 0.5, 2.0]), "x")
        y = ad.asum(ad.clamp(x, 0.0, 1.0))
        tape.backward(y)
        np.testing.assert_array_equal(tape.gradients()["x"], [0.0, 1.0, 0.0])


class TestOpGradients:
    """Every primitive against central finite differences."""

    CASES = [
        ("add", lambda p: ad.asum(p["a"] + p["b"])),
        ("sub", lambda p: ad.asum(p["a"] - p["b"])),
        ("mul", lambda p: ad.asum(p["a"] * p["b"])),
        ("div", lambda p: ad.asum(p["a"] / (p["b"] + 3.0))),
        ("exp", lambda p: ad.asum(ad.exp(p["a"]))),
        ("log", lambda p: ad.asum(ad.log(p["a"] * p["a"] + 1.0))),
        ("sqrt", lambda p: ad.asum(ad.sqrt(p["a"] * p["a"] + 0.5))),
        ("tanh", lambda p: ad.asum(ad.tanh(p["a"]))),
        ("sin", lambda p: ad.asum(ad.sin(p["a"]))),
        ("cos", lambda p: ad.asum(ad.cos(p["a"]))),
        ("atan2", lambda p: ad.asum(ad.atan2(p["a"], p["b"] + 2.0))),
        ("norm", lambda p: ad.asum(ad.norm(p["a"], axis=-1))),
        ("dot", lambda p: ad.asum(ad.dot(p["a"], p["b"], axis=-1))),
        ("cross", lambda p: ad.asum(ad.cross(p["a"], p["b"]) * np.arange(1.0, 7.0).reshape(2, 3))),
        ("matmul", lambda p: ad.asum(ad.matmul(p["a"], p["m"]))),
        ("quat_mul", lambda p: ad.asum(ad.quat_mul(p["q1"], p["q2"]) ** 2.0)),
        ("stack", lambda p: ad.asum(ad.stack([p["a"], p["b"]], axis=0) ** 2.0)),
        ("concat", lambda p: ad.asum(ad.concat([p["a"], p["b"]], axis=-1) ** 2.0)),
        ("reshape", lambda p: ad.asum(ad.reshape(p["a"], (3, 2)) ** 2.0)),
        ("transpose", lambda p: ad.asum(ad.transpose(p["m"], (1, 0)) @ p["m"])),
        ("take", lambda p: ad.asum(ad.take(p["a"], np.array([1, 0]), axis=0) * p["b"])),
        ("getitem", lambda p: ad.asum(p["a"][:, 1:] * p["b"][:, 1:])),
        ("where", lambda p: ad.asum(ad.where(np.array([True, False, True]), p["a"], p["b"]))),
        ("mean", lambda p: ad.mean(p["a"] * p["a"])),
        ("broadcast_add", lambda p: ad.asum((p["a"] + p["row"]) ** 2.0)),
    ]

    @pytest.mark.parametrize("name,fn", CASES, ids=[c[0] for c in CASES])
    def test_gradient_matches_finite_differences(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**32)
        params = {
            "a": rng.standard_normal((2, 3)),
            "b": rng.standard_normal((2, 3)),
            "row": rng.standard_normal(3),
            "m": rng.standard_normal((3, 3)),
            "q1": rng.standard_normal((2, 4)),
            "q2": rng.standard_normal((2, 4)),
        }
        assert ad.grad_check(fn, params, h=1e-6) < 1e-7

    def test_matmul_needs_var(self):
        # the __matmul__ route only exists on ndarrays; ad.matmul covers Vars
        tape = Tape()
        a = tape.leaf(np.ones((2, 3)), "a")
        out = ad.matmul(a, np.ones((3, 2)))
        assert out.shape == (2, 2)


class TestProperties:
    def test_adjoint_linearity(self):
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal(5)
        a, b = 0.7, -1.3

        def gf(f):
            tape = Tape()
            x = tape.leaf(x0, "x")
            tape.backward(f(x))
            return tape.gradients()["x"]

        f = lambda x: ad.asum(ad.exp(x) * x)
        g = lambda x: ad.asum(ad.tanh(x))
        combined = gf(lambda x: a * f(x) + b * g(x))
        np.testing.assert_allclose(combined, a * gf(f) + b * gf(g), rtol=0, atol=1e-10)

    def test_identical_tapes_give_bit_identical_gradients(self):
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((4, 4))

        def run():
            tape = Tape()
            x = tape.leaf(x0, "x")
            y = ad.asum(ad.matmul(x, ad.tanh(x)) ** 2.0)
            tape.backward(y)
            return tape.gradients()["x"]

        np.testing.assert_array_equal(run(), run())

    def test_backward_visits_reverse_insertion_order_once(self):
        # diamond dependency: adjoints must accumulate before propagating
        tape = Tape()
        x = tape.leaf(2.0, "x")
        y = x * x
        z = y + y * 3.0
        tape.backward(z)
        assert tape.gradients()["x"] == pytest.approx(16.0)  # d/dx 4x^2


class TestGradCheck:
    def test_quadratic_form_is_exact(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((4, 4))
        q = m @ m.T

        def f(p):
            return 0.5 * ad.asum(p["x"] * ad.matmul(q, p["x"]))

        assert ad.grad_check(f, {"x": rng.standard_normal(4)}, h=1e-5) < 1e-9

    def test_full_model_nll_gradient_many_configurations(self):
        # small flow models at random parameter settings, every parameter
        poses = so3.haar_quat(np.random.default_rng(0), (2, 2))
        for trial in range(20):
            model = ProductSO3Flow(FlowConfig(n_manifolds=2, n_coupling=1,
                                              hidden_width=4, seed=trial))
            model.perturb(np.random.default_rng(1000 + trial), scale=0.25)

            def f(p):
                return ad.mean(-model._log_prob_core(p, poses, None))

            err = ad.grad_check(f, dict(model.params.items()), h=1e-5)
            assert err < 1e-4, f"configuration {trial}: rel err {err}"


class TestParamStore:
    def test_registration_and_update(self):
        store = ParamStore()
        store.register("w", np.zeros((2, 2)))
        with pytest.raises(ValueError):
            store.register("w", np.zeros(3))
        assert store.version == 0
        store.update("w", np.ones((2, 2)))
        assert store.version == 1
        with pytest.raises(ValueError):
            store.update("w", np.ones(3))

    def test_as_leaves_names_and_gradients(self):
        store = ParamStore()
        store.register("a", np.array([1.0, 2.0]))
        store.register("b", np.array([[3.0]]))
        tape = Tape()
        leaves = store.as_leaves(tape)
        out = ad.asum(leaves["a"] * leaves["a"]) + ad.asum(leaves["b"])
        tape.backward(out)
        grads = tape.gradients()
        np.testing.assert_array_equal(grads["a"], [2.0, 4.0])
        np.testing.assert_array_equal(grads["b"], [[1.0]])
