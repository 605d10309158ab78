"""
Tests for the scalar reverse-mode tape.
"""

import math

import numpy as np
import pytest

from pipalab.core.exceptions import DomainException, InvalidInputException, NumericalException
from pipalab.core.gradengine import Tape, accumulate, backward, check_gradient, stop_gradient


@pytest.mark.gradengine
class TestPrimitives:
    def test_tau(self):
        tape = Tape()
        assert tape.value(tape.tau(tape.constant(1.0))) == 0.5
        assert tape.value(tape.tau(tape.constant(0.0))) == 0.0
        assert tape.value(tape.tau(tape.constant(3.0))) == 0.75

    def test_sigmoid(self):
        tape = Tape()
        assert tape.value(tape.sigmoid(tape.constant(0.0))) == 0.5

    def test_log_sigmoid_is_stable(self):
        tape = Tape()
        assert tape.value(tape.log_sigmoid(tape.constant(-800.0))) == pytest.approx(-800.0)
        assert tape.value(tape.log_sigmoid(tape.constant(800.0))) == 0.0

    def test_clip(self):
        tape = Tape()
        assert tape.value(tape.clip(tape.constant(2.0), 0.0, 1.0)) == 1.0
        assert tape.value(tape.clip(tape.constant(-2.0), 0.0, 1.0)) == 0.0

    def test_log_of_nonpositive(self):
        tape = Tape()
        x = tape.constant(0.0)
        with pytest.raises(DomainException) as info:
            tape.log(x)
        assert info.value.details["node"] == 1

    def test_division_by_zero(self):
        tape = Tape()
        with pytest.raises(DomainException):
            tape.div(tape.constant(1.0), tape.constant(0.0))

    def test_exp_overflow(self):
        tape = Tape()
        with pytest.raises(NumericalException):
            tape.exp(tape.constant(1000.0))

    def test_topological_order(self):
        tape = Tape()
        a = tape.parameter("a", 1.0)
        b = tape.mul(tape.exp(a), tape.constant(2.0))
        for node, operands in enumerate(tape.operands):
            assert all(op < node for op in operands)
        assert b == len(tape) - 1

    def test_parameter_registered_once(self):
        tape = Tape()
        assert tape.parameter("a", 1.0) == tape.parameter("a", 5.0)
        assert tape.value(tape.params["a"]) == 1.0


@pytest.mark.gradengine
class TestBackward:
    def test_product(self):
        tape = Tape()
        x, y = tape.parameter("x", 2.0), tape.parameter("y", 3.0)
        grads = backward(tape, tape.mul(x, y))
        assert grads["x"] == 3.0 and grads["y"] == 2.0

    def test_log_sigmoid_at_zero(self):
        tape = Tape()
        x = tape.parameter("x", 0.0)
        assert backward(tape, tape.log(tape.sigmoid(x)))["x"] == pytest.approx(0.5)

    def test_clipped_region_has_zero_gradient(self):
        tape = Tape()
        x = tape.parameter("x", 2.0)
        assert backward(tape, tape.clip(x, 0.0, 1.0))["x"] == 0.0

    def test_unused_parameters_zero_filled(self):
        tape = Tape()
        x = tape.parameter("x", 1.0)
        tape.parameter("unused", 4.0)
        grads = backward(tape, tape.neg(x))
        assert grads["unused"] == 0.0

    def test_gradmap_is_read_only(self):
        tape = Tape()
        grads = backward(tape, tape.parameter("x", 1.0))
        with pytest.raises(TypeError):
            grads["x"] = 2.0

    def test_invalid_root(self):
        with pytest.raises(InvalidInputException):
            backward(Tape(), 0)

    def test_linearity(self, rng):
        for _ in range(20):
            values = rng.normal(size=3)
            a, b = rng.normal(size=2)

            def f(tape):
                x, y, z = (tape.parameter(k, v) for k, v in zip("xyz", values))
                return tape.mul(tape.exp(x), tape.sigmoid(tape.add(y, z)))

            def g(tape):
                x, y, z = (tape.parameter(k, v) for k, v in zip("xyz", values))
                return tape.logsumexp([x, tape.mul(y, z)])

            tape = Tape()
            combined = tape.add(tape.mul(tape.constant(a), f(tape)), tape.mul(tape.constant(b), g(tape)))
            together = backward(tape, combined)
            tf, tg = Tape(), Tape()
            gf, gg = backward(tf, f(tf)), backward(tg, g(tg))
            expected = accumulate([gf, gg], [a, b])
            for key in "xyz":
                assert together[key] == pytest.approx(expected[key], abs=1e-12)


@pytest.mark.gradengine
class TestStopGradient:
    def test_forward_identity(self):
        tape = Tape()
        x = tape.parameter("x", 1.7)
        assert tape.value(stop_gradient(tape, x)) == 1.7

    def test_frozen_factor(self):
        tape = Tape()
        x = tape.parameter("x", 3.0)
        grads = backward(tape, tape.mul(stop_gradient(tape, x), x))
        assert grads["x"] == 3.0

    def test_zero_gradient(self):
        tape = Tape()
        x = tape.parameter("x", 3.0)
        assert backward(tape, stop_gradient(tape, x))["x"] == 0.0

    def test_idempotent(self):
        tape = Tape()
        x = tape.parameter("x", 0.4)
        once = tape.mul(stop_gradient(tape, x), x)
        twice = tape.mul(stop_gradient(tape, stop_gradient(tape, x)), x)
        assert tape.value(once) == tape.value(twice)
        assert backward(tape, once)["x"] == backward(tape, twice)["x"]


@pytest.mark.gradengine
class TestCheckGradient:
    def test_quadratic(self, rng):
        params = {i: float(v) for i, v in enumerate(rng.normal(size=5))}

        def f(tape):
            return tape.sum([tape.mul(tape.parameter(i, 0.0), tape.parameter(i, 0.0)) for i in params])

        assert check_gradient(f, params, eps=1e-5) < 1e-8

    def test_stop_gradient_frozen_block(self):
        params = {"x": 0.8, "y": -0.3}

        def f(tape):
            x, y = tape.parameter("x"), tape.parameter("y")
            return tape.mul(tape.sigmoid(stop_gradient(tape, tape.mul(x, y))), tape.exp(tape.add(x, y)))

        assert check_gradient(f, params) < 1e-5
        assert check_gradient(f, params, freeze_stopped=False) > 1e-3

    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_eps_range(self, eps):
        with pytest.raises(InvalidInputException):
            check_gradient(lambda tape: tape.parameter("x"), {"x": 1.0}, eps=eps)

    def test_forward_determinism(self):
        def build():
            tape = Tape()
            x = tape.parameter("x", math.pi)
            return tape.value(tape.logsumexp([x, tape.sigmoid(x), tape.tau(x)]))

        assert build() == build()
        assert np.isfinite(build())
