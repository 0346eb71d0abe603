"""
Base class for engine test cases: seeded fixtures and finite-difference
gradient checks.
"""

import unittest
from abc import ABC

import numpy as np

from hebbian_engine.autodiff_sgd import cross_entropy
from hebbian_engine.oracle import finite_difference_gradient
from hebbian_engine.tensor_core import Rng


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


class _EngineBaseTest(unittest.TestCase, ABC):
    seed = 1234
    # coordinates checked per finite-difference test
    fd_samples = 20
    fd_tolerance = 1e-4

    def setUp(self):
        self.rng = Rng(self.seed)
        self.np_rng = np.random.default_rng(self.seed)

    def random(self, *shape, scale: float = 1.0) -> np.ndarray:
        return self.np_rng.normal(0.0, scale, size=shape)

    def sample_indices(self, size: int) -> np.ndarray:
        count = min(self.fd_samples, size)
        return self.np_rng.choice(size, size=count, replace=False)

    def assert_gradient_close(self, f, x, analytic, name: str = "input"):
        """
        Compare an analytic gradient of scalar f at x with central
        differences on a sample of coordinates.
        """
        indices = self.sample_indices(x.size)
        numeric = finite_difference_gradient(f, x, indices=indices)
        flat_a, flat_n = np.asarray(analytic).reshape(-1), numeric.reshape(-1)
        for i in indices:
            err = relative_error(flat_a[i], flat_n[i])
            assert err < self.fd_tolerance, (
                f"{name}[{i}]: analytic {flat_a[i]:.8g} vs numeric {flat_n[i]:.8g} "
                f"(relative error {err:.2e})"
            )

    def check_layer_gradients(self, layer, x, training=True, rng=None):
        """
        Finite-difference check of a layer's input and parameter gradients
        for the loss sum(out * probe) with a fixed random probe.
        """
        # dropout masks must repeat on every evaluation
        state = rng.get_state() if rng is not None else None

        def run(z):
            if state is not None:
                rng.set_state(state)
            return layer.forward(z, training, rng)

        out, cache = run(x)
        probe = self.random(*out.shape)
        dx, grads = layer.backward(cache, probe)

        def loss_of_input(z):
            return float(np.sum(run(z)[0] * probe))

        self.assert_gradient_close(loss_of_input, x, dx, "input")
        for name, value in list(layer.params.items()):

            def loss_of_param(w, name=name):
                original = layer.params[name]
                layer.params[name] = w
                try:
                    return float(np.sum(run(x)[0] * probe))
                finally:
                    layer.params[name] = original

            self.assert_gradient_close(loss_of_param, value.copy(), grads[name], name)

    def network_loss(self, network, x, labels, rng, **kwargs):
        logits = network.forward(x, training=True, rng=rng, **kwargs)
        return cross_entropy(logits, labels)[0]
