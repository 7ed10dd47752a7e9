"""Test plugins for the gate network, binarizers and policy helpers."""

import time

import numpy as np

from . import TestPlugin, TestResult

import adafilter_tensor as T
from adafilter_errors import ShapeError
from adafilter_gate import (GateNetwork, PolicyVector, RandomPolicy, policy_dump_rows, policy_stats,
                            ste_binarize, stop_gradient_binarize)
from adafilter_tensor import Tensor, finite_diff_check

LAYER_CHANNELS = [(3, 4), (4, 5)]
TRIALS = 50


def _unit_inputs(rng, batch=3):
    return [Tensor(rng.normal(size=(batch, n_in, 4, 4))) for n_in, _ in LAYER_CHANNELS]


def _run_gate(gate, inputs, weights, use_probs=False):
    """sum_i <R_i, bits_i> over both gated units, state carried between them."""
    state = None
    total = None
    for index, (x, r) in enumerate(zip(inputs, weights)):
        policy, state = gate.gate_step(x, index, state)
        term = T.sum(T.mul(policy.probs if use_probs else policy.bits, r))
        total = term if total is None else T.add(total, term)
    return total


class BinarizeThresholdTest(TestPlugin):
    """Forward thresholds at 0.5 inclusive; STE backward is the identity."""

    operation = "ste_binarize"
    description = "STE threshold and identity backward"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            probs = Tensor(np.array([[0.0, 0.49, 0.5, 0.51, 1.0]]), requires_grad=True)
            bits = ste_binarize(probs)
            assert bits.data.tolist() == [[0.0, 0.0, 1.0, 1.0, 1.0]], bits.data
            upstream = Tensor(np.array([[0.3, -1.2, 2.0, 0.0, 5.5]]))
            T.sum(T.mul(bits, upstream)).backward()
            assert np.array_equal(probs.grad, upstream.data), f"STE grad {probs.grad}"

            probs.zero_grad()
            blocked = stop_gradient_binarize(probs)
            assert np.array_equal(blocked.data, bits.data), "stop-gradient forward differs from STE forward"
            T.sum(T.mul(blocked, upstream)).backward()
            assert probs.grad is None or not np.any(probs.grad), f"stop-gradient leaked {probs.grad}"
            return self.result(True, "Threshold and backward contracts hold", start_time)
        except AssertionError as e:
            return self.result(False, "Binarizer contract violated", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class GateGradientFlowTest(TestPlugin):
    """STE gives nonzero gate-parameter gradients; the stop-gradient ablation gives exact zeros."""

    operation = "gate_step"
    description = "Gradient reaches the gate only through the STE"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(12)
            inputs = _unit_inputs(rng)
            weights = [Tensor(rng.normal(size=(3, n_out))) for _, n_out in LAYER_CHANNELS]
            for binarizer, expect_flow in (("ste", True), ("stop_gradient", False)):
                gate = GateNetwork(LAYER_CHANNELS, embedding_size=4, hidden_size=4, binarizer=binarizer, seed=3)
                _run_gate(gate, inputs, weights).backward()
                norms = {path: 0.0 if p.grad is None else float(np.abs(p.grad).sum())
                         for path, p in gate.named_parameters()}
                total = sum(norms.values())
                if expect_flow and total == 0.0:
                    return self.result(False, "STE produced zero gate gradients", start_time)
                if not expect_flow and total != 0.0:
                    leaking = [path for path, v in norms.items() if v]
                    return self.result(False, "Stop-gradient gate received gradients", start_time, str(leaking))
            return self.result(True, "Gate gradients present with STE and exactly zero without", start_time)
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class GateSurrogateGradCheckTest(TestPlugin):
    """STE gradients of sum(R * bits) equal central differences of the surrogate sum(R * probs)."""

    operation = "gate_step"
    description = "Gate pipeline gradient check through the surrogate"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            for trial in range(TRIALS):
                rng = np.random.default_rng([77, trial])
                gate = GateNetwork(LAYER_CHANNELS, embedding_size=2, hidden_size=3, seed=trial)
                inputs = _unit_inputs(rng, batch=2)
                weights = [Tensor(rng.normal(size=(2, n_out))) for _, n_out in LAYER_CHANNELS]
                params = gate.parameters()

                gate.zero_grad()
                _run_gate(gate, inputs, weights).backward()
                ste_grads = [p.grad.copy() for p in params]

                reports = finite_diff_check(lambda: _run_gate(gate, inputs, weights, use_probs=True),
                                            params, step=1e-6)
                failing = [r for r in reports if not r.passed]
                if failing:
                    return self.result(False, f"Surrogate gradient mismatch on trial {trial}", start_time,
                                       f"{failing[0].name}: {failing[0].max_rel_error:.3e}")
                for p, ste in zip(params, ste_grads):
                    if not np.allclose(p.grad, ste, rtol=1e-10, atol=1e-12):
                        return self.result(False, "STE gradient differs from surrogate gradient", start_time)
            return self.result(True, "STE gradients match the surrogate's central differences", start_time)
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class GateStepErrorsTest(TestPlugin):
    """Unregistered layer index and mismatched input width are rejected."""

    operation = "gate_step"
    description = "gate_step error cases"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        gate = GateNetwork(LAYER_CHANNELS, embedding_size=4, hidden_size=4)
        rng = np.random.default_rng(0)
        try:
            gate.gate_step(Tensor(rng.normal(size=(2, 3, 4, 4))), 2)
            return self.result(False, "Unregistered layer index accepted", start_time)
        except KeyError:
            pass
        try:
            gate.gate_step(Tensor(rng.normal(size=(2, 5, 4, 4))), 0)
            return self.result(False, "Wrong input width accepted", start_time)
        except ShapeError:
            pass
        return self.result(True, "Bad index and width rejected", start_time)


class PerExamplePolicyTest(TestPlugin):
    """An example's policy does not depend on the other examples in its batch."""

    operation = "gate_step"
    description = "Policies are per example"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(5)
            gate = GateNetwork(LAYER_CHANNELS, embedding_size=4, hidden_size=4, seed=1)
            a = rng.normal(size=(1, 3, 4, 4))
            batch_one = Tensor(np.concatenate([a, rng.normal(size=(2, 3, 4, 4))]))
            batch_two = Tensor(np.concatenate([a, rng.normal(size=(2, 3, 4, 4)) * 5.0]))
            with T.no_grad():
                p1, _ = gate.gate_step(batch_one, 0)
                p2, _ = gate.gate_step(batch_two, 0)
            assert np.allclose(p1.probs.data[0], p2.probs.data[0], rtol=0, atol=1e-12), "example 0 changed"
            assert p1.width == 4 and p1.batch_size == 3, (p1.width, p1.batch_size)
            return self.result(True, "Example 0 gets the same policy in both batches", start_time)
        except AssertionError as e:
            return self.result(False, "Policy leaked across examples", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class SaturatedHeadTest(TestPlugin):
    """Zero head weights with a large bias pin every policy bit, whatever the input."""

    operation = "gate_step"
    description = "Saturated heads force all-zeros and all-ones policies"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(6)
            inputs = [Tensor(rng.normal(scale=4.0, size=(5, n_in, 4, 4))) for n_in, _ in LAYER_CHANNELS]
            for bias, expected in ((-10.0, 0.0), (10.0, 1.0)):
                gate = GateNetwork(LAYER_CHANNELS, embedding_size=4, hidden_size=4, seed=2)
                gate.set_head_bias(bias)
                state = None
                with T.no_grad():
                    for index, x in enumerate(inputs):
                        policy, state = gate.gate_step(x, index, state)
                        bits = policy.numpy()
                        assert np.all(bits == expected), f"bias {bias}, unit {index}: bits {bits.tolist()}"
            return self.result(True, "Head bias -10 gives all zeros and +10 all ones", start_time)
        except AssertionError as e:
            return self.result(False, "Saturated head check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class InputDependentPolicyTest(TestPlugin):
    """A freshly initialized gate gives different examples different policies."""

    operation = "gate_step"
    description = "Policies depend on the input"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(8)
            gate = GateNetwork(LAYER_CHANNELS, seed=0)
            offsets = rng.normal(scale=3.0, size=(8, 3, 1, 1))
            x = Tensor(offsets + rng.normal(size=(8, 3, 4, 4)))
            with T.no_grad():
                first, state = gate.gate_step(x, 0)
                second, _ = gate.gate_step(Tensor(rng.normal(size=(8, 4, 4, 4))), 1, state)
            rows = np.concatenate([first.numpy(), second.numpy()], axis=1)
            distinct = {row.tobytes() for row in rows}
            assert len(distinct) > 1, f"all 8 examples got the policy {rows[0].tolist()}"
            probs = first.probs.data
            assert not np.allclose(probs[0], probs[1]), "distinct inputs gave identical probabilities"
            return self.result(True, f"{len(distinct)} distinct policies over 8 examples", start_time)
        except AssertionError as e:
            return self.result(False, "Input-dependence check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class PolicyStatsTest(TestPlugin):
    """Fractions, empty input, random policy reproducibility and the long-format dump."""

    operation = "policy_stats"
    description = "Policy statistics and dump rows"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            layer0 = np.array([[1, 0, 0, 0], [1, 1, 0, 0]], dtype=float)
            layer1 = np.ones((2, 3))
            assert policy_stats([layer0, layer1]) == [0.375, 1.0], policy_stats([layer0, layer1])
            assert policy_stats([PolicyVector(Tensor(np.zeros((1, 2))), 0)]) == [0.0]
            try:
                policy_stats([])
                return self.result(False, "Empty policy list accepted", start_time)
            except ValueError:
                pass

            sampler = RandomPolicy(seed=9, p=0.5)
            first = [sampler.sample(i, 64, 16).numpy() for i in range(2)]
            sampler.reset()
            second = [sampler.sample(i, 64, 16).numpy() for i in range(2)]
            assert all(np.array_equal(x, y) for x, y in zip(first, second)), "reset did not reproduce draws"
            fraction = float(np.mean(first[0]))
            assert 0.4 < fraction < 0.6, f"Bernoulli(0.5) fraction {fraction}"

            rows = policy_dump_rows([layer0], example_offset=10)
            assert len(rows) == layer0.size, len(rows)
            assert rows[0] == (0, 10, 0, 1) and rows[5] == (0, 11, 1, 1), rows[:6]
            return self.result(True, "Stats, sampling and dump rows behave", start_time)
        except AssertionError as e:
            return self.result(False, "Policy helper check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))
