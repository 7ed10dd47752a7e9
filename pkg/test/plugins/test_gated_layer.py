"""Test plugins for filter selection, gated BN, model construction and parameter accounting."""

import time

import numpy as np

from . import TINY_LAYERS, TestPlugin, TestResult

import adafilter_tensor as T
from adafilter_config import BackboneSpec
from adafilter_errors import ShapeError
from adafilter_gated import (ConvFilterBank, GatedConvBlock, filter_select_forward, gated_bn_forward,
                             init_from_pretrained, masked_batchnorm_forward, masked_moments, parameter_report)
from adafilter_layers import BatchNorm2d, batchnorm_forward, build_backbone
from adafilter_tensor import Tensor, finite_diff_check

TRIALS = 50
SELECT_CASES = 100


def _bits(rng, n, c, p=0.5):
    return (rng.random((n, c)) < p).astype(np.float64)


def _bn(rng, channels):
    bn = BatchNorm2d(channels)
    bn.gamma.data = rng.uniform(0.5, 1.5, channels)
    bn.beta.data = rng.normal(size=channels)
    bn.running_mean = rng.normal(size=channels)
    bn.running_var = rng.uniform(0.5, 2.0, channels)
    return bn


def _clone_bn(bn):
    copy = BatchNorm2d(bn.channels, bn.momentum, bn.eps)
    copy.copy_from(bn)
    return copy


def _pretrained_state(spec, seed):
    """Pretrained-looking backbone state: random BN affine and running statistics."""
    model = build_backbone(spec, seed)
    rng = np.random.default_rng([seed, 1])
    for path, module in model.named_modules():
        if isinstance(module, BatchNorm2d):
            module.copy_from(_bn(rng, module.channels))
    return model, model.state_dict()


class FilterSelectOracleTest(TestPlugin):
    """Per-channel selection equals picking channels from the two full convolutions, bit for bit."""

    operation = "filter_select_forward"
    description = "Exact per-channel filter selection"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            for case in range(SELECT_CASES):
                rng = np.random.default_rng([3, case])
                n, c_in, c_out = (int(v) for v in rng.integers(1, 4, size=3))
                size = int(rng.integers(3, 7))
                bank = ConvFilterBank(rng.normal(size=(c_out, c_in, 3, 3)), stride=int(rng.integers(1, 3)))
                bank.F.data = bank.F.data + rng.normal(scale=0.1, size=bank.F.shape)
                x = Tensor(rng.normal(size=(n, c_in, size, size)))
                g = _bits(rng, n, c_out, float(rng.uniform()))

                out = filter_select_forward(x, bank, Tensor(g)).data
                fine = T.conv2d(x, bank.F, bank.stride, bank.padding).data
                pre = T.conv2d(x, bank.frozen(), bank.stride, bank.padding).data
                expected = np.empty_like(fine)
                for i in range(n):
                    for ch in range(c_out):
                        expected[i, ch] = fine[i, ch] if g[i, ch] == 1.0 else pre[i, ch]
                if out.tobytes() != expected.tobytes():
                    return self.result(False, f"Selection differs from oracle on case {case}", start_time)
            try:
                filter_select_forward(x, bank, Tensor(np.ones((n + 1, c_out))))
                return self.result(False, "Policy with wrong batch size accepted", start_time)
            except ShapeError:
                pass
            return self.result(True, f"{SELECT_CASES} random cases bit-identical", start_time)
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class GatedBatchNormOracleTest(TestPlugin):
    """Gated BN equals selecting channels from two independent full-batch BNs."""

    operation = "gated_bn_forward"
    description = "Gated BN against the dual-BN selection oracle"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            for case in range(SELECT_CASES):
                rng = np.random.default_rng([4, case])
                n, c = int(rng.integers(2, 5)), int(rng.integers(1, 4))
                bank = ConvFilterBank(rng.normal(size=(c, 2, 3, 3)))
                block = GatedConvBlock(bank, _bn(rng, c), _bn(rng, c), unit_index=0)
                oracle1, oracle2 = _clone_bn(block.bn1), _clone_bn(block.bn2)
                y = Tensor(rng.normal(size=(n, c, 3, 3)))
                g = _bits(rng, n, c)
                mode = "train" if case % 2 == 0 else "eval"

                out = gated_bn_forward(y, block, Tensor(g), mode).data
                a = oracle1(y, mode=mode).data
                b = oracle2(y, mode=mode).data
                expected = np.where(g[:, :, None, None] == 1.0, a, b)
                if out.tobytes() != expected.tobytes():
                    return self.result(False, f"Gated BN differs from oracle on case {case} ({mode})", start_time)
                if mode == "train" and not np.array_equal(block.bn2.running_mean, oracle2.running_mean):
                    return self.result(False, "BN2 running statistics diverged from oracle", start_time)
            return self.result(True, f"{SELECT_CASES} cases match the dual-BN oracle exactly", start_time)
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class CompositeGradCheckTest(TestPlugin):
    """Filter selection and gated BN gradients agree with central differences."""

    operation = "gated_bn_forward"
    description = "Composite block gradient checks"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            for trial in range(TRIALS):
                rng = np.random.default_rng([5, trial])
                n, c_in, c_out = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3))
                bank = ConvFilterBank(rng.normal(size=(c_out, c_in, 3, 3)))
                block = GatedConvBlock(bank, _bn(rng, c_out), _bn(rng, c_out), unit_index=0)
                x = Tensor(rng.normal(size=(n, c_in, 3, 3)), requires_grad=True)
                g = Tensor(_bits(rng, n, c_out))
                weights = Tensor(rng.normal(size=(n, c_out, 3, 3)))

                def loss():
                    y = filter_select_forward(x, bank, g)
                    return T.sum(T.mul(gated_bn_forward(y, block, g, "train"), weights))

                params = [x, bank.F, block.bn1.gamma, block.bn1.beta, block.bn2.gamma, block.bn2.beta]
                labels = ["x", "F", "bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta"]
                for label, report in zip(labels, finite_diff_check(loss, params, step=1e-6)):
                    if not report.passed:
                        return self.result(False, f"Composite gradient mismatch on trial {trial}", start_time,
                                           f"{label}: {report.max_rel_error:.3e}")
                if g.data.any() and not np.any(bank.F.grad):
                    return self.result(False, "Selected fine-tuned filters received no gradient", start_time)
            return self.result(True, f"{TRIALS} composite trials pass", start_time)
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class ZeroPolicyRoutingTest(TestPlugin):
    """With G all zeros the block is the frozen path: no gradient reaches F or BN1."""

    operation = "filter_select_forward"
    description = "All-zeros policy routes through S and BN2 only"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(12)
            bank = ConvFilterBank(rng.normal(size=(4, 3, 3, 3)))
            bank.F.data = bank.F.data + rng.normal(scale=0.1, size=bank.F.shape)
            block = GatedConvBlock(bank, _bn(rng, 4), _bn(rng, 4), unit_index=0)
            oracle2 = _clone_bn(block.bn2)
            x = Tensor(rng.normal(size=(3, 3, 5, 5)), requires_grad=True)
            g = Tensor(np.zeros((3, 4)))
            weights = Tensor(rng.normal(size=(3, 4, 5, 5)))

            out = gated_bn_forward(filter_select_forward(x, bank, g), block, g, "train")
            expected = batchnorm_forward(T.conv2d(Tensor(x.data), bank.frozen(), bank.stride, bank.padding),
                                         oracle2, "train").data
            assert out.data.tobytes() == expected.tobytes(), "output differs from BN2(conv(x, S))"

            T.sum(T.mul(out, weights)).backward()
            for label, grad in (("F", bank.F.grad), ("bn1.gamma", block.bn1.gamma.grad),
                                ("bn1.beta", block.bn1.beta.grad)):
                assert grad is None or not np.any(grad), f"{label} received gradient {grad}"
            assert x.grad is not None and np.any(x.grad), "input received no gradient through S"
            assert np.any(block.bn2.gamma.grad), "BN2 received no gradient"
            return self.result(True, "Zero policy uses only S and BN2", start_time)
        except AssertionError as e:
            return self.result(False, "Zero-policy routing check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class MaskedStatisticsTest(TestPlugin):
    """Masked moments, the fallback for unselected channels and masked BN gradients."""

    operation = "masked_batchnorm_forward"
    description = "Experimental masked BN statistics"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            rng = np.random.default_rng(8)
            x = rng.normal(size=(4, 2, 2, 2))
            mask = np.array([[1, 0], [1, 0], [0, 0], [1, 0]], dtype=float)
            mean, var, count = masked_moments(x, mask)
            chosen = x[[0, 1, 3], 0]
            assert np.isclose(mean[0], chosen.mean()) and np.isclose(var[0], chosen.var()), (mean, var)
            assert count.tolist() == [12.0, 0.0], count

            bn = _bn(rng, 2)
            fallback = (bn.running_mean.copy(), bn.running_var.copy())
            out = masked_batchnorm_forward(Tensor(x), bn, mask, "train").data
            expected = (x[:, 1] - fallback[0][1]) / np.sqrt(fallback[1][1] + bn.eps) * bn.gamma.data[1] + bn.beta.data[1]
            assert np.allclose(out[:, 1], expected, atol=1e-12), "empty channel did not use running statistics"
            assert bn.running_mean[1] == fallback[0][1], "running stats of an empty channel moved"

            for trial in range(TRIALS):
                trial_rng = np.random.default_rng([9, trial])
                xt = Tensor(trial_rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
                mt = _bits(trial_rng, 3, 2)
                bnt = _bn(trial_rng, 2)
                weights = Tensor(trial_rng.normal(size=(3, 2, 2, 2)))
                reports = finite_diff_check(
                    lambda: T.sum(T.mul(masked_batchnorm_forward(xt, bnt, mt, "train"), weights)),
                    [xt, bnt.gamma, bnt.beta], step=1e-6,
                )
                failing = [r for r in reports if not r.passed]
                if failing:
                    return self.result(False, f"Masked BN gradient mismatch on trial {trial}", start_time,
                                       f"{failing[0].name}: {failing[0].max_rel_error:.3e}")
            return self.result(True, "Masked moments, fallback and gradients hold", start_time)
        except AssertionError as e:
            return self.result(False, "Masked statistics check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class IdentityAtInitTest(TestPlugin):
    """With every policy bit forced on, a fresh gated model reproduces the pretrained features."""

    operation = "init_from_pretrained"
    description = "Gated model equals the pretrained backbone at initialization"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            spec = BackboneSpec(image_size=8, in_channels=3, num_classes=3, layers=TINY_LAYERS)
            pretrained, state = _pretrained_state(spec, seed=11)
            x = Tensor(np.random.default_rng(0).normal(size=(5, 3, 8, 8)))
            reference = pretrained.eval().features(x).data

            worst = 0.0
            for policy in ("forced_on", "gate"):
                gated = init_from_pretrained(state, spec, seed=4, policy=policy).eval()
                if policy == "gate":
                    gated.force_policy(1.0)
                features = gated.features(x).data
                worst = max(worst, float(np.abs(features - reference).max()))
            assert worst < 1e-10, f"max deviation {worst:.3e}"

            unit_paths = pretrained.unit_paths()
            for path in unit_paths:
                key = f"backbone.{path}.bank.S"
                assert np.array_equal(gated.state_dict()[key], state[f"{path}.conv.weight"]), key
                assert np.array_equal(gated.state_dict()[f"backbone.{path}.bank.F"], state[f"{path}.conv.weight"]), path
            return self.result(True, f"Max deviation {worst:.2e} over {len(unit_paths)} gated units", start_time)
        except AssertionError as e:
            return self.result(False, "Identity at initialization violated", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class AllOnesMatchesStandardBNTest(TestPlugin):
    """With G all ones, gated-BN mode matches a standard-BN model that shares BN1."""

    operation = "gated_bn_forward"
    description = "Gated BN collapses to standard BN under an all-ones policy"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            spec = BackboneSpec(image_size=8, in_channels=3, num_classes=3, layers=TINY_LAYERS)
            _, state = _pretrained_state(spec, seed=2)
            gated = init_from_pretrained(state, spec, bn_mode="gated", seed=6, policy="forced_on")
            standard = init_from_pretrained(state, spec, bn_mode="standard", seed=6, policy="forced_on")
            x = Tensor(np.random.default_rng(1).normal(size=(4, 3, 8, 8)))
            for mode in ("train", "eval"):
                gated.train(mode == "train")
                standard.train(mode == "train")
                diff = float(np.abs(gated(x).data - standard(x).data).max())
                assert diff < 1e-12, f"{mode}: max deviation {diff:.3e}"
            return self.result(True, "All-ones gated BN equals standard BN in train and eval", start_time)
        except AssertionError as e:
            return self.result(False, "Gated and standard BN differ", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))


class ParameterAccountingTest(TestPlugin):
    """Conv+BN parameters of the gated model are exactly twice the baseline's."""

    operation = "parameter_report"
    description = "Closed-form parameter ratio"

    async def test(self, session) -> TestResult:
        start_time = time.time()
        try:
            messages = []
            for layers in (TINY_LAYERS, None):
                spec = (BackboneSpec(image_size=8, in_channels=3, num_classes=3, layers=layers) if layers
                        else BackboneSpec())
                pretrained, state = _pretrained_state(spec, seed=0)
                gated = init_from_pretrained(state, spec, seed=0)
                report = parameter_report(pretrained, gated)
                assert abs(report.conv_bn_ratio - 2.0) <= 1e-3, f"conv+BN ratio {report.conv_bn_ratio}"
                assert report.gated_units == len(pretrained.units()), report.gated_units
                assert report.gate == gated.gate.num_parameters() > 0, report.gate
                assert report.gated_channels_per_example == report.baseline_channels_per_example
                assert "ratio" in report.format()
                messages.append(f"{report.gated_units} units: total ratio {report.total_ratio:.3f}")

                standard = init_from_pretrained(state, spec, bn_mode="standard", seed=0)
                ratio = parameter_report(pretrained, standard).conv_bn_ratio
                assert ratio < 2.0, f"standard BN mode ratio {ratio}"
            return self.result(True, "; ".join(messages), start_time)
        except AssertionError as e:
            return self.result(False, "Parameter accounting check failed", start_time, str(e))
        except Exception as e:
            return self.result(False, "Test failed with exception", start_time, str(e))
