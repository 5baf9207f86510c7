import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalpix import tensor as T
from causalpix.ablations import (
    ABLATION_FIELDS,
    ABLATIONS,
    ablation_config,
    config_diff,
    dequantize,
    dequantized_logprob,
    softmax_conditional_logprobs,
    softmax_logprob,
    softmax_pixel_logprob,
)
from causalpix.data import Dataset
from causalpix.dlm import LOG_SCALE_MIN, MixtureParams, pixel_logprob
from causalpix.network import FIELD_11X5, Model, desk_config, field_mismatches, forward, preprocess
from causalpix.training import evaluate

from conftest import gradcheck


def random_params(rng, K=2, spread=60.0):
    return MixtureParams(
        logit_pi=rng.normal(size=K),
        mu=rng.uniform(127.5 - spread, 127.5 + spread, size=(K, 3)),
        log_s=rng.uniform(np.log(2.0), np.log(12.0), size=(K, 3)),
        coeff=rng.uniform(-0.9, 0.9, size=(K, 3)),
    )


class TestConfigs:
    @pytest.mark.parametrize("name", ABLATIONS)
    def test_touches_only_its_fields(self, name):
        base = desk_config()
        cfg, lik = ablation_config(name, base)
        assert config_diff(base, cfg) == ABLATION_FIELDS[name]
        assert lik == cfg.likelihood
        cfg.validate()

    def test_baseline_is_identity(self):
        base = desk_config()
        assert ablation_config("baseline", base)[0] == base

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown ablation"):
            ablation_config("no_gates")

    def test_small_field_plain_geometry(self):
        cfg, _ = ablation_config("small_field_plain")
        assert not cfg.use_downsampling and cfg.small_field == FIELD_11X5

    def test_small_field_plain_probe(self):
        cfg, _ = ablation_config("small_field_plain", desk_config(n_filters=4, K=1))
        assert field_mismatches(Model(cfg, seed=0), 12, 12) == []


class TestSoftmaxHead:
    def test_zero_head_scores_eight_bits(self):
        # exact in float64; float32 rounds log(256) and lands about 1e-6 low
        cfg = desk_config(n_filters=8, layers_per_block=1, likelihood="softmax", dtype="float64")
        model = Model(cfg, seed=0)
        for k in ("head.w", "head.b"):
            model.params[k] = T.Tensor(np.zeros_like(model.params[k].data), requires_grad=True)
        x = np.random.default_rng(0).integers(0, 256, size=(3, 8, 8, 3), dtype=np.uint8)
        assert evaluate(model, Dataset(x, None, "eval")) == 8.0

    def test_head_width(self):
        model = Model(desk_config(n_filters=8, layers_per_block=1, likelihood="softmax"), seed=0)
        assert forward(model, preprocess(np.zeros((1, 4, 4, 3), dtype=np.uint8))).shape == (1, 4, 4, 1536)

    def test_conditionals_normalize_and_chain(self, rng):
        head = rng.normal(size=1536)
        lr = softmax_conditional_logprobs(head)
        lg = softmax_conditional_logprobs(head, 40)
        lb = softmax_conditional_logprobs(head, 40, 200)
        for lp in (lr, lg, lb):
            assert abs(np.exp(lp).sum() - 1) < 1e-12
        assert softmax_pixel_logprob((40, 200, 7), head) == pytest.approx(lr[40] + lg[200] + lb[7], abs=1e-10)

    def test_joint_sums_to_one_over_green_blue(self, rng):
        head = rng.normal(size=1536)
        total = sum(
            math.exp(softmax_conditional_logprobs(head, 9, g)[b] + softmax_conditional_logprobs(head, 9)[g])
            for g in range(256)
            for b in range(256)
        )
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_green_depends_on_red_through_coefficient(self, rng):
        head = np.zeros(1536)
        head[3 * 256 :].reshape(3, 256)[0, 255] = 2.0  # green-on-red weight on value 255
        p_lo = np.exp(softmax_conditional_logprobs(head, 0))[255]
        p_hi = np.exp(softmax_conditional_logprobs(head, 255))[255]
        assert p_hi > 1 / 256 > p_lo

    def test_gradient(self, rng):
        x = rng.integers(0, 256, size=(2, 3))
        gradcheck(lambda h: softmax_logprob(x, h).sum(), [rng.normal(size=(2, 1536))])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            softmax_logprob(np.zeros((2, 3), dtype=int), np.zeros((3, 1536)))


class TestDequantized:
    def test_density_peak(self):
        s = 3.0
        p = MixtureParams(np.zeros(1), np.full((1, 3), 100.0), np.full((1, 3), np.log(s)), np.zeros((1, 3)))
        lp = float(dequantized_logprob(np.array([100.0, 100.0, 100.0]), p).data)
        assert lp == pytest.approx(3 * math.log(1 / (4 * s)), abs=1e-12)

    def test_integrates_to_one(self, rng):
        # each conditional is a logistic density, so the mixture integrates to 1
        # over R^3; the trapezoid rule on a wide fine grid is spectrally accurate
        p = random_params(rng, K=2, spread=20.0)
        p = MixtureParams(p.logit_pi, p.mu, np.log(rng.uniform(2.0, 4.0, size=(2, 3))), p.coeff * 0.1)
        grid = np.linspace(127.5 - 220, 127.5 + 220, 241)
        h = grid[1] - grid[0]
        zg, zb = np.meshgrid(grid, grid, indexing="ij")
        n = zg.size
        flat = MixtureParams(*(np.broadcast_to(f, (n,) + f.shape) for f in (p.logit_pi, p.mu, p.log_s, p.coeff)))
        planes = []
        for zr in grid:
            z = np.stack([np.full(n, zr), zg.ravel(), zb.ravel()], axis=-1)
            dens = np.exp(dequantized_logprob(z, flat).data).reshape(zg.shape)
            planes.append(np.trapezoid(np.trapezoid(dens, dx=h), dx=h))
        assert abs(np.trapezoid(planes, dx=h) - 1) < 1e-6

    def test_dequantize_range(self, rng):
        x = rng.integers(0, 256, size=(50, 4, 4, 3))
        z = dequantize(x, np.random.default_rng(0))
        assert ((z >= x - 0.5) & (z < x + 0.5)).all()
        assert np.array_equal(z, dequantize(x, np.random.default_rng(0)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bound_below_discrete(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng)
        x = rng.integers(0, 256, size=3)
        z = dequantize(np.broadcast_to(x, (4000, 3)), rng)
        cont = dequantized_logprob(z, MixtureParams(*(np.broadcast_to(f, (4000,) + f.shape) for f in
                                                      (p.logit_pi, p.mu, p.log_s, p.coeff)))).data
        se = cont.std(ddof=1) / math.sqrt(len(cont))
        assert cont.mean() <= pixel_logprob(tuple(int(v) for v in x), p) + 3 * se

    def test_tiny_scale_finite(self):
        p = MixtureParams(np.zeros(1), np.full((1, 3), 5.0), np.full((1, 3), LOG_SCALE_MIN), np.zeros((1, 3)))
        assert np.isfinite(dequantized_logprob(np.array([5.2, 5.0, 4.9]), p).data)

    def test_gradient(self, rng):
        z = rng.uniform(0, 255, size=(3, 3))

        def f(lp, mu, ls, co):
            return dequantized_logprob(z, MixtureParams(lp, mu, ls, T.tanh(co))).sum()

        gradcheck(f, [rng.normal(size=(3, 2)), rng.uniform(50, 200, size=(3, 2, 3)),
                      rng.uniform(1, 3, size=(3, 2, 3)), rng.normal(size=(3, 2, 3))])

    def test_wrong_channels(self):
        p = MixtureParams(np.zeros(1), np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(T.ShapeError):
            dequantized_logprob(np.zeros(2), p)
