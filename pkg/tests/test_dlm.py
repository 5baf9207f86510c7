import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalpix import tensor as T
from causalpix.dlm import (
    LOG_SCALE_MIN,
    MixtureParams,
    Pixel,
    channel_logprob,
    conditional_logprobs,
    image_logprob,
    mixture_logprob,
    pixel_logprob,
    sample_pixel,
    sample_pixels,
    unpack_head,
)
from conftest import numeric_grad, rel_err

VALUES = np.arange(256)


def mp_channel(x, mu, s):
    """High-precision bin mass with the edge rule, straight from the definition."""
    with mpmath.workdps(500):
        x, mu, s = (mpmath.mpf(float(v)) for v in (x, mu, s))
        sig = lambda z: 1 / (1 + mpmath.exp(-z))  # noqa: E731
        hi = mpmath.mpf(1) if x >= 255 else sig((x + 0.5 - mu) / s)
        lo = mpmath.mpf(0) if x <= 0 else sig((x - 0.5 - mu) / s)
        return hi - lo


def mp_pixel_logprob(pixel, raw, K):
    """Scalar high-precision reference for one pixel from a raw head vector."""
    with mpmath.workdps(500):
        r, g, b = (int(v) for v in pixel)
        rc, gc = mpmath.mpf(r) / 127.5 - 1, mpmath.mpf(g) / 127.5 - 1
        logits, terms = [], []
        for k in range(K):
            c = [mpmath.mpf(float(v)) for v in raw[10 * k : 10 * k + 10]]
            logits.append(c[0])
            mu = [127.5 * (m + 1) for m in c[1:4]]
            s = [mpmath.exp(max(v, -7) + mpmath.log(127.5)) for v in c[4:7]]
            al, be, ga = (mpmath.tanh(v) for v in c[7:10])
            p = mp_channel(r, mu[0], s[0])
            p *= mp_channel(g, mu[1] + 127.5 * al * rc, s[1])
            p *= mp_channel(b, mu[2] + 127.5 * (be * rc + ga * gc), s[2])
            terms.append(p)
        z = mpmath.fsum(mpmath.exp(v) for v in logits)
        return float(mpmath.log(mpmath.fsum(mpmath.exp(lg) / z * p for lg, p in zip(logits, terms))))


def random_params(rng, K, lead=(), mu_scale=60.0):
    return MixtureParams(
        logit_pi=rng.normal(size=lead + (K,)),
        mu=rng.uniform(-20, 275, size=lead + (K, 3)) if mu_scale is None else 127.5 + rng.normal(size=lead + (K, 3)) * mu_scale,
        log_s=rng.uniform(LOG_SCALE_MIN, 4.0, size=lead + (K, 3)),
        coeff=np.tanh(rng.normal(size=lead + (K, 3))),
    )


class TestChannelLogprob:
    def test_left_edge_example(self):
        # x=0, mu=0, s=1: P = sigmoid(0.5)
        assert channel_logprob(0, 0.0, 1.0) == pytest.approx(-0.474076984180107, abs=1e-14)

    def test_interior_example(self):
        # high-precision value of sigmoid(0) - sigmoid(-0.1)
        assert math.exp(channel_logprob(127, 127.5, 10.0)) == pytest.approx(0.024979187478939987, rel=1e-13)

    @pytest.mark.parametrize("s", [0.01, 0.5, 3.0, 40.0, 1e4])
    def test_symmetry_about_mean(self, s):
        assert channel_logprob(127, 127.5, s) == pytest.approx(channel_logprob(128, 127.5, s), rel=1e-12)

    def test_matches_high_precision(self, rng):
        for _ in range(200):
            x = int(rng.integers(0, 256))
            mu = rng.uniform(-300, 600)
            s = math.exp(rng.uniform(LOG_SCALE_MIN, 6))
            ref = mp_channel(x, mu, s)
            got = channel_logprob(x, mu, s)
            if ref > 1e-300:
                assert got == pytest.approx(float(mpmath.log(ref)), rel=1e-9, abs=1e-12)
            assert np.isfinite(got)

    def test_finite_far_in_the_tail(self):
        assert np.isfinite(channel_logprob(255, -1e4, math.exp(LOG_SCALE_MIN)))
        assert np.isfinite(channel_logprob(3, 1e4, 1.0))

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            channel_logprob(3, 0.0, 0.0)
        with pytest.raises(ValueError):
            channel_logprob(3, 0.0, -1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e4, 1e4), st.floats(LOG_SCALE_MIN, 9.0))
    def test_normalization(self, mu, log_s):
        total = np.exp(channel_logprob(VALUES, mu, math.exp(log_s))).sum()
        assert abs(total - 1.0) <= 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-500, 0), st.floats(LOG_SCALE_MIN, 8.0))
    def test_edge_mass_left(self, mu, log_s):
        s = math.exp(log_s)
        assert channel_logprob(0, mu, s) > channel_logprob(1, mu, s)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(255, 800), st.floats(LOG_SCALE_MIN, 8.0))
    def test_edge_mass_right(self, mu, log_s):
        s = math.exp(log_s)
        assert channel_logprob(255, mu, s) > channel_logprob(254, mu, s)


class TestUnpackHead:
    def test_zero_raw(self):
        p = unpack_head(np.zeros(50), 5).numpy()
        np.testing.assert_array_equal(p.logit_pi, 0.0)
        np.testing.assert_array_equal(p.mu, 127.5)
        np.testing.assert_allclose(np.exp(p.log_s), 127.5, rtol=1e-15)
        np.testing.assert_array_equal(p.coeff, 0.0)

    def test_clamp_engages(self):
        raw = np.zeros(10)
        raw[4:7] = -1000.0
        p = unpack_head(raw, 1).numpy()
        np.testing.assert_allclose(p.log_s, LOG_SCALE_MIN)
        assert (np.exp(p.log_s) > 0).all()

    def test_wrong_channel_count(self):
        with pytest.raises(ValueError):
            unpack_head(np.zeros(49), 5)

    def test_random_raw_is_finite(self, rng):
        raws = rng.normal(size=(10_000, 20)) * 5
        pixels = rng.integers(0, 256, size=(10_000, 3))
        lp = mixture_logprob(pixels, unpack_head(raws, 2)).data
        assert np.isfinite(lp).all()
        assert (lp <= 0).all()

    def test_mixture_weights_normalize(self, rng):
        p = unpack_head(rng.normal(size=(7, 30)) * 20, 3).numpy()
        w = np.exp(p.logit_pi - np.logaddexp.reduce(p.logit_pi, axis=-1, keepdims=True))
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        assert (np.abs(p.coeff) <= 1).all()
        assert (np.abs(unpack_head(rng.normal(size=30), 3).numpy().coeff) < 1).all()


class TestPixelLogprob:
    def test_single_component_factorizes(self, rng):
        p = random_params(rng, 1)
        p = MixtureParams(p.logit_pi, p.mu, p.log_s, np.zeros((1, 3)))
        px = Pixel(10, 200, 255)
        expected = sum(channel_logprob(v, p.mu[0, c], math.exp(p.log_s[0, c])) for c, v in enumerate(px))
        assert pixel_logprob(px, p) == pytest.approx(expected, rel=1e-12)

    def test_green_mean_shift(self):
        mu = np.array([[100.0, 50.0, 30.0]])
        log_s = np.log(np.array([[5.0, 3.0, 7.0]]))
        coeff = np.array([[0.4, 0.0, 0.0]])
        r, g, b = 200, 90, 31
        got = pixel_logprob((r, g, b), MixtureParams(np.zeros(1), mu, log_s, coeff))
        shifted = 50.0 + 0.4 * (r / 127.5 - 1) * 127.5
        expected = channel_logprob(r, 100.0, 5.0) + channel_logprob(g, shifted, 3.0) + channel_logprob(b, 30.0, 7.0)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_matches_high_precision_oracle(self, rng):
        for _ in range(60):
            raw = rng.normal(size=30) * 1.5
            px = rng.integers(0, 256, size=3)
            got = pixel_logprob(px, unpack_head(raw, 3))
            assert got == pytest.approx(mp_pixel_logprob(px, raw, 3), rel=1e-9)

    def test_shared_indicator_couples_channels(self):
        # two well separated components: (dark, dark, dark) and (bright, bright, bright)
        mu = np.array([[20.0, 20.0, 20.0], [235.0, 235.0, 235.0]])
        p = MixtureParams(np.zeros(2), mu, np.log(np.full((2, 3), 4.0)), np.zeros((2, 3)))
        joint = pixel_logprob((20, 235, 20), p)
        marginals = sum(float(conditional_logprobs(MixtureParams(p.logit_pi, p.mu[:, [c] * 3], p.log_s, p.coeff))[v])
                        for c, v in enumerate((20, 235, 20)))
        assert joint < marginals - 10.0

    def test_invalid_pixel(self, rng):
        with pytest.raises(ValueError):
            pixel_logprob((0, 256, 3), random_params(rng, 2))

    def test_invalid_params(self, rng):
        p = random_params(rng, 2)
        with pytest.raises(ValueError):
            pixel_logprob((1, 2, 3), MixtureParams(p.logit_pi, p.mu, p.log_s, p.coeff * 0 + 1.5))
        with pytest.raises(ValueError):
            pixel_logprob((1, 2, 3), MixtureParams(p.logit_pi, p.mu, p.log_s - 100, p.coeff))

    def test_gradients_through_unpack(self, rng):
        for x in ([0, 1, 254], [255, 0, 1], [254, 255, 128]):
            raw = rng.normal(size=20)
            t = T.Tensor(raw, requires_grad=True)
            with T.Tape() as tape:
                out = mixture_logprob(np.array(x), unpack_head(t, 2))
            (ad,) = T.backward(tape, out, [t])
            (fd,) = numeric_grad(lambda r: float(mixture_logprob(np.array(x), unpack_head(r, 2)).data), [raw])
            assert rel_err(ad, fd) < 1e-4


class TestChainNormalization:
    def test_every_conditional_sums_to_one(self, rng):
        for _ in range(30):
            p = random_params(rng, 3)
            r, g = (int(v) for v in rng.integers(0, 256, size=2))
            for lp in (conditional_logprobs(p), conditional_logprobs(p, r), conditional_logprobs(p, r, g)):
                assert abs(np.exp(lp).sum() - 1.0) <= 1e-10

    def test_chain_rule_matches_pixel_logprob(self, rng):
        p = random_params(rng, 4)
        r, g, b = 17, 140, 250
        chain = conditional_logprobs(p)[r] + conditional_logprobs(p, r)[g] + conditional_logprobs(p, r, g)[b]
        assert chain == pytest.approx(pixel_logprob((r, g, b), p), rel=1e-10)

    def test_joint_sums_to_one_on_coarse_scales(self):
        # brute force over all 256^3 pixels would be slow; wide scales with a
        # fixed red value still exercise the whole (g, b) table
        p = MixtureParams(np.array([0.3, -0.2]), np.array([[60.0, 80.0, 200.0], [180.0, 40.0, 20.0]]),
                          np.log(np.full((2, 3), 30.0)), np.array([[0.5, -0.3, 0.2], [-0.6, 0.1, 0.9]]))
        red = conditional_logprobs(p)
        r = 90
        green = conditional_logprobs(p, r)
        gb = np.stack([green[g] + conditional_logprobs(p, r, g) for g in range(256)])
        assert abs(np.exp(gb).sum() - 1.0) < 1e-10
        assert abs(np.exp(red).sum() - 1.0) < 1e-10


class TestImageLogprob:
    def test_single_pixel_image(self, rng):
        raw = rng.normal(size=(1, 1, 20))
        img = np.array([[[3, 100, 250]]])
        assert image_logprob(img, raw, 2) == pytest.approx(pixel_logprob(img[0, 0], unpack_head(raw[0, 0], 2)))

    def test_identical_params_two_by_two(self, rng):
        raw = np.broadcast_to(rng.normal(size=20), (2, 2, 20))
        img = np.broadcast_to(np.array([5, 6, 7]), (2, 2, 3))
        single = pixel_logprob((5, 6, 7), unpack_head(raw[0, 0], 2))
        assert image_logprob(img, raw, 2) == pytest.approx(4 * single, rel=1e-12)

    def test_matches_scalar_oracle(self, rng):
        raw = rng.normal(size=(3, 2, 20))
        img = rng.integers(0, 256, size=(3, 2, 3))
        ref = sum(mp_pixel_logprob(img[i, j], raw[i, j], 2) for i in range(3) for j in range(2))
        assert image_logprob(img, raw, 2) == pytest.approx(ref, rel=1e-10)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            image_logprob(np.zeros((2, 2, 3), dtype=int), rng.normal(size=(2, 3, 20)), 2)


class _Const:
    """Stand-in RNG returning a constant uniform."""

    def __init__(self, u):
        self.u = u

    def random(self, size):
        return np.full(size, self.u)


class TestSampler:
    def test_median_draw_is_rounded_mean(self):
        mu = np.array([[12.4, 300.0, -7.0]])
        p = MixtureParams(np.zeros(1), mu, np.zeros((1, 3)), np.zeros((1, 3)))
        assert sample_pixel(p, _Const(0.5)) == Pixel(12, 255, 0)

    def test_ties_round_to_even(self):
        mu = np.array([[12.5, 13.5, 0.0]])
        p = MixtureParams(np.zeros(1), mu, np.zeros((1, 3)), np.zeros((1, 3)))
        assert sample_pixel(p, _Const(0.5))[:2] == (12, 14)

    def test_degenerate_scale_clamps(self, rng):
        mu = np.array([[300.0, 10.0, 10.0]])
        p = MixtureParams(np.zeros(1), mu, np.full((1, 3), LOG_SCALE_MIN), np.zeros((1, 3)))
        for _ in range(20):
            assert sample_pixel(p, rng).r == 255

    def test_seeded_draws_reproduce(self, rng):
        p = random_params(rng, 3, lead=(5,))
        a = sample_pixels(p, np.random.default_rng(9))
        b = sample_pixels(p, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_histogram_close_to_pmf(self):
        # smaller cousin of the acceptance check: 2e5 draws, red marginal
        p = MixtureParams(np.array([0.4, -0.4]), np.array([[70.0, 0, 0], [190.0, 0, 0]]),
                          np.log(np.array([[6.0, 5, 5], [4.0, 5, 5]])), np.zeros((2, 3)))
        lead = MixtureParams(*(np.broadcast_to(f, (200_000,) + f.shape) for f in (p.logit_pi, p.mu, p.log_s, p.coeff)))
        draws = sample_pixels(lead, np.random.default_rng(0))
        hist = np.bincount(draws[:, 0], minlength=256) / len(draws)
        tv = 0.5 * np.abs(hist - np.exp(conditional_logprobs(p))).sum()
        assert tv < 0.01
