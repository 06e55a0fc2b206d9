import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propshot import autodiff as ad
from propshot import cache as ch
from propshot import datastore as ds
from propshot import mpg
from propshot.errors import ArgumentError, DegeneratePrototype, ShapeMismatch


def _bundle(tokens_by_class, prompts, patches_by_class=None, shots=None):
    prompts = np.asarray(prompts, dtype=float)
    dim = prompts.shape[1]
    images, support = [], []
    shots = shots if shots is not None else len(tokens_by_class[0])
    for c, tokens in enumerate(tokens_by_class):
        for t_i, t in enumerate(tokens):
            patches = (np.asarray(patches_by_class[c], dtype=float)
                       if patches_by_class else np.atleast_2d(np.asarray(t, float)))
            support.append(len(images))
            images.append(ds.BundleImage(
                class_token=np.asarray(t, dtype=float), patches=patches, label=c))
    return ds.EmbeddingBundle(dim=dim, patch_count=images[0].patches.shape[0],
                              images=images, class_prompts=prompts,
                              support=support, query=[], shots=shots)


class TestZeroShot:
    def test_identity_case(self):
        out = ch.zero_shot(np.array([1.0, 0.0]), np.eye(2))
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_direct_product_oracle(self):
        out = ch.zero_shot(np.array([0.6, 0.8]), np.eye(2))
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-15)

    @settings(max_examples=25)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_entries_within_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=6)
        f /= np.linalg.norm(f)
        w = rng.normal(size=(4, 6))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        out = ch.zero_shot(f, w)
        assert np.all(out <= 1.0 + 1e-12) and np.all(out >= -1.0 - 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ch.zero_shot(np.ones(3), np.ones((2, 4)))


class TestPhi:
    def test_fixed_point_at_one(self):
        for beta_s in (0.5, 1.0, 5.5, 20.0):
            assert ch.phi(1.0, beta_s) == pytest.approx(1.0, abs=0.0)

    def test_scalar_evaluations(self):
        assert ch.phi(0.0, 1.0) == pytest.approx(math.exp(-1.0), abs=1e-12)
        assert ch.phi(0.0, 1.0) == pytest.approx(0.36788, abs=1e-5)
        assert ch.phi(0.8, 5.5) == pytest.approx(math.exp(-1.1), abs=1e-12)
        assert ch.phi(0.8, 5.5) == pytest.approx(0.33287, abs=1e-5)

    def test_strictly_increasing(self):
        xs = np.linspace(-1.0, 1.0, 21)
        ys = ch.phi(xs, 5.5)
        assert np.all(np.diff(ys) > 0)

    def test_requires_positive_sharpness(self):
        with pytest.raises(ArgumentError):
            ch.phi(0.5, 0.0)


class TestCacheLogits:
    def test_self_match_dominates(self):
        keys = np.eye(3)
        out = ch.cache_logits(keys[1], keys, np.eye(3), beta_s=5.5)
        assert out[1] == pytest.approx(1.0)
        assert np.all(out[[0, 2]] < 1.0)

    def test_composition_of_phi_examples(self):
        keys = np.eye(2)
        out = ch.cache_logits(keys[0], keys, np.eye(2), beta_s=1.0)
        np.testing.assert_allclose(out, [1.0, math.exp(-1.0)], atol=1e-12)

    def test_label_collapse(self):
        keys = np.eye(3)
        labels = np.zeros((3, 3))
        labels[:, 0] = 1.0
        out = ch.cache_logits(keys[2], keys, labels, beta_s=2.0)
        assert out[0] > 0 and out[1] == 0 and out[2] == 0

    def test_matches_naive_double_loop(self):
        rng = np.random.default_rng(44)
        for _ in range(100):
            n = int(rng.integers(2, 11))
            k_rows = n * int(rng.integers(1, 5))
            d = int(rng.integers(4, 17))
            f = rng.normal(size=d)
            f /= np.linalg.norm(f)
            keys = rng.normal(size=(k_rows, d))
            keys /= np.linalg.norm(keys, axis=1, keepdims=True)
            labels = np.zeros((k_rows, n))
            for r in range(k_rows):
                labels[r, int(rng.integers(n))] = 1.0
            got = ch.cache_logits(f, keys, labels, beta_s=5.5)
            want = np.zeros(n)
            for r in range(k_rows):
                a = math.exp(-5.5 * (1.0 - float(keys[r] @ f)))
                for c in range(n):
                    want[c] += a * labels[r, c]
            np.testing.assert_allclose(got, want, atol=1e-10)


class TestBuildCaches:
    def test_single_shot_prototypes_equal_tokens(self):
        e1, e2 = np.eye(2)
        bundle = _bundle([[e1], [e2]], prompts=np.eye(2), shots=1)
        params = mpg.init_params(1, 2, seed=0)
        cache = ch.build_caches(bundle, params)
        np.testing.assert_allclose(cache.class_keys, np.eye(2), atol=1e-12)
        assert cache.alpha == 1.0 and cache.beta == 1.0

    def test_antipodal_tokens_degenerate(self):
        e1, e2 = np.eye(2)
        bundle = _bundle([[e1, -e1], [e2, e2]], prompts=np.eye(2), shots=2)
        params = mpg.init_params(1, 2, seed=0)
        with pytest.raises(DegeneratePrototype):
            ch.build_caches(bundle, params)

    def test_planted_zero_noise_recovers_class_dirs(self):
        bundle, _, plant = ds.gen_synthetic(
            n_classes=3, shots=4, queries_per_class=0, dim=32,
            patches=3, m_props=2, noise=0.0, seed=2)
        params = mpg.init_params(2, 32, seed=2)
        cache = ch.build_caches(bundle, params)
        np.testing.assert_allclose(cache.class_keys, plant.class_dirs, atol=1e-12)

    def test_label_layout(self):
        bundle, _, _ = ds.gen_synthetic(
            n_classes=3, shots=2, queries_per_class=0, dim=32,
            patches=3, m_props=2, noise=0.1, seed=3)
        cache = ch.build_caches(bundle, mpg.init_params(2, 32, seed=3))
        assert cache.prop_labels.shape == (6, 3)
        np.testing.assert_array_equal(cache.prop_labels[2:4, 1], [1.0, 1.0])
        np.testing.assert_array_equal(cache.class_labels, np.eye(3))


def _tiny_cache(alpha=1.0, beta=1.0, logit_scale=1.0):
    return ch.HybridCache(
        class_keys=np.eye(2),
        class_labels=np.eye(2),
        prop_keys=np.eye(2),
        prop_labels=np.eye(2),
        alpha=alpha, beta=beta, beta_s=5.5, logit_scale=logit_scale, m_props=1)


class TestHybridScores:
    def test_zero_mixing_reduces_to_zero_shot(self):
        rng = np.random.default_rng(0)
        cache = _tiny_cache(alpha=0.0, beta=0.0)
        f = rng.normal(size=2)
        f /= np.linalg.norm(f)
        tokens = np.eye(2)[:1]
        prompts = np.eye(2)
        out = ch.hybrid_scores(f, tokens, cache, prompts)
        np.testing.assert_allclose(out.s_ours, 2.0 * out.s_clip, atol=1e-15)
        assert np.argmax(out.s_ours) == np.argmax(ch.zero_shot(f, prompts))

    def test_single_token_is_single_cache_call(self):
        cache = _tiny_cache()
        f = np.array([1.0, 0.0])
        tokens = np.array([[0.0, 1.0]])
        out = ch.hybrid_scores(f, tokens, cache, np.eye(2))
        direct = ch.cache_logits(tokens[0], cache.prop_keys, cache.prop_labels, 5.5)
        np.testing.assert_allclose(out.s_mp_cache, out.s_clip + direct, atol=1e-15)

    def test_matches_straight_line_reimplementation(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 11))
            m = int(rng.integers(1, 4))
            d = int(rng.integers(4, 17))
            prompts = rng.normal(size=(n, d))
            prompts /= np.linalg.norm(prompts, axis=1, keepdims=True)
            class_keys = rng.normal(size=(n, d))
            class_keys /= np.linalg.norm(class_keys, axis=1, keepdims=True)
            prop_keys = rng.normal(size=(n * m, d))
            prop_keys /= np.linalg.norm(prop_keys, axis=1, keepdims=True)
            prop_labels = np.zeros((n * m, n))
            for c in range(n):
                prop_labels[c * m:(c + 1) * m, c] = 1.0
            alpha, beta = float(rng.uniform(0, 2)), float(rng.uniform(0, 2))
            scale = float(rng.uniform(0.5, 10))
            cache = ch.HybridCache(
                class_keys=class_keys, class_labels=np.eye(n),
                prop_keys=prop_keys, prop_labels=prop_labels,
                alpha=alpha, beta=beta, beta_s=5.5, logit_scale=scale, m_props=m)
            f = rng.normal(size=d)
            f /= np.linalg.norm(f)
            tokens = rng.normal(size=(m, d))
            tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)

            got = ch.hybrid_scores(f, tokens, cache, prompts)
            s_clip = scale * (prompts @ f)
            cls = np.exp(-5.5 * (1.0 - class_keys @ f)) @ np.eye(n)
            prop = np.zeros(n)
            for i in range(m):
                prop += np.exp(-5.5 * (1.0 - prop_keys @ tokens[i])) @ prop_labels
            want_mp = s_clip + alpha * prop / m
            want_cls = s_clip + beta * cls
            np.testing.assert_allclose(got.s_mp_cache, want_mp, atol=1e-10)
            np.testing.assert_allclose(got.s_cls_cache, want_cls, atol=1e-10)
            np.testing.assert_allclose(got.s_ours, want_mp + want_cls, atol=1e-10)

    @settings(max_examples=25)
    @given(st.integers(min_value=0, max_value=2**32 - 1),
           st.floats(min_value=-5.0, max_value=5.0))
    def test_argmax_invariant_to_constant_shift(self, seed, shift):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=6)
        assert np.argmax(scores) == np.argmax(scores + shift)


class TestPredict:
    def test_tie_breaks_to_lowest_index(self):
        s = np.array([0.2, 0.9, 0.9])
        assert int(np.argmax(s)) == 1

    def test_zero_mixing_equals_zero_shot_prediction(self):
        rng = np.random.default_rng(1)
        cache = _tiny_cache(alpha=0.0, beta=0.0)
        for _ in range(20):
            f = rng.normal(size=2)
            f /= np.linalg.norm(f)
            label, _ = ch.predict(f, np.eye(2)[:1], cache, np.eye(2))
            assert label == int(np.argmax(ch.zero_shot(f, np.eye(2))))

    def test_planted_zero_noise_query_is_recovered(self):
        bundle, _, _ = ds.gen_synthetic(
            n_classes=4, shots=2, queries_per_class=3, dim=32,
            patches=3, m_props=2, noise=0.0, seed=5)
        params = mpg.init_params(2, 32, seed=5)
        cache = ch.build_caches(bundle, params)
        for q in bundle.query:
            image = bundle.images[q]
            tokens = mpg.forward(params, image.patches).unit.value
            label, _ = ch.predict(image.class_token, tokens, cache,
                                  bundle.class_prompts)
            assert label == image.label


@pytest.fixture(scope="module")
def planted():
    bundle, _, _ = ds.gen_synthetic(
        n_classes=4, shots=6, queries_per_class=4, dim=32,
        patches=4, m_props=2, noise=0.1, seed=6)
    params = mpg.init_params(2, 32, seed=6)
    cache = ch.build_caches(bundle, params, logit_scale=2.0)
    return bundle, params, cache


class TestTrainCache:
    def test_cross_entropy_scalar_oracle(self):
        logits = ad.leaf(np.array([[math.log(2.0), 0.0]]))
        loss = ch.cross_entropy(logits, 0)
        assert float(loss.value) == pytest.approx(math.log(1.5), abs=1e-12)
        assert float(loss.value) == pytest.approx(0.40546, abs=1e-5)

    def test_zero_lr_keeps_cache_unchanged(self, planted):
        bundle, params, cache = planted
        tuned, _ = ch.train_cache(bundle, cache, params, epochs=2, lr=0.0, seed=0)
        np.testing.assert_array_equal(tuned.class_keys, cache.class_keys)
        np.testing.assert_array_equal(tuned.prop_keys, cache.prop_keys)
        assert tuned.alpha == cache.alpha and tuned.beta == cache.beta

    def test_loss_decreases_and_support_accuracy_holds(self, planted):
        bundle, params, cache = planted

        def support_accuracy(c):
            hits = 0
            for j in bundle.support:
                image = bundle.images[j]
                tokens = mpg.forward(params, image.patches).unit.value
                label, _ = ch.predict(image.class_token, tokens, c,
                                      bundle.class_prompts)
                hits += int(label == image.label)
            return hits / len(bundle.support)

        before = support_accuracy(cache)
        tuned, trace = ch.train_cache(bundle, cache, params, epochs=15,
                                      batch_size=16, seed=1)
        assert trace[-1]["mean_loss"] < trace[0]["mean_loss"]
        assert support_accuracy(tuned) >= before
        assert tuned.trained

    def test_keys_stay_unit_norm(self, planted):
        bundle, params, cache = planted
        tuned, _ = ch.train_cache(bundle, cache, params, epochs=3,
                                  batch_size=8, seed=2)
        np.testing.assert_allclose(
            np.linalg.norm(tuned.class_keys, axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(
            np.linalg.norm(tuned.prop_keys, axis=1), 1.0, atol=1e-9)

    def test_deterministic_per_seed(self, planted):
        bundle, params, cache = planted
        a, ta = ch.train_cache(bundle, cache, params, epochs=3, seed=5)
        b, tb = ch.train_cache(bundle, cache, params, epochs=3, seed=5)
        np.testing.assert_array_equal(a.class_keys, b.class_keys)
        np.testing.assert_array_equal(a.prop_keys, b.prop_keys)
        assert a.alpha == b.alpha and ta == tb

    def test_gradients_match_finite_differences(self):
        # Eq.-7-style loss on a 3-class toy: d/d(alpha, beta, keys) via tape
        rng = np.random.default_rng(3)
        n, m, d = 3, 2, 8
        prompts = rng.normal(size=(n, d))
        prompts /= np.linalg.norm(prompts, axis=1, keepdims=True)
        f = rng.normal(size=d)
        f /= np.linalg.norm(f)
        tokens = rng.normal(size=(m, d))
        tokens /= np.linalg.norm(tokens, axis=1, keepdims=True)
        prop_labels = np.zeros((n * m, n))
        for c in range(n):
            prop_labels[c * m:(c + 1) * m, c] = 1.0
        s_clip = 2.0 * (prompts @ f)
        label = 1

        def build(leaves):
            cls_term = ch._cache_logits_node(f, leaves["class_keys"],
                                             np.eye(n), 5.5)
            s_cls = ad.add(s_clip[None, :], ad.mul(cls_term, leaves["beta"]))
            prop = None
            for i in range(m):
                one = ch._cache_logits_node(tokens[i], leaves["prop_keys"],
                                            prop_labels, 5.5)
                prop = one if prop is None else ad.add(prop, one)
            s_mp = ad.add(s_clip[None, :],
                          ad.mul(ad.mul(prop, 1.0 / m), leaves["alpha"]))
            return ad.add(ch.cross_entropy(s_cls, label),
                          ch.cross_entropy(s_mp, label))

        keys0 = rng.normal(size=(n, d))
        keys0 /= np.linalg.norm(keys0, axis=1, keepdims=True)
        pkeys0 = rng.normal(size=(n * m, d))
        pkeys0 /= np.linalg.norm(pkeys0, axis=1, keepdims=True)
        err = ad.check_gradients(build, {
            "class_keys": keys0, "prop_keys": pkeys0,
            "alpha": np.array([1.0]), "beta": np.array([1.0])})
        assert err < 1e-4


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        bundle, _, _ = ds.gen_synthetic(
            n_classes=3, shots=2, queries_per_class=0, dim=32,
            patches=3, m_props=2, noise=0.1, seed=8)
        cache = ch.build_caches(bundle, mpg.init_params(2, 32, seed=8))
        ch.save_cache(tmp_path, cache)
        back = ch.load_cache(tmp_path)
        np.testing.assert_array_equal(back.class_keys, cache.class_keys)
        np.testing.assert_array_equal(back.prop_keys, cache.prop_keys)
        np.testing.assert_array_equal(back.prop_labels, cache.prop_labels)
        assert back.alpha == cache.alpha
        assert back.trained == cache.trained
