import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv.attack import decode_encodings
from gradinv.defenses import (DefenseConfig, EncodingRecord, encode_batch, grad_prune,
                              sample_coefficients)
from gradinv.models import GradientPacket


def _packet(rng, ties=False):
    grads = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=7), "c": rng.normal(size=(2, 3, 2))}
    if ties:
        for g in grads.values():
            g[...] = np.round(g, 0)
    return GradientPacket(grads, batch_size=1)


def _sort_oracle(flat, p):
    # full sort by (magnitude, index); the first floor(p*n) are zeroed
    z = math.floor(p * flat.size)
    order = sorted(range(flat.size), key=lambda i: (abs(flat[i]), i))
    out = flat.copy()
    out[order[:z]] = 0.0
    return out, z


@pytest.mark.parametrize("p", [0.0, 0.1, 0.5, 0.9, 0.97, 0.999])
@pytest.mark.parametrize("ties", [False, True])
def test_prune_matches_full_sort_oracle(p, ties):
    rng = np.random.default_rng(int(p * 1000) + ties)
    for _ in range(20):
        pkt = _packet(rng, ties)
        out = grad_prune(pkt, p)
        expect, z = _sort_oracle(pkt.flat(), p)
        np.testing.assert_array_equal(out.flat(), expect)
        changed = np.flatnonzero(out.flat() != pkt.flat())
        assert len(changed) <= z
        # zero count is exactly floor(p*n) when the input has no zeros
        if not ties:
            assert np.sum(out.flat() == 0) == z


def test_prune_per_layer_and_contract():
    rng = np.random.default_rng(0)
    pkt = _packet(rng)
    out = grad_prune(pkt, 0.5, per_layer=True)
    for k, g in pkt.grads.items():
        assert np.sum(out.grads[k] == 0) == math.floor(0.5 * g.size)
    assert grad_prune(pkt, 0.0).flat().tolist() == pkt.flat().tolist()
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            grad_prune(pkt, bad)
    assert out.grads["a"].shape == (4, 5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 0.99), st.floats(0, 0.99), st.integers(0, 2**31))
def test_prune_is_nested_in_p(p1, p2, seed):
    lo, hi = sorted((p1, p2))
    pkt = _packet(np.random.default_rng(seed))
    z_lo = grad_prune(pkt, lo).flat() == 0
    z_hi = grad_prune(pkt, hi).flat() == 0
    assert np.all(z_hi[z_lo])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_coefficients_on_bounded_simplex(k, slack, seed):
    ub = 1.0 / k + slack * (1.0 - 1.0 / k)
    lam = sample_coefficients(k, ub, np.random.default_rng(seed))
    assert lam.shape == (k,)
    assert np.all(lam >= 0)
    assert math.isclose(lam.sum(), 1.0, abs_tol=1e-12)
    assert lam.max() <= ub + 1e-12


def test_coefficient_edge_cases():
    rng = np.random.default_rng(0)
    assert sample_coefficients(1, 1.0, rng).tolist() == [1.0]
    np.testing.assert_allclose(sample_coefficients(4, 0.25, rng), 0.25)
    with pytest.raises(ValueError):
        sample_coefficients(4, 0.2, rng)
    draws = np.array([sample_coefficients(4, 0.65, rng) for _ in range(2000)])
    assert draws.max() <= 0.65
    np.testing.assert_allclose(draws.mean(axis=0), 0.25, atol=0.02)


def test_defense_config_validation():
    assert DefenseConfig().name == "none"
    assert DefenseConfig(mix_k=4, sign_flip=True, prune_ratio=0.9).name == "instahide(k=4)+gradprune(p=0.9)"
    assert DefenseConfig(mix_k=4).name == "mixup(k=4)"
    for kw in ({"prune_ratio": 1.0}, {"mix_k": 0}, {"mix_k": 4, "coef_upper_bound": 0.2}):
        with pytest.raises(ValueError):
            DefenseConfig(**kw)


def _images(rng, n=6, shape=(1, 4, 4)):
    return rng.uniform(size=(n,) + shape), rng.integers(0, 10, size=n)


def test_instahide_magnitude_equals_mixup():
    rng_img = np.random.default_rng(1)
    x, y = _images(rng_img)
    mix, soft_m, rec_m = encode_batch(x, y, DefenseConfig(mix_k=4), 0, np.random.default_rng(5))
    ins, soft_i, rec_i = encode_batch(x, y, DefenseConfig(mix_k=4, sign_flip=True), 0,
                                      np.random.default_rng(5))
    np.testing.assert_array_equal(np.abs(ins), np.abs(mix))
    np.testing.assert_array_equal(soft_m, soft_i)
    assert any(np.any(r.signs < 0) for r in rec_i)
    assert all(np.all(r.signs == 1) for r in rec_m)


def test_encoding_records_and_soft_labels():
    rng = np.random.default_rng(2)
    x, y = _images(rng)
    enc, soft, recs = encode_batch(x, y, DefenseConfig(mix_k=3, sign_flip=True), 7, rng)
    for i, r in enumerate(recs):
        assert r.indices[0] == i and len(set(r.indices)) == 3 and r.epoch == 7
        expect = r.signs * np.tensordot(r.coefficients, x[r.indices], axes=1)
        np.testing.assert_allclose(enc[i], expect, atol=1e-15)
        np.testing.assert_allclose(soft[i], r.coefficients @ np.eye(10)[y[r.indices]], atol=1e-15)
        back = EncodingRecord.from_dict(r.to_dict(), r.signs.shape)
        assert back.indices == r.indices
        np.testing.assert_array_equal(back.signs, r.signs)
        np.testing.assert_array_equal(back.coefficients, r.coefficients)
    with pytest.raises(ValueError):
        encode_batch(x[:2], y[:2], DefenseConfig(mix_k=3), 0, rng)


@pytest.mark.parametrize("sign_flip", [False, True])
def test_decode_recovers_privates_from_exact_encodings(sign_flip):
    rng = np.random.default_rng(3)
    x, y = _images(rng, n=8)
    cfg = DefenseConfig(mix_k=4, sign_flip=sign_flip)
    encs, recs = [], []
    for epoch in range(5):
        e, _, r = encode_batch(x, y, cfg, epoch, rng)
        encs.append(e)
        recs += r
    dec = decode_encodings(np.concatenate(encs), recs, len(x))
    assert not dec.underdetermined and dec.rank == len(x) and dec.missing == []
    assert np.max(np.abs(dec.images - x)) < 1e-10


def test_decode_flags_underdetermined_and_missing():
    x = np.random.default_rng(4).uniform(size=(3, 1, 2, 2))
    rec = EncodingRecord([0, 1], np.array([0.5, 0.5]), np.ones((1, 2, 2), np.int8), 0)
    dec = decode_encodings(0.5 * (x[0:1] + x[1:2]), [rec], 3)
    assert dec.underdetermined and dec.missing == [2]
    with pytest.raises(ValueError):
        decode_encodings(x, [rec], 3)


def test_coefficients_near_the_lower_bound_match_rejection_oracle():
    from scipy.stats import ks_2samp
    rng = np.random.default_rng(11)
    # bound barely above 1/k: plain rejection would almost never accept
    tight = np.array([sample_coefficients(8, 1 / 8 + 1e-9, rng) for _ in range(200)])
    assert tight.max() <= 1 / 8 + 1e-9 and np.allclose(tight.sum(axis=1), 1, atol=1e-12)
    # k=3, u=0.4 goes through the shifted parametrisation; compare to plain rejection
    ref = rng.dirichlet(np.ones(3), 100_000)
    ref = ref[ref.max(axis=1) <= 0.4]
    got = np.array([sample_coefficients(3, 0.4, rng) for _ in range(len(ref))])
    for j in range(3):
        assert ks_2samp(ref[:, j], got[:, j]).pvalue > 0.001
