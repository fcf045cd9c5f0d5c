import numpy as np
import pytest

from tshm import CooTensor, KruskalModel, build_plan, cp_als, mttkrp, split_parts, whole_part
from tshm.bench import gen_synthetic
from tshm.cpd import decode_model, encode_model
from tshm.errors import ProtocolError

from conftest import random_tensor


# -- dense oracle --------------------------------------------------------------


def dense_mttkrp(t: CooTensor, factors, mode):
    """Brute-force MTTKRP by materializing the dense tensor and contracting
    with einsum; independent of the sparse accumulation path."""
    dense = np.zeros(t.dims)
    c2 = t.coords2d
    for i in range(t.nnz):
        dense[tuple(int(x) for x in c2[i])] += t.values[i]
    d = t.order
    letters = "abcdefgh"[:d]
    operands = [dense]
    spec = [letters]
    for q in range(d):
        if q != mode:
            operands.append(factors[q])
            spec.append(f"{letters[q]}r")
    return np.einsum(",".join(spec) + f"->{letters[mode]}r", *operands)


def dense_reconstruct(model: KruskalModel):
    d = model.order
    letters = "abcdefgh"[:d]
    spec = ",".join(f"{letters[m]}r" for m in range(d)) + "->" + letters
    return np.einsum("r," + spec, model.weights, *model.factors)


# -- mttkrp ----------------------------------------------------------------------


def test_mttkrp_scalar_case():
    # single element at (0,0) with value 2, second-mode factor [[3]]
    t = CooTensor((1, 1), np.array([0, 0], dtype=np.uint64), np.array([2.0]))
    factors = [np.array([[1.0]]), np.array([[3.0]])]
    out = mttkrp(whole_part(t), factors, 0)
    assert out.shape == (1, 1)
    assert out[0, 0] == 6.0


def test_mttkrp_matches_dense_oracle(rng):
    for dims in [(4, 5), (4, 4, 4), (8, 8, 8), (3, 4, 5, 3)]:
        assert np.prod(dims) <= 512
        t = random_tensor(rng, dims, int(np.prod(dims) // 3), distinct=False)
        factors = [rng.standard_normal((n, 2)) for n in dims]
        for mode in range(len(dims)):
            got = mttkrp(whole_part(t), factors, mode)
            want = dense_mttkrp(t, factors, mode)
            assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_mttkrp_all_ones_is_marginal_sum(rng):
    t = random_tensor(rng, (6, 7, 8), 100, distinct=False)
    factors = [np.ones((n, 3)) for n in t.dims]
    for mode in range(3):
        out = mttkrp(whole_part(t), factors, mode)
        marginal = np.zeros(t.dims[mode])
        np.add.at(marginal, t.coords2d[:, mode].astype(np.int64), t.values)
        for r in range(3):
            assert np.allclose(out[:, r], marginal, rtol=1e-12)


def test_mttkrp_partition_sum_equals_whole(rng):
    t = random_tensor(rng, (9, 8, 7), 150, distinct=False)
    plan = build_plan(t, 4)
    factors = [rng.random((n, 2)) for n in t.dims]
    split = mttkrp(split_parts(t, plan), factors, 1)
    whole = mttkrp(whole_part(t), factors, 1)
    assert np.allclose(split, whole, rtol=1e-12)


def test_mttkrp_shape_mismatch():
    t = CooTensor((2, 2), np.array([0, 0], dtype=np.uint64), np.array([1.0]))
    with pytest.raises(ValueError, match="rank"):
        mttkrp(whole_part(t), [np.ones((2, 2)), np.ones((2, 3))], 0)


# -- cp_als ------------------------------------------------------------------------


def test_cp_als_recovers_rank1_dense():
    t = gen_synthetic((8, 8, 8), rank=1, density=1.0, noise=0.0, seed=42)
    res = cp_als(whole_part(t), t.dims, rank=1, iterations=20, seed=7)
    assert res.fit >= 0.999


def test_cp_als_rank3_with_noise():
    t = gen_synthetic((10, 9, 8), rank=3, density=1.0, noise=1e-3, seed=103)
    res = cp_als(whole_part(t), t.dims, rank=3, iterations=50, seed=3)
    assert res.fit >= 0.99


def test_cp_als_deterministic(rng):
    t = random_tensor(rng, (6, 5, 4), 30)
    a = cp_als(whole_part(t), t.dims, 2, 5, seed=11)
    b = cp_als(whole_part(t), t.dims, 2, 5, seed=11)
    assert a.model == b.model
    assert a.fit == b.fit


def test_cp_als_fit_monotone(rng):
    t = random_tensor(rng, (7, 6, 5), 60)
    res = cp_als(whole_part(t), t.dims, 3, 25, seed=5)
    for earlier, later in zip(res.fit_trace, res.fit_trace[1:]):
        assert later >= earlier - 1e-9


def test_cp_als_columns_unit_norm(rng):
    t = random_tensor(rng, (6, 6, 6), 50)
    res = cp_als(whole_part(t), t.dims, 2, 10, seed=9)
    for f in res.model.factors:
        norms = np.linalg.norm(f, axis=0)
        assert np.all(np.abs(norms - 1.0) <= 1e-12)
    assert np.all(res.model.weights >= 0)


def test_cp_als_rank_deficient_warns_not_aborts():
    # rank-1 data decomposed at rank 3: Gram goes singular, pinv absorbs it
    t = gen_synthetic((6, 6, 6), rank=1, density=1.0, noise=0.0, seed=5)
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        res = cp_als(whole_part(t), t.dims, rank=3, iterations=12, seed=2)
    assert np.isfinite(res.fit)
    assert res.fit >= 0.999


def test_cp_als_fit_against_explicit_reconstruction(rng):
    # the sparse-identity fit must equal the definition computed densely
    t = random_tensor(rng, (5, 4, 6), 40)
    res = cp_als(whole_part(t), t.dims, 2, 8, seed=13)
    dense = np.zeros(t.dims)
    c2 = t.coords2d
    for i in range(t.nnz):
        dense[tuple(int(x) for x in c2[i])] += t.values[i]
    resid = np.linalg.norm(dense - dense_reconstruct(res.model))
    fit = 1.0 - resid / np.linalg.norm(dense)
    assert res.fit == pytest.approx(fit, abs=1e-9)


def test_cp_als_validates_args(rng):
    t = random_tensor(rng, (3, 3), 4)
    with pytest.raises(ValueError):
        cp_als(whole_part(t), t.dims, 0, 5, seed=1)
    with pytest.raises(ValueError):
        cp_als(whole_part(t), t.dims, 2, 0, seed=1)


# -- result wire format ---------------------------------------------------------


def test_model_encode_decode_roundtrip(rng):
    model = KruskalModel(
        weights=rng.random(3),
        factors=[rng.standard_normal((5, 3)), rng.standard_normal((4, 3))],
    )
    back = decode_model(encode_model(model))
    assert back == model


def test_model_roundtrip_degenerate():
    model = KruskalModel(weights=np.array([2.5]), factors=[np.array([[1.0]])])
    back = decode_model(encode_model(model))
    assert back == model
    assert back.dims == (1,)


def test_decode_rejects_garbage():
    with pytest.raises(ProtocolError, match="magic"):
        decode_model(b"\x00" * 64)
    with pytest.raises(ProtocolError, match="truncated"):
        decode_model(b"\x00" * 8)
    good = encode_model(KruskalModel(np.ones(2), [np.ones((3, 2))]))
    with pytest.raises(ProtocolError, match="truncated"):
        decode_model(good[:-8])
