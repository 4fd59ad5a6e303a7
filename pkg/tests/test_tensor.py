import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fpcpd.tensor import (
    DenseTensor3,
    FactorModel,
    fold,
    khatri_rao,
    load_tensor,
    load_tensor_csv,
    loss,
    reconstruct,
    rmse,
    save_tensor,
    save_tensor_csv,
    unfold,
)

from conftest import exact_tensor, random_model


def rank1(a, b, c):
    return FactorModel(np.array(a, float)[:, None], np.array(b, float)[:, None], np.array(c, float)[:, None])


# --------------------------------------------------------------------------- DenseTensor3


def test_canonical_layout_is_first_index_fastest():
    t = DenseTensor3.from_values((2, 3, 2), np.arange(12.0))
    assert t.data[1, 0, 0] == 1.0
    assert t.data[0, 1, 0] == 2.0
    assert t.data[0, 0, 1] == 6.0
    np.testing.assert_array_equal(t.values, np.arange(12.0))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_rejects_non_finite(bad):
    x = np.zeros((2, 2, 2))
    x[1, 0, 1] = bad
    with pytest.raises(ValueError, match="non-finite"):
        DenseTensor3(x)


def test_rejects_wrong_order_and_empty():
    with pytest.raises(ValueError):
        DenseTensor3(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        DenseTensor3(np.zeros((2, 0, 2)))
    with pytest.raises(ValueError):
        DenseTensor3.from_values((2, 2, 2), np.zeros(7))


def test_tensor_is_read_only_copy():
    src = np.ones((2, 2, 2))
    t = DenseTensor3(src)
    src[0, 0, 0] = 5.0
    assert t.data[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 2.0


# --------------------------------------------------------------------------- unfold / fold


def test_unfold_single_entry():
    t = DenseTensor3(np.full((1, 1, 1), 5.0))
    for mode in (1, 2, 3):
        np.testing.assert_array_equal(unfold(t, mode), [[5.0]])


def test_unfold_rank1_by_hand():
    t = reconstruct(rank1([1, 2], [1, 1], [1, 0]))
    np.testing.assert_array_equal(unfold(t, 1), [[1, 1, 0, 0], [2, 2, 0, 0]])


def test_unfold_shapes(small_tensor):
    assert unfold(small_tensor, 1).shape == (3, 20)
    assert unfold(small_tensor, 2).shape == (4, 15)
    assert unfold(small_tensor, 3).shape == (5, 12)


def test_unfold_column_order_matches_kolda_bader():
    X = np.arange(24.0).reshape((2, 3, 4), order="F")
    M = unfold(X, 2)
    # column index for mode 2 is i + I*k
    for i in range(2):
        for j in range(3):
            for k in range(4):
                assert M[j, i + 2 * k] == X[i, j, k]


def test_unfold_rejects_bad_mode(small_tensor):
    for mode in (0, 4, "1"):
        with pytest.raises(ValueError):
            unfold(small_tensor, mode)


def test_fold_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        fold(np.zeros((3, 19)), 1, (3, 4, 5))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(*[st.integers(1, 5)] * 3),
              elements=st.floats(-1e6, 1e6, allow_nan=False)),
       st.sampled_from([1, 2, 3]))
def test_fold_unfold_round_trip(x, mode):
    t = DenseTensor3(x)
    assert fold(unfold(t, mode), mode, t.dims) == t


# --------------------------------------------------------------------------- khatri_rao


def test_khatri_rao_by_hand():
    np.testing.assert_array_equal(khatri_rao([[1], [2]], [[3], [4]]), [[3], [4], [6], [8]])
    np.testing.assert_array_equal(khatri_rao([[2.5]], [[4.0]]), [[10.0]])


def test_khatri_rao_columns_are_kronecker(rng):
    m1, m2 = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    K = khatri_rao(m1, m2)
    assert K.shape == (20, 3)
    for r in range(3):
        np.testing.assert_allclose(K[:, r], np.kron(m1[:, r], m2[:, r]), rtol=0, atol=0)


def test_khatri_rao_rejects_column_mismatch():
    with pytest.raises(ValueError, match="column mismatch"):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


# --------------------------------------------------------------------------- reconstruct / loss / rmse


def test_reconstruct_rank1_by_hand():
    X = reconstruct(rank1([1, 2], [1, 1], [1, 0])).data
    np.testing.assert_array_equal(X[:, :, 0], [[1, 1], [2, 2]])
    np.testing.assert_array_equal(X[:, :, 1], 0)


def test_reconstruct_zero_factors():
    assert np.all(reconstruct(FactorModel.zeros((2, 3, 4), 2)).data == 0)


@pytest.mark.parametrize("mode,pair", [(1, ("C", "B", "A")), (2, ("C", "A", "B")), (3, ("B", "A", "C"))])
def test_cp_unfolding_identity(rng, mode, pair):
    f = random_model(rng, (3, 4, 5), 3)
    first, second, own = (getattr(f, n) for n in pair)
    expected = own @ khatri_rao(first, second).T
    np.testing.assert_allclose(unfold(reconstruct(f), mode), expected, atol=1e-10)


def test_loss_examples(rng):
    t, f = exact_tensor(rng, (4, 3, 5), 2)
    assert loss(t, f) < 1e-12
    assert loss(t, FactorModel.zeros(t.dims, 2)) == pytest.approx(t.norm_sq())
    ones = DenseTensor3(np.ones((2, 2, 2)))
    assert loss(ones, rank1([1, 1], [1, 1], [1, 1])) == 0.0
    assert rmse(ones, FactorModel.zeros((2, 2, 2), 1)) == 1.0


def test_rmse_loss_identity(rng, small_tensor):
    f = random_model(rng, small_tensor.dims, 2)
    assert rmse(small_tensor, f) ** 2 * small_tensor.size == pytest.approx(loss(small_tensor, f), abs=1e-10)


def test_loss_scale_indeterminacy(rng, small_tensor):
    f = random_model(rng, small_tensor.dims, 3)
    g = f.copy()
    alpha = np.array([2.0, -0.5, 7.0])
    g.A = g.A * alpha
    g.B = g.B / alpha
    assert loss(small_tensor, g) == pytest.approx(loss(small_tensor, f), rel=1e-12)


def test_loss_dimension_mismatch(small_tensor):
    with pytest.raises(ValueError, match="do not match"):
        loss(small_tensor, FactorModel.zeros((3, 4, 6), 1))


def test_factor_model_validation():
    with pytest.raises(ValueError, match="column counts"):
        FactorModel(np.ones((2, 2)), np.ones((2, 3)), np.ones((2, 2)))
    f = FactorModel.zeros((2, 3, 4), 2)
    assert f.rank == 2 and f.dims == (2, 3, 4)
    assert np.all(f.velA == 0) and f.velC.shape == (4, 2)


# --------------------------------------------------------------------------- I/O


def test_binary_round_trip_and_header(tmp_path, small_tensor):
    p = tmp_path / "x.fpt"
    save_tensor(p, small_tensor)
    raw = p.read_bytes()
    assert raw[:4] == b"FPT3"
    assert np.frombuffer(raw[4:28], "<u8").tolist() == [3, 4, 5]
    assert len(raw) == 28 + 8 * 60
    assert load_tensor(p) == small_tensor


def test_binary_rejects_corruption(tmp_path, small_tensor):
    p = tmp_path / "x.fpt"
    save_tensor(p, small_tensor)
    raw = p.read_bytes()
    (tmp_path / "magic.fpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.fpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="magic"):
        load_tensor(tmp_path / "magic.fpt")
    with pytest.raises(ValueError, match="payload"):
        load_tensor(tmp_path / "short.fpt")


def test_csv_round_trip_and_sparse_rows(tmp_path, small_tensor):
    p = tmp_path / "x.csv"
    save_tensor_csv(p, small_tensor)
    assert load_tensor_csv(p) == small_tensor
    q = tmp_path / "sparse.csv"
    q.write_text("0,0,0,1.5\n1,2,0,-2\n")
    t = load_tensor_csv(q, dims=(2, 3, 2))
    assert t.dims == (2, 3, 2)
    assert t.data[1, 2, 0] == -2.0 and t.norm_sq() == pytest.approx(1.5**2 + 4)


def test_csv_duplicate_coordinate_keeps_last(tmp_path):
    p = tmp_path / "dup.csv"
    p.write_text("i,j,k,value\n0,0,0,1\n1,1,1,2\n0,0,0,5\n")
    t = load_tensor_csv(p)
    assert t.data[0, 0, 0] == 5.0 and t.data[1, 1, 1] == 2.0


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("i,j,k,value\n0,0,0,1\n0,x,0,2\n")
    with pytest.raises(ValueError, match=":3:"):
        load_tensor_csv(p)
    p.write_text("0,0,5,1\n")
    with pytest.raises(ValueError, match="out of range"):
        load_tensor_csv(p, dims=(1, 1, 1))
