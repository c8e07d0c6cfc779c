import numpy as np
import pytest

from oracles import block_naive, encoder_naive, mha_naive, softmax_naive, sublayer
from refdic.errors import DimensionError, NumericalError, ParameterError, SchemaError
from refdic.twoflow import (EncoderConfig, attention_block, check_gradients, encode, fuse_layer,
                            grad_check, init_params, layer, load_params, multi_head_attention,
                            read_output, save_params, select_layer, softmax, target_flow,
                            target_reference_flow, write_output)

SMALL = EncoderConfig(d=8, h=2, L_t=3, L_fs=3, d_ff=16)


def _block(seed=0, cfg=SMALL, flow="target"):
    return layer(init_params(cfg, seed), flow, 0)


def test_softmax_rows():
    s = np.random.default_rng(0).normal(size=(3, 5)) * 50
    np.testing.assert_allclose(softmax(s).sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(s)[1], softmax_naive(s[1].tolist()), atol=1e-12)


def test_attention_weights_sum_to_one(rng):
    x = rng.normal(size=(4, 8))
    _, w = multi_head_attention(x, x, _block(), 2, return_weights=True)
    assert w.shape == (2, 4, 4)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    _, w1 = multi_head_attention(x[:1], x[:1], _block(), 2, return_weights=True)
    np.testing.assert_array_equal(w1, np.ones((2, 1, 1)))


def test_mha_matches_naive(rng):
    x = rng.normal(size=(4, 8))
    p = _block(1)
    out, w = multi_head_attention(x, x, p, 2, return_weights=True)
    want, want_w = mha_naive(x.tolist(), x.tolist(), p, 2)
    np.testing.assert_allclose(out, want, atol=1e-10)
    np.testing.assert_allclose(w, want_w, atol=1e-12)


def test_block_matches_naive(rng):
    x = rng.normal(size=(4, 8))
    p = _block(2)
    np.testing.assert_allclose(attention_block(x, p, 2), block_naive(x, x, p, 2, 1e-12), atol=1e-10)


def test_target_flow_matches_naive(rng):
    params = init_params(SMALL, 3)
    x = rng.normal(size=(5, 8))
    want = x.tolist()
    for l in range(3):
        want = block_naive(want, want, sublayer(params, "target", l), 2, 1e-12)
    np.testing.assert_allclose(target_flow(x, params, SMALL), want, atol=1e-9)


def test_layer_norm_output_is_standardized(rng):
    p = dict(_block(4))
    p["ln2_scale"], p["ln2_shift"] = np.ones(8), np.zeros(8)
    y = attention_block(rng.normal(size=(6, 8)) * 5, p, 2)
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-10)


def test_fuse_single_and_identical_rows(rng):
    p = _block(5, flow="fuse")
    u = rng.normal(size=(1, 8))
    np.testing.assert_allclose(fuse_layer(u, p, SMALL), block_naive(u, u, p, 2, 1e-12), atol=1e-10)
    same = np.tile(rng.normal(size=(1, 8)), (3, 1))
    out = fuse_layer(same, p, SMALL)
    np.testing.assert_allclose(out, np.tile(out[:1], (3, 1)), atol=1e-12)


def test_select_with_identical_rows_ignores_queries(rng):
    p = dict(_block(6, flow="select"))
    v, u = rng.normal(size=(1, 8)), np.tile(rng.normal(size=(1, 8)), (4, 1))
    base = select_layer(v, u, p, SMALL)
    p["wq"], p["wk"] = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    np.testing.assert_allclose(select_layer(v, u, p, SMALL), base, atol=1e-12)


def test_select_zero_values_keeps_only_target(rng):
    p = dict(_block(7, flow="select"))
    p["wv"] = np.zeros((8, 8))
    v, u = rng.normal(size=(1, 8)), rng.normal(size=(3, 8))
    zero = {**p, "wo": np.zeros((8, 8))}
    np.testing.assert_allclose(select_layer(v, u, p, SMALL), block_naive(v, v, zero, 2, 1e-12), atol=1e-12)


def test_select_invariant_to_reference_order(rng):
    p = _block(8, flow="select")
    v, u = rng.normal(size=(1, 8)), rng.normal(size=(4, 8))
    np.testing.assert_allclose(select_layer(v, u[::-1], p, SMALL), select_layer(v, u, p, SMALL), atol=1e-12)


@pytest.mark.parametrize("residual", [True, False])
def test_target_reference_flow_matches_naive(rng, residual):
    cfg = EncoderConfig(d=8, h=2, L_t=1, L_fs=3, d_ff=16, residual_in_fuse_select=residual)
    params = init_params(cfg, 9)
    tgt, refs = rng.normal(size=(4, 8)), rng.normal(size=(4, 3, 8))
    want = encoder_naive(tgt, refs, params, cfg)[4:]
    np.testing.assert_allclose(target_reference_flow(tgt, refs, params, cfg), want, atol=1e-9)
    with pytest.raises(DimensionError):
        target_reference_flow(tgt, refs[:2], params, cfg)


def test_flag_off_block_shapes():
    cfg = EncoderConfig(d=8, h=2, d_ff=16, residual_in_fuse_select=False)
    params = init_params(cfg, 0)
    assert set(layer(params, "fuse", 0)) == {"wq", "wk", "wv", "wo"}
    assert "ffn_w1" in layer(params, "target", 0)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(3, 8))
    p = layer(params, "fuse", 0)
    np.testing.assert_allclose(fuse_layer(u, p, cfg), mha_naive(u.tolist(), u.tolist(), p, 2)[0], atol=1e-12)
    v = rng.normal(size=(1, 8))
    q = layer(params, "select", 0)
    np.testing.assert_allclose(select_layer(v, u, q, cfg), v + mha_naive(v.tolist(), u.tolist(), q, 2)[0],
                               atol=1e-12)


def test_encode_matches_naive_and_shape(rng):
    params = init_params(SMALL, 10)
    m_t = rng.normal(size=(5, 8))
    refs = [rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(3, 8))]
    res = encode(m_t, refs, params, SMALL)
    assert res.output.shape == (10, 8)
    rows = np.stack([np.stack([refs[k][i] for k, i in enumerate(t.indices)]) for t in res.tuples])
    np.testing.assert_allclose(res.output, encoder_naive(m_t, rows, params, SMALL), atol=1e-9)
    again = encode(m_t, refs, params, SMALL).output
    assert again.tobytes() == res.output.tobytes()


def test_single_region_gives_two_rows(rng):
    params = init_params(SMALL, 0)
    res = encode(rng.normal(size=(1, 8)), [rng.normal(size=(2, 8))], params, SMALL)
    assert res.output.shape == (2, 8)


def test_input_validation(rng):
    params = init_params(SMALL, 0)
    with pytest.raises(DimensionError):
        encode(rng.normal(size=(3, 7)), [rng.normal(size=(2, 8))], params, SMALL)
    with pytest.raises(ValueError):
        encode(rng.normal(size=(3, 8)), [], params, SMALL)
    with pytest.raises(ParameterError):
        EncoderConfig(d=10, h=3)


@pytest.mark.parametrize("residual", [True, False])
def test_gradient_check(rng, residual):
    cfg = EncoderConfig(d=16, h=4, L_t=3, L_fs=3, d_ff=32, residual_in_fuse_select=residual)
    params = init_params(cfg, 11)
    m_t, refs = rng.normal(size=(4, 16)), [rng.normal(size=(3, 16)) for _ in range(3)]
    report = grad_check(m_t, refs, params, cfg, epsilon=1e-5, n_samples=200, seed=0)
    assert len(report.rows) == 200
    assert report.max_rel_error < 1e-4
    half = grad_check(m_t, refs, params, cfg, epsilon=5e-6, n_samples=200, seed=0)
    assert half.max_rel_error < 1e-4


def test_last_fuse_layer_has_zero_gradient(rng):
    params = init_params(SMALL, 12)
    res = encode(rng.normal(size=(3, 8)), [rng.normal(size=(2, 8))] * 2, params, SMALL, with_grads=True)
    last = [k for k in res.grads if k.startswith(f"fuse.{SMALL.L_fs - 1}.")]
    assert last and all(not res.grads[k].any() for k in last)
    others = [k for k in res.grads if k.endswith("wv") and k not in last]
    assert all(res.grads[k].any() for k in others)


def test_linear_subpath_gradients(rng):
    # with wq = wk = 0 attention is a uniform average, so the output is bilinear in (wv, wo)
    # and central differences are exact for any step; a large step keeps rounding small
    x = rng.normal(size=(5, 8))
    p = {"wq": np.zeros((8, 8)), "wk": np.zeros((8, 8)),
         "wv": rng.normal(size=(8, 8)), "wo": rng.normal(size=(8, 8))}
    mean = x.mean(0)
    analytic = {"wv": 5 * np.outer(mean, p["wo"].sum(1)), "wo": 5 * np.outer(mean @ p["wv"], np.ones(8))}
    report = check_gradients(lambda: float(multi_head_attention(x, x, p, 2).sum()), p, analytic,
                             ["wv", "wo"], epsilon=0.1, n_samples=50)
    assert report.max_rel_error < 1e-10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_error_cases(rng):
    m_t, refs = rng.normal(size=(2, 8)), [rng.normal(size=(2, 8))]
    with pytest.raises(ParameterError):
        grad_check(m_t, refs, init_params(SMALL, 0, dtype=np.float32), SMALL)
    params = init_params(SMALL, 0)
    params["target.0.wq"][0, 0] = np.inf
    with pytest.raises(NumericalError):
        grad_check(m_t, refs, params, SMALL, n_samples=5)


def test_float32_mode(rng):
    m_t, refs = rng.normal(size=(3, 8)), [rng.normal(size=(4, 8))]
    out64 = encode(m_t, refs, init_params(SMALL, 0), SMALL).output
    out32 = encode(m_t, refs, init_params(SMALL, 0, dtype=np.float32), SMALL).output
    assert out32.dtype == np.float32
    np.testing.assert_allclose(out32, out64, atol=1e-4)


def test_init_is_seeded():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["target.0.wq"], c["target.0.wq"])
    assert np.all(np.abs(a["target.0.ffn_w1"]) <= np.sqrt(6 / (8 + 16)))


def test_params_roundtrip(tmp_path):
    params = init_params(SMALL, 3, d_in=5)
    save_params(tmp_path / "p.json", params, SMALL, seed=3)
    back, cfg = load_params(tmp_path / "p.json")
    assert cfg == SMALL and list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    (tmp_path / "p.bin").write_bytes((tmp_path / "p.bin").read_bytes()[:100])
    with pytest.raises(SchemaError):
        load_params(tmp_path / "p.json")


def test_output_roundtrip(tmp_path, rng):
    for dtype in (np.float64, np.float32):
        out = rng.normal(size=(6, 8)).astype(dtype)
        write_output(tmp_path / "o.bin", out)
        back = read_output(tmp_path / "o.bin")
        assert back.dtype == dtype and np.array_equal(back, out)
    (tmp_path / "o.bin").write_bytes(b"RDICOUT1" + b"\0" * 5)
    with pytest.raises(Exception):
        read_output(tmp_path / "o.bin")


def test_region_permutation_equivariance(rng):
    params = init_params(SMALL, 13)
    m_t = rng.normal(size=(5, 8))
    refs = [rng.normal(size=(4, 8)), rng.normal(size=(3, 8))]
    perm = rng.permutation(5)
    base = encode(m_t, refs, params, SMALL).output
    moved = encode(m_t[perm], refs, params, SMALL).output
    np.testing.assert_allclose(moved[:5], base[:5][perm], atol=1e-12)
    np.testing.assert_allclose(moved[5:], base[5:][perm], atol=1e-12)
    # shuffling regions inside a reference image does not change the chosen rows
    shuffled = [r[rng.permutation(len(r))] for r in refs]
    np.testing.assert_allclose(encode(m_t, shuffled, params, SMALL).output, base, atol=1e-12)
