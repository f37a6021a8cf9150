"""Model assembly: the shared outer pipeline, each variant's mapping,
checkpointing, and parameter accounting."""

import numpy as np
import pytest

from fbm import autodiff as ad
from fbm.blocks import InteractionConfig, TrendConfig
from fbm.errors import CheckpointError, ConfigError
from fbm.models import (
    ForecastModel,
    ModelSpec,
    NpConfig,
    expected_param_count,
    instance_standardize,
)

from gradcheck import param_grad_err

SMALL_TREND = TrendConfig(backbone="linear", scales=(1,))
SMALL_INTER = InteractionConfig(C1=3, C2=4, h3=5, K=1)


def small_spec(variant, T=16, L=6, D=3, **kw):
    if variant == "fbm-nl":
        kw.setdefault("nl_h1", 7)
        kw.setdefault("nl_h2", 5)
    if variant == "fbm-np":
        kw.setdefault("np_cfg", NpConfig(P=2, h1=4, h2=6, K=1))
    if variant == "fbm-s":
        kw.setdefault("trend", SMALL_TREND)
        kw.setdefault("interaction", SMALL_INTER)
    return ModelSpec(variant=variant, T=T, L=L, D=D, **kw)


ALL_VARIANTS = ["fbm-l", "fbm-nl", "fbm-np", "fbm-s", "diag", "last"]


def windows(rng, B=4, D=3, T=16, scale=1.0, offset=0.0):
    return scale * rng.standard_normal((B, D, T)) + offset


# --- spec validation and serialization -----------------------------------------


def test_spec_rejects_odd_window():
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-l", T=15, L=4, D=1)


def test_spec_rejects_tiny_window():
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-l", T=2, L=4, D=1)


def test_spec_rejects_unknown_variant():
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-x", T=16, L=4, D=1)


def test_spec_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-l", T=16, L=0, D=1)
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-l", T=16, L=4, D=0)
    with pytest.raises(ConfigError):
        ModelSpec(variant="fbm-nl", T=16, L=4, D=1, nl_h1=0)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_header_roundtrip(variant):
    spec = small_spec(variant)
    assert ModelSpec.from_header(spec.to_header()) == spec


def test_header_roundtrip_multi_scale_trend():
    spec = small_spec(
        "fbm-s",
        trend=TrendConfig(backbone="mlp", h1=4, h2=5, P=2, scales=(1, 2)),
        interaction=None,
    )
    assert ModelSpec.from_header(spec.to_header()) == spec


def test_header_missing_field_is_checkpoint_error():
    h = small_spec("fbm-nl").to_header()
    del h["nl_h1"]
    with pytest.raises(CheckpointError):
        ModelSpec.from_header(h)


def test_standardize_flag_survives_header():
    spec = small_spec("fbm-l", standardize=False)
    assert ModelSpec.from_header(spec.to_header()).standardize is False


# --- outer pipeline --------------------------------------------------------------


def test_instance_standardize_moments():
    rng = np.random.default_rng(0)
    X = windows(rng, scale=3.0, offset=-2.0)
    Xs, mu, sd = instance_standardize(X)
    np.testing.assert_allclose(Xs.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(Xs.std(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(Xs * sd + mu, X, atol=1e-12)


def test_instance_standardize_floors_flat_windows():
    X = np.full((2, 1, 8), 3.25)
    Xs, mu, sd = instance_standardize(X)
    assert np.all(sd == 1e-5)
    assert np.all(Xs == 0.0)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_constant_window_predicted_exactly(variant):
    model = ForecastModel(small_spec(variant), seed=1)
    levels = np.array([0.7, -3.1, 12.0])
    X = np.broadcast_to(levels[None, :, None], (2, 3, 16)).copy()
    pred = model.predict(X)
    np.testing.assert_allclose(
        pred, np.broadcast_to(levels[None, :, None], pred.shape), atol=1e-9
    )


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_shift_invariance(variant):
    rng = np.random.default_rng(7)
    model = ForecastModel(small_spec(variant), seed=3)
    X = windows(rng)
    base = model.predict(X)
    shifted = model.predict(X + 41.5)
    np.testing.assert_allclose(shifted, base + 41.5, atol=1e-9)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
@pytest.mark.parametrize("s", [7.3, 1e3])
def test_scale_equivariance(variant, s):
    rng = np.random.default_rng(11)
    model = ForecastModel(small_spec(variant), seed=3)
    X = windows(rng)
    base = model.predict(X)
    np.testing.assert_allclose(model.predict(s * X), s * base, rtol=1e-9, atol=1e-9 * s)


def test_standardize_off_changes_the_mapping():
    rng = np.random.default_rng(2)
    X = windows(rng, offset=5.0)
    on = ForecastModel(small_spec("fbm-l"), seed=0).predict(X)
    off = ForecastModel(small_spec("fbm-l", standardize=False), seed=0).predict(X)
    assert not np.allclose(on, off)


def test_input_shape_validation():
    model = ForecastModel(small_spec("fbm-l"), seed=0)
    with pytest.raises(ConfigError):
        model.predict(np.zeros((2, 3, 18)))  # wrong T
    with pytest.raises(ConfigError):
        model.predict(np.zeros((2, 4, 16)))  # wrong D
    with pytest.raises(ConfigError):
        model.predict(np.zeros((3, 16)))  # missing batch axis


# --- fbm-l: contraction equals the naive feature-grid linear map ---------------


def naive_linear_forward(model, X):
    """Materialize the feature grid and apply the flattened weight."""
    from fbm.fourier import build_bases

    spec = model.spec
    Xs, mu, sd = instance_standardize(X)
    H_R, H_I = model._spectra(Xs)
    bases = build_bases(spec.T)
    G = H_R[..., None, :] * bases.C[: spec.T, 1:] + H_I[..., None, :] * bases.S[: spec.T, 1:]
    flat = G.reshape(X.shape[0], spec.D, -1)  # time-major: index = n * K + k
    W_flat = np.transpose(model.w.value, (1, 0, 2)).reshape(flat.shape[-1], spec.L)
    return flat @ W_flat * sd + mu


def test_linear_matches_naive_grid_matmul():
    rng = np.random.default_rng(5)
    spec = ModelSpec(variant="fbm-l", T=8, L=5, D=2)
    model = ForecastModel(spec, seed=9)
    X = windows(rng, B=3, D=2, T=8)
    np.testing.assert_allclose(model.predict(X), naive_linear_forward(model, X), atol=1e-12)


def test_linear_has_no_bias_and_exact_count():
    spec = ModelSpec(variant="fbm-l", T=336, L=96, D=7)
    assert expected_param_count(spec) == 336 * 168 * 96 == 5419008
    model = ForecastModel(spec, seed=0)
    assert model.param_count() == 5419008
    assert [p.name for p in model.params] == ["linear.w"]


# --- fbm-nl: exact degeneration to fbm-l under identity-style weights -----------


def test_nl_degenerates_to_linear():
    T, L, D = 8, 5, 2
    K = T // 2
    m = T * K
    lin = ForecastModel(ModelSpec(variant="fbm-l", T=T, L=L, D=D), seed=4)
    nl = ForecastModel(
        ModelSpec(variant="fbm-nl", T=T, L=L, D=D, nl_h1=2 * m, nl_h2=2 * m), seed=0
    )

    # layer 1 splits the flattened grid x into [relu(x); relu(-x)]
    w1 = np.zeros((K, T, 2 * m))
    for n in range(T):
        for k in range(K):
            w1[k, n, n * K + k] = 1.0
            w1[k, n, m + n * K + k] = -1.0
    eye = np.eye(m)
    w2 = np.block([[eye, -eye], [-eye, eye]])  # reproduces [x+; x-]
    W_flat = np.transpose(lin.w.value, (1, 0, 2)).reshape(m, L)
    w3 = np.vstack([W_flat, -W_flat])  # W(x+) - W(x-) = Wx

    nl.w1.value = w1
    nl.w2.value = w2
    nl.w3.value = w3
    for b in (nl.b1, nl.b2, nl.b3):
        b.value = np.zeros_like(b.value)

    rng = np.random.default_rng(6)
    X = windows(rng, B=4, D=D, T=T)
    np.testing.assert_allclose(nl.predict(X), lin.predict(X), atol=1e-12)


# --- fbm-s: composition -----------------------------------------------------------


def test_s_components_reassemble_bitwise():
    rng = np.random.default_rng(8)
    model = ForecastModel(small_spec("fbm-s"), seed=2)
    X = windows(rng)
    outs, mu, sd = model.components(X)
    assert set(outs) == {"seasonal", "trend", "interaction"}
    total = outs["seasonal"]
    total = total + outs["trend"]
    total = total + outs["interaction"]
    assert np.array_equal(total * sd + mu, model.predict(X))


def test_s_interaction_mask_zeroes_late_steps_of_that_block():
    rng = np.random.default_rng(9)
    model = ForecastModel(small_spec("fbm-s"), seed=2)
    outs, _, _ = model.components(windows(rng))
    C2 = SMALL_INTER.C2
    assert np.all(outs["interaction"][..., C2:] == 0.0)
    assert np.any(outs["interaction"][..., :C2] != 0.0)


def test_s_without_interaction():
    spec = small_spec("fbm-s", interaction=None)
    model = ForecastModel(spec, seed=2)
    outs, _, _ = model.components(windows(np.random.default_rng(10)))
    assert set(outs) == {"seasonal", "trend"}


def test_zero_weights_s_predicts_window_mean_exactly():
    rng = np.random.default_rng(12)
    spec = small_spec(
        "fbm-s", trend=TrendConfig(backbone="mlp", h1=4, h2=5, P=2, scales=(1, 2))
    )
    model = ForecastModel(spec, seed=3, zero_weights=True)
    for p in model.params:
        if p.name.endswith(".gamma"):
            assert np.all(p.value == 1.0)
        else:
            assert np.all(p.value == 0.0)
    X = windows(rng)
    pred = model.predict(X)
    mean = X.mean(axis=-1, keepdims=True)
    assert np.array_equal(pred, np.broadcast_to(mean, pred.shape))


def test_components_rejects_other_variants():
    model = ForecastModel(small_spec("fbm-l"), seed=0)
    with pytest.raises(ConfigError):
        model.components(np.zeros((1, 3, 16)))


# --- baselines --------------------------------------------------------------------


def test_diag_continues_pure_periodic_signal():
    T, L, D = 32, 16, 1
    model = ForecastModel(ModelSpec(variant="diag", T=T, L=L, D=D), seed=0)
    n = np.arange(T + L)
    x = np.cos(2 * np.pi * 3 * (n + 0.37 * T) / T) + 0.25 * np.sin(2 * np.pi * 5 * n / T)
    X = x[:T][None, None, :]
    pred = model.predict(X)[0, 0]
    # unit diagonal weights reproduce the window's periodic continuation
    np.testing.assert_allclose(pred, x[T:], atol=1e-9)


def test_last_baseline_repeats_final_value():
    rng = np.random.default_rng(13)
    model = ForecastModel(small_spec("last"), seed=0)
    X = windows(rng)
    pred = model.predict(X)
    np.testing.assert_allclose(
        pred, np.broadcast_to(X[..., -1:], pred.shape), atol=1e-12
    )
    assert model.params == []


# --- parameter accounting ----------------------------------------------------------


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_built_count_matches_closed_form(variant):
    spec = small_spec(variant)
    model = ForecastModel(spec, seed=0)
    assert model.param_count() == expected_param_count(spec)


def test_describe_splits_s_by_block():
    model = ForecastModel(small_spec("fbm-s"), seed=0)
    rows = dict(model.describe())
    assert rows["seasonal"] == 16 * 8
    assert rows["seasonal"] + rows["trend"] + rows["interaction"] == rows["total"]
    assert rows["total"] == model.param_count()


def test_traffic_style_counts():
    # transformer trend at h1=128, h2=128: the stacks dominate at
    # 3 * (4*128^2 + 5*128 + 2*128*128 + 128) per the closed form
    spec = ModelSpec(
        variant="fbm-s",
        T=336,
        L=96,
        D=2,
        trend=TrendConfig(backbone="transformer", h1=128, h2=128, K=4, P=14, scales=(1,)),
        interaction=None,
    )
    per_stack = 4 * 128 * 128 + 4 * 128 + 2 * 128 * 128 + 128 + 128
    assert expected_param_count(spec) == (
        336 * 168  # seasonal
        + 2 * 2 + (24 * 168) * 128 + 128  # projector
        + 4 * per_stack
        + 14 * 128 * 96 + 96  # head
    )


# --- checkpointing ------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(14)
    model = ForecastModel(small_spec("fbm-s"), seed=5)
    X = windows(rng)
    before = model.predict(X)
    path = tmp_path / "model.fbm"
    model.save(path)
    restored = ForecastModel.load(path)
    assert restored.spec == model.spec
    assert np.array_equal(restored.predict(X), before)


def test_checkpoint_spec_mismatch_names_both(tmp_path):
    model = ForecastModel(small_spec("fbm-l"), seed=0)
    path = tmp_path / "model.fbm"
    model.save(path)
    wanted = small_spec("fbm-l", L=7)
    with pytest.raises(CheckpointError) as err:
        ForecastModel.load(path, expected_spec=wanted)
    assert "L=6" in str(err.value) and "L=7" in str(err.value)


def test_checkpoint_matching_expected_spec_loads(tmp_path):
    model = ForecastModel(small_spec("fbm-nl"), seed=1)
    path = tmp_path / "model.fbm"
    model.save(path)
    restored = ForecastModel.load(path, expected_spec=model.spec)
    assert restored.param_count() == model.param_count()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.fbm"
    path.write_bytes(b"NOTFBM00" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        ForecastModel.load(path)


def test_checkpoint_truncation(tmp_path):
    model = ForecastModel(small_spec("fbm-l"), seed=0)
    path = tmp_path / "model.fbm"
    model.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(CheckpointError):
        ForecastModel.load(path)


# --- init determinism ----------------------------------------------------------------


def test_same_seed_same_init():
    a = ForecastModel(small_spec("fbm-nl"), seed=21)
    b = ForecastModel(small_spec("fbm-nl"), seed=21)
    for pa, pb in zip(a.params, b.params):
        assert np.array_equal(pa.value, pb.value)


def test_different_seed_different_init():
    a = ForecastModel(small_spec("fbm-nl"), seed=21)
    b = ForecastModel(small_spec("fbm-nl"), seed=22)
    assert any(not np.array_equal(pa.value, pb.value) for pa, pb in zip(a.params, b.params))


# --- gradients through the full model glue --------------------------------------------


@pytest.mark.parametrize("variant", ["fbm-l", "fbm-nl", "fbm-np", "fbm-s", "diag"])
def test_model_param_gradients(variant):
    # seeds chosen so no relu pre-activation sits within the fd step of 0,
    # which would corrupt the finite-difference oracle (min |preact| ~ 0.015)
    rng = np.random.default_rng(22)
    kw = {}
    if variant == "fbm-s":
        kw = dict(trend=SMALL_TREND, interaction=InteractionConfig(C1=2, C2=2, h3=4, K=1))
    model = ForecastModel(small_spec(variant, T=8, L=3, D=2, **kw), seed=7)
    X = windows(rng, B=2, D=2, T=8)

    def make_loss():
        y = model.forward(X)
        return (y * y).mean()

    err = param_grad_err(make_loss, model.params)
    assert err < 1e-4, f"{variant} param gradient rel err {err}"
