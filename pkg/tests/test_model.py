import numpy as np
import pytest

from actdiff import autodiff as ad
from actdiff.autodiff import Tensor
from actdiff.gradcheck import check_gradients
from actdiff.model import (AttentionBlock, CheckpointError, Denoiser, DenoiserConfig, attention_parameter_count,
                           load_denoiser, predict_x0, save_denoiser, sinusoidal_embedding)

TINY = dict(input_width=11, horizon=3, channels=[8, 8], time_embed_dim=8)


def jitter_output(model, seed=0, scale=0.3):
    """The output conv starts at zero; give it random weights so outputs depend on the input."""
    rng = np.random.default_rng(seed)
    for p in model.out_conv.parameters():
        p.assign(rng.standard_normal(p.shape) * scale)


def test_sinusoid_at_zero_and_odd_dim():
    e = sinusoidal_embedding(0, 8)
    np.testing.assert_array_equal(e, [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        sinusoidal_embedding(1, 7)
    with pytest.raises(ValueError):
        sinusoidal_embedding(-1, 8)


def test_time_embedding_injective_over_steps():
    model = Denoiser(DenoiserConfig(input_width=5, horizon=3, channels=[8]), seed=0)
    emb = model.time_embed(np.arange(1, 201)).data
    assert len({row.tobytes() for row in emb}) == 200
    np.testing.assert_array_equal(model.time_embed(17).data, model.time_embed(17).data)


def test_attention_single_position():
    block = AttentionBlock(4, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 4)))
    np.testing.assert_array_equal(block.weights(x).data, np.ones((2, 1, 1)))
    np.testing.assert_allclose(block(x).data, x.data + block.value(x).data, atol=1e-15)


def test_attention_rows_sum_to_one_and_identical_positions():
    block = AttentionBlock(6, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(2).standard_normal((3, 5, 6)))
    np.testing.assert_allclose(block.weights(x).data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    same = Tensor(np.tile(np.random.default_rng(3).standard_normal(6), (1, 5, 1)))
    out = block(same).data
    for t in range(1, 5):
        np.testing.assert_allclose(out[0, t], out[0, 0], atol=1e-14)


def test_output_shape_and_determinism():
    cfg = DenoiserConfig(**TINY)
    a, b = Denoiser(cfg, seed=4), Denoiser(cfg, seed=4)
    jitter_output(a), jitter_output(b)
    x = np.random.default_rng(0).standard_normal((2, 3, 11))
    out_a, out_b = predict_x0(a, x, 5), predict_x0(b, x, 5)
    assert out_a.shape == x.shape
    np.testing.assert_array_equal(out_a, out_b)
    assert predict_x0(a, x[0], 5).shape == (3, 11)


def test_fresh_model_predicts_zero():
    model = Denoiser(DenoiserConfig(**TINY), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3, 11))
    np.testing.assert_array_equal(predict_x0(model, x, 9), np.zeros_like(x))


def test_input_shape_checked():
    model = Denoiser(DenoiserConfig(**TINY), seed=0)
    with pytest.raises(ValueError):
        predict_x0(model, np.zeros((2, 4, 11)), 3)
    with pytest.raises(ValueError):
        predict_x0(model, np.zeros((2, 3, 10)), 3)


@pytest.mark.parametrize("kw", [dict(channels=[]), dict(channels=[8, 8], num_stages=3), dict(time_embed_dim=7),
                                dict(activation="relu")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DenoiserConfig(**{**TINY, **kw})


def test_outputs_finite_for_all_steps():
    model = Denoiser(DenoiserConfig(**TINY), seed=1)
    jitter_output(model)
    x = np.random.default_rng(0).standard_normal((200, 3, 11)) * 3
    out = predict_x0(model, x, np.arange(1, 201))
    assert np.all(np.isfinite(out))


def test_attention_parameter_count():
    on = Denoiser(DenoiserConfig(**TINY, attention_enabled=True), seed=0)
    off = Denoiser(DenoiserConfig(**TINY, attention_enabled=False), seed=0)
    # per attention block: query and value with bias, key without
    per_block = lambda c: 3 * c * c + 2 * c  # noqa: E731
    expected = sum(per_block(c) for c in TINY["channels"] + TINY["channels"][::-1])
    assert attention_parameter_count(on) == expected
    assert on.num_parameters() - off.num_parameters() == expected
    assert attention_parameter_count(off) == 0


def test_parameter_count_is_function_of_config():
    cfg = DenoiserConfig(input_width=30, horizon=4)
    assert Denoiser(cfg, seed=0).num_parameters() == Denoiser(cfg, seed=9).num_parameters()


def _response(model, T, width, pos, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, T, width))
    bumped = x.copy()
    bumped[0, pos] += 1.0
    return np.abs(predict_x0(model, bumped, 10) - predict_x0(model, x, 10))[0].max(axis=-1)


def test_receptive_field_without_attention():
    T, width = 40, 11
    cfg = DenoiserConfig(input_width=width, horizon=T, channels=[8, 8], time_embed_dim=8, attention_enabled=False)
    model = Denoiser(cfg, seed=0)
    jitter_output(model)
    # input conv plus two k=3 convs in each of 2 down, 1 mid and 2 up blocks
    radius = 1 + 2 * 5
    diff = _response(model, T, width, pos=0)
    assert np.all(diff[radius + 1:] == 0.0)
    assert diff[radius] > 0.0


def test_attention_spreads_everywhere():
    T, width = 40, 11
    model = Denoiser(DenoiserConfig(input_width=width, horizon=T, channels=[8, 8], time_embed_dim=8), seed=0)
    jitter_output(model)
    assert np.all(_response(model, T, width, pos=0) > 0.0)


def test_full_model_gradient_check():
    model = Denoiser(DenoiserConfig(**TINY), seed=0)
    jitter_output(model)
    rng = np.random.default_rng(1)
    x, x0 = Tensor(rng.standard_normal((2, 3, 11))), Tensor(rng.standard_normal((2, 3, 11)))
    n = np.array([3, 150])
    err = check_gradients(lambda: ad.mse(model(x, n), x0), model.parameters())
    assert err <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    model = Denoiser(DenoiserConfig(**TINY), seed=3)
    jitter_output(model)
    path = save_denoiser(model, tmp_path / "d.npz", extra={"note": "x"})
    back = load_denoiser(path)
    assert back.config == model.config
    for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    save_denoiser(back, tmp_path / "e.npz", extra={"note": "x"})
    assert (tmp_path / "d.npz").read_bytes() == (tmp_path / "e.npz").read_bytes()


def test_checkpoint_corruption_rejected(tmp_path):
    model = Denoiser(DenoiserConfig(**TINY), seed=3)
    path = save_denoiser(model, tmp_path / "d.npz")
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2: len(raw) // 2 + 64] = b"\x00" * 64
    (tmp_path / "bad.npz").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="bad.npz"):
        load_denoiser(tmp_path / "bad.npz")
    (tmp_path / "trunc.npz").write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError, match="trunc.npz"):
        load_denoiser(tmp_path / "trunc.npz")
    with pytest.raises(CheckpointError, match="not found"):
        load_denoiser(tmp_path / "none.npz")


def test_checkpoint_wrong_shape_names_parameter(tmp_path):
    z = dict(np.load(save_denoiser(Denoiser(DenoiserConfig(**TINY)), tmp_path / "d.npz")))
    z["in_conv.weight"] = np.zeros((2, 2, 3))
    np.savez(tmp_path / "s.npz", **z)
    with pytest.raises(CheckpointError, match="in_conv.weight"):
        load_denoiser(tmp_path / "s.npz")
