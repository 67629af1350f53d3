import numpy as np
import pytest

from jamdetect import autodiff as ad
from jamdetect import model as M
from jamdetect.autodiff import Tensor
from jamdetect.tokenizer import ATTACKED, MASK, NO_ATTACK, build_sequence, prediction_view, stack_tokens
from oracles import central_difference, rel_err

TOY = dict(encoder_dims=(64, 32, 16), decoder_dims=(16, 32, 64), n_heads=4, dropout=0.1)


def _toy(block_size=24, seed=0, **kw):
    return M.build(M.ModelConfig(block_size=block_size, **{**TOY, **kw}), seed=seed)


def _tokens(batch, length, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.integers(9, 109, size=(batch, length))
    t[:, 0] = 1
    t[:, -1] = MASK
    return t


# -- positional encoding ----------------------------------------------------

def test_positional_zero_phase_and_norm():
    table = M.positional_encode(50, 16, (7.0, 12.0))
    np.testing.assert_allclose(table[0], np.tile([0.0, 1.0], 8), atol=0)
    np.testing.assert_allclose(np.linalg.norm(table, axis=1), np.sqrt(8), atol=1e-6)


@pytest.mark.parametrize("pair,period", [(0, 7.0), (1, 12.0)])
def test_hinted_periods_repeat(pair, period):
    table = M.positional_encode(60, 16, (7.0, 12.0))
    p = int(period)
    np.testing.assert_allclose(table[p:, 2 * pair:2 * pair + 2], table[:-p, 2 * pair:2 * pair + 2], atol=1e-9)


def test_positional_needs_even_dim():
    with pytest.raises(M.ModelConfigError):
        M.positional_encode(10, 7)


# -- config -----------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(decoder_dims=(64, 128, 128)), dict(n_heads=6),
                                dict(encoder_dims=(250, 128, 64), decoder_dims=(64, 128, 250))])
def test_invalid_configs(kw):
    with pytest.raises(M.ModelConfigError):
        M.ModelConfig(**kw)


def test_reference_config_parameter_count():
    model = M.build(M.ModelConfig(), seed=0)
    assert model.config.n_layers == 6
    assert 1_800_000 <= model.num_parameters() <= 2_600_000


def test_same_seed_same_parameters():
    a, b = _toy(seed=3), _toy(seed=3)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["tok_emb"].data, _toy(seed=4).params["tok_emb"].data)


# -- block ------------------------------------------------------------------

def test_block_preserves_shape_and_checks_dim():
    model = _toy()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 24, 64)))
    assert model.block_forward("enc0", x).shape == (2, 24, 64)
    with pytest.raises(ad.ShapeError):
        model.block_forward("enc1", x)


def test_block_is_identity_with_zeroed_output_projections():
    model = _toy()
    for k in ("enc0.wo", "enc0.bo", "enc0.ffn_down"):
        model.params[k].data[...] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 24, 64))
    np.testing.assert_array_equal(model.block_forward("enc0", Tensor(x)).data, x)


def test_differential_heads_cancel_when_maps_are_equal():
    model = _toy()
    d, g = 64, 16
    half = (d // 4) // 2  # per-head half width; 4 heads -> one head per group
    for name in ("wq", "wk"):
        w = model.params[f"enc0.{name}"].data
        w[3][:, half:] = w[3][:, :half]
    model.params["enc0.lambda_diff"].data[...] = 1.0
    x = Tensor(np.random.default_rng(2).normal(size=(1, 24, d)))
    before = model.block_forward("enc0", x).data
    model.params["enc0.wv"].data[3] = np.random.default_rng(9).normal(size=(d, g))
    np.testing.assert_allclose(model.block_forward("enc0", x).data, before, atol=1e-12)
    # the other groups do contribute
    model.params["enc0.wv"].data[0] *= 2.0
    assert not np.allclose(model.block_forward("enc0", x).data, before)


def test_block_gradient_check_toy():
    """len 8, d 16, 4 heads: input and every block parameter against finite differences."""
    cfg = M.ModelConfig(block_size=8, encoder_dims=(16, 16, 16), decoder_dims=(16, 16, 16),
                        n_heads=4, dropout=0.0)
    model = M.build(cfg, seed=1)
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 8, 16))
    r = rng.normal(size=(2, 8, 16))
    names = [k for k in model.params if k.startswith("enc0.")]

    def loss_value():
        return float(np.sum(model.block_forward("enc0", Tensor(x0)).data * r))

    x = Tensor(x0.copy(), requires_grad=True)
    model.zero_grad()
    (model.block_forward("enc0", x) * Tensor(r)).sum().backward()

    def fx(v):
        return float(np.sum(model.block_forward("enc0", Tensor(v)).data * r))
    assert rel_err(x.grad, central_difference(fx, x0)) < 1e-3

    for name in names:
        p = model.params[name]
        analytic = p.grad.copy()
        original = p.data.copy()

        def f(v, p=p):
            p.data = v
            return loss_value()
        numeric = central_difference(f, original)
        p.data = original
        assert rel_err(analytic, numeric) < 1e-3, name


# -- forward ----------------------------------------------------------------

def test_logits_shape_and_errors():
    model = _toy()
    assert model.forward(_tokens(3, 24)).shape == (3, 24, 110)
    with pytest.raises(ad.ShapeError):
        model.forward(_tokens(1, 23))
    bad = _tokens(1, 24)
    bad[0, 3] = 110
    with pytest.raises(ad.ShapeError):
        model.forward(bad)


def test_identical_rows_identical_logits():
    t = _tokens(1, 24)
    out = _toy().forward(np.vstack([t, t])).data
    np.testing.assert_array_equal(out[0], out[1])


def test_position_sensitivity():
    model = _toy()
    for seed in range(3):
        t = _tokens(1, 24, seed)
        swapped = t.copy()
        swapped[0, 3], swapped[0, 10] = t[0, 10], t[0, 3]
        if swapped[0, 3] == t[0, 3]:
            continue
        assert not np.allclose(model.forward(t).data, model.forward(swapped).data)


def test_dropout_determinism():
    model, t = _toy(dropout=0.4), _tokens(2, 24)
    a = model.forward(t, train=True, rng=np.random.default_rng(1)).data
    b = model.forward(t, train=True, rng=np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, model.forward(t).data)
    np.testing.assert_array_equal(model.forward(t).data, model.forward(t).data)


def test_skip_ablation_changes_output():
    model, t = _toy(), _tokens(2, 24)
    assert not np.allclose(model.forward(t).data, model.forward(t, skip_scale=0.0).data)


def test_gradient_reaches_encoder_through_skip_when_bottleneck_is_cut():
    model, t = _toy(), _tokens(2, 24)
    model.params["enc0.proj_w"].data[...] = 0.0
    model.params["enc0.proj_b"].data[...] = 0.0

    def enc0_grad(scale):
        model.zero_grad()
        model.forward(t, skip_scale=scale).sum().backward()
        return max(np.abs(model.params[k].grad).max() for k in model.params if k.startswith("enc0.")
                   and not k.startswith("enc0.proj"))
    assert enc0_grad(1.0) > 1e-8
    assert enc0_grad(0.0) == 0.0


def test_full_model_gradient_check_sampled():
    from jamdetect.trainer import compute_loss
    from jamdetect.tokenizer import apply_masking
    cfg = M.ModelConfig(block_size=10, encoder_dims=(8, 8, 8), decoder_dims=(8, 8, 8),
                        n_heads=4, dropout=0.0)
    model = M.build(cfg, seed=2)
    rng = np.random.default_rng(0)
    batch = [apply_masking(build_sequence(rng.integers(9, 59, 4), rng.integers(59, 109, 4),
                                          ATTACKED if i % 2 else NO_ATTACK), 0.3, 1.0, rng)
             for i in range(3)]
    tokens = stack_tokens(batch)

    def value():
        return float(compute_loss(model.forward(tokens), batch, 0.4, 1).data)

    model.zero_grad()
    compute_loss(model.forward(tokens), batch, 0.4, 1).backward()
    pick = np.random.default_rng(5)
    for name, p in model.params.items():
        if p.grad is None:
            continue
        flat = p.data.reshape(-1)
        for j in pick.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + 1e-5
            up = value()
            flat[j] = old - 1e-5
            down = value()
            flat[j] = old
            num = (up - down) / 2e-5
            ana = p.grad.reshape(-1)[j]
            assert abs(num - ana) <= 1e-3 * max(1e-4, abs(num), abs(ana)), name


# -- prediction -------------------------------------------------------------

def test_probability_arithmetic():
    z = np.zeros((2, 110))
    z[1, ATTACKED] = 10.0
    p = M.label_probabilities(z)
    assert p[0] == 0.5 and M.decide(p)[0] == NO_ATTACK
    assert p[1] == pytest.approx(0.9999546, abs=1e-7) and M.decide(p)[1] == ATTACKED


def test_predict_needs_masked_label():
    model = _toy()
    t = _tokens(1, 24)
    t[0, -1] = ATTACKED
    with pytest.raises(ValueError):
        M.predict(model, t)


def test_untrained_model_is_near_chance_on_balanced_data():
    accs = []
    for seed in range(6):
        model = _toy(seed=seed)
        rng = np.random.default_rng(100 + seed)
        seqs = [build_sequence(rng.integers(9, 59, 11), rng.integers(59, 109, 11),
                               ATTACKED if i % 2 else NO_ATTACK) for i in range(40)]
        cls, _ = M.predict(model, stack_tokens([prediction_view(s) for s in seqs]))
        accs.append(np.mean(cls == np.array([s.true_label for s in seqs])))
    assert abs(np.mean(accs) - 0.5) <= 0.05


# -- checkpoint -------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = _toy(seed=7)
    back = M.Model.load(model.save(tmp_path / "m.npz"))
    assert back.config == model.config
    assert list(back.params) == list(model.params)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k].data, model.params[k].data)
    t = _tokens(2, 24)
    np.testing.assert_array_equal(back.forward(t).data, model.forward(t).data)


def test_state_dict_shape_check():
    model = _toy()
    state = model.state_dict()
    state["head_b"] = np.zeros(3)
    with pytest.raises(ValueError):
        model.load_state_dict(state)
