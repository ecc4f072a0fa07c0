import itertools

import numpy as np
import pytest

from deltanet import numerics as nx
from deltanet.corpus import BOS, EOS
from deltanet.diagnostics import gradcheck_model, random_batch
from deltanet.model import (Batch, DeltaNetModel, ModelConfig, assemble_banks, delta_features,
                            export_trace, load_checkpoint, save_checkpoint, train_step)
from deltanet.optim import Adam


def tiny(mode="deltaL", **kw):
    base = dict(vocab_size=12, dim=8, positions=4, heads=2, max_conditions=2, cond_len=5,
                max_decode_len=6, image_size=8, conv_channels=(4, 4), mode=mode, seed=0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------- config / shapes

@pytest.mark.parametrize("mode,width", [("basic", 2), ("delta1", 4), ("deltaL", 4)])
def test_output_projection_width(mode, width):
    m = DeltaNetModel(tiny(mode))
    assert m.w_p.shape == (width * 8, 12)


@pytest.mark.parametrize("variant", ["image", "report", "image_report"])
def test_ablation_variants_keep_conditional_width(variant):
    assert DeltaNetModel(tiny("delta1", variant=variant)).w_p.shape == (32, 12)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(mode="delta2")
    with pytest.raises(nx.DimensionError):
        tiny(dim=10, heads=4)
    with pytest.raises(ValueError):
        tiny(max_conditions=0)


def test_delta_features_algebra(rng):
    V, Vc = nx.tensor(rng.standard_normal((4, 3))), nx.tensor(rng.standard_normal((4, 3)))
    assert np.all(delta_features(V, V).data == 0)
    assert np.array_equal(delta_features(V, Vc).data, -delta_features(Vc, V).data)
    with pytest.raises(nx.DimensionError):
        delta_features(V, nx.tensor(np.zeros((3, 3))))


def test_assemble_banks_rows_and_mask(rng):
    deltas = [nx.tensor(rng.standard_normal((4, 3))) for _ in range(3)]
    texts = [nx.tensor(rng.standard_normal((5, 3))) for _ in range(3)]
    masks = [np.array([1, 1, 1, 0, 0]), np.ones(5), np.array([1, 0, 0, 0, 0])]
    d, t, m = assemble_banks(deltas, texts, masks)
    assert d.shape == (12, 3) and t.shape == (15, 3) and m.shape == (15,)
    assert np.array_equal(d.data[4:8], deltas[1].data)
    assert np.array_equal(m, np.concatenate(masks).astype(bool))
    zero = nx.mul(nx.tensor([[0.0]]), texts[2])
    _, t0, _ = assemble_banks(deltas, texts[:2] + [zero], masks)
    assert np.all(t0.data[10:15] == 0.0)


# ---------------------------------------------------------------- gate

def test_gate_zero_parameters_gives_half(rng):
    m = DeltaNetModel(tiny())
    for p in (m.gate_w_v, m.gate_w_c, m.gate_b):
        p.data[...] = 0.0
    g = m.gate_weight(nx.tensor(rng.standard_normal((4, 8))), nx.tensor(rng.standard_normal((4, 8))))
    assert g.item() == 0.5


def test_gate_value_matches_formula_and_stays_open(rng):
    m = DeltaNetModel(tiny())
    m.gate_b.data[...] = 0.3
    V, Vc = rng.standard_normal((4, 8)) * 50, rng.standard_normal((4, 8)) * 50
    g = m.gate_weight(nx.tensor(V), nx.tensor(Vc)).item()
    z = V.mean(0) @ m.gate_w_v.data[:, 0] + Vc.mean(0) @ m.gate_w_c.data[:, 0] + 0.3
    assert g == pytest.approx(1 / (1 + np.exp(-z)), rel=1e-12)
    assert 0.0 <= g <= 1.0


def test_gate_gradient_check(rng):
    m = DeltaNetModel(tiny())
    V, Vc = nx.tensor(rng.standard_normal((4, 8))), nx.tensor(rng.standard_normal((4, 8)))
    params = {"w_v": m.gate_w_v, "w_c": m.gate_w_c, "b": m.gate_b}
    rep = nx.grad_check(lambda: nx.sum(m.gate_weight(V, Vc)), params, epsilon=1e-6)
    assert rep.passed, rep.summary()


# ---------------------------------------------------------------- forward behaviour

def test_probabilities_sum_to_one_in_every_mode():
    for mode in ("basic", "delta1", "deltaL"):
        cfg = tiny(mode)
        m = DeltaNetModel(cfg)
        b = random_batch(cfg, 3, batch_size=2, seed=1)
        ctx = m.encode(b.images, b.cond_images, b.cond_reports, b.cond_mask)
        h = c = nx.tensor(np.zeros((2, 1, 8)))
        probs, *_ = m.decode_step(ctx, [BOS, BOS], h, c)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)


def test_conditional_mode_requires_conditions():
    m = DeltaNetModel(tiny("delta1"))
    with pytest.raises(nx.UsageError):
        m.encode(np.zeros((1, 1, 8, 8)))


def test_over_length_conditional_report_is_rejected():
    cfg = tiny("delta1")
    m = DeltaNetModel(cfg)
    with pytest.raises(nx.DimensionError):
        m.encode(np.zeros((1, 1, 8, 8)), np.zeros((1, 1, 1, 8, 8)), np.ones((1, 1, 7), dtype=int))


def test_basic_output_ignores_conditions():
    cfg = tiny("basic")
    m = DeltaNetModel(cfg)
    b = random_batch(tiny("delta1"), 3, seed=2)
    a = m.forward_loss(Batch(b.images, b.targets, b.target_mask)).item()
    c = m.forward_loss(b).item()
    assert a == c


def loss_of(model, batch):
    with nx.no_grad():
        return model.forward_loss(batch).item()


def test_condition_permutation_leaves_loss_unchanged():
    cfg = tiny("deltaL", max_conditions=3)
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 4, seed=3)
    base = loss_of(m, b)
    for perm in itertools.permutations(range(3)):
        p = list(perm)
        shuffled = Batch(b.images, b.targets, b.target_mask, b.cond_images[:, p],
                         b.cond_reports[:, p], b.cond_mask[:, p])
        assert loss_of(m, shuffled) == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_condition_permutation_permutes_bank_rows():
    cfg = tiny("deltaL", max_conditions=3)
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 4, seed=3)
    p = [2, 0, 1]
    ctx = m.encode(b.images, b.cond_images, b.cond_reports, b.cond_mask)
    ctx2 = m.encode(b.images, b.cond_images[:, p], b.cond_reports[:, p], b.cond_mask[:, p])
    K, N = cfg.positions, cfg.cond_len
    for new, old in enumerate(p):
        np.testing.assert_array_equal(ctx2.delta_rows.data[0, new * K:(new + 1) * K],
                                      ctx.delta_rows.data[0, old * K:(old + 1) * K])
        np.testing.assert_allclose(ctx2.text_rows.data[0, new * N:(new + 1) * N],
                                   ctx.text_rows.data[0, old * N:(old + 1) * N], atol=1e-14)


def test_absent_condition_slot_has_no_influence(rng):
    cfg = tiny("deltaL", max_conditions=3)
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 4, seed=5)
    b.cond_mask[:, 2] = 0
    b.cond_reports[:, 2] = 0
    a = loss_of(m, b)
    b.cond_images[:, 2] = rng.standard_normal(b.cond_images[:, 2].shape) * 5
    assert loss_of(m, b) == a


def test_example_without_any_condition_is_rejected():
    cfg = tiny("deltaL")
    b = random_batch(cfg, 3, seed=0)
    b.cond_mask[:] = 0
    with pytest.raises(nx.UsageError):
        DeltaNetModel(cfg).forward_loss(b)


def test_padding_in_target_does_not_change_loss():
    cfg = tiny("delta1")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=4)
    padded = Batch(b.images, np.pad(b.targets, ((0, 0), (0, 2))), np.pad(b.target_mask, ((0, 0), (0, 2))),
                   b.cond_images, b.cond_reports, b.cond_mask)
    padded.targets[:, -2:] = 7  # arbitrary ids under a zero mask
    assert loss_of(m, padded) == loss_of(m, b)


def test_batched_loss_is_token_mean_of_single_examples():
    cfg = tiny("delta1")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, batch_size=2, seed=6)
    b.target_mask[1, -1] = 0
    b.targets[1, -1] = 0
    per = []
    for i in range(2):
        one = Batch(b.images[i:i + 1], b.targets[i:i + 1], b.target_mask[i:i + 1],
                    b.cond_images[i:i + 1], b.cond_reports[i:i + 1], b.cond_mask[i:i + 1])
        per.append((loss_of(m, one), b.target_mask[i, 1:].sum()))
    expected = sum(l * n for l, n in per) / sum(n for _, n in per)
    assert loss_of(m, b) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("mode", ["basic", "delta1", "deltaL"])
def test_untrained_loss_is_near_uniform(mode):
    cfg = tiny(mode, vocab_size=50)
    b = random_batch(cfg, 5, batch_size=4, seed=8)
    assert loss_of(DeltaNetModel(cfg), b) == pytest.approx(np.log(50), rel=0.2)


@pytest.mark.parametrize("mode", ["basic", "delta1", "deltaL"])
def test_single_example_loss_falls_every_step(mode):
    cfg = tiny(mode)
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 4, seed=10)
    opt = Adam(m.params(), lr=1e-3)
    losses = [train_step(m, opt, b) for _ in range(50)]
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


def test_pinned_zero_gate_silences_text_rows():
    cfg = tiny("deltaL", pin_gate=0.0)
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=7)
    ctx = m.encode(b.images, b.cond_images, b.cond_reports, b.cond_mask)
    assert np.all(ctx.text_rows.data == 0.0)


# ---------------------------------------------------------------- decoding and traces

def test_greedy_and_batch_greedy_agree():
    cfg = tiny("deltaL")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, batch_size=3, seed=8)
    batch_out = m.greedy_batch(b)
    for i in range(3):
        toks, trace = m.generate(b.images[i], b.cond_images[i], b.cond_reports[i], b.cond_mask[i])
        assert toks == batch_out[i]
        assert len(trace.weights) == len(toks)


def test_beam_width_one_equals_greedy():
    cfg = tiny("delta1")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=9)
    g, _ = m.generate(b.images[0], b.cond_images[0], b.cond_reports[0], b.cond_mask[0])
    bm, _ = m.generate(b.images[0], b.cond_images[0], b.cond_reports[0], b.cond_mask[0],
                       strategy="beam", beam_width=1)
    assert g == bm


def test_beam_score_is_at_least_greedy_score():
    cfg = tiny("delta1")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=10)
    args = (b.images[0], b.cond_images[0], b.cond_reports[0], b.cond_mask[0])
    g, gt = m.generate(*args)
    bm, bt = m.generate(*args, strategy="beam", beam_width=4)
    if g[-1] == EOS and bm[-1] == EOS:
        assert sum(bt.logprobs) >= sum(gt.logprobs) - 1e-12


def test_trace_weights_normalised_and_rows_mapped():
    cfg = tiny("deltaL")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=11)
    toks, trace = m.generate(b.images[0], b.cond_images[0], b.cond_reports[0], b.cond_mask[0])
    for step in trace.weights:
        for w in step.values():
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    rows = export_trace(trace, (0, 1))[0]["banks"]
    K, N = cfg.positions, cfg.cond_len
    for r in rows["delta"]:
        assert r["row"] == r["condition"] * K + r["position"]
    for r in rows["text"]:
        assert r["row"] == r["condition"] * N + r["token"]
    with pytest.raises(IndexError):
        export_trace(trace, (0, len(toks) + 1))


# ---------------------------------------------------------------- gradients and persistence

@pytest.mark.parametrize("mode", ["basic", "delta1"])
def test_end_to_end_gradient_check_small_modes(mode):
    cfg = tiny(mode, dim=8, max_decode_len=5)
    res = gradcheck_model(cfg, n_tokens=2, max_entries=6)
    assert res.passed, res.report.summary()


def test_gradient_check_with_ablation_variant():
    cfg = tiny("delta1", variant="image_report")
    assert gradcheck_model(cfg, n_tokens=2, max_entries=6).passed


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = tiny("deltaL")
    m = DeltaNetModel(cfg)
    opt = Adam(m.params(), lr=1e-2)
    b = random_batch(cfg, 3, seed=12)
    for _ in range(2):
        train_step(m, opt, b)
    path = save_checkpoint(tmp_path / "m.dnck", m, opt, epoch=3, vocab=[f"w{i}" for i in range(12)])
    m2, opt2, header = load_checkpoint(path)
    assert header["epoch"] == 3
    for k, v in m.state_arrays().items():
        assert np.array_equal(v, m2.state_arrays()[k])
    assert opt2.t == opt.t
    for k in opt.m:
        assert np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k])


def test_corrupt_checkpoint_is_rejected(tmp_path):
    m = DeltaNetModel(tiny("basic"))
    path = save_checkpoint(tmp_path / "m.dnck", m)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_float32_model_runs():
    cfg = tiny("delta1", dtype="float32")
    m = DeltaNetModel(cfg)
    b = random_batch(cfg, 3, seed=13)
    assert m.w_p.data.dtype == np.float32
    assert np.isfinite(m.forward_loss(b).item())
