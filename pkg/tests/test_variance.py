import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from musesvs.embedding import JointEmbeddingSeq
from musesvs.variance import (
    CRDP,
    DurationPlan,
    EnergyPredictor,
    NoteNormDurationPredictor,
    PitchPredictor,
    PitchStats,
    SyllableDurationPredictor,
    Teacher,
    VarianceAdaptor,
    duration_loss,
    note_norm_loss,
    pitch_loss,
    realize_f0,
    round_durations,
    syllable_duration_loss,
)


def stats(mean, cv, note=None, voiced=None):
    mean = torch.tensor(mean, dtype=torch.float64)
    cv = torch.tensor(cv, dtype=torch.float64)
    note = torch.zeros_like(mean) if note is None else torch.tensor(note, dtype=torch.float64)
    voiced = torch.ones_like(mean, dtype=torch.bool) if voiced is None else torch.tensor(voiced)
    return PitchStats(note, mean, cv, voiced)


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# pitch


def test_zero_residual_head_returns_note_pitch():
    pred = PitchPredictor(8, 2, 16, 3, 0.5).eval()
    _zero(pred.residual_head)
    note = torch.tensor([[220.0, 0.0, 330.0]])
    voiced = note > 0
    out = pred(torch.randn(1, 3, 8), note, voiced)
    assert torch.equal(out.mean_hz, note)


def test_cv_head_at_zero_weights_is_ln2():
    pred = PitchPredictor(8, 2, 16, 3, 0.5).eval()
    _zero(pred.cv_head)
    out = pred(torch.randn(1, 4, 8), torch.full((1, 4), 200.0), torch.ones(1, 4, dtype=torch.bool))
    torch.testing.assert_close(out.cv, torch.full((1, 4), math.log(2.0)))


def test_deterministic_pitch_variant_has_no_cv_head():
    pred = PitchPredictor(8, statistical=False)
    assert pred.cv_head is None
    out = pred.eval()(torch.randn(1, 3, 8), torch.full((1, 3), 200.0), torch.ones(1, 3, dtype=torch.bool))
    assert torch.all(out.cv == 0)


def test_pitch_loss_examples():
    assert pitch_loss(stats([[200.0]], [[0.05]]), stats([[200.0]], [[0.05]])) == 0
    one = pitch_loss(stats([[202.0]], [[0.06]]), stats([[200.0]], [[0.05]]), 1.0, 10.0)
    assert float(one) == pytest.approx(2.1, abs=1e-9)
    two = pitch_loss(stats([[202.0, 300.0]], [[0.05, 0.06]]), stats([[200.0, 300.0]], [[0.05, 0.05]]), 1.0, 10.0)
    assert float(two) == pytest.approx(1.05, abs=1e-9)


def test_pitch_loss_ignores_rests_and_checks_length():
    pred = stats([[210.0, 999.0]], [[0.0, 1.0]], voiced=[[True, False]])
    targ = stats([[200.0, 0.0]], [[0.0, 0.0]], voiced=[[True, False]])
    assert float(pitch_loss(pred, targ)) == pytest.approx(10.0)
    with pytest.raises(ValueError):
        pitch_loss(stats([[1.0]], [[0.0]]), stats([[1.0, 2.0]], [[0.0, 0.0]]))


@given(st.lists(st.tuples(st.floats(50, 800), st.floats(0, 0.2), st.floats(-20, 20), st.floats(-0.05, 0.05)),
                min_size=1, max_size=8))
def test_pitch_loss_nonnegative_and_zero_iff_equal(rows):
    mu = [[r[0] for r in rows]]
    cv = [[r[1] for r in rows]]
    mu_p = [[r[0] + r[2] for r in rows]]
    cv_p = [[max(0.0, r[1] + r[3]) for r in rows]]
    loss = float(pitch_loss(stats(mu_p, cv_p), stats(mu, cv)))
    assert loss >= 0
    same = all(a == b for a, b in zip(mu_p[0], mu[0])) and all(a == b for a, b in zip(cv_p[0], cv[0]))
    assert (loss == 0) == same


def test_realize_f0_flat_without_vibrato():
    f0 = realize_f0(stats([210.0], [0.0]), [50])
    assert np.all(f0 == 210.0)


def test_realize_f0_std_matches_cv():
    f0 = realize_f0(stats([200.0], [0.05]), [2000], vibrato_rate_hz=5.5, rng_seed=3)
    assert f0.std() == pytest.approx(10.0, rel=0.05)


def test_realize_f0_mean_converges():
    f0 = realize_f0(stats([200.0], [0.05]), [10_000], rng_seed=1)
    assert f0.mean() == pytest.approx(200.0, rel=0.01)


def test_realize_f0_deterministic_and_rests():
    s = PitchStats(np.array([0.0, 200.0]), np.array([0.0, 200.0]), np.array([0.0, 0.04]), np.array([False, True]))
    a = realize_f0(s, [3, 40], rng_seed=7)
    b = realize_f0(s, [3, 40], rng_seed=7)
    assert np.array_equal(a, b)
    assert np.all(a[:3] == 0)
    with pytest.raises(ValueError):
        realize_f0(s, [3])


# energy


def test_energy_predictor_shape_and_zero_weights():
    pred = EnergyPredictor(8, 2, 16, 3, 0.5).eval()
    assert pred(torch.randn(2, 5, 8)).shape == (2, 5)
    _zero(pred)
    torch.testing.assert_close(pred(torch.randn(1, 4, 8)), torch.full((1, 4), math.log(2.0)))


# durations


def test_sync_err_bookkeeping():
    plan = DurationPlan(torch.tensor([[12.0, 9.0]]), torch.tensor([[10.0, 10.0]]), torch.ones(1, 2, dtype=torch.bool))
    assert plan.sync_err.tolist() == [[2.0, 1.0]]
    plan.check()


def _crdp(zero_head=True, seed=0):
    torch.manual_seed(seed)
    m = CRDP(8, 16).double().eval()
    if zero_head:
        _zero(m.head)
    return m


def test_crdp_zero_head_returns_notes():
    m = _crdp()
    note = torch.tensor([[10.0, 4.0, 7.0]], dtype=torch.float64)
    plan = m(torch.randn(1, 3, 8, dtype=torch.float64), note, torch.ones(1, 3, dtype=torch.bool))
    assert torch.equal(plan.predicted, note)
    assert torch.all(plan.sync_err == 0)


def test_crdp_step_sensitive_to_sync_error():
    m = _crdp(zero_head=False)
    state = torch.zeros(1, 16, dtype=torch.float64)
    e = torch.randn(1, 8, dtype=torch.float64)
    note = torch.tensor([10.0], dtype=torch.float64)
    h = 1e-4
    up, _ = m.step(state, e, torch.tensor([5.0 + h], dtype=torch.float64), note)
    down, _ = m.step(state, e, torch.tensor([5.0 - h], dtype=torch.float64), note)
    assert abs(float((up - down).detach())) / (2 * h) > 1e-8


def test_crdp_rollout_telescopes_and_holds_padding():
    m = _crdp(zero_head=False, seed=1)
    m.train()
    note = torch.tensor([[10.0, 4.0, 7.0, 1.0], [3.0, 3.0, 1.0, 1.0]], dtype=torch.float64)
    mask = torch.tensor([[True, True, True, True], [True, True, False, False]])
    plan = m(torch.randn(2, 4, 8, dtype=torch.float64), note, mask)
    plan.check(atol=0.0)
    assert torch.all(plan.predicted[1, 2:] == 0)
    assert torch.equal(plan.sync_err[1, 2:], plan.sync_err[1, 1].expand(2))


def test_crdp_eval_clamps_to_one_frame():
    m = _crdp(zero_head=True)
    with torch.no_grad():
        m.head.bias.fill_(-50.0)
    plan = m(torch.randn(1, 3, 8, dtype=torch.float64), torch.full((1, 3), 5.0, dtype=torch.float64),
             torch.ones(1, 3, dtype=torch.bool))
    assert torch.all(plan.predicted == 1.0)


def _plan(pred, note):
    pred = torch.tensor([pred], dtype=torch.float64)
    note = torch.tensor([note], dtype=torch.float64)
    return DurationPlan(pred, note, torch.ones_like(pred, dtype=torch.bool))


def test_duration_loss_examples():
    assert float(duration_loss(_plan([10, 10], [10, 10]), torch.tensor([[10.0, 10.0]]))) == 0
    a = duration_loss(_plan([11, 9], [10, 10]), torch.tensor([[11.0, 9.0]], dtype=torch.float64), 0.3)
    assert float(a) == pytest.approx(0.15, abs=1e-12)
    b = duration_loss(_plan([12, 10], [10, 10]), torch.tensor([[10.0, 10.0]], dtype=torch.float64), 0.3)
    assert float(b) == pytest.approx(2.6, abs=1e-12)
    with pytest.raises(ValueError):
        duration_loss(_plan([12, 10], [10, 10]), torch.tensor([[10.0]]))


@given(st.lists(st.tuples(st.floats(1, 40), st.integers(1, 40), st.integers(1, 40)), min_size=1, max_size=10))
def test_duration_loss_nonnegative(rows):
    plan = _plan([r[0] for r in rows], [r[1] for r in rows])
    target = torch.tensor([[float(r[2]) for r in rows]], dtype=torch.float64)
    assert float(duration_loss(plan, target)) >= 0


def test_note_norm_baseline():
    m = NoteNormDurationPredictor(8, 2, 16, 3, 0.5).eval()
    _zero(m.net)
    with torch.no_grad():
        m.net.out.bias.fill_(math.log(math.e - 1))  # ratio 1
    note = torch.tensor([[10.0, 4.0]])
    plan = m(torch.randn(1, 2, 8), note, torch.ones(1, 2, dtype=torch.bool))
    torch.testing.assert_close(plan.predicted, note)
    ratio_plan = DurationPlan(torch.tensor([[15.0]]), torch.tensor([[10.0]]), torch.ones(1, 1, dtype=torch.bool),
                              ratio=torch.tensor([[1.5]]))
    assert float(note_norm_loss(ratio_plan, torch.tensor([[15.0]]))) == 0.0
    ratio_plan.ratio = torch.tensor([[1.0]])
    assert float(note_norm_loss(ratio_plan, torch.tensor([[15.0]]))) == pytest.approx(0.25)


def test_syllable_baseline_loss():
    plan = _plan([6.0, 4.0], [5.0, 5.0])
    syl = torch.tensor([[0, 0]])
    loss = syllable_duration_loss(plan, torch.tensor([[5.0, 5.0]], dtype=torch.float64), syl)
    assert float(loss) == pytest.approx(1.0)  # phoneme MSE 1, syllable term 0
    exact = syllable_duration_loss(_plan([5.0, 5.0], [5.0, 5.0]), torch.tensor([[5.0, 5.0]], dtype=torch.float64), syl)
    assert float(exact) == 0
    with pytest.raises(ValueError):
        syllable_duration_loss(plan, torch.tensor([[5.0, 5.0]]), None)


def test_syllable_baseline_predictor_positive():
    m = SyllableDurationPredictor(8, 2, 16, 3, 0.5).eval()
    plan = m(torch.randn(1, 4, 8), torch.full((1, 4), 5.0), torch.ones(1, 4, dtype=torch.bool))
    assert torch.all(plan.predicted >= 1)


@given(st.lists(st.floats(0.0, 30.0), min_size=1, max_size=30))
def test_round_durations_carry_remainder(values):
    pred = torch.tensor([values], dtype=torch.float64)
    mask = torch.ones_like(pred, dtype=torch.bool)
    out = round_durations(pred, mask)[0].numpy()
    assert out.min() >= 1
    deficit = np.cumsum(np.maximum(0, 1 - np.asarray(values)))
    drift = np.cumsum(out) - np.cumsum(values)
    # rounding alone contributes at most half a frame; clamping can only add frames
    assert np.all(drift <= deficit + 0.5 + 1e-9)
    if min(values) >= 1.5:
        assert np.all(np.abs(drift) <= 0.5 + 1e-9)


# the adaptor


def _adaptor(mode="interpolated", predictors=("crdp", "note_norm", "syllable"), seed=0):
    torch.manual_seed(seed)
    return VarianceAdaptor(8, 3, mode, 2, 16, 3, 0.0, 16, 93.75, predictors).double().eval()


def _inputs(B=2, L=5):
    torch.manual_seed(11)
    E0 = JointEmbeddingSeq(torch.randn(B, L, 8, dtype=torch.float64), 0)
    mask = torch.ones(B, L, dtype=torch.bool)
    mask[1, -1] = False
    note_hz = torch.full((B, L), 220.0, dtype=torch.float64)
    note_hz[0, 2] = 0.0
    note_dur = torch.randint(2, 20, (B, L))
    return E0, mask, note_hz, note_dur


def _randomise_encoders(ad):
    for enc in (ad.singer_encoder, ad.emotion_encoder, ad.pitch_encoder, ad.energy_encoder):
        torch.nn.init.normal_(enc.out.weight, std=0.3)


def test_adaptor_zero_residuals_keep_E0():
    ad = _adaptor()
    with torch.no_grad():
        ad.singer_table.weight.zero_()
        ad.emotion_table.weight.zero_()
    E0, mask, note_hz, note_dur = _inputs()
    out = ad(E0, mask, torch.tensor([0, 1]), torch.tensor([1, 2]), torch.tensor([0.5, 1.0], dtype=torch.float64),
             note_hz, note_dur)
    assert out.joint.stage == 4
    torch.testing.assert_close(out.joint.values, E0.values, rtol=0, atol=0)


def test_adaptor_stage_trace():
    ad = _adaptor()
    E0, mask, note_hz, note_dur = _inputs()
    out = ad(E0, mask, torch.tensor([0, 1]), torch.tensor([1, 2]), torch.tensor([0.5, 1.0], dtype=torch.float64),
             note_hz, note_dur)
    assert [s.stage for s in out.stages] == [0, 1, 2, 3, 4]
    assert set(out.durations) == {"crdp", "note_norm", "syllable"}
    for plan in out.durations.values():
        plan.check(atol=1e-9)


def test_pitch_depends_on_singer():
    ad = _adaptor()
    _randomise_encoders(ad)
    E0, mask, note_hz, note_dur = _inputs()
    args = (torch.tensor([1, 2]), torch.tensor([0.3, 0.3], dtype=torch.float64), note_hz, note_dur)
    a = ad(E0, mask, torch.tensor([0, 0]), *args)
    b = ad(E0, mask, torch.tensor([2, 2]), *args)
    assert not torch.allclose(a.pitch.mean_hz, b.pitch.mean_hz)


def test_teacher_forcing_matches_inference_when_targets_equal_predictions():
    ad = _adaptor()
    _randomise_encoders(ad)
    E0, mask, note_hz, note_dur = _inputs()
    args = (E0, mask, torch.tensor([0, 1]), torch.tensor([1, 2]), torch.tensor([0.7, 1.0], dtype=torch.float64),
            note_hz, note_dur)
    free = ad(*args)
    teacher = Teacher(free.pitch.mean_hz, free.pitch.cv, free.energy, note_dur)
    forced = ad(*args, teacher=teacher)
    assert torch.equal(forced.joint.values, free.joint.values)
    with pytest.raises(ValueError):
        ad(*args, teacher=Teacher(free.pitch.mean_hz[:, :2], free.pitch.cv, free.energy, note_dur))


def test_emotion_stage_is_affine_in_t():
    ad = _adaptor()
    _randomise_encoders(ad)
    E0, mask, note_hz, note_dur = _inputs()

    def E2(t):
        out = ad(E0, mask, torch.tensor([0, 1]), torch.tensor([1, 2]), torch.tensor([t, t], dtype=torch.float64),
                 note_hz, note_dur)
        return out.stages[2].values

    torch.testing.assert_close(E2(0.5), (E2(0.0) + E2(1.0)) / 2, rtol=0, atol=1e-12)
    torch.testing.assert_close(E2(1.5), 1.5 * E2(1.0) - 0.5 * E2(0.0), rtol=0, atol=1e-12)
