import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phrasealign import autodiff as ad
from phrasealign import losses as ls
from phrasealign.augment import AlignedPair, ReferenceRecord, TrainingRecord
from phrasealign.model import PARAM_NAMES, WindowedLM
from phrasealign.textcore import Span


def mp_alignment(correct_logps, hallucinated_logps):
    """Literal ratio form of the per-pair loss at 50 digits."""
    with mp.workdps(50):
        terms = []
        for lc, lh in zip(correct_logps, hallucinated_logps):
            pc, ph = mp.e ** mp.mpf(lc), mp.e ** mp.mpf(lh)
            terms.append(-mp.log(pc / (pc + ph)))
        return float(mp.fsum(terms) / len(terms))


def mp_forward_kl(p_ref, p_theta):
    with mp.workdps(50):
        return float(
            mp.fsum(mp.mpf(p) * mp.log(mp.mpf(p) / mp.mpf(q)) for p, q in zip(p_ref, p_theta))
        )


def uniform_model(V=4, k=3):
    m = WindowedLM.init_random(V, d=3, h=4, k=k, seed=0)
    m.params["W2"][:] = 0.0
    m.params["b2"][:] = 0.0
    return m


def synth_record(rid="r0"):
    # ids only; losses never look at the texts
    return TrainingRecord(
        id=rid, task="short",
        instruction=[4, 5, 6],
        correct=[7, 8, 9, 10],
        hallucinated=[7, 11, 9, 10],
        pairs=(AlignedPair(1, 2, 1, 2, "b", "c"),),
        scene_id="s",
    )


def two_pair_record():
    return TrainingRecord(
        id="r1", task="short",
        instruction=[4, 5],
        correct=[6, 7, 8, 9, 10],
        hallucinated=[6, 11, 8, 12, 13],
        pairs=(
            AlignedPair(1, 2, 1, 2, "a", "b"),
            AlignedPair(3, 5, 3, 5, "c d", "e f"),
        ),
        scene_id="s",
    )


def test_uniform_span_accumulation_pinned():
    m = uniform_model(V=4)
    _, labels = m.logprobs([3], [3, 3])
    (got,) = ls.accumulate_phrase_logps(labels, [Span(0, 2)])
    assert abs(got - (-2.7725887)) < 1e-6
    assert abs(got - 2 * math.log(0.25)) < 1e-12


def test_single_token_span_equals_label():
    rng = np.random.default_rng(0)
    labels = rng.normal(size=6)
    got = ls.accumulate_phrase_logps(labels, [Span(2, 3)])
    assert got[0] == pytest.approx(labels[2], abs=0)


def test_accumulation_matches_probability_product():
    rng = np.random.default_rng(1)
    labels = np.log(rng.uniform(0.05, 0.9, size=8))
    (got,) = ls.accumulate_phrase_logps(labels, [Span(1, 6)])
    direct = float(np.prod(np.exp(labels[1:6])))
    assert abs(got - math.log(direct)) < 1e-10


def test_span_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ls.accumulate_phrase_logps(np.zeros(3), [Span(1, 5)])


def test_alignment_equal_logps_is_ln2():
    l_a, margins = ls.alignment_loss_from_phrase_logps([-3.0], [-3.0])
    assert abs(l_a - math.log(2)) < 1e-12
    assert margins == [0.0]


def test_alignment_pinned_margins_vs_extended_precision():
    lc = [-5.0, -4.0]
    lh = [-4.0, -6.0]  # margins +1 and -2
    l_a, margins = ls.alignment_loss_from_phrase_logps(lc, lh)
    assert margins == [1.0, -2.0]
    assert abs(l_a - 0.7200948) < 1e-6
    assert abs(l_a - mp_alignment(lc, lh)) < 1e-9


def test_alignment_impossible_hallucination_vanishes():
    l_a, _ = ls.alignment_loss_from_phrase_logps([-2.0], [-float("inf")])
    assert l_a == 0.0


def test_alignment_no_pairs_error():
    with pytest.raises(ValueError, match="no phrase pairs"):
        ls.alignment_loss_from_phrase_logps([], [])


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-30, max_value=30))
def test_stability_equivalence_with_ratio_form(margin):
    l_a, _ = ls.alignment_loss_from_phrase_logps([0.0], [margin])
    assert abs(l_a - mp_alignment([0.0], [margin])) < 1e-10


def test_alignment_fine_at_extreme_margins():
    for margin in (1e4, -1e4):
        l_a, _ = ls.alignment_loss_from_phrase_logps([0.0], [margin])
        assert math.isfinite(l_a)
    assert ls.alignment_loss_from_phrase_logps([0.0], [1e4])[0] == pytest.approx(1e4)


@settings(max_examples=40, deadline=None)
@given(st.floats(min_value=-8, max_value=8), st.floats(min_value=0.1, max_value=4))
def test_alignment_monotone_in_margin(margin, bump):
    low, _ = ls.alignment_loss_from_phrase_logps([0.0, -1.0], [margin, 0.5])
    high, _ = ls.alignment_loss_from_phrase_logps([0.0, -1.0], [margin + bump, 0.5])
    assert high > low


def test_kl_two_symbol_pinned():
    ref = np.log(np.array([[0.75, 0.25]]))
    theta = np.log(np.array([[0.5, 0.5]]))
    got = ls.kl_from_rows(ref, theta)
    assert abs(got - 0.1308120) < 1e-6
    assert abs(got - mp_forward_kl([0.75, 0.25], [0.5, 0.5])) < 1e-9


def test_kl_identical_models_zero():
    m = WindowedLM.init_random(9, d=3, h=4, seed=2)
    ref = [ReferenceRecord(id="a", instruction=[4], response=[5, 6, 7])]
    assert ls.kl_divergence(m, m.clone_frozen(), ref) == pytest.approx(0.0, abs=1e-14)
    assert (
        ls.kl_divergence(m, m.clone_frozen(), ref, mode="label_only")
        == pytest.approx(0.0, abs=1e-14)
    )


def test_kl_vocab_mismatch_error():
    a = WindowedLM.init_random(8, d=3, h=4, seed=0)
    b = WindowedLM.init_random(9, d=3, h=4, seed=0)
    ref = [ReferenceRecord(id="a", instruction=[4], response=[5])]
    with pytest.raises(ValueError, match="vocab mismatch"):
        ls.kl_divergence(a, b, ref)


def test_full_vocab_kl_nonnegative_sweep():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        V = int(rng.integers(2, 8))
        ref = rng.normal(size=(1, V))
        theta = rng.normal(size=(1, V))
        ref -= np.log(np.exp(ref).sum())
        theta -= np.log(np.exp(theta).sum())
        assert ls.kl_from_rows(ref, theta) >= -1e-12


def test_label_only_can_be_negative():
    # reference puts little mass on the label, model puts more
    ref = np.log(np.array([[0.1, 0.9]]))
    theta = np.log(np.array([[0.6, 0.4]]))
    got = ls.kl_from_rows(ref, theta, mode="label_only", labels=[0])
    assert got < 0


def test_dpa_combination_pinned():
    with mp.workdps(50):
        oracle = mp.mpf(mp_alignment([-5.0, -4.0], [-4.0, -6.0])) + mp.mpf("0.4") * mp.mpf(
            mp_forward_kl([0.75, 0.25], [0.5, 0.5])
        )
    l_a, _ = ls.alignment_loss_from_phrase_logps([-5.0, -4.0], [-4.0, -6.0])
    l_d = ls.kl_from_rows(np.log([[0.75, 0.25]]), np.log([[0.5, 0.5]]))
    total = l_a + 0.4 * l_d
    assert abs(total - 0.7724196) < 1e-6
    assert abs(total - float(oracle)) < 1e-9


def test_dpa_loss_alpha_zero_and_at_init():
    m = WindowedLM.init_random(14, d=4, h=5, seed=4)
    ref = m.clone_frozen()
    rec = synth_record()
    rr = [ReferenceRecord(id="a", instruction=[4], response=[5, 6])]
    out0 = ls.dpa_loss(rec, rr, m, ref, alpha=0.0)
    assert out0.total == out0.l_a
    out = ls.dpa_loss(rec, rr, m, ref, alpha=0.4)
    assert out.l_d == pytest.approx(0.0, abs=1e-14)
    assert out.total == pytest.approx(out.l_a, abs=1e-14)
    assert abs(out.total - (out.l_a + out.alpha * out.l_d)) < 1e-12


def test_dpo_at_init_is_ln2_and_beta_validated():
    m = WindowedLM.init_random(14, d=4, h=5, seed=5)
    rec = synth_record()
    assert ls.dpo_loss(rec, m, m.clone_frozen(), beta=0.1) == pytest.approx(math.log(2))
    with pytest.raises(ValueError, match="beta"):
        ls.dpo_loss(rec, m, m.clone_frozen(), beta=0.0)


def test_dpo_softplus_identity_in_beta():
    m = WindowedLM.init_random(14, d=4, h=5, seed=6)
    ref = m.clone_frozen()
    m.params["W2"][1, 4] += 0.3
    rec = synth_record()
    r = (
        ls.sequence_logprob(m, rec.instruction, rec.correct)
        - ls.sequence_logprob(ref, rec.instruction, rec.correct)
        - ls.sequence_logprob(m, rec.instruction, rec.hallucinated)
        + ls.sequence_logprob(ref, rec.instruction, rec.hallucinated)
    )
    for beta in (0.1, 0.2, 1.0):
        direct = float(np.maximum(-beta * r, 0) + np.log1p(np.exp(-abs(beta * r))))
        assert ls.dpo_loss(rec, m, ref, beta) == pytest.approx(direct, abs=1e-12)


def test_dpa_graph_matches_numpy_path():
    m = WindowedLM.init_random(14, d=4, h=5, seed=7)
    ref = m.clone_frozen()
    m.params["W1"] += np.random.default_rng(0).normal(0, 0.05, size=m.params["W1"].shape)
    records = [synth_record("r0"), two_pair_record()]
    refs = [
        ReferenceRecord(id="a", instruction=[4, 5], response=[6, 7, 8]),
        ReferenceRecord(id="b", instruction=[5], response=[9, 10]),
    ]
    leaves = {n: ad.leaf(p) for n, p in m.params.items()}
    for mode in ("full_vocab", "label_only"):
        graph = ls.build_dpa_graph(leaves, records, refs, ref, alpha=0.4, k=m.k, kl_mode=mode)
        l_a_np = np.mean([ls.alignment_loss(r, m)[0] for r in records])
        l_d_np = ls.kl_divergence(ref, m, refs, mode=mode)
        assert float(graph["l_a"].value) == pytest.approx(l_a_np, abs=1e-12)
        assert float(graph["l_d"].value) == pytest.approx(l_d_np, abs=1e-12)
        assert float(graph["loss"].value) == pytest.approx(l_a_np + 0.4 * l_d_np, abs=1e-12)


def test_dpo_graph_matches_numpy_path():
    m = WindowedLM.init_random(14, d=4, h=5, seed=8)
    ref = m.clone_frozen()
    m.params["W2"][2, 5] -= 0.2
    records = [synth_record("r0"), two_pair_record()]
    leaves = {n: ad.leaf(p) for n, p in m.params.items()}
    graph = ls.build_dpo_graph(leaves, records, ref, beta=0.1, k=m.k)
    direct = np.mean([ls.dpo_loss(r, m, ref, 0.1) for r in records])
    assert float(graph["loss"].value) == pytest.approx(float(direct), abs=1e-12)


def test_alignment_gradient_locality():
    m = WindowedLM.init_random(14, d=4, h=5, seed=9)
    rec = two_pair_record()
    leaves = {n: ad.leaf(p) for n, p in m.params.items()}
    graph = ls.build_dpa_graph(leaves, [rec], [], m.clone_frozen(), alpha=0.0, k=m.k)
    ad.backward(graph["l_a"])
    g = graph["logits"].grad
    (c_slice, h_slice) = graph["slices"][:2]
    in_span = np.zeros(g.shape[0], dtype=bool)
    for p in rec.pairs:
        in_span[c_slice[0] + p.c_start : c_slice[0] + p.c_end] = True
        in_span[h_slice[0] + p.h_start : h_slice[0] + p.h_end] = True
    row_mag = np.abs(g).max(axis=1)
    assert row_mag[~in_span].max() < 1e-12
    assert row_mag[in_span].min() > 1e-8


def test_dpo_gradient_touches_every_position():
    m = WindowedLM.init_random(14, d=4, h=5, seed=10)
    ref = m.clone_frozen()
    m.params["W2"][3, 6] += 0.1
    rec = two_pair_record()
    leaves = {n: ad.leaf(p) for n, p in m.params.items()}
    graph = ls.build_dpo_graph(leaves, [rec], ref, beta=0.1, k=m.k)
    ad.backward(graph["loss"])
    row_mag = np.abs(graph["logits"].grad).max(axis=1)
    assert (row_mag > 1e-8).mean() >= 0.9


def _loss_f(builder):
    def f(leaf_list):
        params = dict(zip(PARAM_NAMES, leaf_list))
        return builder(params)

    return f


def gradcheck_fixture(V=14, d=3, h=4, k=3, seed=11):
    """Models and records leaving no parameter coordinate gradient-free.

    A coordinate with an exactly-zero analytic gradient cannot pass a
    relative-error check (central differences return pure float noise
    there), so every instruction contains every vocab id (the pooled
    path reaches each embedding row in each loss), one span is longer
    than one token, and the reference model is an independent draw
    (theta == ref would make the divergence term nearly flat).
    """
    m = WindowedLM.init_random(V, d=d, h=h, k=k, seed=seed)
    ref = WindowedLM.init_random(V, d=d, h=h, k=k, seed=seed + 1)
    everything = list(range(V))
    rec_a = TrainingRecord(
        id="ga", task="short", instruction=everything,
        correct=[7, 8, 9, 10], hallucinated=[7, 11, 9, 10],
        pairs=(AlignedPair(1, 2, 1, 2, "b", "c"),), scene_id="s",
    )
    rec_b = TrainingRecord(
        id="gb", task="short", instruction=everything,
        correct=[6, 7, 8, 9, 10], hallucinated=[6, 11, 8, 12, 13],
        pairs=(
            AlignedPair(1, 2, 1, 2, "a", "b"),
            AlignedPair(3, 5, 3, 5, "c d", "e f"),
        ),
        scene_id="s",
    )
    refs = [
        ReferenceRecord(id="ra", instruction=everything, response=[5, 6, 7, 8]),
        ReferenceRecord(id="rb", instruction=everything, response=[11, 12, 13, 2]),
    ]
    return m, ref, [rec_a, rec_b], refs


def test_grad_check_all_losses_small():
    k = 3
    m, ref, records, refs = gradcheck_fixture(k=k)
    params = [m.params[n] for n in PARAM_NAMES]

    checks = {
        "l_a": lambda p: ls.build_dpa_graph(p, records, [], ref, 0.0, k)["l_a"],
        "l_d": lambda p: ls.build_dpa_graph(p, records, refs, ref, 1.0, k)["l_d"],
        "dpa": lambda p: ls.build_dpa_graph(p, records, refs, ref, 0.4, k)["loss"],
        "dpo": lambda p: ls.build_dpo_graph(p, records, ref, 0.1, k)["loss"],
    }
    for name, builder in checks.items():
        err = ad.grad_check(_loss_f(builder), params)
        assert err < 1e-4, (name, err)
