import numpy as np
import pytest
from scipy.special import erf

from hybridlm import autodiff as ad
from hybridlm.errors import ConfigError, DimensionError, FrozenViolation, LengthError
from hybridlm.models import LanguageModel, forward_hidden, train_arm
from hybridlm.projector import (LAYOUT, Projector, ProjectorRecord, _assert_frozen, assemble_executor_input,
                                decode_with_projector, project, projector_loss, train_projector)
from hybridlm.vocab import DEFAULT_VOCAB as V

from conftest import tiny_config


def _gelu64(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _record(rng, plan_len=4, d=24, question="7+5=", answer="12"):
    return ProjectorRecord(V.encode(question), rng.normal(size=(plan_len, d)).astype(np.float32),
                           V.encode(answer), plan_len)


def test_layout_order():
    assert LAYOUT == ("bos", "plan", "sep", "question")


def test_output_shape():
    p = Projector(24, 16, plan_len=64)
    assert p.d_hidden == 96
    assert project(p, np.zeros((64, 24), dtype=np.float32)).shape == (64, 16)
    assert project(p, np.zeros((3, 64, 24), dtype=np.float32)).shape == (3, 64, 16)


def test_zero_weights_give_bias_rows():
    p = Projector(4, 3, d_hidden=5)
    for k in ("W1", "b1", "W2"):
        p.params[k].data[...] = 0.0
    p.params["b2"].data[...] = [1.0, -2.0, 0.5]
    out = project(p, np.random.default_rng(0).normal(size=(6, 4))).data
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (6, 1)))


def test_matches_straight_line_numpy():
    rng = np.random.default_rng(1)
    p = Projector(5, 7, d_hidden=11, seed=2)
    for k in ("b1", "b2"):
        p.params[k].data[...] = rng.normal(size=p.params[k].shape)
    h = rng.normal(size=(9, 5)).astype(np.float32)
    W1, b1, W2, b2 = (p.params[k].data.astype(np.float64) for k in ("W1", "b1", "W2", "b2"))
    expected = _gelu64(h.astype(np.float64) @ W1 + b1) @ W2 + b2
    np.testing.assert_allclose(project(p, h).data, expected, atol=1e-5)


def test_width_mismatch():
    with pytest.raises(DimensionError, match="24"):
        project(Projector(24, 16), np.zeros((4, 20), dtype=np.float32))


@pytest.mark.parametrize("d_ddlm,d_arm", [(24, 16), (16, 24), (8, 8)])
def test_any_widths(d_ddlm, d_arm):
    arm = LanguageModel(tiny_config(d=d_arm), seed=0)
    p = Projector(d_ddlm, d_arm, plan_len=4)
    rec = _record(np.random.default_rng(0), d=d_ddlm)
    assert np.isfinite(projector_loss(p, arm, [rec]).item())


def test_empty_plan_reduces_to_bos_sep_question(tiny_arm):
    q = V.encode("3*4=")
    x = assemble_executor_input(ad.Tensor(np.zeros((0, 16), dtype=np.float32)), q, tiny_arm)
    expected = tiny_arm.embed_tokens(np.array([V.bos_id, V.sep_id] + q)).data
    np.testing.assert_array_equal(x.data, expected)


def test_ninety_six_rows():
    arm = LanguageModel(tiny_config(max_len=96), seed=0)
    q = V.encode("1" * 29 + "=")
    x = assemble_executor_input(project(Projector(24, 16), np.zeros((64, 24), dtype=np.float32)), q, arm)
    assert x.shape == (96, 16)
    with pytest.raises(LengthError):
        assemble_executor_input(project(Projector(24, 16), np.zeros((64, 24), dtype=np.float32)), q + q[:1], arm)
    with pytest.raises(DimensionError):
        assemble_executor_input(ad.Tensor(np.zeros((4, 8), dtype=np.float32)), q, arm)


def test_text_embeddings_in_plan_slot_reproduce_text_channel(tiny_arm):
    plan, q = V.encode("9 * 4 = 36."), V.encode("9*4+1=")
    x = assemble_executor_input(tiny_arm.embed_tokens(np.array(plan)), q, tiny_arm)
    via_embed, _ = forward_hidden(tiny_arm, x.data)
    via_ids, _ = forward_hidden(tiny_arm, [V.bos_id] + plan + [V.sep_id] + q)
    np.testing.assert_allclose(via_embed.data, via_ids.data, atol=1e-5)


def test_loss_matches_per_record_oracle(tiny_arm):
    rng = np.random.default_rng(4)
    p = Projector(24, 16, plan_len=4, seed=1)
    recs = [_record(rng), _record(rng, question="10*10-3=", answer="97")]
    batched = projector_loss(p, tiny_arm, recs).item()
    # oracle: score each record alone from its assembled rows
    nll, count = 0.0, 0
    for r in recs:
        x = assemble_executor_input(project(p, r.plan_hidden), r.question + r.gold_answer, tiny_arm)
        logp = ad.log_softmax_np(forward_hidden(tiny_arm, x.data)[0].data.astype(np.float64))
        first = 1 + 4 + 1 + len(r.question) - 1
        for j, tok in enumerate(r.gold_answer + [V.eos_id]):
            nll -= logp[first + j, tok]
            count += 1
    assert abs(batched - nll / count) < 1e-5


def test_gradients_match_finite_differences(tiny_arm):
    tiny_arm.freeze()
    rng = np.random.default_rng(5)
    recs = [_record(rng, d=6), _record(rng, d=6, question="4-9=", answer="-5")]
    base = Projector(6, 16, d_hidden=8, plan_len=4, seed=3)
    arrays = [base.params[k].data + 0.1 * rng.normal(size=base.params[k].shape) for k in ("W1", "b1", "W2", "b2")]

    def fn(ts):
        p = Projector(6, 16, d_hidden=8, plan_len=4, params=dict(zip(("W1", "b1", "W2", "b2"), ts)))
        return projector_loss(p, tiny_arm, recs)

    assert ad.check_gradients(fn, arrays, max_coords=40) < 1e-3
    assert all(t.grad is None for t in tiny_arm.params.values())


def test_single_record_gradient_check(tiny_arm):
    tiny_arm.freeze()
    rec = _record(np.random.default_rng(6), plan_len=2, d=5)
    base = Projector(5, 16, d_hidden=6, plan_len=2, seed=4)
    names = ("W1", "b1", "W2", "b2")

    def fn(ts):
        return projector_loss(Projector(5, 16, d_hidden=6, plan_len=2, params=dict(zip(names, ts))), tiny_arm, [rec])

    assert ad.check_gradients(fn, [base.params[k].data for k in names]) < 1e-3


def test_one_parameter_set_serves_every_plan_length():
    arm = LanguageModel(tiny_config(max_len=300), seed=0)
    p = Projector(24, 16, plan_len=64)
    before = p.state_bytes()
    for P in (64, 128, 256):
        rec = _record(np.random.default_rng(P), plan_len=P)
        assert assemble_executor_input(project(p, rec.plan_hidden), rec.question, arm).shape == (P + 6, 16)
        assert np.isfinite(projector_loss(p, arm, [rec]).item())
    assert p.state_bytes() == before


def _trainset(n=40):
    rng = np.random.default_rng(0)
    rec = _record(rng)
    return [rec] * n


def test_lr_zero_is_bitwise_noop(tiny_arm):
    p = Projector(24, 16, plan_len=4)
    before, arm_before = p.state_bytes(), tiny_arm.state_bytes()
    rep = train_projector(p, tiny_arm, _trainset(), epochs=2, lr=0.0)
    assert p.state_bytes() == before and tiny_arm.state_bytes() == arm_before
    assert rep.final_loss == pytest.approx(rep.initial_loss, abs=1e-7)


@pytest.fixture(scope="module")
def copy_arm():
    """Executor trained to repeat its two-digit plan, so the plan slot steers the answer."""
    arm = LanguageModel(tiny_config(d=32), seed=0)
    corpus = [([V.bos_id] + V.encode(f"{i:02d}") + [V.sep_id] + V.encode("7+5="), V.encode(f"{i:02d}"))
              for i in range(100)] * 3
    assert train_arm(arm, corpus, epochs=30, lr=3e-3, seed=0, batch_size=32).heldout_exact_match == 1.0
    return arm


def test_memorizes_single_record_with_frozen_executor(copy_arm):
    rec = _record(np.random.default_rng(0), plan_len=2)
    p = Projector(24, 32, plan_len=2, seed=0)
    arm_before = copy_arm.state_bytes()
    rep = train_projector(p, copy_arm, [rec] * 40, epochs=200, lr=1e-2, batch_size=64)
    assert rep.final_loss < 0.1 * rep.initial_loss
    assert rep.heldout_exact_match == 1.0
    assert decode_with_projector(p, copy_arm, rec, 6) == V.encode("12")
    assert copy_arm.state_bytes() == arm_before
    assert all(t.grad is None and not t.requires_grad for t in copy_arm.params.values())


def test_freeze_guard(tiny_arm):
    _assert_frozen(tiny_arm.freeze())
    name = next(iter(tiny_arm.params))
    tiny_arm.params[name].grad = np.ones_like(tiny_arm.params[name].data)
    with pytest.raises(FrozenViolation, match=name):
        _assert_frozen(tiny_arm)
    tiny_arm.unfreeze()
    with pytest.raises(FrozenViolation):
        _assert_frozen(tiny_arm)


def test_rejects_bad_training_inputs(tiny_arm):
    p = Projector(24, 16, plan_len=4)
    with pytest.raises(ConfigError):
        train_projector(p, tiny_arm, [], 1, 1e-3)
    with pytest.raises(ConfigError):
        train_projector(p, tiny_arm, _trainset(), 1, -1.0)
    mixed = [_record(np.random.default_rng(0)), _record(np.random.default_rng(0), plan_len=5)]
    with pytest.raises(ConfigError):
        projector_loss(p, tiny_arm, mixed)


def test_checkpoint_round_trip(tmp_path):
    p = Projector(24, 16, plan_len=128, seed=9)
    blob = p.save(tmp_path / "p.ckpt")
    q = Projector.load(tmp_path / "p.ckpt")
    assert (q.d_ddlm, q.d_arm, q.d_hidden, q.plan_len) == (24, 16, 96, 128)
    assert q.state_bytes() == blob


def test_loading_a_model_checkpoint_as_projector_fails(tmp_path, tiny_arm):
    tiny_arm.save(tmp_path / "m.ckpt")
    with pytest.raises(ConfigError):
        Projector.load(tmp_path / "m.ckpt")
