import numpy as np
import pytest

from prefmod import adapters as ad
from prefmod import checkpoint as ck
from prefmod import config, sampling, training
from prefmod.config import ConfigError
from prefmod.prompts import EMPTY
from prefmod.synthdata import Sample

from conftest import tiny_experiment


def fake_samples(users):
    return [Sample(EMPTY, np.zeros((3, 4, 4)), u, seed=i) for i, u in enumerate(users)]


# batching ----------------------------------------------------------------------

def test_epoch_covers_every_sample_once():
    samples = fake_samples([0, 0, 1, 1, 2, 2, 2])
    batches = training.epoch_batches(samples, 3, False, seed=1, epoch=0)
    seen = sorted(s.seed for b in batches for s in b.samples)
    assert seen == list(range(7))
    assert [len(b) for b in batches] == [3, 3, 1]


def test_distinct_user_batches():
    samples = fake_samples([0] * 8 + [1] * 2 + [2] * 2)
    for epoch in range(20):
        for b in training.epoch_batches(samples, 3, True, seed=4, epoch=epoch):
            assert len(set(b.user_ids)) >= 2
    # a leftover singleton is folded into the previous batch
    sizes = [len(b) for b in training.epoch_batches(fake_samples([0, 1, 0, 1, 0]), 2, True, 0, 0)]
    assert sizes == [2, 3]


def test_batches_deterministic_and_epochs_differ():
    samples = fake_samples(list(range(10)))
    a = training.epoch_batches(samples, 4, False, seed=2, epoch=0)
    b = training.epoch_batches(samples, 4, False, seed=2, epoch=0)
    c = training.epoch_batches(samples, 4, False, seed=2, epoch=1)
    key = lambda bs: [[s.seed for s in x.samples] for x in bs]  # noqa: E731
    assert key(a) == key(b) and key(a) != key(c)


def test_batch_errors():
    with pytest.raises(ConfigError, match="two distinct users"):
        training.epoch_batches(fake_samples([3, 3, 3]), 2, True, 0, 0)
    with pytest.raises(ConfigError):
        training.epoch_batches(fake_samples([0, 1]), 1, True, 0, 0)
    with pytest.raises(ConfigError):
        training.epoch_batches([], 2, False, 0, 0)


def test_stream_is_epochs_concatenated():
    samples = fake_samples(list(range(5)))
    stream = training.make_batches(samples, 2, False, seed=3)
    got = [next(stream) for _ in range(6)]
    want = (training.epoch_batches(samples, 2, False, 3, 0)
            + training.epoch_batches(samples, 2, False, 3, 1))
    assert [[s.seed for s in b.samples] for b in got] == [[s.seed for s in b.samples] for b in want]


# stage 0 -----------------------------------------------------------------------

def test_stage0_deterministic(tiny_cfg, tiny_data, tiny_stage0):
    again = training.pretrain_backbone(tiny_data, tiny_cfg)
    assert ck.to_bytes(again) == ck.to_bytes(tiny_stage0)
    assert tiny_stage0.step == tiny_cfg.stage0.steps and tiny_stage0.meta["stage"] == 0


def test_stage0_loss_decreases(tiny_data):
    cfg = tiny_experiment(**{"stage0.steps": 120, "stage0.lr": 3e-3})
    losses = [r["loss"] for r in training.pretrain_backbone(tiny_data, cfg).history]
    assert np.mean(losses[-30:]) < 0.9 * np.mean(losses[:30])


def test_stage0_resume_equivalence(tiny_cfg, tiny_data, tiny_stage0):
    half = training.pretrain_backbone(tiny_data, tiny_cfg, stop_at=7)
    resumed = training.pretrain_backbone(tiny_data, tiny_cfg, resume=ck.from_bytes(ck.to_bytes(half)))
    assert ck.to_bytes(resumed) == ck.to_bytes(tiny_stage0)


def test_resume_rejects_other_config(tiny_cfg, tiny_data):
    half = training.pretrain_backbone(tiny_data, tiny_cfg, stop_at=2)
    other = config.replace(tiny_cfg, **{"stage0.lr": 5e-4})
    with pytest.raises(ck.CheckpointError, match="different config"):
        training.pretrain_backbone(tiny_data, other, resume=half)


# stage 1 -----------------------------------------------------------------------

def test_stage1_zero_start_matches_backbone(tiny_cfg, tiny_data, tiny_stage0):
    st = training.init_stage1(tiny_stage0, tiny_data, tiny_cfg)
    prompts = [tiny_data.samples[0].prompt, EMPTY]
    plain = sampling.sample_images(st.backbone, tiny_cfg.backbone, prompts, [0, 1], 3)
    users = [st.bank[0], st.bank[1]]
    personal = sampling.sample_images(st.backbone, tiny_cfg.backbone, prompts, [0, 1], 3,
                                      adapters=st.adapters, acfg=tiny_cfg.adapter, embeddings=users)
    assert plain.tobytes() == personal.tobytes()


def test_stage1_backbone_frozen(tiny_stage0, tiny_stage1):
    assert (training.param_digest(tiny_stage1.group("backbone"))
            == training.param_digest(tiny_stage0.group("backbone")))
    assert tiny_stage1.meta["base_digest"] == training.param_digest(tiny_stage0.group("backbone"))
    assert tiny_stage1.group("bank")["table"].shape[0] == 3


def test_stage1_resume_equivalence(tiny_cfg, tiny_data, tiny_stage0, tiny_stage1):
    half = training.train_stage1(tiny_data, tiny_stage0, tiny_cfg, stop_at=5)
    assert half.step == 5
    resumed = training.train_stage1(tiny_data, tiny_stage0, tiny_cfg,
                                    resume=ck.from_bytes(ck.to_bytes(half)))
    assert ck.to_bytes(resumed) == ck.to_bytes(tiny_stage1)


def test_stage1_requires_stage0_base(tiny_cfg, tiny_data, tiny_stage1):
    with pytest.raises(ck.CheckpointError, match="stage-0"):
        training.train_stage1(tiny_data, tiny_stage1, tiny_cfg)


def test_dispersion_increases_separation(tiny_cfg, tiny_data, tiny_stage0, tiny_stage1):
    off = config.replace(tiny_cfg, **{"loss.use_dispersion": False})
    plain = training.train_stage1(tiny_data, tiny_stage0, off)
    sep_on = training.separation_trace(tiny_stage1)[-1][1]
    sep_off = training.separation_trace(plain)[-1][1]
    assert sep_on > sep_off
    assert all("disp_shared" not in r for r in plain.history)
    assert all("disp_shared" in r and "disp_distinct" in r for r in tiny_stage1.history)


def test_separation_trace_logged(tiny_cfg, tiny_stage1):
    steps = [s for s, _ in training.separation_trace(tiny_stage1)]
    assert steps[0] == 0 and steps[-1] == tiny_cfg.stage1.steps


def test_separation_zero_at_init(tiny_cfg, tiny_data, tiny_stage0):
    st = training.init_stage1(tiny_stage0, tiny_data, tiny_cfg)
    assert training.user_separation(st.backbone, st.adapters, st.bank.table.data, tiny_cfg) == 0.0


# stage 2 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def stage1_state(tiny_stage1):
    return training.Stage1State.from_checkpoint(tiny_stage1)


def test_linear_combination_only_moves_alpha(tiny_cfg, tiny_data, stage1_state):
    uid = tiny_data.heldout_users[0].user_id
    hist = tiny_data.samples_of(uid)[:2]
    before = training.param_digest(stage1_state.adapters)
    fit = training.train_new_user(hist, stage1_state.bank, stage1_state.adapters,
                                  stage1_state.backbone, tiny_cfg, user_id=uid, seed=0)
    assert training.param_digest(stage1_state.adapters) == before
    assert fit.alpha.shape == (3,) and not np.allclose(fit.alpha, 1 / 3)
    expect = ad.combine(stage1_state.bank.table, ad.Tensor(fit.alpha)).data
    np.testing.assert_allclose(fit.embedding.matrix.data, expect, atol=1e-14)
    assert len(fit.history) == tiny_cfg.stage2.steps


def test_direct_mode_fits_embedding(tiny_cfg, tiny_data, stage1_state):
    hist = tiny_data.samples_of(tiny_data.heldout_users[0].user_id)[:2]
    fit = training.train_new_user(hist, stage1_state.bank, stage1_state.adapters,
                                  stage1_state.backbone, tiny_cfg, seed=0, mode="direct")
    assert fit.alpha is None and fit.bank_rows is None
    assert fit.embedding.matrix.shape == (tiny_cfg.adapter.tokens, tiny_cfg.adapter.d_user)


def test_bank_subset_of_one(tiny_cfg, tiny_data, stage1_state):
    cfg = config.replace(tiny_cfg, **{"stage2.bank_subset": 1})
    hist = tiny_data.samples_of(tiny_data.heldout_users[1].user_id)[:3]
    fit = training.train_new_user(hist, stage1_state.bank, stage1_state.adapters,
                                  stage1_state.backbone, cfg, seed=1)
    assert len(fit.bank_rows) == 1 and fit.alpha.shape == (1,)
    row = stage1_state.bank.table.data[fit.bank_rows[0]]
    np.testing.assert_allclose(fit.embedding.matrix.data, fit.alpha[0] * row, atol=1e-14)


def test_stage2_deterministic_and_seeded(tiny_cfg, tiny_data, stage1_state):
    hist = tiny_data.samples_of(tiny_data.heldout_users[0].user_id)[:4]
    args = (hist, stage1_state.bank, stage1_state.adapters, stage1_state.backbone, tiny_cfg)
    a = training.train_new_user(*args, seed=3)
    b = training.train_new_user(*args, seed=3)
    c = training.train_new_user(*args, seed=4)
    assert a.alpha.tobytes() == b.alpha.tobytes()
    assert a.alpha.tobytes() != c.alpha.tobytes()


def test_stage2_errors(tiny_cfg, stage1_state):
    with pytest.raises(ValueError):
        training.train_new_user([], stage1_state.bank, stage1_state.adapters,
                                stage1_state.backbone, tiny_cfg)
    with pytest.raises(ConfigError):
        training.train_new_user(fake_samples([0]), stage1_state.bank, stage1_state.adapters,
                                stage1_state.backbone, tiny_cfg, mode="nearest")


def test_window_means():
    assert training.window_means(list(range(10)), 5) == [2.0, 7.0]
    assert training.window_means([1.0, 2.0], 5) == []
