import struct
import zlib

import numpy as np
import pytest
from conftest import SMALL, make_sample

from mcqa import tensor as tc
from mcqa.checkpoint import (Checkpoint, CheckpointMismatchError, CheckpointVersionError,
                             CorruptCheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                             save_checkpoint)
from mcqa.data import collate
from mcqa.network import ModelParams, batch_loss, init_params, tiny_config
from mcqa.optim import AdamState, MissingGradientError, adam_step
from mcqa.tensor import ParameterStore, Tape
from mcqa.train import (TrainRun, accuracy_from_logits, epoch_permutation, evaluate, evaluate_batch, gradcheck,
                        train, train_batches, train_step)

# ---------------------------------------------------------------- Adam


def store_with_grad(value, grad):
    store = ParameterStore()
    store.add("p", value)
    store.accumulate("p", np.asarray(grad, dtype=float))
    return store


def test_adam_first_step_hand_formula():
    g = np.array([3.0, -1e-3, 2e-9, 0.0])
    store = store_with_grad(np.ones(4), g)
    state = AdamState(lr=0.01)
    adam_step(store, state)
    np.testing.assert_allclose(store.value("p") - 1.0, -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)
    assert state.step == 1 and not store.has_grad("p") and not np.any(store.grad("p"))


def test_adam_zero_gradient_no_change():
    store = store_with_grad([1.5, -2.0], [0.0, 0.0])
    adam_step(store, AdamState())
    assert store.value("p").tolist() == [1.5, -2.0]


def test_adam_lr_zero_is_noop(rng):
    store = store_with_grad(rng.normal(size=5), rng.normal(size=5) * 100)
    before = store.value("p").copy()
    state = AdamState(lr=0.0)
    for _ in range(3):
        adam_step(store, state)
        store.accumulate("p", rng.normal(size=5))
    assert np.array_equal(store.value("p"), before)


def test_adam_missing_gradient_names_parameter():
    store = ParameterStore()
    store.add("w_r", [1.0])
    with pytest.raises(MissingGradientError, match="w_r"):
        adam_step(store, AdamState())


def test_adam_matches_reference_over_several_steps(rng):
    store = store_with_grad(rng.normal(size=3), np.zeros(3))
    store.zero_grad()
    theta = store.value("p").copy()
    m = v = np.zeros(3)
    state = AdamState(lr=0.05)
    for t in range(1, 6):
        g = rng.normal(size=3)
        store.accumulate("p", g)
        adam_step(store, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(store.value("p"), theta, rtol=1e-14)


def test_split_batch_equals_full_batch(synth_batches):
    train_set, _ = synth_batches
    batch = train_set.subset(np.arange(8))
    full = init_params(SMALL, 0)
    split = full.copy()
    tc.backward(batch_loss(batch, ModelParams.bind(full, Tape()), SMALL), full)
    adam_step(full, AdamState())
    for half in (np.arange(4), np.arange(4, 8)):
        tc.backward(batch_loss(batch.subset(half), ModelParams.bind(split, Tape()), SMALL), split, scale=0.5)
    adam_step(split, AdamState())
    for n in full.names():
        np.testing.assert_allclose(split.value(n), full.value(n), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- training


def run_for(epochs, **kw):
    return TrainRun(SMALL, "<in-memory>", seed=kw.pop("seed", 0), epochs=epochs, batch_size=kw.pop("batch_size", 16),
                    **kw)


def test_zero_epochs_returns_initialisation(synth_batches):
    result = train_batches(run_for(0), *synth_batches)
    init = init_params(SMALL, 0)
    assert result.metrics == [] and result.checkpoint.meta["epochs_done"] == 0
    assert all(np.array_equal(init.value(n), result.checkpoint.store.value(n)) for n in init.names())


def test_run_validation():
    with pytest.raises(ValueError):
        TrainRun(SMALL, "m", epochs=-1)
    with pytest.raises(ValueError):
        TrainRun(SMALL, "m", batch_size=0)


def test_defaults_follow_reference_protocol():
    run = TrainRun(SMALL, "m")
    assert (run.batch_size, run.epochs, run.lr) == (32, 100, 0.001)


def test_single_sample_loss_decreases(rng):
    cfg = tiny_config()
    batch = collate([make_sample(cfg, rng)], cfg.L)
    store, adam = init_params(cfg, 0), AdamState(lr=0.01)
    losses = [train_step(store, adam, batch, cfg) for _ in range(50)]
    assert losses[-1] < 0.5 * losses[0]
    assert all(np.isfinite(losses))


def test_permutation_depends_on_seed_and_epoch():
    a = epoch_permutation(0, 1, 50)
    assert np.array_equal(a, epoch_permutation(0, 1, 50))
    assert not np.array_equal(a, epoch_permutation(0, 2, 50))
    assert not np.array_equal(a, epoch_permutation(1, 1, 50))
    assert sorted(a.tolist()) == list(range(50))


def test_training_is_deterministic(synth_batches):
    a = train_batches(run_for(2), *synth_batches)
    b = train_batches(run_for(2), *synth_batches)
    assert a.metrics == b.metrics
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    assert [r["epoch"] for r in a.metrics] == [1, 2]
    assert all(0 <= r["val_accuracy"] <= 1 for r in a.metrics)


def test_resume_equals_uninterrupted(synth_batches, tmp_path):
    straight = train_batches(run_for(2), *synth_batches)
    first = train_batches(run_for(1), *synth_batches)
    save_checkpoint(first.checkpoint, tmp_path / "one.ckpt")
    second = train_batches(run_for(2, resume=tmp_path / "one.ckpt"), *synth_batches)
    assert first.metrics + second.metrics == straight.metrics
    assert encode_checkpoint(second.checkpoint) == encode_checkpoint(straight.checkpoint)


def test_resume_rejects_other_seed(synth_batches, tmp_path):
    save_checkpoint(train_batches(run_for(1), *synth_batches).checkpoint, tmp_path / "c")
    with pytest.raises(ValueError, match="seed"):
        train_batches(run_for(2, seed=1, resume=tmp_path / "c"), *synth_batches)


def test_train_from_manifest_writes_log_and_checkpoint(synth_dir, tmp_path):
    path, _ = synth_dir
    lines = []
    run = TrainRun(SMALL, path, epochs=2, batch_size=32, checkpoint=tmp_path / "m.ckpt", log_path=tmp_path / "log")
    result = train(run, echo=lines.append)
    assert (tmp_path / "log").read_text().splitlines() == lines
    assert len(lines) == 2 and '"epoch": 1' in lines[0]
    assert load_checkpoint(tmp_path / "m.ckpt").meta == {"seed": 0, "epochs_done": 2}
    assert result.checkpoint.adam.step == 2 * 2  # 64 samples / 32 per batch


def test_empty_training_split_rejected(synth_batches):
    train_set, val = synth_batches
    with pytest.raises(ValueError, match="empty"):
        train_batches(run_for(1), train_set.subset(np.arange(0)), val)


def test_stop_at_accuracy(synth_batches):
    result = train_batches(run_for(5, stop_at_accuracy=0.0), *synth_batches)
    assert len(result.metrics) == 1 and result.checkpoint.meta["epochs_done"] == 1


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    store = init_params(SMALL, 0)
    special = store.value("w_r").copy()
    special[:4] = [0.0, -0.0, 5e-324, -np.finfo(float).tiny / 3]
    store.set_value("w_r", special)
    for n in store.names():
        store.slots[n]["m"] = rng.normal(size=store.value(n).shape)
        store.slots[n]["v"] = rng.random(size=store.value(n).shape)
    ck = Checkpoint(SMALL, store, AdamState(lr=0.002, step=7), {"seed": 3, "epochs_done": 4})
    save_checkpoint(ck, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c", SMALL)
    assert back.config == SMALL and back.meta == ck.meta and back.adam == ck.adam
    assert back.store.names() == store.names()
    for n in store.names():
        assert back.store.value(n).tobytes() == store.value(n).tobytes()
        assert back.store.slots[n]["m"].tobytes() == store.slots[n]["m"].tobytes()
        assert back.store.slots[n]["v"].tobytes() == store.slots[n]["v"].tobytes()
    assert np.signbit(back.store.value("w_r")[1])


def test_truncated_checkpoint_rejected(tmp_path):
    raw = encode_checkpoint(Checkpoint(SMALL, init_params(SMALL, 0)))
    for cut in (len(raw) - 1, len(raw) // 2, 10):
        with pytest.raises(CorruptCheckpointError):
            decode_checkpoint(raw[:cut])


def test_flipped_bit_rejected():
    raw = bytearray(encode_checkpoint(Checkpoint(SMALL, init_params(SMALL, 0))))
    raw[len(raw) // 2] ^= 1
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        decode_checkpoint(bytes(raw))


def test_unknown_version_rejected():
    raw = bytearray(encode_checkpoint(Checkpoint(SMALL, init_params(SMALL, 0))))
    raw[8:12] = struct.pack("<I", 2)
    body = bytes(raw[:-4])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))


def test_other_config_rejected_naming_tensor(tmp_path):
    save_checkpoint(Checkpoint(SMALL, init_params(SMALL, 0)), tmp_path / "c")
    other = SMALL.with_ablation("fusion")
    with pytest.raises(CheckpointMismatchError, match="fusion.fwd.W"):
        load_checkpoint(tmp_path / "c", other)


# ---------------------------------------------------------------- evaluation


def test_all_correct_predictions_score_one():
    labels = np.eye(4)[[0, 3, 1]]
    assert accuracy_from_logits(["a", "b", "c"], labels * 5.0, labels).accuracy == 1.0


def test_random_a4_scorer_near_quarter():
    rng = np.random.default_rng(7)
    n = 10_000
    labels = np.eye(4)[rng.integers(0, 4, size=n)]
    result = accuracy_from_logits([f"s{i:05d}" for i in range(n)], rng.random((n, 4)), labels)
    assert abs(result.accuracy - 0.25) <= 0.02


def test_accuracy_matches_recount_and_is_ordered_by_id():
    rng = np.random.default_rng(8)
    ids = [f"s{i}" for i in rng.permutation(500)]
    logits = rng.normal(size=(500, 2))
    labels = np.eye(2)[rng.integers(0, 2, size=500)]
    result = accuracy_from_logits(ids, logits, labels)
    recount = sum(1 for p in result.predictions if p.logits[p.correct] == max(p.logits) and
                  p.logits.index(max(p.logits)) == p.correct)
    assert result.accuracy == recount / 500
    assert [p.id for p in result.predictions] == sorted(ids)


def test_accuracy_invariant_to_monotone_transform():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(300, 4))
    labels = np.eye(4)[rng.integers(0, 4, size=300)]
    ids = [str(i) for i in range(300)]
    base = accuracy_from_logits(ids, logits, labels).accuracy
    shift = rng.normal(size=(300, 1)) * 5
    assert accuracy_from_logits(ids, np.exp(logits) + shift, labels).accuracy == base


def test_evaluate_checkpoint_and_task_mismatch(synth_dir, tmp_path):
    path, _ = synth_dir
    save_checkpoint(Checkpoint(SMALL, init_params(SMALL, 0)), tmp_path / "c")
    res = evaluate(tmp_path / "c", path, "a2")
    assert len(res.predictions) == 32 and 0 <= res.accuracy <= 1
    assert res.accuracy == sum(p.hit for p in res.predictions) / 32
    with pytest.raises(ValueError, match="A4"):
        evaluate(tmp_path / "c", path, "a4")
    with pytest.raises(ValueError):
        evaluate(tmp_path / "c", path, "a3")


def test_evaluate_batch_chunking_is_invisible(synth_batches):
    _, val = synth_batches
    store = init_params(SMALL, 4)
    a = evaluate_batch(store, SMALL, val, chunk=3)
    b = evaluate_batch(store, SMALL, val, chunk=256)
    # batched matmuls round differently by shape, so chunking may move the last ulp
    np.testing.assert_allclose([p.logits for p in a.predictions], [p.logits for p in b.predictions],
                               rtol=0, atol=1e-14)
    assert a.accuracy == b.accuracy


# ---------------------------------------------------------------- gradient check


def test_gradcheck_lists_every_parameter_once(tiny_gradcheck):
    names = init_params(tiny_config(), 0).names()
    assert list(tiny_gradcheck.errors) == names
    lines = tiny_gradcheck.lines()
    assert [line.split("\t")[0] for line in lines[:-1]] == names and lines[-1].startswith("overall")


def test_gradcheck_resolvable_entries_agree(tiny_gradcheck):
    # entries whose gradient is well above the float64 difference floor must match tightly
    assert max(tiny_gradcheck.resolved_errors.values()) <= 1e-4


def test_gradcheck_catches_corrupted_backward_rule():
    cfg = tiny_config(L=2)
    with tc.inject_backward_fault("weighted_sum", 1.5):
        report = gradcheck(cfg, seed=0, n_samples=1)
    assert not report.passed
    assert "w_r" in report.failing() and "ffn.W1" not in report.failing()
