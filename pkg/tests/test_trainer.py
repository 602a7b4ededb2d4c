import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from moeamc import trainer
from moeamc.models import build_model
from moeamc.sigsynth import Dataset, DatasetSpec, generate_dataset
from moeamc.trainer import Adam, EarlyStopping, TrainConfig, TrainHistory, adam_step, evaluate, predict, train

TINY_CFGS = {
    "hsrm": {"n_stacks": 2, "units_per_stack": 1, "channels": 4, "head_hidden": (8, 8)},
    "lsrm": {"d_model": 8, "n_heads": 2, "ffn_hidden": 8, "head_hidden": (8, 8)},
    "gate": {"hidden": (8, 4)},
}
TINY_SPEC = DatasetSpec(schemes=("BPSK", "QPSK", "OOK"), snr_grid_db=(0.0, 10.0), frame_len=32, frames_per_cell=4, seed=3)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(TINY_SPEC)


def tiny_model(kind="hsrm", seed=0):
    return build_model(kind, 3, 32, seed=seed, configs=TINY_CFGS)


# adam ------------------------------------------------------------------------------


def test_adam_zero_gradient_no_move():
    theta = [np.array([0.3, -1.0])]
    adam_step(theta, [np.zeros(2)], {}, 1)
    assert_array_equal(theta[0], [0.3, -1.0])


def test_adam_first_step_magnitude():
    theta = [np.zeros(1)]
    adam_step(theta, [np.ones(1)], {}, 1, lr=1e-3)
    assert abs(theta[0][0] - (-9.99999999e-4)) < 1e-10
    assert abs(theta[0][0] + 1e-3 / (1 + 1e-8)) < 1e-18


def test_adam_first_step_opposes_gradient():
    g = np.random.default_rng(0).standard_normal(20)
    theta = [np.zeros(20)]
    adam_step(theta, [g], {}, 1)
    assert np.all(np.sign(theta[0]) == -np.sign(g))


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(1)
    grads = rng.standard_normal((6, 3))
    theta, state = [np.zeros(3)], {}
    ref = np.zeros(3)
    m = v = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(theta, [g], state, t, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(theta[0], ref, rtol=0, atol=1e-15)


def test_adam_errors():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], {}, 1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(2)], {}, 0)


def test_adam_state_isolation():
    rng = np.random.default_rng(2)
    ga, gb = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    seq_a, seq_b, sa, sb = [np.ones(4)], [np.ones(4)], {}, {}
    for t in range(5):
        adam_step(seq_a, [ga[t]], sa, t + 1)
    for t in range(5):
        adam_step(seq_b, [gb[t]], sb, t + 1)
    int_a, int_b, ia, ib = [np.ones(4)], [np.ones(4)], {}, {}
    for t in range(5):
        adam_step(int_a, [ga[t]], ia, t + 1)
        adam_step(int_b, [gb[t]], ib, t + 1)
    assert_array_equal(int_a[0], seq_a[0])
    assert_array_equal(int_b[0], seq_b[0])


def test_adam_class_treats_missing_grad_as_zero():
    from moeamc.tensorcore import Tensor

    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p])
    opt.step()
    assert_array_equal(p.data, [1.0, 1.0])


# early stopping ---------------------------------------------------------------------


def run_stopper(losses, patience):
    es = EarlyStopping(patience)
    for epoch, loss in enumerate(losses):
        es.update(loss)
        if es.should_stop:
            return epoch, es.best_epoch
    return None, es.best_epoch


@pytest.mark.parametrize(
    "losses, patience, stop, best",
    [
        ([3, 2, 2, 2, 2, 2], 2, 3, 1),
        ([3, 2, 2, 2], 1, 2, 1),
        ([5, 4, 3, 2, 1], 1, None, 4),
        ([1, 2, 0.5, 0.6, 0.7], 2, 4, 2),
        ([2.0] * 40, 30, 30, 0),
        ([5, 4] + [4.5] * 29 + [3.0], 30, None, 31),
        ([5, 4] + [4.5] * 30, 30, 31, 1),
        ([5, 4] + [4.5] * 28 + [3.0] + [9] * 30, 30, 60, 30),
    ],
)
def test_early_stopping_state_machine(losses, patience, stop, best):
    assert run_stopper(losses, patience) == (stop, best)


def test_early_stopping_rejects_bad_patience():
    with pytest.raises(ValueError):
        EarlyStopping(0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=10, patience=11)
    with pytest.raises(ValueError):
        TrainConfig(model_kind="rnn")
    big = TrainConfig.full_scale()
    assert (big.batch_size, big.max_epochs, big.patience) == (1024, 500, 30)
    d = TrainConfig()
    assert (d.batch_size, d.max_epochs, d.patience, d.lr) == (64, 100, 30, 1e-3)


def _scripted_train(monkeypatch, ds, losses, patience, max_epochs=None):
    """Train with validation losses taken from `losses`; returns (history, snapshots, model)."""
    model = tiny_model()
    snapshots = []
    script = iter(losses)

    def fake_val(m, x, labels):
        snapshots.append(m.state_dict())
        return float(next(script)), 0.0

    monkeypatch.setattr(trainer, "_val_metrics", fake_val)
    cfg = TrainConfig(batch_size=8, max_epochs=max_epochs or len(losses), patience=patience, model_kind="hsrm")
    _, hist = train(model, ds, ds, cfg)
    return hist, snapshots, model


@pytest.mark.parametrize(
    "losses, patience, n_epochs, best",
    [
        ([3, 2, 2, 2, 2, 2], 2, 4, 1),
        ([3, 2, 1.5, 1, 1, 1], 1, 5, 3),
        ([4, 3] + [3.5] * 30 + [1.0] * 5, 30, 32, 1),
    ],
)
def test_train_stops_and_restores_best(monkeypatch, tiny_ds, losses, patience, n_epochs, best):
    hist, snaps, model = _scripted_train(monkeypatch, tiny_ds, losses, patience)
    assert len(hist.records) == n_epochs
    assert hist.stopped_early
    assert hist.best_epoch == best
    state = model.state_dict()
    for k, v in snaps[best].items():
        assert_array_equal(state[k], v)
    # the restored weights are really the earlier ones, not the last epoch's
    assert any(not np.array_equal(snaps[-1][k], v) for k, v in snaps[best].items())


def test_train_runs_to_max_epochs_without_stop(monkeypatch, tiny_ds):
    hist, snaps, model = _scripted_train(monkeypatch, tiny_ds, [5, 4, 3], patience=2)
    assert len(hist.records) == 3 and not hist.stopped_early and hist.best_epoch == 2


# training loop ---------------------------------------------------------------------------


def test_max_epochs_zero_returns_initial(tiny_ds):
    model = tiny_model()
    before = model.state_dict()
    best, hist = train(model, tiny_ds, tiny_ds, TrainConfig(max_epochs=0, model_kind="hsrm"))
    assert hist.records == [] and hist.best_epoch == -1
    for k, v in before.items():
        assert_array_equal(best[k], v)
        assert_array_equal(model.state_dict()[k], v)


@pytest.mark.parametrize("kind", ["hsrm", "lsrm", "moe"])
def test_training_is_deterministic(tiny_ds, kind):
    cfg = TrainConfig(batch_size=8, max_epochs=3, patience=3, seed=9, model_kind=kind)
    runs = [train(tiny_model(kind), tiny_ds, tiny_ds, cfg)[1].to_csv() for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_ignores_snr(tiny_ds):
    scrambled = Dataset(tiny_ds.spec, tiny_ds.iq, tiny_ds.class_idx, np.full(len(tiny_ds), -99.0))
    cfg = TrainConfig(batch_size=8, max_epochs=2, patience=2, model_kind="moe")
    a = train(tiny_model("moe"), tiny_ds, tiny_ds, cfg)[1].to_csv()
    b = train(tiny_model("moe"), scrambled, scrambled, cfg)[1].to_csv()
    assert a == b


def test_train_rejects_bad_datasets(tiny_ds):
    cfg = TrainConfig(max_epochs=1, patience=1, model_kind="hsrm")
    with pytest.raises(ValueError):
        train(tiny_model(), tiny_ds.subset([], "train"), tiny_ds, cfg)
    narrow = build_model("hsrm", 2, 32, configs=TINY_CFGS)
    with pytest.raises(ValueError):
        train(narrow, tiny_ds, tiny_ds, cfg)


def test_history_csv_format():
    h = TrainHistory([trainer.EpochRecord(0, 1.5, 2.25, 0.5), trainer.EpochRecord(1, 1.0, 2.0, 0.625)], 1, False)
    assert h.to_csv() == "epoch,train_loss,val_loss,val_acc\n0,1.5,2.25,0.5\n1,1,2,0.625\n"


def test_monotone_overfit_on_32_examples():
    ds = generate_dataset(DatasetSpec(schemes=("BPSK", "QAM16"), snr_grid_db=(10.0,), frame_len=32, frames_per_cell=16, seed=5))
    model = build_model("hsrm", 2, 32, seed=1, configs=TINY_CFGS)
    probs, _ = predict(model, ds)
    initial = -np.mean(np.log(probs[np.arange(len(ds)), ds.class_idx]))
    _, hist = train(model, ds, ds, TrainConfig(batch_size=32, max_epochs=100, patience=100, model_kind="hsrm"))
    assert hist.records[-1].train_loss < 0.1 * initial


# evaluation ------------------------------------------------------------------------------


class FixedPredictor:
    """Stand-in model that emits a fixed one-hot prediction per example."""

    dtype = np.float32

    def __init__(self, preds, k):
        self.preds, self.k, self.pos = np.asarray(preds), k, 0

    def __call__(self, x, training=False):
        from moeamc.tensorcore import Tensor

        n = x.shape[0]
        out = np.eye(self.k)[self.preds[self.pos : self.pos + n]]
        self.pos += n
        return Tensor(out)


def test_evaluate_examples(tiny_ds):
    four = tiny_ds.subset([0, 1, 2, 3], "test")
    acc, preds = evaluate(FixedPredictor(four.class_idx, 3), four)
    assert acc == 1.0
    wrong = (four.class_idx + 1) % 3
    acc, preds = evaluate(FixedPredictor(np.r_[four.class_idx[:2], wrong[2:]], 3), four)
    assert acc == 0.5
    assert_array_equal(preds, np.r_[four.class_idx[:2], wrong[2:]])
    with pytest.raises(ValueError):
        evaluate(FixedPredictor([], 3), four.subset([], "test"))


def test_untrained_models_near_chance():
    ds = generate_dataset(DatasetSpec(frames_per_cell=23, seed=21))
    assert len(ds) >= 2000
    for kind in ("hsrm", "lsrm", "moe"):
        acc, _ = evaluate(build_model(kind, 8, 128, seed=4), ds)
        assert abs(acc - 1 / 8) <= 0.04, (kind, acc)


def test_untrained_loss_near_log_k():
    """Batch statistics, not the placeholder running ones, set a fresh model's scale."""
    from moeamc import tensorcore as tc
    from moeamc.tensorcore import Tensor

    ds = generate_dataset(DatasetSpec(frames_per_cell=2, seed=22))
    x = Tensor(trainer.normalize_power(ds.iq).astype(np.float32))
    for kind in ("hsrm", "lsrm", "moe"):
        loss = tc.cross_entropy(build_model(kind, 8, 128, seed=4)(x, True), ds.class_idx).item()
        assert abs(loss / math.log(8) - 1) < 0.15, (kind, loss)
