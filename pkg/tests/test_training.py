import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from advinterp import training
from advinterp.adversary import PerturbationBudget
from advinterp.data import ImageDataset, channel_mean_std, synth_splits
from advinterp.errors import ConfigError, TrainingDiverged
from advinterp.model import ClassifierModel, GroupMask, group_checksum, group_parameters
from advinterp.training import (
    FinetuneConfig,
    TrainConfig,
    evaluate,
    evaluate_robust,
    grid_search_cv,
    make_optimizer,
    predict,
    robust_finetune,
    select_cell,
    train_adversarial,
    train_standard,
    transfer_configs,
    transfer_schedule,
)


@pytest.fixture(scope="module")
def splits():
    out, _ = synth_splits(24, 10, image_size=16, n_val=6, seed=3)
    return out


def tiny_model(splits, seed=0):
    mean, std = channel_mean_std(splits["train"])
    return ClassifierModel(3, (4, 8, 8, 16), 3, 16, False, mean, std, seed=seed)


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# optimizer and loop


@pytest.mark.parametrize("theta0,target,lr", [(2.0, 0.5, 1e-3), (-1.0, 3.0, 3e-4), (0.1, 0.1 + 1e-9, 1e-2)])
def test_single_adam_step_closed_form(theta0, target, lr):
    theta = torch.nn.Parameter(torch.tensor([theta0], dtype=torch.float64))
    opt = make_optimizer([theta], lr)
    loss = 0.5 * (theta - target) ** 2
    loss.sum().backward()
    opt.step()
    # coupled weight decay, then bias-corrected moments reduce to m = g, v = g^2 after one step
    g = (theta0 - target) + 5e-4 * theta0
    expected = theta0 - lr * g / (abs(g) + 1e-8)
    assert theta.item() == pytest.approx(expected, rel=0, abs=1e-15)


def test_zero_epochs_leave_model_unchanged(splits):
    model = tiny_model(splits)
    before = state(model)
    _, trace = train_standard(model, splits["train"], TrainConfig(epochs=0))
    assert trace == [] and same_state(before, state(model))


def test_training_is_seed_deterministic(splits):
    cfg = TrainConfig(batch_size=8, epochs=2, seed=4)
    a, ta = train_standard(tiny_model(splits), splits["train"], cfg)
    b, tb = train_standard(tiny_model(splits), splits["train"], cfg)
    assert ta == tb and same_state(state(a), state(b))
    c, tc = train_standard(tiny_model(splits), splits["train"], TrainConfig(batch_size=8, epochs=2, seed=5))
    assert tc != ta


def test_adversarial_with_zero_budget_equals_standard(splits):
    cfg = TrainConfig(batch_size=8, epochs=2, seed=1)
    a, ta = train_standard(tiny_model(splits), splits["train"], cfg)
    b, tb = train_adversarial(tiny_model(splits), splits["train"], cfg, PerturbationBudget(0.0))
    assert ta == tb and same_state(state(a), state(b))


def test_adversarial_training_changes_the_run(splits):
    cfg = TrainConfig(batch_size=8, epochs=1, seed=1)
    a, _ = train_standard(tiny_model(splits), splits["train"], cfg)
    b, _ = train_adversarial(tiny_model(splits), splits["train"], cfg, PerturbationBudget(0.5))
    assert group_checksum(a) != group_checksum(b)


def test_trace_records_epochs_and_decay(splits):
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=3, lr_decay_epoch=2)
    _, trace = train_standard(tiny_model(splits), splits["train"], cfg, val_data=splits["val"])
    assert [r["epoch"] for r in trace] == [1, 2, 3]
    assert [r["lr"] for r in trace] == pytest.approx([1e-3, 1e-3, 1e-4])
    for r in trace:
        assert {"train_loss", "train_acc", "val_loss", "val_acc"} <= r.keys()
        assert 0 <= r["train_acc"] <= 1


def test_divergence_raises_with_trace(splits):
    bad = splits["train"].subset(range(len(splits["train"])))
    bad.images[5, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as info:
        train_standard(tiny_model(splits), bad, TrainConfig(batch_size=64, epochs=2))
    assert info.value.trace == []


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"batch_size": 0}, {"epochs": -1}, {"weight_decay": -1}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.weight_decay, cfg.beta1, cfg.beta2) == (5e-4, 0.9, 0.999)
    head, full = transfer_configs()
    assert (head.learning_rate, head.batch_size, head.epochs) == (1e-3, 32, 10)
    assert (full.learning_rate, full.batch_size, full.epochs, full.lr_decay_epoch, full.lr_decay_factor) == (
        3e-4,
        16,
        25,
        15,
        10.0,
    )


def test_transfer_head_phase_only_moves_group5(splits):
    model = tiny_model(splits)
    body = group_checksum(model, ("group1", "group2", "group3", "group4"))
    head = group_checksum(model, ("group5",))
    _, trace = transfer_schedule(
        model, splits["train"], TrainConfig(epochs=1, batch_size=16), TrainConfig(epochs=0, batch_size=16)
    )
    assert group_checksum(model, ("group1", "group2", "group3", "group4")) == body
    assert group_checksum(model, ("group5",)) != head
    assert [r["phase"] for r in trace] == ["head"]
    assert all(p.requires_grad for p in model.parameters())


def test_transfer_full_phase_moves_everything(splits):
    model = tiny_model(splits)
    before = {k: v.clone() for k, v in group_parameters(model).items()}
    _, trace = transfer_schedule(
        model, splits["train"], TrainConfig(epochs=1, batch_size=16), TrainConfig(epochs=1, batch_size=16)
    )
    after = group_parameters(model)
    for g in range(1, 6):
        assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith(f"group{g}/"))
    assert [r["phase"] for r in trace] == ["head", "full"]


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_empty_dataset_is_rejected(splits):
    empty = splits["test"].subset([])
    with pytest.raises(ConfigError):
        evaluate(tiny_model(splits), empty)


def test_evaluate_memorized_labels(splits):
    model = tiny_model(splits)
    data = splits["test"]
    relabeled = ImageDataset(data.images, predict(model, data), data.ids, data.classes)
    assert evaluate(model, relabeled) == 1.0


def test_robust_evaluation_at_zero_epsilon_is_clean(splits):
    model = tiny_model(splits)
    assert evaluate_robust(model, splits["test"], PerturbationBudget(0.0)) == evaluate(model, splits["test"])


@pytest.fixture(scope="module")
def trained(splits):
    model, _ = train_standard(tiny_model(splits), splits["train"], TrainConfig(batch_size=8, epochs=6, seed=2))
    return model


def test_robust_accuracy_does_not_exceed_clean(trained, splits):
    clean = evaluate(trained, splits["test"])
    for eps in (0.1, 0.3, 1.0):
        assert evaluate_robust(trained, splits["test"], PerturbationBudget(eps), seed=7) <= clean + 0.01


def test_robust_evaluation_is_seeded(trained, splits):
    b = PerturbationBudget(0.3)
    assert evaluate_robust(trained, splits["test"], b, seed=3) == evaluate_robust(trained, splits["test"], b, seed=3)


# ---------------------------------------------------------------------------
# grid search


def rigged(monkeypatch, landscape):
    """Replace training with a lookup: a model 'trained' at (lr, bs) scores landscape[(lr, bs)]."""
    calls = []

    def fake_train(model, data, cfg, budget=None, val_data=None):
        model.cell = (cfg.learning_rate, cfg.batch_size)
        calls.append((cfg.learning_rate, cfg.batch_size, len(data)))
        if landscape[model.cell] is None:
            raise TrainingDiverged("planted divergence")
        return model, []

    def fake_eval(model, data, batch_size=256):
        return landscape[model.cell]

    monkeypatch.setattr(training, "train_standard", fake_train)
    monkeypatch.setattr(training, "evaluate", fake_eval)
    return calls


def test_grid_search_finds_planted_cell(monkeypatch, splits):
    landscape = {(lr, bs): 0.5 for lr in training.GRID_LEARNING_RATES for bs in training.GRID_BATCH_SIZES}
    landscape[(1e-3, 8)] = None  # high rate diverges
    landscape[(1e-3, 16)] = None
    landscape[(3e-4, 32)] = 0.9
    calls = rigged(monkeypatch, landscape)
    res = grid_search_cv(lambda: tiny_model(splits), splits["train"], TrainConfig(seed=0), refit=False)
    assert (res.best.learning_rate, res.best.batch_size) == (3e-4, 32)
    assert len(res.table) == 9 and res.n_runs == 45 and len(calls) == 45
    assert select_cell(res.table)["mean_acc"] == max(r["mean_acc"] for r in res.table)
    diverged = [r for r in res.table if r["learning_rate"] == 1e-3 and r["batch_size"] in (8, 16)]
    assert all(r["mean_acc"] == 0.0 for r in diverged)
    # each fold trains on the other four fifths
    n = len(splits["train"])
    assert {c[2] for c in calls} <= {n - math.ceil(n / 5), n - n // 5}


def test_grid_search_tie_break(monkeypatch, splits):
    landscape = {(lr, bs): 0.7 for lr in (1e-3, 1e-4) for bs in (8, 32)}
    rigged(monkeypatch, landscape)
    res = grid_search_cv(lambda: tiny_model(splits), splits["train"], TrainConfig(), (1e-3, 1e-4), (32, 8), refit=False)
    assert (res.best.learning_rate, res.best.batch_size) == (1e-4, 8)


def test_single_cell_grid(monkeypatch, splits):
    rigged(monkeypatch, {(1e-4, 16): 0.3})
    res = grid_search_cv(lambda: tiny_model(splits), splits["train"], TrainConfig(), (1e-4,), (16,), folds=2, refit=False)
    assert (res.best.learning_rate, res.best.batch_size) == (1e-4, 16)
    assert res.n_runs == 2


def test_empty_grid_is_rejected(splits):
    with pytest.raises(ConfigError):
        grid_search_cv(lambda: tiny_model(splits), splits["train"], TrainConfig(), (), (8,))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1e-3, 3e-4, 1e-4]), st.sampled_from([8, 16, 32]), st.sampled_from([0.2, 0.5, 0.8])), min_size=1, max_size=9, unique_by=lambda t: t[:2]))
def test_selection_is_argmax_with_deterministic_ties(cells):
    table = [{"learning_rate": lr, "batch_size": bs, "mean_acc": acc} for lr, bs, acc in cells]
    chosen = select_cell(table)
    top = max(r["mean_acc"] for r in table)
    tied = sorted((r["learning_rate"], r["batch_size"]) for r in table if r["mean_acc"] == top)
    assert (chosen["learning_rate"], chosen["batch_size"]) == tied[0]
    assert select_cell(list(reversed(table))) == chosen


def test_grid_search_with_real_training(splits):
    res = grid_search_cv(
        lambda: tiny_model(splits), splits["train"], TrainConfig(epochs=1, seed=2), (1e-3, 1e-4), (16,), folds=2
    )
    assert res.n_runs == 4
    assert select_cell(res.table)["learning_rate"] == res.best.learning_rate
    assert res.model is not None and len(res.trace) == 1


# ---------------------------------------------------------------------------
# robust fine-tuning


def test_finetune_config_defaults_and_validation():
    cfg = FinetuneConfig()
    assert (cfg.learning_rate, cfg.early_stop_patience, cfg.lr_decay_patience, cfg.lr_decay_factor) == (1e-5, 10, 5, 10.0)
    for bad in ({"early_stop_patience": 0}, {"lr_decay_patience": 0}, {"lr_decay_factor": 1.0}, {"learning_rate": 0}):
        with pytest.raises(ConfigError):
            FinetuneConfig(**bad)


def test_finetune_rejects_non_suffix(trained, splits):
    cfg = FinetuneConfig(unfreeze=GroupMask((False, True, False, False, True)))
    with pytest.raises(ConfigError):
        robust_finetune(trained, splits["train"], splits["val"], cfg)


def test_finetune_all_frozen_is_a_no_op(trained, splits):
    before = state(trained)
    model, trace = robust_finetune(trained, splits["train"], splits["val"], FinetuneConfig(unfreeze=GroupMask.all(False)))
    assert trace == [] and same_state(before, state(model))


@pytest.mark.parametrize("first_group", [2, 3, 5])
def test_finetune_keeps_frozen_groups_bitwise(splits, first_group):
    model, _ = train_standard(tiny_model(splits), splits["train"], TrainConfig(batch_size=8, epochs=1))
    frozen = [f"group{g}" for g in range(1, first_group)]
    free = [f"group{g}" for g in range(first_group, 6)]
    before_frozen, before_free = group_checksum(model, frozen), group_checksum(model, free)
    cfg = FinetuneConfig(unfreeze=GroupMask.suffix(first_group), learning_rate=1e-3, max_epochs=3, batch_size=8)
    model, trace = robust_finetune(model, splits["train"], splits["val"], cfg)
    assert group_checksum(model, frozen) == before_frozen
    assert trace[0]["epoch"] == 0
    best = min(r["val_loss"] for r in trace)
    assert training.evaluate_loss(model, splits["val"])[0] == pytest.approx(best, rel=1e-6)
    if best < trace[0]["val_loss"]:
        assert group_checksum(model, free) != before_free
    assert all(p.requires_grad for p in model.parameters())


def scripted_finetune(monkeypatch, splits, losses, **cfg):
    """Run fine-tuning with the validation loss following ``losses`` (epoch 0 first)."""
    seq = iter(losses)
    monkeypatch.setattr(training, "evaluate_loss", lambda model, data, batch_size=256: (next(seq), 0.5))
    model = tiny_model(splits)
    cfg = FinetuneConfig(batch_size=32, **cfg)
    return robust_finetune(model, splits["train"], splits["val"], cfg)[1]


def test_early_stopping_after_patience(monkeypatch, splits):
    trace = scripted_finetune(monkeypatch, splits, [1.0, 0.8, 0.9, 0.9, 0.7, 0.9, 0.9, 0.9] + [1.0] * 50,
                              early_stop_patience=3, lr_decay_patience=2, max_epochs=40)
    # best at epoch 4, then three stagnant epochs end the run
    assert trace[-1]["epoch"] == 7
    # two stagnant epochs (2, 3) decay the rate for epoch 4; two more (5, 6) decay it again
    assert [r["lr"] for r in trace[1:]] == pytest.approx([1e-5, 1e-5, 1e-5, 1e-6, 1e-6, 1e-6, 1e-7])


def test_max_epochs_bounds_the_run(monkeypatch, splits):
    trace = scripted_finetune(monkeypatch, splits, [1.0 - 0.01 * i for i in range(20)], max_epochs=4)
    assert [r["epoch"] for r in trace] == [0, 1, 2, 3, 4]


def test_incoming_model_is_kept_when_nothing_improves(monkeypatch, splits):
    seq = iter([0.1] + [0.5] * 20)
    monkeypatch.setattr(training, "evaluate_loss", lambda model, data, batch_size=256: (next(seq), 0.5))
    model = tiny_model(splits)
    before = state(model)
    cfg = FinetuneConfig(learning_rate=1e-2, early_stop_patience=2, batch_size=32)
    model, trace = robust_finetune(model, splits["train"], splits["val"], cfg)
    assert len(trace) == 3
    assert same_state(before, state(model))
