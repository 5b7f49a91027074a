import csv

import numpy as np
import pytest
import torch

from saliencytune.backend import build_reference_cnn
from saliencytune.data import (
    DEFAULT_CLASSES,
    FeedbackRecord,
    ImageSample,
    feedback_pairs,
    simulate_feedback,
)
from saliencytune.errors import ConfigError, InputError, NumericError
from saliencytune.explainer import ExplanationMask, explain_image, hard_threshold
from saliencytune.trainer import (
    TrainingConfig,
    TrainingHistory,
    finetune,
    finetune_step,
    sliced_finetune,
)


def _pairs(samples):
    return feedback_pairs(samples)


def _mask_only(sample):
    return FeedbackRecord(sample_id=sample.id, corrected_mask=sample.gt_mask)


def _label_only(sample):
    return FeedbackRecord(sample_id=sample.id, corrected_label=sample.label)


# -- configuration ---------------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        dict(lam=-0.1),
        dict(lam=1.5),
        dict(learning_rate=0.0),
        dict(epochs=-1),
        dict(threshold=1.2),
        dict(temperature=0.0),
        dict(batch_size=0),
        dict(selection_criterion="loss"),
        dict(optimizer="rmsprop"),
        dict(clip_norm=0.0),
    ],
)
def test_training_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        TrainingConfig(**bad)


def test_training_config_json_round_trip():
    config = TrainingConfig(lam=0.7, epochs=3, clip_norm=None, optimizer="adam")
    payload = config.to_json()
    assert payload["lambda"] == 0.7  # wire name, not the attribute name
    assert TrainingConfig.from_json(payload) == config
    with pytest.raises(ConfigError):
        TrainingConfig.from_json({"lambda": 0.5, "momentum": 0.9})


# -- single steps -----------------------------------------------------------------


def test_lambda_routing_label_only(backend32, synth60):
    sample = synth60[0]
    entry = finetune_step(backend32, sample, _label_only(sample), TrainingConfig(lam=0.6))
    assert entry.lambda_effective == 0.0
    assert entry.mask_read is False
    assert entry.jaccard is None
    assert entry.loss.l_exp == 0.0
    assert entry.loss.l_total == entry.loss.l_cls


def test_lambda_routing_mask_only(backend32, synth60):
    sample = synth60[1]
    entry = finetune_step(backend32, sample, _mask_only(sample), TrainingConfig(lam=0.6))
    assert entry.lambda_effective == 1.0
    assert entry.mask_read is True
    assert entry.jaccard is not None
    assert entry.loss.l_cls == 0.0


def test_lambda_routing_both_corrections(backend32, synth60):
    sample = synth60[2]
    entry = finetune_step(backend32, sample, simulate_feedback(sample), TrainingConfig(lam=0.3))
    assert entry.lambda_effective == 0.3
    assert entry.mask_read is True
    assert entry.loss.l_cls > 0.0
    total = 0.7 * entry.loss.l_cls + 0.3 * entry.loss.l_exp
    assert abs(entry.loss.l_total - total) < 1e-9


def test_feedback_without_any_correction_is_rejected(backend32, synth60):
    record = FeedbackRecord(sample_id="x", corrected_label="MEL")
    record.corrected_label = None  # bypass the dataclass guard to hit the trainer's
    with pytest.raises(InputError):
        finetune_step(backend32, synth60[0], record, TrainingConfig())


def test_saturated_classifier_gets_vanishing_update(synth60):
    """Once the true class is practically certain, a lambda=0 step is a no-op."""
    backend = build_reference_cnn(seed=7, dtype=torch.float64)
    sample = synth60[0]
    target = DEFAULT_CLASSES.index(sample.label)
    with torch.no_grad():
        backend.module.classifier.bias[target] += 50.0
    before = backend.parameter_vector().clone()
    finetune_step(backend, sample, _label_only(sample), TrainingConfig(lam=0.0, learning_rate=0.1))
    delta = (backend.parameter_vector() - before).norm()
    assert float(delta) <= 1e-6


def test_lambda_zero_never_touches_masks(backend32, synth60):
    config = TrainingConfig(lam=0.0, epochs=2)
    val = synth60[:6]
    pool = synth60[6:18]
    _, history = finetune(backend32.clone(), _pairs(pool), val, config)
    assert history.mask_reads == 0
    assert all(e.loss.l_exp == 0.0 for e in history.steps)


def test_mask_reads_are_counted_per_step(backend32, synth60):
    config = TrainingConfig(lam=1.0, epochs=1)
    val = synth60[:6]
    pool = synth60[6:12]
    _, history = finetune(backend32.clone(), _pairs(pool), val, config)
    assert history.mask_reads == len(history.steps) == 6


def test_degenerate_batch_is_a_noop_update(synth60):
    """All-zero saliency draws the fixed penalty and moves no parameters."""
    backend = build_reference_cnn(seed=7)
    with torch.no_grad():
        backend.module.features.conv2.weight.zero_()
        backend.module.features.conv2.bias.fill_(-1.0)  # post-ReLU activations: all zero
    sample = synth60[0]
    before = backend.parameter_vector().clone()
    entry = finetune_step(backend, sample, _mask_only(sample), TrainingConfig(lam=1.0))
    assert entry.degenerate is True
    assert entry.loss.l_exp == 1.0
    assert torch.equal(backend.parameter_vector(), before)
    assert backend.training_step == 1


def test_self_agreement_costs_less_than_contradiction(backend32, synth60):
    """Confirming the model's own mask is cheaper than asserting its complement."""
    sample = synth60[3]
    _, sal = explain_image(backend32, sample.image)
    own = hard_threshold(sal, 0.5)
    flipped = ExplanationMask(1 - own.values, origin="feedback")
    config = TrainingConfig(lam=1.0)
    agree = finetune_step(
        backend32.clone(), sample,
        FeedbackRecord(sample_id=sample.id, corrected_mask=own), config,
    )
    contradict = finetune_step(
        backend32.clone(), sample,
        FeedbackRecord(sample_id=sample.id, corrected_mask=flipped), config,
    )
    assert agree.loss.l_exp < contradict.loss.l_exp


def test_non_finite_parameters_abort_the_step(backend32, synth60):
    with torch.no_grad():
        backend32.module.classifier.weight[0, 0] = float("inf")
    sample = synth60[0]
    with pytest.raises(NumericError):
        finetune_step(backend32, sample, simulate_feedback(sample), TrainingConfig(lam=0.3))


def test_clip_norm_bounds_the_update(synth60):
    backend = build_reference_cnn(seed=7, dtype=torch.float64)
    sample = synth60[0]
    config = TrainingConfig(lam=0.3, learning_rate=0.5, clip_norm=1e-3)
    before = backend.parameter_vector().clone()
    finetune_step(backend, sample, simulate_feedback(sample), config)
    delta = float((backend.parameter_vector() - before).norm())
    assert delta <= 0.5 * 1e-3 * (1 + 1e-9)


def test_adam_optin_changes_the_trajectory(backend32, synth60):
    val = synth60[:6]
    pool = synth60[6:12]
    sgd = backend32.clone()
    adam = backend32.clone()
    finetune(sgd, _pairs(pool), val, TrainingConfig(lam=0.3, epochs=1))
    finetune(adam, _pairs(pool), val, TrainingConfig(lam=0.3, epochs=1, optimizer="adam"))
    assert not torch.equal(sgd.parameter_vector(), adam.parameter_vector())


# -- the epoch loop ----------------------------------------------------------------


def test_single_step_equals_single_epoch_run(backend64, synth60):
    sample = synth60[4]
    config = TrainingConfig(lam=0.3, epochs=1)
    via_step = backend64.clone()
    finetune_step(via_step, sample, simulate_feedback(sample), config)
    via_loop = backend64.clone()
    finetune(via_loop, [(sample, simulate_feedback(sample))], synth60[:3], config)
    assert torch.equal(via_step.parameter_vector(), via_loop.parameter_vector())


def test_finetune_is_bit_reproducible(backend64, synth60):
    val = synth60[:6]
    pool = synth60[6:16]
    config = TrainingConfig(lam=0.3, epochs=2, seed=5)
    first = backend64.clone()
    second = backend64.clone()
    _, hist_a = finetune(first, _pairs(pool), val, config)
    _, hist_b = finetune(second, _pairs(pool), val, config)
    assert torch.equal(first.parameter_vector(), second.parameter_vector())
    assert [e.sample_id for e in hist_a.steps] == [e.sample_id for e in hist_b.steps]
    assert [e.loss.l_total for e in hist_a.steps] == [e.loss.l_total for e in hist_b.steps]
    assert hist_a.best_epoch == hist_b.best_epoch


def test_epochs_zero_changes_nothing(backend32, synth60):
    before = backend32.parameter_vector().clone()
    checkpoint, history = finetune(
        backend32, _pairs(synth60[6:12]), synth60[:6], TrainingConfig(epochs=0)
    )
    assert torch.equal(backend32.parameter_vector(), before)
    assert checkpoint.epoch == 0
    assert len(history.epochs) == 1
    assert history.steps == []


def test_untrained_start_is_a_best_checkpoint_candidate(backend32, synth60):
    """Epoch 0 is evaluated and wins ties, so fine-tuning can never pick worse."""
    checkpoint, history = finetune(
        backend32.clone(), _pairs(synth60[6:14]), synth60[:6],
        TrainingConfig(lam=0.0, epochs=2, learning_rate=1e-12),
    )
    # with a vanishing learning rate every epoch ties epoch 0
    assert checkpoint.epoch == 0
    values = [e.criterion_value for e in history.epochs]
    assert checkpoint.criterion_value == max(values)


def test_best_checkpoint_dominates_history(backend32, synth60):
    config = TrainingConfig(lam=0.3, epochs=3)
    checkpoint, history = finetune(backend32, _pairs(synth60[6:16]), synth60[:6], config)
    values = [e.criterion_value for e in history.epochs]
    assert checkpoint.criterion_value == max(values)
    assert checkpoint.epoch == values.index(max(values))  # earliest winner
    assert history.best_epoch == checkpoint.epoch


def test_selection_criterion_follows_lambda(backend32, synth60):
    val = synth60[:6]
    pool = synth60[6:10]
    _, hist_cls = finetune(
        backend32.clone(), _pairs(pool), val, TrainingConfig(lam=0.0, epochs=1)
    )
    for record in hist_cls.epochs:
        assert record.criterion_value == record.val_report.accuracy
    _, hist_exp = finetune(
        backend32.clone(), _pairs(pool), val, TrainingConfig(lam=1.0, epochs=1)
    )
    for record in hist_exp.epochs:
        assert record.criterion_value == record.val_report.avg_jaccard


def test_shuffle_off_keeps_feedback_order(backend32, synth60):
    pool = synth60[6:12]
    config = TrainingConfig(lam=0.0, epochs=2, shuffle=False)
    _, history = finetune(backend32, _pairs(pool), synth60[:6], config)
    want = [s.id for s in pool]
    assert [e.sample_id for e in history.steps] == want * 2


def test_empty_feedback_rejected(backend32, synth60):
    with pytest.raises(InputError):
        finetune(backend32, [], synth60[:6], TrainingConfig())


def test_feedback_validation_overlap_rejected(backend32, synth60):
    overlapping = synth60[:8]
    with pytest.raises(InputError):
        finetune(backend32, _pairs(overlapping), synth60[:6], TrainingConfig())


def test_duplicate_leakage_needs_explicit_optin(backend32, synth60, caplog):
    original = synth60[0]
    dup = ImageSample(
        id=f"{original.id}__dup0", image=original.image, label=original.label,
        gt_mask=original.gt_mask, duplicate_of=original.id,
    )
    feedback = [(dup, simulate_feedback(dup))]
    validation = synth60[:4]  # contains the original
    with pytest.raises(InputError):
        finetune(backend32.clone(), feedback, validation, TrainingConfig(epochs=0))
    with caplog.at_level("WARNING"):
        finetune(
            backend32.clone(), feedback, validation, TrainingConfig(epochs=0),
            allow_duplicate_leakage=True,
        )
    assert any("leakage" in r.message for r in caplog.records)


def test_exact_id_overlap_rejected_even_with_leakage_flag(backend32, synth60):
    sample = synth60[0]
    with pytest.raises(InputError):
        finetune(
            backend32, [(sample, simulate_feedback(sample))], synth60[:4],
            TrainingConfig(epochs=0), allow_duplicate_leakage=True,
        )


def test_history_csv_schema(tmp_path, backend32, synth60):
    config = TrainingConfig(lam=0.3, epochs=1)
    _, history = finetune(backend32, _pairs(synth60[6:10]), synth60[:6], config)
    out = tmp_path / "history.csv"
    history.to_csv(out)
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == [
        "epoch", "split", "accuracy", "sens_MEL", "sens_NV", "sens_BKL",
        "avg_sensitivity", "avg_jaccard", "jaccard_sd", "l_cls", "l_exp", "l_total",
    ]
    # epoch 0 is evaluation only; epoch 1 adds a train row with mean losses
    assert [(r["epoch"], r["split"]) for r in rows] == [
        ("0", "val"), ("1", "train"), ("1", "val"),
    ]
    train = rows[1]
    assert float(train["l_total"]) > 0.0
    assert train["l_cls"] != "" and train["l_exp"] != ""
    assert rows[0]["l_total"] == ""


def test_history_csv_is_written_with_empty_history(tmp_path):
    TrainingHistory().to_csv(tmp_path / "empty.csv")
    text = (tmp_path / "empty.csv").read_text()
    assert text.startswith("epoch,split,accuracy")


# -- sliced fine-tuning --------------------------------------------------------------


def test_sliced_finetune_runs_slices_in_sequence(backend32, synth60):
    val = synth60[:6]
    test = synth60[6:12]
    pool = synth60[12:24]
    slices = [_pairs(pool[:4]), _pairs(pool[4:8]), _pairs(pool[8:])]
    config = TrainingConfig(lam=0.0, epochs=1)
    results = sliced_finetune(
        backend32, slices, val, config, test_set=test
    )
    assert [r.slice_index for r in results] == [0, 1, 2]
    assert all(r.report.n_samples == len(test) for r in results)
    # the backend ends at the last slice's selected checkpoint
    last = results[-1].checkpoint.state_dict
    current = backend32.state_clone()
    assert all(torch.equal(current[k], last[k]) for k in current)


def test_sliced_finetune_rejects_overlapping_slices(backend32, synth60):
    pool = synth60[12:20]
    slices = [_pairs(pool[:5]), _pairs(pool[4:])]
    with pytest.raises(InputError):
        sliced_finetune(backend32, slices, synth60[:6], TrainingConfig(epochs=0))


def test_sliced_finetune_allows_duplicates_across_slices(backend32, synth60):
    """An upsampled pool scatters copies of one original over many slices."""
    original = synth60[12]
    dup = ImageSample(
        id=f"{original.id}__dup0", image=original.image, label=original.label,
        gt_mask=original.gt_mask, duplicate_of=original.id,
    )
    slices = [_pairs([original]), _pairs([dup])]
    results = sliced_finetune(
        backend32, slices, synth60[:6], TrainingConfig(lam=0.0, epochs=1)
    )
    assert len(results) == 2


def test_sliced_finetune_skips_empty_slices(backend32, synth60, caplog):
    slices = [_pairs(synth60[12:16]), [], _pairs(synth60[16:20])]
    with caplog.at_level("WARNING"):
        results = sliced_finetune(
            backend32, slices, synth60[:6], TrainingConfig(lam=0.0, epochs=1)
        )
    assert [r.slice_index for r in results] == [0, 2]
    assert any("empty" in r.message for r in caplog.records)


def test_sliced_finetune_defaults_to_validation_reports(backend32, synth60):
    val = synth60[:6]
    results = sliced_finetune(
        backend32, [_pairs(synth60[12:16])], val, TrainingConfig(lam=0.0, epochs=1)
    )
    assert results[0].report.n_samples == len(val)
