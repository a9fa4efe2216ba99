import json
import math
from collections.abc import Mapping

import numpy as np
import pytest
import torch

import emsdg.train as train_mod
from emsdg.data import CohortSpec, NoiseSpec, make_cohort
from emsdg.em import EMConfig
from emsdg.net import EncoderConfig, TrainingStepError, init_params, weighted_cross_entropy
from emsdg.train import (RunRecord, TrainConfig, TrainingDivergence, class_weights_from_labels,
                         fit, lr_at_epoch, sgd_step, stratified_split, write_epoch_csv)

ENC = EncoderConfig(block_channels=(2, 4), hidden=4)


def tiny_cohort(name, counts, seed=0):
    return make_cohort(CohortSpec(name, counts, volume_size=8, radii=(3.5, 2.5, 1.5), jitter=0,
                                  noise=NoiseSpec("gaussian", 0.05), seed=seed))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(0, cfg) == 0.01
    assert lr_at_epoch(1, cfg) == pytest.approx(0.0095, abs=1e-15)
    assert lr_at_epoch(10, cfg) == pytest.approx(0.0059874, abs=1e-7)
    lrs = [lr_at_epoch(e, cfg) for e in range(30)]
    np.testing.assert_allclose(np.array(lrs[1:]) / np.array(lrs[:-1]), 0.95, rtol=1e-12)
    with pytest.raises(ValueError):
        lr_at_epoch(-1, cfg)


def test_cross_entropy_examples():
    assert float(weighted_cross_entropy(torch.zeros(1, 3, dtype=torch.float64), [1])) == \
        pytest.approx(math.log(3), abs=1e-12)
    loss = weighted_cross_entropy(torch.tensor([[10.0, 0.0, 0.0]], dtype=torch.float64), [0],
                                  torch.ones(3, dtype=torch.float64))
    assert float(loss) == pytest.approx(math.log(1 + 2 * math.exp(-10)), rel=1e-12)
    assert float(loss) == pytest.approx(9.08e-5, abs=5e-8)
    with pytest.raises(ValueError, match="labels must lie"):
        weighted_cross_entropy(torch.zeros(1, 3), [3])
    with pytest.raises(ValueError, match="positive"):
        weighted_cross_entropy(torch.zeros(1, 3), [0], torch.tensor([1.0, 0.0, 1.0]))


def test_inverse_frequency_weights():
    labels = [0] * 5 + [1] * 3 + [2] * 2
    w = class_weights_from_labels(labels, 3)
    raw = np.array([2, 10 / 3, 5])
    np.testing.assert_allclose(w / w[0], raw / raw[0], rtol=1e-12)
    assert float(np.dot(w, [0.5, 0.3, 0.2])) == pytest.approx(1.0, abs=1e-12)


def test_uniform_frequencies_reduce_to_plain_cross_entropy():
    w = class_weights_from_labels([0, 1, 2, 0, 1, 2], 3)
    logits = torch.randn(6, 3, dtype=torch.float64)
    y = [0, 1, 2, 2, 1, 0]
    assert torch.equal(weighted_cross_entropy(logits, y, torch.from_numpy(w)),
                       weighted_cross_entropy(logits, y))


def test_absent_class_gets_neutral_weight():
    w = class_weights_from_labels([0, 0, 1], 3)
    assert w[2] == 1.0
    assert float(np.dot(w[:2], [2 / 3, 1 / 3])) == pytest.approx(1.0)


def _one(v):
    return {"w": torch.tensor([v], dtype=torch.float64)}


def test_sgd_plain_descent_and_decay():
    cfg = TrainConfig(momentum=0.0, weight_decay=0.0)
    p, _ = sgd_step(_one(1.0), _one(0.5), {}, 0.1, cfg)
    assert float(p["w"]) == pytest.approx(0.95)
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    p, v = sgd_step(_one(1.0), _one(0.0), _one(2.0), 0.1, cfg)
    assert float(p["w"]) == pytest.approx(1.0 - 0.1 * 1.8)
    assert float(v["w"]) == pytest.approx(1.8)
    p2, v2 = sgd_step(_one(1.0), _one(0.0), {}, 0.1, cfg)
    assert float(p2["w"]) == 1.0 and float(v2["w"]) == 0.0


def test_sgd_two_step_recursion():
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
    g = 0.7
    p, v = sgd_step(_one(0.0), _one(g), {}, 1.0, cfg)
    p, v = sgd_step(p, _one(g), v, 1.0, cfg)
    assert float(p["w"]) == pytest.approx(-(g + 1.9 * g), rel=1e-12)


def test_sgd_coupled_weight_decay_and_buffers():
    cfg = TrainConfig(momentum=0.0, weight_decay=0.1)
    params = {"w": torch.tensor([2.0], dtype=torch.float64),
              "b.running_var": torch.tensor([5.0], dtype=torch.float64)}
    p, v = sgd_step(params, _one(0.0), {}, 1.0, cfg)
    assert float(p["w"]) == pytest.approx(2.0 - 0.2)
    assert p["b.running_var"] is params["b.running_var"]
    with pytest.raises(TrainingStepError) as err:
        sgd_step(_one(1.0), _one(float("inf")), {}, 1.0, cfg)
    assert err.value.tensor_name == "w"


def test_stratified_split():
    labels = np.array([0] * 50 + [1] * 25 + [2] * 20)
    tr, va = stratified_split(labels, 0.2, np.random.default_rng(0))
    assert np.bincount(labels[va]).tolist() == [10, 5, 4]
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(95))


def test_config_validation():
    with pytest.raises(ValueError, match="multiple"):
        TrainConfig(physical_batch=3, effective_batch=16)
    with pytest.raises(ValueError, match="val_fraction"):
        TrainConfig(val_fraction=1.0)


def test_step_count_with_accumulation():
    source = tiny_cohort("s", (5, 4, 1))
    cfg = TrainConfig(epochs=1, physical_batch=2, effective_batch=4)
    record, _ = fit(source, {}, ENC, None, cfg)
    assert record.epochs[0].steps == 2


def test_leftover_micro_batches_still_step():
    source = tiny_cohort("s", (5, 5, 5))  # 12 training samples
    record, _ = fit(source, {}, ENC, None, TrainConfig(epochs=1, effective_batch=16))
    assert record.epochs[0].steps == 1


def test_fit_is_deterministic(tmp_path):
    source = tiny_cohort("s", (6, 5, 5))
    targets = {"t": tiny_cohort("t", (3, 3, 3), seed=1)}
    cfg = TrainConfig(epochs=3, effective_batch=4, seed=7)
    em = EMConfig(variant="EM2", p=0.9, insertion_layers=(1,))
    a, pa = fit(source, targets, ENC, em, cfg)
    b, pb = fit(source, targets, ENC, em, cfg)
    assert a.to_json() == b.to_json()
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    write_epoch_csv(a, tmp_path / "a.csv")
    write_epoch_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c, _ = fit(source, targets, ENC, em, TrainConfig(epochs=3, effective_batch=4, seed=8))
    assert c.to_json() != a.to_json()


def test_record_contents():
    source = tiny_cohort("s", (6, 5, 5))
    targets = {"t1": tiny_cohort("t1", (2, 2, 2), 1), "t2": tiny_cohort("t2", (2, 2, 2), 2)}
    record, best = fit(source, targets, ENC, None, TrainConfig(epochs=4, effective_batch=4))
    assert [e.epoch for e in record.epochs] == [0, 1, 2, 3]
    lrs = [e.lr for e in record.epochs]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert record.best_val_f1 == max(e.val_f1 for e in record.epochs)
    assert set(record.targets) == {"t1", "t2"}
    assert set(record.targets["t1"]) == {"multiclass", "one_vs_all", "confusion", "n"}
    assert record.targets["t1"]["n"] == 6
    assert json.loads(record.to_json())["best_epoch"] == record.best_epoch
    assert 0.0 <= record.mean_target_f1() <= 1.0


class WatchedTargets(Mapping):
    """Target mapping that notes how many training steps ran before first access."""

    def __init__(self, data, counter):
        self.data, self.counter, self.seen_at = data, counter, None

    def _touch(self):
        if self.seen_at is None:
            self.seen_at = self.counter["calls"]

    def __getitem__(self, k):
        self._touch()
        return self.data[k]

    def __iter__(self):
        self._touch()
        return iter(self.data)

    def __len__(self):
        return len(self.data)


def test_targets_untouched_until_training_ends(monkeypatch):
    counter = {"calls": 0}
    real = train_mod.loss_and_grads

    def counting(*args, **kwargs):
        counter["calls"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(train_mod, "loss_and_grads", counting)
    targets = WatchedTargets({"t": tiny_cohort("t", (2, 2, 2), 1)}, counter)
    fit(tiny_cohort("s", (5, 5, 5)), targets, ENC, None, TrainConfig(epochs=2, effective_batch=4))
    assert targets.seen_at == counter["calls"] > 0


def test_divergence_is_reported():
    source = tiny_cohort("s", (5, 5, 5))
    init = init_params(ENC, 0)
    init["fc2.bias"][0] = float("nan")
    with pytest.raises(TrainingDivergence) as err:
        fit(source, {}, ENC, None, TrainConfig(epochs=1), init=init)
    assert err.value.tensor_name == "logits"
    assert err.value.record.diverged and "epoch 0" in err.value.record.error
    assert isinstance(err.value.record, RunRecord)
