import numpy as np
import pytest

from actrec3d import nn, train_eval
from actrec3d.data import (
    DatasetManifest,
    SynthConfig,
    decode_rvid,
    encode_rvid,
    load_clip,
    render_clip,
)
from actrec3d.optim import OptimConfig
from actrec3d.train_eval import (
    ConfusionMatrix,
    History,
    TrainConfig,
    evaluate,
    logits_for,
    predict,
    resolution_csv,
    resolution_study,
    train,
)
from actrec3d.vision import Clip, ClipTooShortError, preprocess
from conftest import SYNTH_PRE, TINY_PRE, tiny_train_config


def output_layer(spec):
    return len(spec.layers) - 1


def constant_model(spec, bias):
    """Params whose logits equal ``bias`` for every input."""
    params = {k: np.zeros_like(v) for k, v in nn.init_params(spec, 0).items()}
    params[f"{output_layer(spec)}.bias"] = np.asarray(bias, np.float32)
    return params


class TestTrain:
    def test_deterministic_history(self, tiny_dataset):
        cfg = tiny_train_config(epochs=2)
        a, b = train(tiny_dataset, cfg), train(tiny_dataset, cfg)
        assert a.history.to_csv() == b.history.to_csv()
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    def test_seed_changes_run(self, tiny_dataset):
        a = train(tiny_dataset, tiny_train_config(epochs=1, seed=0))
        b = train(tiny_dataset, tiny_train_config(epochs=1, seed=1))
        assert a.history.rows != b.history.rows

    def test_single_epoch_single_step(self, tiny_dataset, monkeypatch):
        calls = []
        real = train_eval.optimizer_step

        def counting(params, grads, *args):
            calls.append(sorted(grads))
            return real(params, grads, *args)

        monkeypatch.setattr(train_eval, "optimizer_step", counting)
        res = train(tiny_dataset, tiny_train_config(epochs=1, batch_size=1000))
        assert len(res.history) == 1
        assert len(calls) == 1 and calls[0] == sorted(res.params)

    def test_history_csv_format(self, tiny_trained):
        lines = tiny_trained.history.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_acc,lr"
        assert len(lines) == 1 + len(tiny_trained.history) == 4
        for row in lines[1:]:
            fields = row.split(",")
            assert all(len(f.split(".")[1]) == 6 for f in fields[1:])

    def test_best_checkpoint(self, tiny_trained):
        h = tiny_trained.history
        assert h.val_loss[tiny_trained.best_epoch - 1] == min(h.val_loss)

    def test_val_loss_reproducible_in_eval_mode(self, tiny_dataset, tiny_trained):
        samples = train_eval.load_samples(tiny_dataset, "val")
        X = np.stack([preprocess(s.clip, TINY_PRE) for s in samples])
        y = np.array([s.label for s in samples])
        # final params belong to the last epoch's row
        z = logits_for(tiny_trained.spec, tiny_trained.params, X)
        losses, _, _ = train_eval.softmax_cross_entropy(z, y)
        assert float(np.mean(losses)) == pytest.approx(tiny_trained.history.val_loss[-1],
                                                       abs=1e-6)

    def test_non_finite_loss_aborts(self, tiny_dataset, monkeypatch):
        real = nn.model_backward

        def poisoned(*args):
            loss, grads = real(*args)
            return float("nan"), grads

        monkeypatch.setattr(train_eval.nn, "model_backward", poisoned)
        with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
            train(tiny_dataset, tiny_train_config(epochs=1))

    def test_needs_val_split(self, tiny_dataset):
        m = DatasetManifest(tiny_dataset.classes, tiny_dataset.split("train"), tiny_dataset.root)
        with pytest.raises(ValueError, match="val"):
            train(m, tiny_train_config(epochs=1))

    def test_model4_defaults(self):
        cfg = TrainConfig.for_model(4)
        assert cfg.optim.kind == "nadam" and cfg.optim.decay > 0 and cfg.augment == "model4"
        assert TrainConfig.for_model(3).optim.kind == "adam"

    def test_model4_augmentation_runs(self, tiny_dataset):
        res = train(tiny_dataset, tiny_train_config(
            model_id=4, epochs=1, augment="model4",
            optim=OptimConfig(kind="nadam", lr0=3e-3, decay=0.01)))
        assert len(res.history) == 1

    def test_config_round_trip(self):
        cfg = TrainConfig.for_model(4, epochs=7, preprocess=TINY_PRE, flip_exclude=("a",))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestHistory:
    def test_epochs_to(self):
        h = History()
        for e, vl in enumerate([1.0, 0.5, 0.3, 0.4], start=1):
            h.append(e, 0, vl, 0, 1e-3)
        assert h.epochs_to(0.5) == 2 and h.epochs_to(0.3) == 3 and h.epochs_to(0.1) is None


class TestEvaluate:
    def test_all_class_zero(self, tiny_dataset, tiny_trained):
        params = constant_model(tiny_trained.spec, [1, 0, 0, 0, 0, 0])
        acc, cm = evaluate(tiny_trained.spec, params, tiny_dataset, TINY_PRE)
        assert cm.counts[:, 1:].sum() == 0 and cm.counts[:, 0].sum() == cm.total
        assert acc == pytest.approx(1 / 6)

    def test_ties_pick_lowest_index(self, tiny_dataset, tiny_trained):
        params = constant_model(tiny_trained.spec, [0, 0, 2, 2, 0, 0])
        _, cm = evaluate(tiny_trained.spec, params, tiny_dataset, TINY_PRE)
        assert cm.counts[:, 2].sum() == cm.total

    def test_row_sums_and_accuracy(self, tiny_dataset, tiny_trained):
        acc, cm = evaluate(tiny_trained.spec, tiny_trained.params, tiny_dataset, TINY_PRE)
        per_class = np.bincount([e.label for e in tiny_dataset.split("test")], minlength=6)
        np.testing.assert_array_equal(cm.counts.sum(axis=1), per_class)
        assert acc == np.trace(cm.counts) / cm.total

    def test_perfect_predictor(self):
        cm = ConfusionMatrix.from_predictions(["a", "b", "c"], [0, 1, 2, 2], [0, 1, 2, 2])
        assert cm.accuracy == 1.0
        np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))

    def test_confusion_csv(self):
        cm = ConfusionMatrix.from_predictions(["a", "b"], [0, 1, 1], [0, 0, 1])
        assert cm.to_csv() == "true\\pred,a,b\na,1,0\nb,1,1\n"

    def test_empty_test_split_rejected(self, tiny_dataset, tiny_trained):
        m = DatasetManifest(tiny_dataset.classes,
                            [e for e in tiny_dataset.entries if e.split != "test"],
                            tiny_dataset.root)
        with pytest.raises(ValueError, match="empty"):
            evaluate(tiny_trained.spec, tiny_trained.params, m, TINY_PRE)


class TestPredict:
    def clip(self, dataset, i=0):
        return load_clip(dataset.resolve(dataset.split("test")[i]))

    def test_probabilities_sum_to_one(self, tiny_dataset, tiny_trained):
        _, _, probs = predict(tiny_trained.spec, tiny_trained.params,
                              self.clip(tiny_dataset), TINY_PRE)
        assert probs.dtype == np.float64 and abs(probs.sum() - 1) <= 1e-12

    def test_uniform_logits(self, tiny_dataset, tiny_trained):
        params = constant_model(tiny_trained.spec, np.zeros(6))
        k, name, probs = predict(tiny_trained.spec, params, self.clip(tiny_dataset), TINY_PRE,
                                 tiny_dataset.classes)
        np.testing.assert_allclose(probs, np.full(6, 1 / 6), atol=1e-15)
        assert k == 0 and name == tiny_dataset.classes[0]

    def test_rvid_round_trip_invariance_quantized(self, tiny_dataset, tiny_trained):
        # stored clips are already on the 8-bit grid, so another trip changes nothing
        for i in range(3):
            clip = self.clip(tiny_dataset, i)
            back = decode_rvid(encode_rvid(clip))
            _, _, p1 = predict(tiny_trained.spec, tiny_trained.params, clip, TINY_PRE)
            _, _, p2 = predict(tiny_trained.spec, tiny_trained.params, back, TINY_PRE)
            assert np.abs(p1 - p2).max() <= 1e-4

    @pytest.mark.slow
    def test_rvid_round_trip_invariance_float(self, synth_trained):
        # raw float clips move by up to half a quantization step per pixel
        cfg = SynthConfig(seed=99)
        shifts = []
        for i in range(60):
            clip = render_clip(i % 6, cfg, np.random.default_rng(i))
            back = decode_rvid(encode_rvid(clip))
            _, _, p1 = predict(synth_trained.spec, synth_trained.params, clip, SYNTH_PRE)
            _, _, p2 = predict(synth_trained.spec, synth_trained.params, back, SYNTH_PRE)
            shifts.append(np.abs(p1 - p2).max())
        shifts = np.array(shifts)
        print(f"probability shift: median {np.median(shifts):.2e}, max {shifts.max():.2e}")
        assert shifts.max() <= 1e-4

    def test_argmax_matches_evaluate(self, tiny_dataset, tiny_trained):
        spec, params = tiny_trained.spec, tiny_trained.params
        entries = tiny_dataset.split("test")
        preds = [predict(spec, params, load_clip(tiny_dataset.resolve(e)), TINY_PRE)[0]
                 for e in entries]
        _, cm = evaluate(spec, params, tiny_dataset, TINY_PRE)
        expected = ConfusionMatrix.from_predictions(tiny_dataset.classes,
                                                    [e.label for e in entries], preds)
        np.testing.assert_array_equal(cm.counts, expected.counts)

    def test_too_short_clip(self, tiny_trained):
        with pytest.raises(ClipTooShortError):
            predict(tiny_trained.spec, tiny_trained.params,
                    Clip(np.zeros((4, 12, 12)), 8.0), TINY_PRE)


def test_resolution_study_small(tiny_dataset):
    cfg = tiny_train_config(epochs=1)
    rows = resolution_study(tiny_dataset, cfg, sizes=(8, 12))
    assert [r.size for r in rows] == [8, 12]
    text = resolution_csv(rows)
    lines = text.splitlines()
    assert lines[0].startswith("size,accuracy")
    assert lines[1].startswith("8x8,") and lines[2].startswith("12x12,")
    assert all(0 <= r.accuracy <= 1 for r in rows)


def test_reference_tables():
    assert train_eval.REFERENCE_ACCURACY["kth"][3] == (0.62, 0.84)
    assert train_eval.REFERENCE_ACCURACY["kth"][4][1] == 0.96
    assert train_eval.REFERENCE_RESOLUTION == {20: 0.84, 40: 0.82, 60: 0.84}
