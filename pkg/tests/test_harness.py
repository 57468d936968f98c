import json
import math

import numpy as np
import pytest

from eafpmed import harness
from eafpmed.harness import EpochRecord, RunConfig, optimizer_step
from eafpmed.model import EAFP_OFF
from eafpmed.netpbm import read

SMALL = dict(synth={"per_category": 6, "size": 32}, image_size=32, epochs=2, batch_size=8,
             backbone={"stem_channels": 4, "widths": [4, 8], "blocks": [1, 1], "downsample": [1, 2]},
             eafp={"global": {"scale": "global", "channels": 2, "kernels": [3, 3], "dilations": [1, 2]},
                   "regional": {"scale": "regional", "channels": 2, "kernels": [3, 3], "dilations": [1, 1]},
                   "local": {"scale": "local", "channels": 2, "kernels": [3], "dilations": [1]}})


class TestOptimizer:
    def test_sgd_two_steps(self):
        theta = np.array([1.0])
        state = {}
        optimizer_step([theta], [np.array([0.5])], state, "sgd", lr=0.1, momentum=0.9)
        assert theta[0] == pytest.approx(0.95)
        optimizer_step([theta], [np.array([0.5])], state, "sgd", lr=0.1, momentum=0.9)
        # v = 0.9 * 0.5 + 0.5
        assert theta[0] == pytest.approx(0.95 - 0.095)

    def test_adam_first_step_is_lr(self):
        theta = np.array([1.0, -2.0])
        optimizer_step([theta], [np.array([3.0, -0.01])], {}, "adam", lr=1e-3)
        np.testing.assert_allclose(theta, [1.0 - 1e-3, -2.0 + 1e-3], rtol=1e-6)

    def test_skips_missing_gradient(self):
        theta = np.array([1.0])
        optimizer_step([theta], [None], {}, "adam")
        assert theta[0] == 1.0

    def test_rejects(self):
        with pytest.raises(ValueError):
            optimizer_step([np.zeros(1)], [np.zeros(1)], {}, "sgd", lr=0)
        with pytest.raises(ValueError):
            optimizer_step([np.zeros(1)], [np.zeros(2)], {}, "sgd")
        with pytest.raises(ValueError):
            optimizer_step([np.zeros(1)], [np.zeros(1)], {}, "rmsprop")


class TestRunConfig:
    def test_flags_win(self):
        cfg = RunConfig.from_mapping({"seed": 1, "epochs": 5, "lr": 0.01}, epochs=3, lr=None)
        assert cfg.epochs == 3 and cfg.lr == 0.01

    def test_seed_required(self):
        with pytest.raises(ValueError, match="seed"):
            RunConfig.from_mapping({"epochs": 2})

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="bogus"):
            RunConfig.from_mapping({"seed": 0, "bogus": 1})

    @pytest.mark.parametrize("field,value", [("epochs", 0), ("batch_size", 0), ("mode", "x"),
                                             ("optimizer", "x"), ("lr", -1.0), ("lr_schedule", "x")])
    def test_validation(self, field, value):
        with pytest.raises(ValueError):
            RunConfig(seed=0, **{field: value})

    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(seed=4, **SMALL)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_json(path) == cfg

    def test_cosine_schedule(self):
        cfg = RunConfig(seed=0, epochs=4, lr=0.1)
        assert harness.epoch_lr(cfg, 0) == 0.1
        assert harness.epoch_lr(cfg, 2) == pytest.approx(0.05)
        assert harness.epoch_lr(RunConfig(seed=0, lr_schedule="constant"), 7) == 1e-3


def test_default_split_sizes():
    train, test, cats = harness.split_dataset(RunConfig(seed=0))
    assert (len(train), len(test)) == (96, 24)
    assert cats == ["0-global", "1-regional", "2-local"]
    assert all(sum(s.label == k for s in test) == 8 for k in range(3))


def test_split_independent_of_seed():
    a = harness.split_dataset(RunConfig(seed=0, **SMALL))[1]
    b = harness.split_dataset(RunConfig(seed=9, **SMALL))[1]
    assert [s.source for s in a] == [s.source for s in b]


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    base = dict(SMALL, prompt="Synthetic Lesions", pool=str(root / "pool" / "index.json"))
    pre = harness.pretrain(RunConfig(seed=0, out=str(root / "pre"), aliases=["fixture"], **base))
    on = harness.train(RunConfig(seed=0, out=str(root / "on"), **base))
    off = harness.train(RunConfig(seed=0, out=str(root / "off"), mode=EAFP_OFF, **SMALL))
    return root, pre, on, off


class TestRuns:
    def test_pretrain_registers(self, small_runs):
        root, pre, _, _ = small_runs
        assert pre.key == "synthetic-lesions"
        index = json.loads((root / "pool" / "index.json").read_text())
        assert index["entries"][0]["aliases"] == ["fixture"]
        assert (root / "pre" / "synthetic-lesions.eafp").exists()

    def test_outputs(self, small_runs):
        root, _, on, _ = small_runs
        for name in ("best/model.eafp", "final/model.json", "curves.csv", "curves.ppm", "config.json", "manifest.json"):
            assert (root / "on" / name).exists(), name
        assert len(on.records) == 2
        assert harness.read_curves(root / "on" / "curves.csv") == on.records
        assert read(root / "on" / "curves.ppm").shape == (326, 320, 3)

    def test_frozen_eafp_unchanged(self, small_runs):
        _, pre, on, _ = small_runs
        for k, v in pre.params.state_dict().items():
            np.testing.assert_array_equal(on.model.eafp.state_dict()[k], v)

    def test_manifest_hashes(self, small_runs):
        root = small_runs[0]
        doc = json.loads((root / "on" / "manifest.json").read_text())
        by_path = {f["path"]: f["sha256"] for f in doc["files"]}
        assert by_path["curves.csv"] == harness.sha256_file(root / "on" / "curves.csv")

    def test_evaluate(self, small_runs, tmp_path):
        _, _, on, _ = small_runs
        ev = harness.evaluate(on.model, on.test_set, on.categories, tmp_path, emit_roc=True)
        assert ev.confusion.pop == len(on.test_set)
        for name in ("confusion.csv", "report.json", "report.csv", "roc_0.csv", "roc_2.csv"):
            assert (tmp_path / name).exists()
        np.testing.assert_allclose(ev.probabilities.sum(axis=1), 1, rtol=1e-5)

    def test_repeatable(self, small_runs, tmp_path):
        root, _, _, off = small_runs
        again = harness.train(RunConfig(seed=0, out=str(tmp_path), mode=EAFP_OFF, **SMALL))
        assert again.records == off.records
        assert (tmp_path / "final" / "model.eafp").read_bytes() == (root / "off" / "final" / "model.eafp").read_bytes()

    def test_seed_changes_run(self, small_runs):
        off = small_runs[3]
        other = harness.train(RunConfig(seed=1, mode=EAFP_OFF, **SMALL))
        assert other.records != off.records


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    cfg = RunConfig(seed=0, mode=EAFP_OFF, lr=1e30, lr_schedule="constant", optimizer="sgd", **dict(SMALL, epochs=3))
    with pytest.raises(harness.TrainingDiverged):
        harness.train(cfg)


def test_curves_render_single_epoch():
    img = harness.render_curves([EpochRecord(0, 1.0, 0.5, 1.2, 0.4)])
    assert img.dtype == np.uint8 and not math.isnan(img.mean())
