import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eafpmed.eafp import (
    EafpConfig,
    EafpParams,
    ExtractorConfig,
    FingerprintMismatch,
    ParamPool,
    UnknownPromptError,
    eafp_forward,
    normalize_prompt,
)
from eafpmed.tensor import Tensor, no_grad

from gradient_cases import small_eafp_config


def image(shape, seed=0):
    return Tensor(np.random.default_rng(seed).random(shape).astype(np.float32))


@pytest.fixture(scope="module")
def params():
    p = EafpParams.initialize(seed=3)
    p.set_mode("inference")
    return p


class TestConfig:
    def test_default_receptive_fields(self):
        c = EafpConfig()
        assert (c.global_.receptive_field, c.regional.receptive_field, c.local.receptive_field) == (29, 9, 5)

    def test_ordering_enforced(self):
        with pytest.raises(ValueError, match="global > regional > local"):
            EafpConfig(local=ExtractorConfig("local", 4, (5, 5, 5), (1, 1, 1)))

    def test_slot_mismatch(self):
        with pytest.raises(ValueError):
            EafpConfig(regional=ExtractorConfig("local", 4, (3,), (1,)))

    def test_dict_round_trip(self):
        c = EafpConfig(in_channels=3, overlay_scale=0.5)
        back = EafpConfig.from_dict(json.loads(json.dumps(c.to_dict())))
        assert back == c and back.fingerprint() == c.fingerprint()

    def test_fingerprint_sensitive(self):
        assert EafpConfig().fingerprint() != EafpConfig(in_channels=3).fingerprint()


class TestForward:
    @given(st.integers(16, 40), st.integers(16, 40), st.integers(1, 2))
    @settings(max_examples=15, deadline=None)
    def test_shape_preserved(self, h, w, n):
        p = EafpParams.initialize(small_eafp_config(np.random.default_rng(h)), seed=0)
        with no_grad():
            out = eafp_forward(image((n, 1, h, w)), p)
        assert out.shape == (n, 1, h, w)

    def test_default_shape_rgb(self):
        p = EafpParams.initialize(EafpConfig(in_channels=3), seed=0)
        with no_grad():
            assert eafp_forward(image((2, 3, 24, 20)), p).shape == (2, 3, 24, 20)

    def test_zero_adaptors_identity(self, params):
        p = params.copy()
        p.zero_adaptors()
        x = image((2, 1, 32, 32), 4)
        with no_grad():
            out = eafp_forward(x, p)
        assert out.data.tobytes() == x.data.tobytes()

    def test_capture(self, params):
        acts = {}
        with no_grad():
            eafp_forward(image((1, 1, 16, 16)), params, acts)
        assert acts["eafp.global"].shape == (1, 16, 16, 16)
        assert acts["eafp.local"].shape == (1, 16, 16, 16)
        assert acts["eafp.adapted.local"].shape == (1, 1, 16, 16)

    def test_channel_mismatch(self, params):
        with pytest.raises(ValueError):
            eafp_forward(image((1, 3, 16, 16)), params)

    def test_tampered_fingerprint(self, params):
        p = params.copy()
        p.fingerprint = "0" * 16
        with pytest.raises(FingerprintMismatch):
            eafp_forward(image((1, 1, 16, 16)), p)

    def test_inference_deterministic(self, params):
        x = image((1, 1, 20, 20), 7)
        with no_grad():
            assert eafp_forward(x, params).data.tobytes() == eafp_forward(x, params).data.tobytes()


class TestPool:
    def test_normalize(self):
        assert normalize_prompt("  Chest   X-Ray\tImages ") == "chest-x-ray-images"

    def test_resolve_and_alias(self, params):
        pool = ParamPool().register("cmri", params, ["Brain MRI"])
        assert pool.resolve("CMRI") == "cmri"
        assert pool.resolve(" brain  mri ") == "cmri"
        assert pool.params_for("brain mri") is params

    def test_unknown(self, params):
        pool = ParamPool().register("cmri", params)
        with pytest.raises(UnknownPromptError) as info:
            pool.resolve("Skin Lesions")
        assert info.value.normalized == "skin-lesions"
        assert info.value.known == ["cmri"]
        assert "cmri" in str(info.value)

    def test_key_must_be_normalized(self, params):
        with pytest.raises(ValueError):
            ParamPool().register("Chest X", params)

    def test_alias_to_missing_key(self, params):
        with pytest.raises(KeyError):
            ParamPool().register("a", params).add_alias("b", "c")

    def test_swap_changes_output(self, params):
        other = EafpParams.initialize(seed=11)
        other.set_mode("inference")
        pool = ParamPool().register("a", params).register("b", other)
        x = image((1, 1, 16, 16), 2)
        with no_grad():
            ya = eafp_forward(x, pool.params_for("a")).data
            yb = eafp_forward(x, pool.params_for("b")).data
        assert not np.array_equal(ya, yb)

    def test_reregister_replaces(self, params):
        other = EafpParams.initialize(seed=11)
        pool = ParamPool().register("a", params).register("a", other)
        assert pool.lookup("a") is other and len(pool) == 1

    def test_save_load_round_trip(self, params, tmp_path):
        pool = ParamPool().register("cxri", params, ["chest"])
        pool.save(tmp_path / "pool" / "index.json")
        back = ParamPool.load(tmp_path / "pool" / "index.json")
        assert back.keys() == ["cxri"] and back.resolve("Chest") == "cxri"
        x = image((1, 1, 16, 16), 5)
        with no_grad():
            a = eafp_forward(x, params).data
            b = eafp_forward(x, back.lookup("cxri")).data
        assert a.tobytes() == b.tobytes()

    def test_load_rejects_mismatched_fingerprint(self, params, tmp_path):
        path = ParamPool().register("cxri", params).save(tmp_path / "index.json")
        doc = json.loads(path.read_text())
        doc["entries"][0]["config"]["in_channels"] = 3
        path.write_text(json.dumps(doc))
        with pytest.raises(FingerprintMismatch):
            ParamPool.load(path)

    def test_load_or_new(self, tmp_path):
        assert len(ParamPool.load_or_new(tmp_path / "missing.json")) == 0
