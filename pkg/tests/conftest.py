import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from eafpmed import harness
from eafpmed.harness import RunConfig
from eafpmed.model import EAFP_OFF
from eafpmed.tensor import Tensor, kink_margin, mul, tsum

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def reference_results():
    return json.loads((DATA / "reference_results.json").read_text())


@pytest.fixture(scope="session")
def fixture_runs(tmp_path_factory):
    """Default desk-scale session: pretrain, then eafp-on and eafp-off training at seed 0."""
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    base = RunConfig(seed=0, prompt="synthetic lesions", pool=str(root / "pool" / "index.json"))
    assert base.synth is None and harness.DEFAULT_SYNTH["seed"] == 7 and base.epochs == 30
    train_set, test_set, categories = harness.split_dataset(base)
    pre = harness.pretrain(base, train_set, test_set, categories)
    on = harness.train(dataclasses.replace(base, out=str(root / "on")), train_set, test_set, categories,
                       pool=pre.pool)
    off = harness.train(dataclasses.replace(base, mode=EAFP_OFF), train_set, test_set, categories)
    return {"root": root, "pre": pre, "on": on, "off": off, "test": test_set,
            "seconds": time.perf_counter() - start}


def weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Scalar probe sum(out * R) with a fixed random R of matching shape."""
    r = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return tsum(mul(out, r))


def param(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def away_from_kinks(fn, margin=1e-4) -> bool:
    """True when every leaky-ReLU input reached by ``fn`` is at least ``margin`` from 0."""
    with kink_margin() as seen:
        fn()
    return not seen or min(seen) >= margin
