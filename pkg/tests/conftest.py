import hashlib
import json
import logging
import os
import time

import pytest

import criteria
from msrefine.net import InpaintNet, NetConfig, TrainingConfig, load_weights, save_weights, train
from msrefine.synth import SyntheticDataset, make_samples

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")

# the toy model behind the end-to-end tests: 2000 textures at 128x128, 30 epochs
TOY_RECIPE = {"samples": 2000, "size": 128, "data_seed": 1, "model_seed": 0, "epochs": 30,
              "batch_size": 8, "learning_rate": 1e-3, "format": 1}

log = logging.getLogger(__name__)


def _train_toy(recipe):
    samples = make_samples(recipe["samples"], recipe["size"], "all", seed=recipe["data_seed"])
    model = InpaintNet(NetConfig(training_resolution=recipe["size"]), seed=recipe["model_seed"])
    cfg = TrainingConfig(epochs=recipe["epochs"], batch_size=recipe["batch_size"],
                         learning_rate=recipe["learning_rate"], seed=recipe["model_seed"],
                         training_resolution=recipe["size"])
    t0 = time.perf_counter()
    model, history = train(model, SyntheticDataset(samples), cfg,
                           on_epoch=lambda e, loss: log.info("toy model epoch=%d loss=%.6f", e, loss))
    return model, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def toy_model():
    """``(model, history)`` of the trained toy model, cached on disk by recipe."""
    key = hashlib.sha256(json.dumps(TOY_RECIPE, sort_keys=True).encode()).hexdigest()[:16]
    weights = os.path.join(CACHE_DIR, f"toy_{key}.rfnw")
    meta = os.path.join(CACHE_DIR, f"toy_{key}.json")
    if not (os.path.exists(weights) and os.path.exists(meta)):
        model, history, seconds = _train_toy(TOY_RECIPE)
        os.makedirs(CACHE_DIR, exist_ok=True)
        save_weights(model, weights)
        with open(meta, "w") as fh:
            json.dump({"recipe": TOY_RECIPE, "history": history, "seconds": seconds}, fh, indent=1)
    with open(meta) as fh:
        history = json.load(fh)["history"]
    return load_weights(weights), history


def pytest_terminal_summary(terminalreporter):
    if not criteria.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria.RESULTS):
        terminalreporter.write_line(criteria.line(number))
