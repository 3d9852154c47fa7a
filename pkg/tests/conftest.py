from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest
import torch

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# criterion number -> (passed, detail); filled by acceptance tests, printed at the end
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.fixture
def criterion(request):
    """Record a detail line for the acceptance criterion this test checks."""
    m = request.node.get_closest_marker("criterion")
    n, title = m.args
    entry = _CRITERIA.setdefault(n, [title, None, ""])

    def note(text: str) -> None:
        entry[2] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    entry = _CRITERIA.setdefault(m.args[0], [m.args[1], None, ""])
    if rep.when == "setup" and rep.failed:
        entry[1] = False
        entry[2] = entry[2] or "fixture error"
    elif rep.when == "call":
        entry[1] = rep.passed if entry[1] is None else entry[1] and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}" + (f"  [{detail}]" if detail else ""))


def _timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t


@dataclass
class Pipeline:
    root: Path
    data: object
    repr_ckpt: Path
    repr_result: object
    latents: object
    pred_result: object
    hashes_before: dict
    hashes_after: dict
    model_report: object
    copy_last_report: object
    seconds: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory) -> Pipeline:
    """Full two-stage run on the seeded 200-scene dataset with the shipped configs."""
    from latentogm.gridworld import SimConfig, generate_dataset
    from latentogm.latent_predict import (PredictorConfig, copy_last_predictions, encode_dataset,
                                          encoder_generator_hashes, predict_ogms, train_predictor)
    from latentogm.metrics import evaluate
    from latentogm.repr_train import ReprTrainConfig, train_representation
    from latentogm.util import read_json

    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("pipeline")
    sec = {}
    data, sec["simulate"] = _timed(generate_dataset, SimConfig.from_dict(read_json(CONFIGS / "pipeline_sim.json")),
                                   0, root / "data")
    rcfg = ReprTrainConfig.from_dict(read_json(CONFIGS / "pipeline_repr.json"))
    rres, sec["train-repr"] = _timed(train_representation, data, rcfg, root / "repr.ckpt")
    before = encoder_generator_hashes(rres.checkpoint)
    lat, sec["encode"] = _timed(encode_dataset, data, rres.checkpoint, root / "latents")
    pcfg = PredictorConfig.from_dict(read_json(CONFIGS / "pred.json"))
    pres, sec["train-pred"] = _timed(train_predictor, lat, pcfg, root / "pred.ckpt")
    after = encoder_generator_hashes(rres.checkpoint)
    pm, sec["predict"] = _timed(predict_ogms, rres.checkpoint, rres.checkpoint, pres.checkpoint, data, root / "pred")
    cm = copy_last_predictions(data, root / "copy_last")
    rep_model, sec["evaluate"] = _timed(evaluate, pm, data)
    rep_copy = evaluate(cm, data)
    return Pipeline(root, data, rres.checkpoint, rres, lat, pres, before, after, rep_model, rep_copy, sec)
