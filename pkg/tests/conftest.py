"""Shared fixtures and the per-criterion acceptance summary."""

import time
from dataclasses import dataclass

import pytest

CRITERIA = {}  # number -> (title, passed)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        passed = report.outcome == "passed"
        prev = CRITERIA.get(number, (title, True))[1]
        CRITERIA[number] = (title, prev and passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}")


@dataclass
class TrainedRun:
    cfg: object
    data: object
    tokenizer: object
    predictor: object
    xlm: object
    system: object
    examples: dict
    metrics: dict
    timings: dict


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """The default desk-scale configuration trained once, end to end."""
    from dualqe import pipeline as P
    from dualqe.config import load_config

    out = tmp_path_factory.mktemp("trained")
    cfg = load_config(overrides={"out": str(out)})
    timings = {}
    t0 = time.perf_counter()
    data = P.generate_data(cfg)
    tok = P.train_tokenizer(cfg, data)
    t = time.perf_counter()
    predictor = P.train_nmt(cfg, tok, data.parallel)
    timings["nmt"] = time.perf_counter() - t
    xlm = P.train_xlm(cfg, tok, data.parallel)
    system, examples, _ = P.build_system(cfg, data, tok, predictor=predictor, xlm=xlm)
    preds = P.qe_predictions(system.estimators, examples["dev"], cfg.tag_threshold, True)
    metrics = P.evaluate_predictions(examples["dev"], preds)
    timings["pipeline"] = time.perf_counter() - t0
    return TrainedRun(cfg, data, tok, predictor, xlm, system, examples, metrics, timings)
