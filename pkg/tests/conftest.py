"""One trained deployment, built once and shared by every test module.

The rig trains real models from the synthetic shop's training trace, so
tests exercise the same artifacts an operator would ship.  Pipelines are
always built fresh (stores are stateful); the bundle itself is never
mutated by a pipeline, which test_acceptance.py holds to account.
"""

from __future__ import annotations

import dataclasses
from types import SimpleNamespace

import pytest

from sentrygate.config import TokenSource
from sentrygate.harness import (
    StubShop, generate_eval_trace, generate_training_trace, write_environment,
)
from sentrygate.pipeline import Pipeline
from sentrygate.trainer import train_all

SEED = 7

# Filled by test_acceptance.py; printed after the run, outside capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checklist")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def rig(tmp_path_factory):
    base = tmp_path_factory.mktemp("deploy")
    config = write_environment(str(base))
    train_records = generate_training_trace(SEED)
    eval_records = generate_eval_trace(SEED)
    shop = StubShop(session_cookie=config.session_cookie_name)
    bundle = train_all(config, shop, train_records,
                       token_source=TokenSource(config.replay_seed))
    return SimpleNamespace(base=base, config=config, bundle=bundle,
                           train_records=train_records,
                           eval_records=eval_records)


@pytest.fixture()
def make_pipeline(rig, tmp_path):
    """Factory for fresh pipelines against a fresh stub shop.

    Log and gap-report paths are redirected into the test's own tmp dir
    so queries see only this test's records.
    """
    opened = []

    def factory(**overrides):
        config = dataclasses.replace(
            rig.config,
            log_dir=str(tmp_path / f"logs{len(opened)}"),
            gap_report_file=str(tmp_path / f"gap{len(opened)}.jsonl"),
            **overrides)
        shop = StubShop(session_cookie=config.session_cookie_name)
        pipe = Pipeline(config, shop, models=rig.bundle,
                        token_source=TokenSource(config.replay_seed),
                        timer=lambda: 0.0)
        opened.append(pipe)
        return pipe

    yield factory
    for pipe in opened:
        pipe.close()
