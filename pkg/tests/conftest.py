import time
from dataclasses import dataclass, replace

import pytest

from semrnnt.data import TOY_GRAMMAR, Utterance, Vocabulary, generate_corpus
from semrnnt.decoding import BeamConfig
from semrnnt.model import ModelConfig
from semrnnt.trainer import TOY_TRAIN_CONFIG, TrainResult, evaluate, train

TOY_SEED = 7
TOY_BEAM = BeamConfig(10, 2, 10, 8)


@dataclass
class ToyRun:
    result: TrainResult
    train: list[Utterance]
    held_out: list[Utterance]
    vocab: Vocabulary
    beam: BeamConfig
    seconds: float
    report: dict

    @property
    def params(self):
        return self.result.params


def run_toy(slot_mode: str) -> ToyRun:
    """Train on 200 toy utterances and score the 20 held out, timing the whole run."""
    start = time.perf_counter()
    utts, vocab = generate_corpus(TOY_GRAMMAR, 220, seed=TOY_SEED)
    train_set, held_out = utts[:200], utts[200:]
    config = replace(TOY_TRAIN_CONFIG, slot_mode=slot_mode)
    result = train(ModelConfig.for_vocab(vocab), train_set, config, held_out=held_out)
    report = evaluate(result.params, held_out, TOY_BEAM, vocab)
    return ToyRun(result, train_set, held_out, vocab, TOY_BEAM, time.perf_counter() - start, report)


@pytest.fixture(scope="session")
def toy_run() -> ToyRun:
    return run_toy("ce")


@pytest.fixture(scope="session")
def toy_run_aligned() -> ToyRun:
    return run_toy("rnnt_align")


# -- acceptance summary ---------------------------------------------------------

_criteria: dict[int, tuple[str, str, list]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria[number] = (title, "PASS" if rep.passed else "FAIL", list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, props = _criteria[number]
        detail = ", ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{status} criterion {number}: {title}" + (f" [{detail}]" if detail else ""))
