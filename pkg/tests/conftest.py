import pytest
import torch

from adadurian.corpus import SynthSpec, make_synthetic_corpus


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return make_synthetic_corpus(SynthSpec(n_speakers=2, n_utterances_per_speaker=6, seed=3), out)


@pytest.fixture(scope="session")
def new_speaker_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("newspk")
    return make_synthetic_corpus(
        SynthSpec(n_speakers=1, n_utterances_per_speaker=6, seed=11, speaker_start=2), out)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_record():
    """record(number, title, passed, detail) -> one summary line per criterion."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        print(f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if passed else 'FAIL'}  {title}: {detail}")
