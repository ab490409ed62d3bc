import pytest

from binrewrite import corpus


@pytest.fixture(scope="session")
def mini_corpus():
    """A couple dozen mixed programs for the quicker whole-pipeline tests."""
    return corpus.gen_corpus(1, 24, "mixed")


@pytest.fixture(scope="session")
def full_corpus():
    """Seeds 1..500, mixed size classes: the acceptance corpus."""
    return corpus.gen_corpus(1, 500, "mixed")


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
