import pytest

from camkit.data import SynthSpec, synth_generate


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Default-size synthetic corpus, generated once per session."""
    root = tmp_path_factory.mktemp("corpus")
    summary = synth_generate(SynthSpec(), 7, root)
    return root, summary


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    summary = synth_generate(SynthSpec(train_per_class=12, test_per_class=6, image_size=16), 3, root)
    return root, summary


def _load(root):
    from camkit.data import load_dataset
    from camkit.registry import ChannelRegistry

    registry = ChannelRegistry.from_csv(root / "channels.csv")
    pairs = list(load_dataset(root, root / "metadata.csv", registry))
    return [r for _, r in pairs], {i.image_id: i for i, _ in pairs}, registry


@pytest.fixture(scope="session")
def loaded(corpus):
    return _load(corpus[0])


@pytest.fixture(scope="session")
def small_loaded(small_corpus):
    return _load(small_corpus[0])


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
