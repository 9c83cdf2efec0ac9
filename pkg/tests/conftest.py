import numpy as np
import pytest

from bayesadapt import GenConfig, LabeledFrames, Network, NetworkConfig, RandomStream, generate_corpus


def random_speaker(rng, n_utts, frames_per_utt, dim, classes, speaker_id="spk"):
    n = n_utts * frames_per_utt
    frames = rng.normal(size=(n, dim))
    labels = rng.integers(0, classes, size=n)
    bounds = np.arange(0, n + 1, frames_per_utt)
    return LabeledFrames(frames, labels, bounds, speaker_id)


@pytest.fixture
def small_net():
    cfg = NetworkConfig(input_dim=5, hidden_dims=(6, 4), num_classes=3)
    return Network.initialize(cfg, RandomStream(11))


@pytest.fixture
def small_speaker():
    return random_speaker(np.random.default_rng(3), 4, 6, 5, 3)


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = GenConfig(num_classes=4, feature_dim=6, train_speakers=6, test_speakers=3,
                    utterances_per_speaker=8, frames_per_utterance=15)
    return generate_corpus(cfg, 5)


VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(criterion, ok, detail):
        line = f"{criterion} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
