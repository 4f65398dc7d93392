import numpy as np
import pytest

from guided_onepixel.bench import generate_synthetic_corpus
from guided_onepixel.model import Dense, Model, Softmax, TrainConfig, build_desk_model, train


def zero_model(input_shape=(8, 8, 3), num_classes=2, final_only=False, seed=0):
    """Desk model with zeroed dense layer, or every parameter zeroed."""
    base = build_desk_model(input_shape, num_classes, seed=seed)
    layers = []
    for layer in base.layers:
        if layer.params and (not final_only or isinstance(layer, Dense)):
            layer = layer.with_params(*[np.zeros_like(p) for p in layer.params])
        layers.append(layer)
    return Model(input_shape, tuple(layers))


def dense_only_model(input_shape, num_classes, seed):
    rng = np.random.default_rng(seed)
    n = int(np.prod(input_shape))
    return Model(input_shape, (Dense(rng.normal(0, 0.3, (n, num_classes)), rng.normal(0, 0.1, num_classes)),
                               Softmax()))


@pytest.fixture(scope="session")
def glyph_setup():
    """3-class 16x16 RGB model trained on the glyph generator, plus a held-out corpus."""
    train_set = generate_synthetic_corpus(3, 200, 16, seed=11)
    test_set = generate_synthetic_corpus(3, 20, 16, seed=12)
    result = train(build_desk_model((16, 16, 3), 3, seed=0), train_set.images, TrainConfig(0.1, 40, 16, 0))
    return result.model, test_set


@pytest.fixture(scope="session")
def gray_setup():
    """2-class 8x8 grayscale model and a held-out corpus."""
    train_set = generate_synthetic_corpus(2, 150, 8, seed=21, channels=1)
    test_set = generate_synthetic_corpus(2, 10, 8, seed=22, channels=1)
    result = train(build_desk_model((8, 8, 1), 2, seed=0), train_set.images, TrainConfig(0.1, 30, 16, 0))
    return result.model, test_set


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
