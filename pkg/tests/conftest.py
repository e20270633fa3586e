import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vidattr.model import ModelConfig, Variant, build_model  # noqa: E402
from vidattr.schema import parse_schema_text  # noqa: E402

SMALL_SCHEMA_TEXT = "motion|mp|walk,stand,run\ngender|id|male,female\ntop_color|id|red,green,blue,black\n"


@pytest.fixture
def small_schema():
    return parse_schema_text(SMALL_SCHEMA_TEXT)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_batch(small_schema, rng):
    frames = rng.normal(size=(4, 3, 8, 2, 2))
    labels = np.stack([rng.integers(0, g.num_classes, 4) for g in small_schema.groups], axis=1)
    return frames, labels


def jittered_model(schema, variant, seed=0, D_c=8, d_a=5, n=3, scale=0.1):
    """float64 model with non-zero biases so no gradient path is trivially flat."""
    model = build_model(schema, ModelConfig(n=n, D_c=D_c, d_a=d_a, variant=variant), seed, dtype=np.float64)
    r = np.random.default_rng(seed + 100)
    for k, v in model.params.items():
        model.params[k] = v + scale * r.normal(size=v.shape)
    return model


ALL_VARIANTS = list(Variant)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
