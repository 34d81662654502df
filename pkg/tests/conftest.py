import numpy as np
import pytest

from fixedpoint_tools.models import generate_synthetic, make_classifier


def random_classifier(rng, architecture, dim, n_classes, hidden=8):
    if architecture == "linear":
        return make_classifier(
            "linear", [rng.normal(size=(dim, n_classes))], [rng.normal(size=n_classes)]
        )
    return make_classifier(
        "mlp1",
        [rng.normal(size=(dim, hidden)), rng.normal(size=(hidden, n_classes))],
        [rng.normal(size=hidden), rng.normal(size=n_classes)],
    )


@pytest.fixture
def blobs():
    return generate_synthetic({
        "kind": "blobs", "classes": 3, "dim": 5, "per_class": 20, "noise": 0.1, "seed": 7,
    })


@pytest.fixture
def mlp_model():
    return random_classifier(np.random.default_rng(3), "mlp1", 5, 3)


@pytest.fixture
def linear_model():
    return random_classifier(np.random.default_rng(4), "linear", 6, 3)
