import numpy as np
import pytest

from fixedpoint_tools.errors import DimensionMismatch
from fixedpoint_tools.explain_feature import (
    SCORERS,
    FeatureMask,
    apply_support,
    explainer_step_feature,
    importance_gradient_input,
    importance_occlusion,
    select_deflationary,
)
from fixedpoint_tools.models import input_gradient, make_classifier, predict_proba

from .conftest import random_classifier

SCORES = np.array([0.5, 0.1, 0.9, 0.3])


def test_mask_normalizes():
    mask = FeatureMask((3, 1, 1), 4)
    assert mask.kept == (1, 3)
    assert FeatureMask.from_json(mask.to_json()) == mask
    with pytest.raises(ValueError):
        FeatureMask((4,), 4)


def test_apply_support():
    x = np.array([1.0, 2.0, 3.0])
    assert list(apply_support(x, FeatureMask((0, 2), 3))) == [1.0, 0.0, 3.0]
    with pytest.raises(DimensionMismatch):
        apply_support(x, FeatureMask((0,), 4))


def test_topk_full_removal():
    out = select_deflationary(SCORES, FeatureMask.full(4), {"kind": "topk", "k": 2}, 1.0)
    assert out.kept == (0, 2)


def test_topk_partial_removal_drops_weakest_first():
    out = select_deflationary(SCORES, FeatureMask.full(4), {"kind": "topk", "k": 2}, 0.25)
    assert out.kept == (0, 2, 3)


def test_threshold_rule():
    out = select_deflationary(SCORES, FeatureMask.full(4), {"kind": "threshold", "tau": 0.3}, 1.0)
    assert out.kept == (0, 2, 3)


def test_selection_keeps_mask_when_everything_is_selected():
    mask = FeatureMask((0, 2), 4)
    assert select_deflationary(SCORES, mask, {"kind": "topk", "k": 5}, 1.0) is mask


def test_topk_ties_go_to_lowest_index():
    out = select_deflationary(np.ones(4), FeatureMask.full(4), {"kind": "topk", "k": 1}, 1.0)
    assert out.kept == (0,)


@pytest.mark.parametrize("rho", [0.0, -0.5, 1.5])
def test_rejects_bad_remove_fraction(rho):
    with pytest.raises(ValueError):
        select_deflationary(SCORES, FeatureMask.full(4), {"kind": "topk", "k": 1}, rho)


def test_rejects_unknown_rule():
    with pytest.raises(ValueError):
        select_deflationary(SCORES, FeatureMask.full(4), {"kind": "random"}, 1.0)


def test_occlusion_scores(linear_model):
    x = np.random.default_rng(0).normal(size=6)
    mask = FeatureMask((0, 2, 5), 6)
    scores = importance_occlusion(linear_model, x, mask, 1)
    base = predict_proba(linear_model, apply_support(x, mask))[0, 1]
    dropped = predict_proba(linear_model, apply_support(x, mask.without(2)))[0, 1]
    assert abs(scores[2] - (base - dropped)) < 1e-12
    assert scores[1] == 0.0


def test_gradient_input_scores(mlp_model):
    x = np.random.default_rng(1).normal(size=5)
    mask = FeatureMask((1, 3), 5)
    scores = importance_gradient_input(mlp_model, x, mask, 0)
    grad = input_gradient(mlp_model, apply_support(x, mask), 0)
    assert np.allclose(scores[[1, 3]], grad[[1, 3]] * x[[1, 3]])
    assert scores[0] == 0.0


@pytest.mark.parametrize("scorer", ["occlusion", "gradient_input"])
def test_step_is_deflationary(linear_model, scorer):
    x = np.random.default_rng(2).normal(size=6)
    mask = FeatureMask.full(6)
    for _ in range(8):
        nxt = explainer_step_feature(
            linear_model, x, mask, scorer, {"kind": "threshold", "tau": 0.0}, 0.5
        )
        assert nxt.issubset(mask)
        mask = nxt


def run_masks(model, x, scorer, rule, rho, steps=6):
    mask = FeatureMask.full(len(x))
    masks = [mask]
    for _ in range(steps):
        mask = explainer_step_feature(model, x, mask, scorer, rule, rho)
        masks.append(mask)
    return masks


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("scorer", ["occlusion", "gradient_input"])
def test_swapped_twin_features_score_and_select_alike(seed, scorer):
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(6, 3))
    weights[1] = weights[0]
    model = make_classifier("linear", [weights], [rng.normal(size=3)])
    x = rng.normal(size=6)
    x[1] = x[0]

    scores = SCORERS[scorer](model, x, FeatureMask.full(6), 0)
    assert abs(scores[0] - scores[1]) <= 1e-12
    for mask in run_masks(model, x, scorer, {"kind": "threshold", "tau": 0.0}, 1.0):
        assert (0 in mask) == (1 in mask)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("scorer", ["occlusion", "gradient_input"])
def test_relabelling_features_relabels_scores_and_masks(seed, scorer):
    rng = np.random.default_rng(seed)
    model = random_classifier(rng, "mlp1", 6, 3)
    x = rng.normal(size=6)
    perm = rng.permutation(6)
    relabelled = make_classifier(
        "mlp1", [model.weights[0][perm], model.weights[1]], list(model.biases)
    )

    scores = SCORERS[scorer](model, x, FeatureMask.full(6), 1)
    moved = SCORERS[scorer](relabelled, x[perm], FeatureMask.full(6), 1)
    assert np.allclose(moved, scores[perm], atol=1e-12)

    rule = {"kind": "topk", "k": 2}
    masks = run_masks(model, x, scorer, rule, 0.5)
    moved_masks = run_masks(relabelled, x[perm], scorer, rule, 0.5)
    for mask, moved_mask in zip(masks, moved_masks):
        assert {int(perm[j]) for j in moved_mask.kept} == set(mask.kept)
