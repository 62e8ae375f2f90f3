"""Finite-difference verification of the hand-written backward pass."""
import numpy as np
import pytest

from attnctl.gradcheck import (
    REL_TOL,
    central_diff,
    compare,
    format_results,
    run_gradcheck,
)


def test_central_diff_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = central_diff(lambda: float((x ** 2).sum()), x)
    # Central differences are exact for quadratics up to roundoff.
    assert np.allclose(g, 2.0 * x, atol=1e-9)


def test_compare_reports_relative_error():
    res = compare("demo", np.array([1.0, 2.0]), np.array([1.0, 2.0 * (1 + 1e-3)]))
    assert res.max_rel == pytest.approx(1e-3 / (1 + 1e-3), rel=1e-6)
    assert not res.passed
    tiny = compare("tiny", np.array([1e-12]), np.array([-1e-12]))
    assert tiny.max_rel == 0.0                # below the absolute floor


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_all_hand_gradients_match_finite_differences(seed):
    results = run_gradcheck(seed)
    names = {r.name for r in results}
    assert "reward_attn_wrt_embeddings" in names
    assert "penalty_attn_wrt_embeddings" in names
    assert "masked_rec_wrt_embeddings" in names
    assert "stage1_total_wrt_embeddings" in names
    assert "combined_box_wrt_latent" in names
    assert "combined_box_wrt_embeddings" in names
    assert any(n.startswith("masked_rec_wrt_value_proj") for n in names)
    for r in results:
        assert r.max_rel <= REL_TOL, f"{r.name}: max rel {r.max_rel:.3e}"


def test_format_results_mentions_verdict():
    text = format_results(run_gradcheck(0))
    assert "all gradients verified" in text
    assert "tolerance" in text
