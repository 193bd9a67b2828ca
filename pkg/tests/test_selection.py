"""Tests for the cutoff value, greedy orthogonalization selection and tallies."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dmhe.selection import SelectionResult, cutoff_value, orthogonalize_select, tally_selection


def residual_norms(S, basis_cols, candidates):
    """Independent projection by least squares onto the chosen columns."""
    if not basis_cols:
        return np.linalg.norm(S[:, candidates], axis=0)
    X = S[:, basis_cols]
    coef = np.linalg.lstsq(X, S[:, candidates], rcond=None)[0]
    return np.linalg.norm(S[:, candidates] - X @ coef, axis=0)


def test_cutoff_values():
    assert cutoff_value(1e-3, 1e-3) == pytest.approx(4.2426e-3, abs=1e-7)
    assert cutoff_value(0.0, 0.0) == 0.0
    assert cutoff_value(3e-3, 4e-3) == pytest.approx(1.5e-2)
    with pytest.raises(ValueError):
        cutoff_value(-1.0, 0.0)


def test_orthogonal_columns_against_cutoff():
    S = np.diag([5.0, 3.0, 1.0])
    res = orthogonalize_select(S, 2.0)
    assert res.selected == (0, 1)
    assert res.residual_norms == (5.0, 3.0)
    assert res.unselected == (2,)
    assert res.stop_norm == 1.0


def test_duplicate_column_never_selected_twice():
    rng = np.random.default_rng(3)
    S = rng.standard_normal((8, 4))
    S = np.column_stack([S, S[:, 2]])
    res = orthogonalize_select(S, 1e-6)
    assert not {2, 4} <= set(res.selected)


def test_ties_go_to_lowest_index():
    S = np.eye(3)
    assert orthogonalize_select(S, 0.5).selected == (0, 1, 2)
    S = np.diag([1.0, 2.0, 2.0])
    assert orthogonalize_select(S, 0.5).selected == (1, 2, 0)


def test_forced_columns():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((10, 6))
    res = orthogonalize_select(S, 0.0, forced=(4, 1))
    assert res.selected[:2] == (4, 1) and res.forced == (4, 1)
    assert res.greedy == res.selected[2:]
    assert len(res.residual_norms) == len(res.greedy)
    expected = residual_norms(S, [4, 1], [j for j in range(6) if j not in (4, 1)]).max()
    assert res.residual_norms[0] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        orthogonalize_select(S, 0.0, forced=(1, 1))
    with pytest.raises(ValueError):
        orthogonalize_select(S, 0.0, forced=(6,))
    with pytest.raises(ValueError):
        orthogonalize_select(S, -1.0)


def test_max_select_and_names():
    S = np.diag([3.0, 2.0, 1.0])
    res = orthogonalize_select(S, 0.0, max_select=1, labels=("a", "b", "c"))
    assert res.names() == ["a"]
    assert res.names("unselected") == ["b", "c"]
    d = json.loads(res.to_json())
    assert d["selected_names"] == ["a"] and d["unselected"] == [1, 2]


def test_zero_alpha_on_rank_deficient_matrix_stops_at_rank():
    rng = np.random.default_rng(5)
    S = rng.standard_normal((6, 3)) @ rng.standard_normal((3, 5))
    assert len(orthogonalize_select(S, 0.0).selected) == 3


matrices = arrays(float, st.tuples(st.integers(3, 8), st.integers(1, 6)),
                  elements=st.floats(-5, 5).map(lambda v: round(v, 2)))


@settings(max_examples=80, deadline=None)
@given(matrices)
def test_residual_norms_non_increasing(S):
    res = orthogonalize_select(S, 1e-8)
    r = np.array(res.residual_norms)
    assert np.all(np.diff(r) <= 1e-9 * max(1.0, np.abs(S).max()))


@settings(max_examples=80, deadline=None)
@given(matrices, st.integers(0, 2))
def test_greedy_matches_exhaustive_step_search(S, n_forced):
    n = S.shape[1]
    forced = tuple(range(min(n_forced, n)))
    res = orthogonalize_select(S, 1e-6 * max(1.0, np.linalg.norm(S)), forced=forced)
    assert set(forced) <= set(res.selected)
    chosen = list(forced)
    for pick, norm in zip(res.greedy, res.residual_norms):
        cand = [j for j in range(n) if j not in chosen]
        r = residual_norms(S, chosen, cand)
        assert norm == pytest.approx(r.max(), rel=1e-7, abs=1e-9)
        # the pick attains the maximum (ties within round-off are allowed)
        assert r[cand.index(pick)] >= r.max() - 1e-9 * max(1.0, r.max())
        chosen.append(pick)


def test_tally():
    r = SelectionResult((1, 2), (1.0, 0.5), 0.1, (), 5)
    t = tally_selection([r], names=("a", "b", "c", "d", "e"))
    assert t.counts.tolist() == [0, 1, 1, 0, 0] and t.total == 1
    empty = SelectionResult((), (), 0.1, (), 3)
    assert tally_selection([empty, empty]).counts.tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        tally_selection([])
    with pytest.raises(ValueError):
        tally_selection([r, empty])


def test_tally_csv_order(tmp_path):
    r = SelectionResult((0, 2), (1.0,), 0.1, (0,), 3, labels=("x", "y", "z"))
    t = tally_selection([r, r], order=("z", "x", "y"))
    lines = t.to_csv(tmp_path / "t.csv").read_text().splitlines()
    assert lines == ["variable,count,total", "z,2,2", "x,2,2", "y,0,2"]
