import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tenrec import (
    FactorModel,
    IndeterminacyTransform,
    ModelFormatError,
    SparseTensor,
    SubgroupMap,
    apply_indeterminacy,
    identifiability_check,
    kruskal_rank,
    load_model,
    load_subgroup_map,
    penalized_loss,
    predict_entries,
    predict_entry,
    rearrange_columns,
    save_model,
    save_subgroup_map,
)
from oracles import krank_oracle, loss_oracle, predict_oracle


def random_model(rng, dims=(5, 4, 3), m=(2, 2, 3), r=2, scale=1.0):
    labels = [np.repeat(np.arange(1, mk + 1),
                        -(-nk // mk))[:nk] for nk, mk in zip(dims, m)]
    sg = SubgroupMap([lab.tolist() for lab in labels])
    P = [rng.normal(scale=scale, size=(nk, r)) for nk in dims]
    Q = [rng.normal(scale=scale, size=(mk, r)) for mk in m]
    return FactorModel(P=P, Q=Q, subgroups=sg)


def all_indices(dims):
    return np.argwhere(np.ones(dims)) + 1


class TestSubgroupMap:
    def test_codes_and_members(self):
        sg = SubgroupMap([[1, 1, 2], [2, 1]])
        assert sg.m == (2, 2)
        np.testing.assert_array_equal(sg.codes0(1), [0, 0, 1])
        np.testing.assert_array_equal(sg.members(1, 1), [1, 2])
        np.testing.assert_array_equal(sg.members(2, 2), [1])
        np.testing.assert_array_equal(sg.group_sizes(2), [1, 1])

    def test_declared_group_count_can_exceed_observed(self):
        sg = SubgroupMap([[1, 1]], m=(3,))
        assert sg.m == (3,)
        assert sg.members(1, 3).size == 0

    def test_labels_must_be_positive_ints(self):
        with pytest.raises(ValueError):
            SubgroupMap([[0, 1]])
        with pytest.raises(ValueError):
            SubgroupMap([[1, -2]])

    def test_trivial_puts_everyone_together(self):
        sg = SubgroupMap.trivial((4, 2))
        assert sg.m == (1, 1)
        np.testing.assert_array_equal(sg.codes0(1), [0, 0, 0, 0])

    def test_restrict_keeps_selected_modes(self):
        sg = SubgroupMap([[1, 2], [1, 1], [2, 1]])
        r2 = sg.restrict((1, 2))
        assert r2.sizes == (2, 2)
        np.testing.assert_array_equal(r2.codes0(2), sg.codes0(2))

    def test_validate_for_fit_wants_two_members(self):
        sg = SubgroupMap([[1, 1, 2]])
        with pytest.raises(ValueError, match="subgroup"):
            sg.validate_for_fit()
        SubgroupMap([[1, 1, 2, 2]]).validate_for_fit()


class TestPrediction:
    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng)
        codes = [model.subgroups.codes0(k + 1) for k in range(3)]
        idx = all_indices((5, 4, 3))
        got = predict_entries(model, idx)
        for e in range(idx.shape[0]):
            want = predict_oracle(model.P, model.Q, codes, idx[e] - 1)
            assert got[e] == pytest.approx(want, abs=1e-12)
        one = predict_entry(model, tuple(idx[7]))
        assert one == pytest.approx(got[7], abs=1e-15)

    def test_nested_expanded_and_combined(self):
        rng = np.random.default_rng(1)
        model = random_model(rng)
        for k in range(1, 4):
            exp = model.nested_expanded(k)
            codes = model.subgroups.codes0(k)
            np.testing.assert_array_equal(exp, model.Q[k - 1][codes])
            np.testing.assert_allclose(model.combined(k),
                                       model.P[k - 1] + exp, atol=0)

    def test_penalized_loss_matches_oracle(self):
        rng = np.random.default_rng(5)
        model = random_model(rng)
        idx = all_indices((5, 4, 3))[::3]
        vals = rng.normal(size=idx.shape[0])
        t = SparseTensor(idx, vals, (5, 4, 3))
        codes = [model.subgroups.codes0(k + 1) for k in range(3)]
        for lam in (0.0, 0.5, 7.0):
            want = loss_oracle(model.P, model.Q, codes, idx - 1, vals, lam)
            assert penalized_loss(model, t, lam) == pytest.approx(
                want, rel=1e-12)

    def test_shape_validation(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        bad_q = [q.copy() for q in model.Q]
        bad_q[1] = bad_q[1][:, :1]
        with pytest.raises(ValueError):
            FactorModel(P=model.P, Q=bad_q, subgroups=model.subgroups)

    def test_cold_rows_must_be_zero(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        flags = [np.zeros(n, dtype=bool) for n in (5, 4, 3)]
        flags[0][0] = True
        with pytest.raises(ValueError, match="cold"):
            FactorModel(P=model.P, Q=model.Q, subgroups=model.subgroups,
                        cold=flags)
        P = [p.copy() for p in model.P]
        P[0][0] = 0.0
        FactorModel(P=P, Q=model.Q, subgroups=model.subgroups, cold=flags)


class TestRearrange:
    def test_energy_descending_and_predictions_kept(self):
        rng = np.random.default_rng(3)
        model = random_model(rng, r=4)
        out = rearrange_columns(model)
        energy = [sum(float(np.sum(out.combined(k)[:, j] ** 2))
                      for k in range(1, 4)) for j in range(4)]
        assert all(energy[j] >= energy[j + 1] - 1e-12 for j in range(3))
        idx = all_indices((5, 4, 3))
        np.testing.assert_allclose(predict_entries(out, idx),
                                   predict_entries(model, idx), atol=1e-12)

    def test_ties_keep_original_order(self):
        sg = SubgroupMap([[1, 1], [1, 1]])
        P = [np.array([[1.0, 1.0], [0.0, 0.0]]) for _ in range(2)]
        Q = [np.zeros((1, 2)) for _ in range(2)]
        model = FactorModel(P=P, Q=Q, subgroups=sg)
        out = rearrange_columns(model)
        np.testing.assert_array_equal(out.P[0], P[0])


class TestIndeterminacy:
    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_scaling_preserves_predictions(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng)
        r = 2
        # per-column scale factors multiplying to one across modes
        a = rng.uniform(0.5, 2.0, size=(2, r))
        scales = [a[0], a[1], 1.0 / (a[0] * a[1])]
        t = IndeterminacyTransform(kind="scaling", scales=scales)
        out = apply_indeterminacy(model, t)
        idx = all_indices((5, 4, 3))
        np.testing.assert_allclose(predict_entries(out, idx),
                                   predict_entries(model, idx), atol=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_permutation_preserves_predictions(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(rng, r=3)
        perm = rng.permutation(3) + 1
        out = apply_indeterminacy(
            model, IndeterminacyTransform(kind="permutation", perm=perm))
        idx = all_indices((5, 4, 3))
        np.testing.assert_allclose(predict_entries(out, idx),
                                   predict_entries(model, idx), atol=1e-10)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_subgroup_shift_preserves_predictions(self, seed):
        """Moving a subgroup-constant offset between latent and nested parts
        changes neither the effective factors nor the predictions."""
        rng = np.random.default_rng(seed)
        model = random_model(rng)
        deltas = []
        for k in range(1, 4):
            codes = model.subgroups.codes0(k)
            per_group = rng.normal(size=(model.subgroups.m[k - 1], 2))
            deltas.append(per_group[codes])
        t = IndeterminacyTransform(kind="addition", deltas=deltas)
        out = apply_indeterminacy(model, t)
        idx = all_indices((5, 4, 3))
        np.testing.assert_allclose(predict_entries(out, idx),
                                   predict_entries(model, idx), atol=1e-10)

    def test_bad_scaling_rejected(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        scales = [np.full(2, 2.0), np.full(2, 1.0), np.full(2, 1.0)]
        with pytest.raises(ValueError, match="product"):
            apply_indeterminacy(
                model, IndeterminacyTransform(kind="scaling", scales=scales))

    def test_nonconstant_delta_rejected(self):
        rng = np.random.default_rng(0)
        model = random_model(rng)
        deltas = [rng.normal(size=p.shape) for p in model.P]
        with pytest.raises(ValueError, match="constant"):
            apply_indeterminacy(
                model, IndeterminacyTransform(kind="addition", deltas=deltas))

    def test_addition_clears_cold_flags(self):
        rng = np.random.default_rng(2)
        model = random_model(rng)
        P = [p.copy() for p in model.P]
        P[0][0] = 0.0
        flags = [np.zeros(n, dtype=bool) for n in (5, 4, 3)]
        flags[0][0] = True
        model = FactorModel(P=P, Q=model.Q, subgroups=model.subgroups,
                            cold=flags)
        deltas = []
        for k in range(1, 4):
            codes = model.subgroups.codes0(k)
            per_group = rng.normal(size=(model.subgroups.m[k - 1], 2))
            deltas.append(per_group[codes])
        out = apply_indeterminacy(
            model, IndeterminacyTransform(kind="addition", deltas=deltas))
        assert not any(c.any() for c in out.cold)


class TestKruskalRank:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_matches_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        r = int(rng.integers(1, 6))
        M = rng.normal(size=(n, r))
        if rng.random() < 0.3 and r >= 2:
            M[:, -1] = M[:, 0] * rng.normal()  # force a dependent pair
        assert kruskal_rank(M) == krank_oracle(M)

    def test_known_cases(self):
        assert kruskal_rank(np.eye(3)) == 3
        M = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 0.0]])
        assert kruskal_rank(M) == 1  # columns 1 and 2 are proportional
        assert kruskal_rank(np.zeros((3, 2))) == 0

    def test_guard_on_width(self):
        with pytest.raises(ValueError):
            kruskal_rank(np.ones((4, 13)))

    def test_identifiability_generic_model(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, dims=(6, 5, 4), m=(2, 2, 2), r=3)
        ok, info = identifiability_check(model)
        assert ok
        assert tuple(info["k_ranks"]) == (3, 3, 3)
        assert info["sum"] == 9
        assert info["threshold"] == 2 * 3 + (3 - 1)
        assert info["satisfied"]

    def test_identifiability_degenerate_model(self):
        sg = SubgroupMap([[1, 1, 1], [1, 1, 1], [1, 1]])
        P = [np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 2))]
        Q = [np.zeros((1, 2))] * 3
        model = FactorModel(P=P, Q=Q, subgroups=sg)
        ok, info = identifiability_check(model)
        assert not ok
        assert info["sum"] == 0


class TestSerialization:
    def test_model_roundtrip_bitstable(self, tmp_path):
        rng = np.random.default_rng(9)
        model = random_model(rng, r=3)
        P = [p.copy() for p in model.P]
        P[1][2] = 0.0
        flags = [np.zeros(n, dtype=bool) for n in (5, 4, 3)]
        flags[1][2] = True
        model = FactorModel(P=P, Q=model.Q, subgroups=model.subgroups,
                            cold=flags)
        path = tmp_path / "model.txt"
        save_model(model, path)
        back = load_model(path)
        for k in range(3):
            assert np.array_equal(back.P[k], model.P[k])
            assert np.array_equal(back.Q[k], model.Q[k])
        assert back.subgroups == model.subgroups
        np.testing.assert_array_equal(back.cold[1], flags[1])

    def test_model_file_rejects_tampering(self, tmp_path):
        rng = np.random.default_rng(4)
        model = random_model(rng)
        path = tmp_path / "model.txt"
        save_model(model, path)
        body = path.read_text()
        path.write_text(body.replace("multilayer-factor-model v1",
                                     "something else", 1))
        with pytest.raises(ModelFormatError):
            load_model(path)
        truncated = "\n".join(body.splitlines()[:8]) + "\n"
        path.write_text(truncated)
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_subgroup_file_roundtrip(self, tmp_path):
        sg = SubgroupMap([[1, 2, 1, 2], [3, 1, 2]])
        path = tmp_path / "groups.tsv"
        save_subgroup_map(sg, path)
        back = load_subgroup_map(path, dims=(4, 3))
        assert back == sg

    def test_subgroup_file_unsectioned_single_mode(self, tmp_path):
        path = tmp_path / "groups.tsv"
        path.write_text("1\t1\n2\t1\n3\t2\n4\t2\n")
        sg = load_subgroup_map(path, dims=(4,))
        np.testing.assert_array_equal(sg.codes0(1), [0, 0, 1, 1])

    def test_subgroup_file_coverage_enforced(self, tmp_path):
        path = tmp_path / "groups.tsv"
        path.write_text("mode: 1\n1\t1\n2\t1\n")
        with pytest.raises(ModelFormatError, match="3"):
            load_subgroup_map(path, dims=(3,))
        path.write_text("mode: 1\n1\t1\n1\t2\n2\t1\n3\t1\n")
        with pytest.raises(ModelFormatError, match="twice"):
            load_subgroup_map(path, dims=(3,))
