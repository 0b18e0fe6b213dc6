import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iosrlab import etf


class TestConstruction:
    def test_three_by_three_geometry(self):
        m = etf.etf_matrix(3, 3, seed=0)
        np.testing.assert_allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-8)
        gram = m.T @ m
        off = gram[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, -0.5, atol=1e-8)

    def test_512_gram_matches_closed_form(self):
        K = 512
        m = etf.etf_matrix(512, K, seed=1)
        gram = m.T @ m
        expected = (K / (K - 1)) * (np.eye(K) - np.full((K, K), 1.0 / K))
        assert np.abs(gram - expected).max() < 1e-8
        # off-diagonal value -1/511
        assert gram[0, 1] == pytest.approx(-1.0 / 511, abs=1e-10)

    def test_k_greater_than_d_rejected(self):
        with pytest.raises(etf.EtfConstructionError):
            etf.etf_matrix(3, 4, seed=0)

    def test_k_of_one_rejected(self):
        with pytest.raises(etf.EtfConstructionError):
            etf.etf_matrix(3, 1, seed=0)

    @given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_rotation_invariance_of_cosine_multiset(self, seed_a, seed_b):
        d, K = 7, 5
        for seed in (seed_a, seed_b):
            gram = etf.etf_matrix(d, K, seed).T @ etf.etf_matrix(d, K, seed)
            off = np.sort(gram[~np.eye(K, dtype=bool)])
            np.testing.assert_allclose(off, -1.0 / (K - 1), atol=1e-8)

    def test_same_seed_reproduces_matrix(self):
        a = etf.etf_matrix(16, 8, seed=42)
        b = etf.etf_matrix(16, 8, seed=42)
        assert a.tobytes() == b.tobytes()

    def test_matrix_is_read_only(self):
        m = etf.etf_matrix(4, 3, seed=0)
        with pytest.raises(ValueError):
            m[0, 0] = 5.0

    def test_check_geometry_names_corrupted_column(self):
        m = etf.etf_matrix(4, 4, seed=0).copy()
        m[:, 2] *= 1.5
        problems = etf.check_geometry(m)
        assert any("column 2" in p for p in problems)

    def test_check_geometry_clean_bank(self):
        assert etf.check_geometry(etf.etf_matrix(8, 8, seed=3)) == []


class TestActivation:
    def test_first_labels_take_first_columns(self):
        bank = etf.build_bank(8, 8, seed=0)
        etf.activate(bank, [10, 11])
        assert bank.assignment == {10: 0, 11: 1}
        assert bank.active[:2].all() and not bank.active[2:].any()

    def test_subsequent_task_appends(self):
        bank = etf.build_bank(8, 8, seed=0)
        etf.activate(bank, [10, 11])
        etf.activate(bank, [5, 6, 7])
        assert bank.assignment == {10: 0, 11: 1, 5: 2, 6: 3, 7: 4}
        assert bank.active[:5].all() and not bank.active[5:].any()

    def test_capacity_error(self):
        bank = etf.build_bank(4, 3, seed=0)
        etf.activate(bank, [0, 1, 2])
        with pytest.raises(etf.CapacityError):
            etf.activate(bank, [3])

    def test_duplicate_label_rejected(self):
        bank = etf.build_bank(4, 3, seed=0)
        etf.activate(bank, [0])
        with pytest.raises(ValueError):
            etf.activate(bank, [0])


class TestVirtualPrototypes:
    def test_unit_norm_initialization(self):
        bank = etf.build_bank(6, 6, seed=0)
        etf.activate(bank, [0, 1])
        etf.init_virtual_prototypes(bank, [0, 1], seed=9)
        for v in bank.virtual.values():
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)

    def test_seed_determinism(self):
        def make():
            bank = etf.build_bank(6, 6, seed=0)
            etf.activate(bank, [0, 1])
            etf.init_virtual_prototypes(bank, [0, 1], seed=9)
            return bank.virtual

        a, b = make(), make()
        for lbl in a:
            assert a[lbl].tobytes() == b[lbl].tobytes()

    def test_inactive_class_rejected(self):
        bank = etf.build_bank(6, 6, seed=0)
        with pytest.raises(KeyError):
            etf.init_virtual_prototypes(bank, [0], seed=1)

    def test_reinitialization_rejected(self):
        bank = etf.build_bank(6, 6, seed=0)
        etf.activate(bank, [0])
        etf.init_virtual_prototypes(bank, [0], seed=1)
        with pytest.raises(ValueError):
            etf.init_virtual_prototypes(bank, [0], seed=2)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        bank = etf.build_bank(8, 8, seed=5)
        etf.activate(bank, [3, 1, 4])
        etf.init_virtual_prototypes(bank, [3, 1], seed=2)
        path = tmp_path / "bank.json"
        etf.save_bank(bank, path)
        loaded = etf.load_bank(path)
        assert loaded.matrix.tobytes() == bank.matrix.tobytes()
        assert loaded.assignment == bank.assignment
        assert (loaded.active == bank.active).all()
        for lbl, v in bank.virtual.items():
            np.testing.assert_allclose(loaded.virtual[lbl], v)

    def test_format_tag_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else/9"}')
        with pytest.raises(ValueError):
            etf.load_bank(path)
