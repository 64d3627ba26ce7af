import json

import numpy as np
import pytest

from domgen.benchgen import (
    BenchmarkSplit,
    ConfigError,
    DatasetParseError,
    DatasetValidationError,
    DomainDataset,
    LtConfig,
    MotherSpec,
    ShiftKind,
    cayley_rotation,
    draw_transform,
    generate_lt_benchmark,
    load_external_dataset,
    lt_counts,
    rescale_counts,
    sample_domain,
    write_dataset,
)

SMALL_LT = LtConfig(N=4, K=3, A=10, n_val_domains=1, n_test_domains=2, train_eval_per_class=4, val_per_class=4, test_per_class=6)


def small_spec(**kw):
    return MotherSpec(**{"base_classes": 8, "input_dim": 5, **kw})


class TestMotherSpec:
    def test_class_means_separated(self):
        spec = MotherSpec()
        m = spec.class_means
        dists = np.linalg.norm(m[:, None] - m[None], axis=2)[np.triu_indices(len(m), 1)]
        assert dists.min() >= 4 * spec.class_scale

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_magnitude_positive(self, bad):
        with pytest.raises(ConfigError):
            MotherSpec(shift_magnitude=bad)

    def test_duplicate_means_rejected(self):
        with pytest.raises(ConfigError):
            MotherSpec(base_classes=2, input_dim=2, class_means=np.zeros((2, 2)))


class TestTransforms:
    @pytest.mark.parametrize("angle", [0.1, 1.0, 2.5])
    def test_cayley_orthogonal_with_angle(self, angle):
        R = cayley_rotation(6, angle, np.random.default_rng(0))
        np.testing.assert_allclose(R @ R.T, np.eye(6), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
        angles = np.abs(np.angle(np.linalg.eigvals(R)))
        assert angles.max() == pytest.approx(angle, abs=1e-9)

    def test_affine_offset_norm(self):
        spec = small_spec(shift_kind=ShiftKind.AFFINE_SHIFT, shift_magnitude=1.7)
        t = draw_transform(spec, np.random.default_rng(3))
        assert np.linalg.norm(t.offset) == pytest.approx(1.7)
        np.testing.assert_array_equal(t.rotation, np.eye(5))

    def test_vanishing_magnitude_is_identity(self):
        spec = small_spec(shift_kind=ShiftKind.BOTH, shift_magnitude=1e-12)
        a = sample_domain(spec, {0: 2000, 1: 2000}, [1])
        b = sample_domain(spec, {0: 2000, 1: 2000}, [2])
        np.testing.assert_allclose(a.transform.rotation, np.eye(5), atol=1e-10)
        np.testing.assert_allclose(b.transform.offset, 0.0, atol=1e-10)
        for c in (0, 1):
            ma = a.x_fit[a.y_fit == c].mean(axis=0)
            mb = b.x_fit[b.y_fit == c].mean(axis=0)
            assert np.max(np.abs(ma - mb)) < 0.15


class TestSampleDomain:
    def test_exact_counts(self):
        d = sample_domain(small_spec(), {0: 5}, [0])
        assert len(d.y_fit) == 5 and np.all(d.y_fit == 0)

    def test_unknown_class(self):
        with pytest.raises(IndexError):
            sample_domain(small_spec(), {99: 1}, [0])

    def test_law_of_large_numbers(self):
        spec = small_spec(shift_kind=ShiftKind.BOTH)
        d = sample_domain(spec, {3: 10_000}, [7])
        expected = d.transform.apply(spec.class_means[3:4])[0]
        assert np.max(np.abs(d.x_fit.mean(axis=0) - expected)) < 4 * spec.class_scale / 100


class TestLongTail:
    def test_large_scale_arithmetic(self):
        counts = lt_counts(range(500), set(range(100)), 350, 0.1)
        assert sum(counts.values()) == 49_000

    def test_uniform_and_head_only(self):
        assert sum(lt_counts(range(20), {0, 1}, 60, 1.0).values()) == 20 * 60
        assert lt_counts(range(20), {0, 1}, 60, 0.0) == {0: 60, 1: 60}

    def test_bankers_rounding(self):
        assert lt_counts(range(2), {0}, 25, 0.1)[1] == 2  # 2.5 rounds to 2
        assert lt_counts(range(2), {0}, 35, 0.1)[1] == 4  # 3.5 rounds to 4

    def test_rescale(self):
        c = rescale_counts({0: 60, 1: 6, 2: 6}, 36)
        assert sum(c.values()) == 36 and c[0] == 30

    def test_generate_sizes(self):
        spec = small_spec()
        b = generate_lt_benchmark(spec, LtConfig(N=3, K=2, A=10, f=1.0, n_val_domains=1, n_test_domains=1))
        assert all(len(d.y_fit) == 8 * 10 for d in b.train)
        b0 = generate_lt_benchmark(spec, LtConfig(N=3, K=2, A=10, f=0.0, n_val_domains=1, n_test_domains=1))
        assert all(len(d.y_fit) == 2 * 10 for d in b0.train)

    def test_label_shift(self):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        hists = [d.class_histogram(8) for d in b.train]
        assert all(len(set(h[h > 0].tolist())) > 1 for h in hists)
        assert any(not np.array_equal(hists[0], h) for h in hists[1:])

    def test_split_invariants(self):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        ids = [d.domain_id for d in b.all_domains()]
        assert len(ids) == len(set(ids))
        seen = set(np.concatenate([d.y_fit for d in b.train]).tolist())
        for d in b.val + b.test:
            assert set(d.y_fit.tolist()) <= seen and set(d.y_eval.tolist()) <= seen

    def test_k_too_large(self):
        with pytest.raises(ConfigError):
            generate_lt_benchmark(small_spec(), LtConfig(K=9))

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            write_dataset(generate_lt_benchmark(small_spec(rng_seed=3), SMALL_LT), tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_distinguishability_grows_with_magnitude(self):
        def spread(m):
            vals = []
            for seed in range(10):
                b = generate_lt_benchmark(small_spec(shift_kind=ShiftKind.BOTH, shift_magnitude=m, rng_seed=seed), SMALL_LT)
                means = np.array([d.x_fit.mean(axis=0) for d in b.train])
                vals.append(np.mean(np.linalg.norm(means[:, None] - means[None], axis=2)))
            return np.mean(vals)

        s = [spread(m) for m in (0.5, 1.5, 2.5)]
        assert s[0] <= s[1] <= s[2]


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        write_dataset(b, tmp_path / "d.jsonl")
        back = load_external_dataset(tmp_path / "d.jsonl")
        assert back.content_equal(b)
        assert all(d.transform is None for d in back.all_domains())

    def test_header_and_no_transform(self, tmp_path):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        write_dataset(b, tmp_path / "d.jsonl")
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        header = json.loads(lines[0])
        assert header["format"] == "domgen-data-v1" and header["dim"] == 5
        rec = json.loads(lines[1])
        assert set(rec) == {"domain", "split", "sub", "x", "y"}

    def test_empty_domain_list(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"format": "domgen-data-v1", "dim": 2, "classes": 2, "splits": {}}) + "\n")
        with pytest.raises(DatasetValidationError):
            load_external_dataset(p)

    def test_unseen_test_class(self, tmp_path):
        x = np.zeros((1, 2))
        b = BenchmarkSplit(
            2, 3,
            [DomainDataset("tr", x, np.array([0]), x, np.array([0]))],
            [],
            [DomainDataset("te", x, np.array([2]), x, np.array([2]))],
        )
        write_dataset(b, tmp_path / "d.jsonl")
        with pytest.raises(DatasetValidationError, match="te"):
            load_external_dataset(tmp_path / "d.jsonl")

    def test_malformed_line(self, tmp_path):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        p = tmp_path / "d.jsonl"
        write_dataset(b, p)
        lines = p.read_text().splitlines()
        lines[3] = lines[3][:-5]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetParseError) as err:
            load_external_dataset(p)
        assert err.value.line == 4

    def test_wrong_dimension(self, tmp_path):
        b = generate_lt_benchmark(small_spec(), SMALL_LT)
        p = tmp_path / "d.jsonl"
        write_dataset(b, p)
        lines = p.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["x"] = rec["x"][:-1]
        lines[2] = json.dumps(rec)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises((DatasetParseError, DatasetValidationError)):
            load_external_dataset(p)
