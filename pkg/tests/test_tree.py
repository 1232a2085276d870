"""Tree construction, split search, routing, reporting, and serialization."""

import json

import numpy as np
import pytest

from usnrt.data import SynthSpec, generate_synthetic
from usnrt.metrics import GaussianPrediction
from usnrt.model_io import ModelFormatError
from usnrt.nn_core import SIGMA_FLOOR, Activation, Mlp, TrainConfig, predict_sigma
from usnrt.stats import DegenerateVarianceError, levene_test
from usnrt.tree import (
    InternalNode,
    LeafNode,
    UsnrtConfig,
    UsnrtModel,
    build,
    describe,
    find_best_split,
    leaf_assignments,
    leaf_report,
    load,
    predict,
    predict_arrays,
    resolve_n_min,
    root_split_scatter,
    save,
)

from conftest import fast_train_cfg, feature_matrix


def small_cfg(seed=0, **kwargs):
    defaults = dict(
        n_min=150,
        split_net_hidden=[8],
        leaf_net_hidden=[8],
        train_cfg=fast_train_cfg(seed=seed, max_epochs=60, patience=8),
        seed=seed,
    )
    defaults.update(kwargs)
    return UsnrtConfig(**defaults)


def constant_leaf(region_id, width, mean_value, sigma_bias):
    mean_net = Mlp([width, 1], seed=0)
    mean_net.weights = [np.zeros((width, 1))]
    mean_net.biases = [np.array([mean_value])]
    sigma_net = Mlp([width, 1], output_activation=Activation.SOFTPLUS, seed=0)
    sigma_net.weights = [np.zeros((width, 1))]
    sigma_net.biases = [np.array([sigma_bias])]
    return LeafNode(
        region_id=region_id,
        mean_net=mean_net,
        sigma_net=sigma_net,
        train_count=10,
        residual_std=1.0,
    )


def brute_force_best(X, residuals, n_min):
    """Exhaustive stride-1 recomputation with the same ranking rule."""
    n = X.shape[0]
    best = None
    best_key = None
    for k in range(X.shape[1]):
        order = np.argsort(X[:, k], kind="stable")
        values = X[order, k]
        res = residuals[order]
        for i in range(n):
            if i + 1 < n and values[i + 1] == values[i]:
                continue
            left_n, right_n = i + 1, n - i - 1
            if left_n < n_min or right_n < n_min:
                continue
            try:
                r = levene_test(res[:left_n], res[left_n:])
            except DegenerateVarianceError:
                continue
            key = (r.p_value, -abs(r.statistic), k, values[i])
            if best_key is None or key < best_key:
                best_key = key
                best = (k, float(values[i]), r.p_value)
    return best


class TestFindBestSplit:
    def test_exhaustive_oracle_agreement(self):
        rng = np.random.default_rng(17)
        for trial in range(8):
            n = int(rng.integers(60, 200))
            d = int(rng.integers(1, 4))
            X = rng.uniform(-1, 1, (n, d))
            residuals = rng.standard_normal(n) * np.where(X[:, 0] > 0, 2.0, 0.7)
            cfg = UsnrtConfig(n_min=10, split_stride=1)
            found = find_best_split(X, residuals, cfg)
            expected = brute_force_best(X, residuals, n_min=10)
            assert found is not None and expected is not None
            assert (found.feature_index, found.threshold) == expected[:2]
            assert found.p_value == expected[2]

    def test_chosen_p_is_minimal(self):
        rng = np.random.default_rng(18)
        X = rng.uniform(-1, 1, (150, 2))
        residuals = rng.standard_normal(150)
        cfg = UsnrtConfig(n_min=12, split_stride=1)
        found = find_best_split(X, residuals, cfg)
        n = X.shape[0]
        for k in range(2):
            order = np.argsort(X[:, k], kind="stable")
            values = X[order, k]
            res = residuals[order]
            for i in range(n):
                if i + 1 < n and values[i + 1] == values[i]:
                    continue
                if i + 1 < 12 or n - i - 1 < 12:
                    continue
                assert found.p_value <= levene_test(res[: i + 1], res[i + 1 :]).p_value

    def test_piecewise_sigma_recovery(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.uniform(-1, 1, (4000, 2))
            residuals = np.where(X[:, 0] <= 0, 0.1, 1.0) * rng.standard_normal(4000)
            cand = find_best_split(X, residuals, UsnrtConfig(n_min=500))
            if cand.feature_index == 0 and abs(cand.threshold) < 0.15:
                hits += 1
        assert hits >= 9

    def test_homogeneous_residuals_not_significant(self):
        # Periodic residuals: every balanced cut sees the same composition.
        n = 48
        X = np.arange(n, dtype=float)[:, None]
        residuals = np.tile([-2.0, -1.0, 1.0, 2.0], n // 4)
        cand = find_best_split(X, residuals, UsnrtConfig(n_min=16, split_stride=1))
        assert cand is not None
        assert cand.p_value > 0.01  # rejected downstream by the alpha rule

    def test_infeasible_returns_none(self):
        X = np.random.default_rng(0).uniform(-1, 1, (30, 2))
        residuals = np.random.default_rng(1).standard_normal(30)
        assert find_best_split(X, residuals, UsnrtConfig(n_min=20)) is None

    def test_all_candidates_degenerate_returns_none(self):
        # Constant residuals degenerate every variance test.
        X = np.random.default_rng(2).uniform(-1, 1, (60, 2))
        residuals = np.full(60, 1.5)
        assert find_best_split(X, residuals, UsnrtConfig(n_min=10)) is None

    def test_one_hot_column_single_boundary(self):
        rng = np.random.default_rng(19)
        onehot = (rng.uniform(size=200) < 0.5).astype(float)
        X = onehot[:, None]
        residuals = rng.standard_normal(200) * np.where(onehot > 0, 3.0, 0.5)
        cand = find_best_split(X, residuals, UsnrtConfig(n_min=20, split_stride=1))
        assert cand.feature_index == 0
        assert cand.threshold == 0.0

    def test_n_min_resolution_default_rule(self):
        cfg = UsnrtConfig()
        assert resolve_n_min(cfg, 45_000) == 4_500
        assert resolve_n_min(cfg, 5_000) == 1_000
        assert resolve_n_min(UsnrtConfig(n_leaves=4), 45_000) == 11_250
        assert resolve_n_min(UsnrtConfig(n_min=250), 45_000) == 250


class TestBuild:
    def test_single_leaf_when_small(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, (200, 2))
        y = X[:, 0] + 0.1 * rng.standard_normal(200)
        model = build(X, y, small_cfg(n_min=150))
        assert model.leaf_count == 1
        assert model.depth == 0
        assert isinstance(model.root, LeafNode)

    def test_piecewise_sigma_splits_on_boundary(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=3))
        assert model.leaf_count >= 2
        assert isinstance(model.root, InternalNode)
        assert model.root.feature_index == 0
        assert abs(model.root.threshold) < 0.2

    def test_leaf_counts_respect_floor(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        cfg = small_cfg(n_min=400, seed=4)
        model = build(X, y, cfg)
        for leaf in model.leaves():
            assert leaf.train_count >= 400
        assert model.leaf_count <= X.shape[0] // 400

    def test_region_ids_contiguous(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=500, seed=5))
        ids = [leaf.region_id for leaf in model.leaves()]
        assert ids == list(range(1, model.leaf_count + 1))

    def test_lower_alpha_never_more_leaves(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        loose = build(X, y, small_cfg(n_min=400, seed=6, alpha=0.05))
        strict = build(X, y, small_cfg(n_min=400, seed=6, alpha=1e-6))
        assert strict.leaf_count <= loose.leaf_count

    def test_determinism(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        a = build(X, y, small_cfg(n_min=600, seed=7))
        b = build(X, y, small_cfg(n_min=600, seed=7))
        mu_a, s_a = predict_arrays(a, X[:100])
        mu_b, s_b = predict_arrays(b, X[:100])
        assert np.array_equal(mu_a, mu_b)
        assert np.array_equal(s_a, s_b)

    def test_build_log_records_nodes(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=8))
        kinds = {entry["kind"] for entry in model.build_log["nodes"]}
        assert "leaf-trained" in kinds
        summary = describe(model)
        assert summary["leaf_count"] == model.leaf_count
        assert summary["depth"] == model.depth
        assert all("p_best" in s for s in summary["splits"])

    def test_rejects_bad_inputs(self):
        cfg = small_cfg()
        with pytest.raises(ValueError):
            build(np.ones((1, 2)), np.ones(1), cfg)
        X = np.ones((40, 2))
        y = np.ones(40)
        y[0] = np.inf
        with pytest.raises(ValueError):
            build(X, y, cfg)


class TestPredict:
    def test_single_leaf_matches_leaf_nets(self):
        rng = np.random.default_rng(2)
        X = rng.uniform(-1, 1, (300, 2))
        y = X[:, 0] + 0.2 * rng.standard_normal(300)
        model = build(X, y, small_cfg(n_min=300, seed=9))
        assert model.leaf_count == 1
        leaf = model.root
        mu, sigma = predict_arrays(model, X)
        assert np.array_equal(mu, leaf.mean_net.forward(X)[:, 0])
        assert np.array_equal(sigma, predict_sigma(leaf.sigma_net, X))

    def test_boundary_point_routes_left(self):
        left = constant_leaf(1, 2, mean_value=-5.0, sigma_bias=0.0)
        right = constant_leaf(2, 2, mean_value=5.0, sigma_bias=0.0)
        root = InternalNode(feature_index=0, threshold=0.25, p_value=0.001, left=left, right=right)
        model = UsnrtModel(root=root, config=UsnrtConfig(), preprocess=None, depth=1, leaf_count=2)
        preds = predict(model, np.array([[0.25, 9.9], [0.2500000001, 0.0]]))
        assert preds[0].mu == -5.0  # exactly on the threshold: left branch
        assert preds[1].mu == 5.0

    def test_predictions_are_gaussian_pairs(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=10))
        preds = predict(model, X[:50])
        assert all(isinstance(p, GaussianPrediction) for p in preds)
        assert all(p.sigma > SIGMA_FLOOR / 2 for p in preds)

    def test_dimension_mismatch(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=11))
        with pytest.raises(ValueError):
            predict(model, np.ones((5, 9)))

    def test_unique_leaf_partition(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=400, seed=12))

        boxes = []

        def walk(node, constraints):
            if isinstance(node, LeafNode):
                boxes.append((node.region_id, list(constraints)))
                return
            walk(node.left, constraints + [(node.feature_index, node.threshold, True)])
            walk(node.right, constraints + [(node.feature_index, node.threshold, False)])

        walk(model.root, [])
        rng = np.random.default_rng(13)
        points = rng.uniform(-2, 2, (10_000, X.shape[1]))
        routed = leaf_assignments(model, points)
        for point, region in zip(points, routed):
            accepting = [
                rid
                for rid, constraints in boxes
                if all(
                    (point[k] <= t) if is_left else (point[k] > t)
                    for k, t, is_left in constraints
                )
            ]
            assert accepting == [region]


class TestLeafReport:
    def test_homoscedastic_single_leaf(self):
        synth = generate_synthetic(SynthSpec(n=2000, d=2, sigma_low=0.5, sigma_high=0.5, seed=14))
        X = feature_matrix(synth.dataset)
        y = synth.dataset.labels
        model = build(X, y, small_cfg(n_min=2000, seed=15, train_cfg=fast_train_cfg(seed=15, max_epochs=150, patience=15)))
        rows = leaf_report(model, X, y)
        assert len(rows) == 1
        assert rows[0].count == 2000
        assert abs(rows[0].residual_std - 0.5) / 0.5 < 0.10

    def test_piecewise_stds_straddle_truth(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=16))
        rows = leaf_report(model, X, y)
        stds = [r.residual_std for r in rows]
        assert min(stds) < 0.35
        assert max(stds) > 0.6

    def test_counts_partition_dataset(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=400, seed=17))
        rows = leaf_report(model, X, y)
        assert sum(r.count for r in rows) == X.shape[0]

    def test_empty_region_reported_absent(self):
        left = constant_leaf(1, 1, mean_value=0.0, sigma_bias=0.0)
        right = constant_leaf(2, 1, mean_value=0.0, sigma_bias=0.0)
        root = InternalNode(feature_index=0, threshold=0.0, p_value=0.001, left=left, right=right)
        model = UsnrtModel(root=root, config=UsnrtConfig(), preprocess=None, depth=1, leaf_count=2)
        X = np.array([[-1.0], [-0.5]])  # everything routes left
        rows = leaf_report(model, X, np.zeros(2))
        assert rows[0].count == 2
        assert rows[1].count == 0
        assert rows[1].residual_std is None


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=18))
        path = tmp_path / "model.json"
        save(model, path)
        clone = load(path)
        mu_a, s_a = predict_arrays(model, X)
        mu_b, s_b = predict_arrays(clone, X)
        assert np.array_equal(mu_a, mu_b)
        assert np.array_equal(s_a, s_b)
        assert clone.leaf_count == model.leaf_count
        assert clone.depth == model.depth

    def test_truncated_file(self, tmp_path, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=1500, seed=19))
        path = tmp_path / "model.json"
        save(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ModelFormatError):
            load(path)

    def test_version_mismatch(self, tmp_path, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=1500, seed=20))
        path = tmp_path / "model.json"
        save(model, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ModelFormatError, match="version"):
            load(path)


class TestRootSplitScatter:
    def test_single_leaf_returns_none(self):
        rng = np.random.default_rng(3)
        X = rng.uniform(-1, 1, (200, 2))
        y = rng.standard_normal(200)
        model = build(X, y, small_cfg(n_min=200, seed=21))
        assert root_split_scatter(model, X, y) is None

    def test_piecewise_export(self, piecewise_sigma_data):
        X, y, _ = piecewise_sigma_data
        model = build(X, y, small_cfg(n_min=600, seed=22))
        scatter = root_split_scatter(model, X, y)
        assert scatter.split_feature_index == model.root.feature_index
        assert scatter.split_values.shape == (X.shape[0],)
        assert np.all((scatter.residual_quantiles > 0) & (scatter.residual_quantiles < 1))
        left = scatter.squared_residuals[scatter.split_values <= scatter.threshold]
        right = scatter.squared_residuals[scatter.split_values > scatter.threshold]
        ratio = max(left.mean(), right.mean()) / min(left.mean(), right.mean())
        assert ratio > 4.0
