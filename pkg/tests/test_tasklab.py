import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cednet_lab.executor import forward, init_params
from cednet_lab.gradcheck import check_network
from cednet_lab.graph import ArchConfig
from cednet_lab.tasklab import (
    NUM_CLASSES,
    AdamW,
    DataSpec,
    DivergenceError,
    SceneSpec,
    TrainConfig,
    build_seg_model,
    constant_baseline,
    generate_scene,
    important_region_area,
    lr_at,
    make_split,
    saliency,
    seg_loss,
    segmentation_metrics,
    train,
)
from cednet_lab.tensor import Tensor

SMALL_SCENES = SceneSpec(min_size=4, max_size=12)


@pytest.fixture(scope="module")
def small_model():
    return build_seg_model(ArchConfig((8, 16, 16, 24), (1, 1, 1, 1), 1))


@pytest.fixture(scope="module")
def small_data():
    return DataSpec(height=32, width=32, n_train=16, n_val=8, seed=3, scene=SMALL_SCENES)


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(11, 64, 64), generate_scene(11, 64, 64)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert generate_scene(12, 64, 64).image.tobytes() != a.image.tobytes()

    def test_zero_shapes(self):
        s = generate_scene(0, 64, 96, SceneSpec(min_shapes=0, max_shapes=0))
        assert s.shapes == []
        assert not s.mask.any()
        assert s.image.shape == (3, 64, 96) and s.mask.shape == (64, 96)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_mask_classes_declared(self, seed):
        s = generate_scene(seed, 64, 64)
        declared = {cls for cls, _ in s.shapes}
        present = set(np.unique(s.mask).tolist()) - {0}
        assert present <= declared
        assert s.mask.max() < NUM_CLASSES
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_class_coverage_over_1000_scenes(self):
        hist = np.zeros(NUM_CLASSES, dtype=np.int64)
        spec = SceneSpec(supersample=1)
        for seed in range(1000):
            hist += np.bincount(generate_scene(seed, 64, 64, spec).mask.ravel(), minlength=NUM_CLASSES)
        assert np.all(hist > 0)
        # no class should be vanishingly rare
        assert hist[1:].min() > 0.1 * hist[1:].max()

    def test_antialiased_edges(self):
        s = generate_scene(5, 64, 64, SceneSpec(noise=0.0, min_shapes=1, max_shapes=1))
        # supersampling yields intermediate values at shape boundaries
        levels = np.unique(np.round(s.image[0], 6))
        assert len(levels) > 10

    @pytest.mark.parametrize("h,w", [(60, 64), (64, 40)])
    def test_indivisible(self, h, w):
        with pytest.raises(ValueError, match="divisible by 32"):
            generate_scene(0, h, w)

    def test_too_large(self):
        with pytest.raises(ValueError, match="too large"):
            generate_scene(0, 32, 32, SceneSpec(max_size=20))

    def test_splits_disjoint_and_stable(self, small_data):
        tr, tr_m = make_split(small_data, "train")
        va, _ = make_split(small_data, "val")
        assert tr.shape == (16, 3, 32, 32) and tr_m.shape == (16, 32, 32)
        assert va.shape[0] == 8
        assert not any(np.array_equal(a, b) for a in tr for b in va)
        assert make_split(small_data, "train")[0].tobytes() == tr.tobytes()

    def test_data_spec_json(self, small_data):
        assert DataSpec.from_json(small_data.to_json()) == small_data


class TestHead:
    def test_output_shape(self, small_model):
        store = init_params(small_model, 0)
        out = forward(small_model, store, Tensor(np.zeros((2, 3, 32, 64), np.float32)))
        assert out["logits"].shape == (2, NUM_CLASSES, 32, 64)

    def test_zero_head_gives_ln_k(self, small_model):
        store = init_params(small_model, 0, dtype=np.float64)
        for k in ("seghead.classify.weight", "seghead.classify.bias"):
            store[k].data[...] = 0.0
        s = generate_scene(1, 32, 32, SMALL_SCENES)
        loss = seg_loss(small_model, store, s.image[None], s.mask[None])
        assert loss.item() == pytest.approx(math.log(NUM_CLASSES), abs=1e-12)

    def test_head_gradients(self, small_model):
        store = init_params(small_model, 0, dtype=np.float64, std=0.2)
        rng = np.random.default_rng(0)
        for k, t in store.tensors.items():
            if k.startswith("seghead"):
                t.data[...] += rng.normal(0, 0.05, size=t.shape)
        s = generate_scene(2, 32, 32, SMALL_SCENES)
        names = [k for k in store.names() if k.startswith("seghead")]
        rep = check_network(small_model, store, lambda st_: seg_loss(small_model, st_, s.image[None], s.mask[None]),
                            samples=6, names=names)
        assert rep.worst < 1e-5


class TestMetrics:
    def test_perfect(self):
        m = np.random.default_rng(0).integers(0, 4, size=(3, 8, 8))
        r = segmentation_metrics(m, m)
        assert r["miou"] == 1.0 and r["pixel_acc"] == 1.0

    def test_constant_background(self):
        gt = np.zeros((1, 10, 10), dtype=np.int64)
        gt[0, :3] = 1
        gt[0, 3:5] = 2
        gt[0, 5, :4] = 3
        r = constant_baseline(gt)
        bg_frac = (gt == 0).sum() / gt.size
        assert r["iou"][0] == pytest.approx(bg_frac)
        assert r["iou"][1:] == [0.0, 0.0, 0.0]
        assert r["miou"] == pytest.approx(bg_frac / 4)

    def test_hand_case(self):
        gt = np.array([[0, 0, 1, 1]])
        pred = np.array([[0, 1, 1, 1]])
        r = segmentation_metrics(pred, gt, 2)
        # class 0: tp 1, union 2; class 1: tp 2, union 3
        assert r["iou"] == pytest.approx([0.5, 2 / 3])
        assert r["pixel_acc"] == 0.75

    def test_absent_class_is_nan(self):
        r = segmentation_metrics(np.zeros((2, 2), int), np.zeros((2, 2), int), 3)
        assert math.isnan(r["iou"][1]) and r["miou"] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.permutations(range(4)))
    def test_permutation_invariance(self, seed, perm):
        r = np.random.default_rng(seed)
        gt = r.integers(0, 4, size=(2, 6, 6))
        pred = np.where(r.random(gt.shape) < 0.6, gt, r.integers(0, 4, size=gt.shape))
        p = np.array(perm)
        a = segmentation_metrics(pred, gt)
        b = segmentation_metrics(p[pred], p[gt])
        assert b["miou"] == pytest.approx(a["miou"], nan_ok=True)
        assert b["pixel_acc"] == a["pixel_acc"]
        for c in range(4):
            assert b["iou"][p[c]] == pytest.approx(a["iou"][c], nan_ok=True)


class TestOptim:
    def test_schedule(self):
        cfg = TrainConfig(lr=1.0, steps=120, warmup=20)
        assert lr_at(0, cfg) == pytest.approx(1 / 20)
        assert lr_at(19, cfg) == pytest.approx(1.0)
        assert lr_at(20, cfg) == pytest.approx(1.0)
        assert lr_at(70, cfg) == pytest.approx(0.5)
        assert lr_at(120, cfg) == pytest.approx(0.0, abs=1e-12)
        lrs = [lr_at(s, cfg) for s in range(20, 120)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_decoupled_decay_only_on_matrices(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
        opt = AdamW({"w": w, "b": b}, lr=0.1, weight_decay=0.5)
        opt.step(0.1)
        np.testing.assert_allclose(w.data, 1 - 0.1 * 0.5)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_adam_first_step_magnitude(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([2.0, -0.5, 1e-3])
        AdamW({"p": p}, lr=0.01, weight_decay=0.0).step(0.01)
        # bias-corrected first step is lr * sign(g)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


class TestTraining:
    def test_lr_zero_constant_loss(self, small_model):
        data = DataSpec(height=32, width=32, n_train=4, n_val=2, scene=SMALL_SCENES)
        run = train(small_model, data, TrainConfig(lr=0.0, steps=5, batch_size=4, eval_every=0))
        assert len(set(run.loss_history)) == 1

    def test_seeded_runs_identical(self, small_model, small_data):
        cfg = TrainConfig(steps=6, batch_size=4, eval_every=3, seed=2)
        a = train(small_model, small_data, cfg)
        b = train(small_model, small_data, cfg)
        assert a.loss_history == b.loss_history
        assert a.metric_history == b.metric_history
        assert len(a.loss_history) == 6 and [m["step"] for m in a.metric_history] == [3, 6]
        for m in a.metric_history:
            assert 0.0 <= m["pixel_acc"] <= 1.0 and 0.0 <= m["miou"] <= 1.0
        assert all(l >= 0 for l in a.loss_history)

    def test_loss_decreases(self, small_model, small_data):
        run = train(small_model, small_data, TrainConfig(steps=40, batch_size=4, eval_every=0, warmup=5))
        assert run.final_loss < 0.8 * run.initial_loss

    def test_divergence_detected(self, small_model, small_data):
        with pytest.raises(DivergenceError, match="diverged"):
            train(small_model, small_data, TrainConfig(lr=10.0, steps=20, batch_size=4, warmup=0, eval_every=0))

    def test_store_meta_describes_model(self, small_model, small_data):
        run = train(small_model, small_data, TrainConfig(steps=1, batch_size=2, eval_every=0))
        meta = run.store.meta
        assert meta["graph_meta"]["num_classes"] == NUM_CLASSES
        assert DataSpec.from_dict(meta["data"]) == small_data
        assert TrainConfig.from_dict(meta["train"]).steps == 1


class TestSaliency:
    def test_area_edges(self):
        gmap = np.array([[0.1, 0.5], [0.2, 0.9]])
        assert important_region_area(gmap, [0.0, 0.9 + 1e-12]) == [1.0, 0.0]
        assert important_region_area(gmap, [0.15, 0.3]) == [0.75, 0.5]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_area_monotone(self, seed):
        r = np.random.default_rng(seed)
        gmap = np.abs(r.normal(size=(16, 16)))
        ts = np.sort(r.uniform(0, gmap.max() * 1.2, size=10))
        areas = important_region_area(gmap, ts)
        assert all(a >= b for a, b in zip(areas, areas[1:]))
        assert all(0.0 <= a <= 1.0 for a in areas)

    def test_on_model(self, small_model):
        store = init_params(small_model, 0)
        scene = generate_scene(4, 32, 32, SMALL_SCENES)
        top = saliency(small_model, store, scene, [0.0]).grad_map.max()
        ts = list(np.linspace(0.0, top, 10)) + [top * (1 + 1e-6)]
        res = saliency(small_model, store, scene, ts)
        assert res.grad_map.shape == (32, 32)
        assert all(a >= b for a, b in zip(res.areas, res.areas[1:]))
        assert res.areas[-1] == 0.0
        if res.grad_map.min() > 0:
            assert res.areas[0] == 1.0
        assert res.to_csv().splitlines()[0] == "threshold,area"

    def test_unsorted_thresholds(self, small_model):
        store = init_params(small_model, 0)
        with pytest.raises(ValueError, match="ascending"):
            saliency(small_model, store, generate_scene(0, 32, 32, SMALL_SCENES), [0.2, 0.1])
