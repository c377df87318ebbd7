import numpy as np
import pytest
import torch

from conftest import conv, edges, randomize_bn
from slim_distill.data import make_toy_dataset
from slim_distill.graph import NodeKind, build_graph
from slim_distill.model import (
    DistillationConfig,
    SparsityScheduleConfig,
    TaskKind,
    ToyTaskSpec,
    TrainConfig,
)
from slim_distill.pruning import make_plan, prune
from slim_distill.sparsity import collect_bn_gammas, sparsity_rate
from slim_distill.trainer import (
    _average_precision,
    accuracy,
    evaluate,
    heatmap_ap,
    history_path,
    load_checkpoint,
    primary_metric,
    seed_everything,
    task_loss,
    train,
)
from slim_distill.utils import ConfigError, ShapeError
from slim_distill.zoo import ZOO, conv_chain


@pytest.fixture(autouse=True)
def single_thread():
    seed_everything(0)


@pytest.fixture(scope="module")
def heatmap_data():
    return make_toy_dataset(ToyTaskSpec(image_size=16, samples_per_split=(16, 8)))


@pytest.fixture(scope="module")
def class_data():
    return make_toy_dataset(
        ToyTaskSpec(kind=TaskKind.CLASSIFICATION, image_size=16, samples_per_split=(16, 9))
    )


@pytest.fixture
def detector():
    return build_graph(ZOO["toy_detector"](num_classes=3), seed=0)


def quick(**kwargs):
    return TrainConfig(epochs=kwargs.pop("epochs", 1), batch_size=8, image_size=16, **kwargs)


def state_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestTrain:
    def test_zero_epochs(self, detector, heatmap_data):
        trained, history = train(detector, heatmap_data.train, quick(epochs=0), "baseline", progress=False)
        assert history == []
        assert trained is not detector
        assert state_equal(trained, detector)

    def test_input_graph_untouched(self, detector, heatmap_data):
        before = {k: v.clone() for k, v in detector.state_dict().items()}
        train(detector, heatmap_data.train, quick(), "baseline", progress=False)
        assert all(torch.equal(before[k], v) for k, v in detector.state_dict().items())

    def test_sparse_needs_schedule(self, detector, heatmap_data):
        with pytest.raises(ConfigError):
            train(detector, heatmap_data.train, quick(), "sparse", progress=False)

    def test_distill_needs_teacher(self, detector, heatmap_data):
        cfg = quick(distill=DistillationConfig(tap_preset="C1"))
        with pytest.raises(ConfigError):
            train(detector, heatmap_data.train, cfg, "distill", progress=False)

    def test_index_map_needs_plan(self, detector, heatmap_data):
        cfg = quick(distill=DistillationConfig(tap_preset="C1"))
        with pytest.raises(ConfigError, match="PruningPlan"):
            train(detector, heatmap_data.train, cfg, "distill", teacher=detector, progress=False)

    def test_unknown_tap(self, detector, heatmap_data):
        cfg = quick(distill=DistillationConfig(tap_points=[{"teacher": "nope", "student": "n1_act"}]))
        plan = make_plan(detector, collect_bn_gammas(detector), ratio=0.5)
        student, _ = prune(detector, plan)
        with pytest.raises(ConfigError, match="nope"):
            train(student, heatmap_data.train, cfg, "distill", teacher=detector, plan=plan, progress=False)

    def test_deterministic(self, detector, heatmap_data):
        a, hist_a = train(detector, heatmap_data.train, quick(epochs=2), "baseline", progress=False)
        b, hist_b = train(detector, heatmap_data.train, quick(epochs=2), "baseline", progress=False)
        assert state_equal(a, b)
        assert hist_a == hist_b

    def test_history_and_validation(self, detector, heatmap_data):
        _, history = train(
            detector, heatmap_data.train, quick(epochs=2), "baseline", val_dataset=heatmap_data.val, progress=False
        )
        assert [h["epoch"] for h in history] == [0, 1]
        assert all(h["alpha"] == 0.0 and h["sparsity_rate"] == 0.0 for h in history)
        assert all(h["loss"] == h["task_loss"] for h in history)
        assert {"val_ap", "val_ap_strict"} <= set(history[0])

    def test_sparse_stage(self, detector, heatmap_data):
        schedule = SparsityScheduleConfig(initial_rate=0.1, total_epochs=2)
        sparse, history = train(detector, heatmap_data.train, quick(epochs=2, sparsity=schedule), "sparse", progress=False)
        dense, _ = train(detector, heatmap_data.train, quick(epochs=2), "baseline", progress=False)
        assert [h["sparsity_rate"] for h in history] == [sparsity_rate(0, schedule), sparsity_rate(1, schedule)]
        for h in history:
            assert h["sparsity_penalty"] > 0
            assert h["loss"] == pytest.approx(h["task_loss"] + h["sparsity_penalty"], abs=1e-6)
        l1 = lambda g: sum(float(v.abs().sum()) for v in collect_bn_gammas(g).values())  # noqa: E731
        assert l1(sparse) < l1(dense)

    def test_sparse_stage_shrinks_gammas_by_lr_times_rate(self, detector, heatmap_data, monkeypatch):
        monkeypatch.setattr("slim_distill.trainer.task_loss", lambda output, target, kind: output.sum() * 0.0)
        gen = torch.Generator().manual_seed(5)
        with torch.no_grad():
            for gamma in collect_bn_gammas(detector).values():
                sign = torch.rand(gamma.shape, generator=gen).lt(0.5).float() * 2 - 1
                gamma.copy_(sign * (0.5 + torch.rand(gamma.shape, generator=gen)))
        schedule = SparsityScheduleConfig(initial_rate=0.1, total_epochs=2)
        lr = 0.01
        cfg = quick(epochs=2, sparsity=schedule, learning_rate=lr, momentum=0.0, weight_decay=0.0)
        sparse, history = train(detector, heatmap_data.train, cfg, "sparse", progress=False)

        steps_per_epoch = len(heatmap_data.train) // 8
        shrink = lr * steps_per_epoch * (sparsity_rate(0, schedule) + sparsity_rate(1, schedule))
        before, after = collect_bn_gammas(detector), collect_bn_gammas(sparse)
        for bn, gamma in before.items():
            expected = gamma.detach().abs() - shrink
            torch.testing.assert_close(after[bn].detach().abs(), expected, rtol=0.0, atol=1e-6)
            assert torch.equal(torch.sign(after[bn].detach()), torch.sign(gamma.detach()))
        for nid, kind in detector.kinds.items():
            if kind == NodeKind.CONV:
                assert torch.equal(sparse.layers[nid].weight, detector.layers[nid].weight)
        assert all(h["task_loss"] == 0.0 for h in history)

    def test_live_channels_distill_with_positive_cwd(self, detector, heatmap_data):
        plan = make_plan(detector, collect_bn_gammas(detector), ratio=0.5)
        student, _ = prune(detector, plan)
        cfg = quick(epochs=2, distill=DistillationConfig(tap_preset="C1", alpha0=0.5))
        _, history = train(student, heatmap_data.train, cfg, "distill", teacher=detector, plan=plan, progress=False)
        assert history[0]["alpha"] == 0.5
        for h in history:
            assert h["cwd_loss"] > 0
            assert h["loss"] == pytest.approx(h["task_loss"] + h["alpha"] * h["cwd_loss"], abs=1e-6)

    def test_dead_channels_pruned_student_starts_at_zero_cwd(self, heatmap_data):
        spec = conv_chain([8, 8])
        spec["nodes"].append(conv("head", 8, 3, kernel=1, stride=4) | {"kind": "head"})
        spec["edges"] += edges(("l1_act", "head"))
        spec["outputs"] = ["head"]
        teacher = randomize_bn(build_graph(spec, seed=0), torch.Generator().manual_seed(3))
        with torch.no_grad():
            for bn in ("l0_bn", "l1_bn"):
                teacher.layers[bn].weight[[1, 6]] = 0.0
                teacher.layers[bn].bias[[1, 6]] = 0.0
        plan = make_plan(teacher, collect_bn_gammas(teacher), ratio=0.25)
        assert all(6 not in kept and 1 not in kept for kept in plan.per_layer.values())
        student, _ = prune(teacher, plan)
        cfg = TrainConfig(
            epochs=1,
            batch_size=8,
            image_size=16,
            learning_rate=1e-12,
            momentum=0.0,
            distill=DistillationConfig(tap_points=[{"teacher": "l1_act", "student": "l1_act"}]),
        )
        _, history = train(student, heatmap_data.train, cfg, "distill", teacher=teacher, plan=plan, progress=False)
        assert history[0]["cwd_loss"] < 1e-6

    def test_teacher_not_updated(self, detector, heatmap_data):
        plan = make_plan(detector, collect_bn_gammas(detector), ratio=0.5)
        student, _ = prune(detector, plan)
        before = {k: v.clone() for k, v in detector.state_dict().items()}
        cfg = quick(distill=DistillationConfig(tap_preset="C2"))
        train(student, heatmap_data.train, cfg, "distill", teacher=detector, plan=plan, progress=False)
        assert all(torch.equal(before[k], v) for k, v in detector.state_dict().items())

    def test_projected_wide_teacher(self, detector, heatmap_data):
        teacher = build_graph(ZOO["toy_detector_wide"](num_classes=3), seed=1)
        cfg = quick(distill=DistillationConfig(tap_preset="C3"))
        _, history = train(detector, heatmap_data.train, cfg, "distill", teacher=teacher, progress=False)
        assert history[0]["cwd_loss"] > 0

    def test_checkpoint_round_trip(self, detector, heatmap_data, tmp_path):
        path = tmp_path / "ckpt.json"
        trained, history = train(
            detector, heatmap_data.train, quick(epochs=2), "baseline", checkpoint_path=path, progress=False
        )
        assert history_path(path).exists()
        loaded, loaded_history = load_checkpoint(path)
        assert loaded_history == history
        assert evaluate(loaded, heatmap_data.val) == evaluate(trained, heatmap_data.val)

    def test_classification(self, class_data):
        graph = build_graph(ZOO["toy_classifier"](num_classes=3), seed=0)
        _, history = train(graph, class_data.train, quick(), "baseline", val_dataset=class_data.val, progress=False)
        assert 0.0 <= history[0]["val_accuracy"] <= 1.0


class TestTaskLoss:
    def test_cross_entropy_on_spatial_mean(self):
        logits = torch.zeros(2, 3, 4, 4)
        loss = task_loss(logits, torch.tensor([0, 2]), TaskKind.CLASSIFICATION)
        assert float(loss) == pytest.approx(np.log(3))

    def test_heatmap_shape(self):
        with pytest.raises(ShapeError):
            task_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4), TaskKind.HEATMAP)


class TestMetrics:
    def test_accuracy_perfect(self):
        assert accuracy(torch.eye(3), torch.tensor([0, 1, 2])) == 1.0

    def test_accuracy_chance(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(3000, 3, generator=gen)
        targets = torch.randint(0, 3, (3000,), generator=gen)
        assert accuracy(logits, targets) == pytest.approx(1 / 3, abs=0.04)

    def test_average_precision(self):
        assert _average_precision(np.array([1.0, 0.0, 1.0]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert _average_precision(np.array([]), 3) == 0.0
        assert _average_precision(np.array([0.0]), 0) is None

    def test_perfect_heatmap(self, heatmap_data):
        train_split = heatmap_data.train
        assert heatmap_ap(train_split.targets, train_split.objects) == pytest.approx(1.0)
        assert heatmap_ap(train_split.targets, train_split.objects, tolerance=0) == pytest.approx(1.0)

    def test_empty_heatmap(self, heatmap_data):
        assert heatmap_ap(torch.zeros_like(heatmap_data.val.targets), heatmap_data.val.objects) == 0.0

    def test_evaluate_keys(self, detector, heatmap_data, class_data):
        metrics = evaluate(detector, heatmap_data.val)
        assert {"ap", "ap_strict"} <= set(metrics)
        assert primary_metric(metrics, TaskKind.HEATMAP) == metrics["ap"]
        classifier = build_graph(ZOO["toy_classifier"](), seed=0)
        assert set(evaluate(classifier, class_data.val)) == {"accuracy"}
