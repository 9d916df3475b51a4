import copy
import json

import pytest
import torch

from gmenet.data import PairedDataset, generate_lr_dataset, scan_source
from gmenet.degradation import DegradationSpec
from gmenet.errors import AlignmentError, ConfigurationError, TrainingError
from gmenet.network import AblationConfig, NetworkConfig, build_network
from gmenet.synthetic import make_toy_dataset
from gmenet.training import (
    EvaluationReport,
    MetricsLog,
    Schedule,
    evaluate,
    make_optimizer,
    train_student,
    train_supervised,
    train_teacher,
)


def small_config(**kw):
    base = dict(initial_channels=4, stage_widths=(4, 8), blocks_per_stage=(1, 1),
                reduction_ratio=4, input_size=(16, 16))
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    src = scan_source(make_toy_dataset(root / "src", per_class=6, size=16, seed=1), 16, seed=0)
    return generate_lr_dataset(src, DegradationSpec(target_size=4), root / "lr")


@pytest.fixture
def train_set(manifest):
    return PairedDataset(manifest, "train", seed=0)


SCHEDULE = Schedule(lr0=0.05, batch_size=8, epochs=3, decay_every=2)


def test_learning_rate_schedule():
    s = Schedule()
    assert s.lr_at(0) == 0.1
    assert s.lr_at(19) == 0.1
    assert s.lr_at(20) == pytest.approx(0.04, abs=1e-15)
    assert s.lr_at(40) == pytest.approx(0.016, abs=1e-15)


def test_sgd_matches_closed_form_on_quadratic():
    w = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    s = Schedule(lr0=0.1, momentum=0.9, weight_decay=1e-4)
    opt = make_optimizer([w], s)
    w0 = w.detach().clone()
    for _ in range(2):
        opt.zero_grad()
        (0.5 * (w * w).sum()).backward()
        opt.step()
    v1 = w0 + 1e-4 * w0
    w1 = w0 - 0.1 * v1
    v2 = 0.9 * v1 + (w1 + 1e-4 * w1)
    w2 = w1 - 0.1 * v2
    assert torch.allclose(w.detach(), w2, atol=1e-12, rtol=0)


def test_supervised_training_reduces_loss(train_set):
    net = build_network(small_config(), seed=0)
    result = train_supervised(net, train_set, Schedule(lr0=0.05, batch_size=8, epochs=6, decay_every=4), use="hr")
    assert len(result.epochs) == 6
    assert result.epochs[-1].l_ce < result.epochs[0].l_ce


def test_training_is_deterministic(train_set):
    runs = []
    for _ in range(2):
        log = MetricsLog()
        train_supervised(build_network(small_config(), seed=2), train_set, SCHEDULE, use="lr", metrics=log)
        runs.append([r["total"] for r in log.steps()])
    assert runs[0] == runs[1]


def test_checkpoints_and_metrics_written(train_set, manifest, tmp_path):
    log = MetricsLog(tmp_path / "metrics.jsonl")
    result = train_teacher(
        build_network(small_config(), seed=0), train_set, SCHEDULE,
        out_dir=tmp_path, metrics=log, eval_dataset=PairedDataset(manifest, "test"),
    )
    assert result.last_checkpoint.is_file() and result.best_checkpoint.is_file()
    lines = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert {r["kind"] for r in lines} == {"step", "epoch"}
    assert all(r["schema_version"] == 1 for r in lines)
    assert sum(r["kind"] == "epoch" for r in lines) == 3


class TestDistillation:
    def test_teacher_is_byte_identical_afterwards(self, train_set):
        teacher = build_network(small_config(), seed=0)
        train_teacher(teacher, train_set, Schedule(lr0=0.05, batch_size=8, epochs=1))
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        train_student(build_network(small_config(), seed=1), teacher, train_set, SCHEDULE)
        after = teacher.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)
        assert all(p.requires_grad for p in teacher.parameters())

    def test_clone_on_identical_inputs_gives_zero_kd(self, train_set):
        # normalisation off so train and eval modes agree; nonzero biases keep
        # every attention map away from the zero-norm guard
        teacher = build_network(small_config(norm=False), seed=0)
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            for name, p in teacher.named_parameters():
                if name.endswith("bias"):
                    p.copy_(torch.randn(p.shape, generator=g) * 0.1)
        student = copy.deepcopy(teacher)
        same = copy.copy(train_set)
        hr, _, labels, kept = train_set.tensors()
        same._cache = (hr, hr, labels, kept)
        log = MetricsLog()
        train_student(student, teacher, same, Schedule(lr0=0.05, batch_size=8, epochs=1), metrics=log)
        first = log.steps()[0]
        assert first["l_kd"] == 0.0
        assert all(v == 0.0 for v in first["per_block_kd"])

    def test_lambda_zero_matches_supervised_bit_for_bit(self, train_set):
        teacher = build_network(small_config(), seed=5)
        a, b = MetricsLog(), MetricsLog()
        s1 = build_network(small_config(), seed=3)
        s2 = build_network(small_config(), seed=3)
        train_student(s1, teacher, train_set, SCHEDULE, lambda_kd=0.0, metrics=a)
        train_supervised(s2, train_set, SCHEDULE, use="lr", metrics=b)
        assert [r["l_ce"] for r in a.steps()] == [r["l_ce"] for r in b.steps()]
        assert all(torch.equal(x, y) for x, y in zip(s1.state_dict().values(), s2.state_dict().values()))

    def test_kd_term_pulls_attention_together(self, train_set):
        teacher = build_network(small_config(), seed=5)
        train_teacher(teacher, train_set, Schedule(lr0=0.05, batch_size=8, epochs=2))
        finals = {}
        for lam in (0.0, 5.0):
            log = MetricsLog()
            train_student(build_network(small_config(), seed=3), teacher, train_set,
                          Schedule(lr0=0.05, batch_size=8, epochs=4), lambda_kd=lam, metrics=log)
            steps = log.steps()
            finals[lam] = steps[-1]["l_kd"]
            if lam:
                assert steps[-1]["total"] == pytest.approx(steps[-1]["l_ce"] + 5.0 * steps[-1]["l_kd"], rel=1e-6)
        assert finals[5.0] < finals[0.0]

    def test_architecture_mismatch(self, train_set):
        with pytest.raises(AlignmentError):
            train_student(build_network(small_config(stage_widths=(4, 12))),
                          build_network(small_config()), train_set, SCHEDULE)

    def test_teacher_without_attention(self, train_set):
        cfg = small_config(ablation=AblationConfig(use_dbam=False))
        with pytest.raises(AlignmentError):
            train_student(build_network(cfg), build_network(cfg), train_set, SCHEDULE)

    def test_negative_lambda(self, train_set):
        with pytest.raises(ConfigurationError):
            train_student(build_network(small_config()), build_network(small_config()),
                          train_set, SCHEDULE, lambda_kd=-1.0)


def test_non_finite_loss_is_reported(train_set, tmp_path):
    net = build_network(small_config(), seed=0)
    with torch.no_grad():
        net.fc.bias.fill_(float("inf"))
    with pytest.raises(TrainingError, match="non-finite"):
        train_supervised(net, train_set, SCHEDULE, out_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_batch.json").read_text())
    assert dump["epoch"] == 0 and dump["batch_index"] == 0


class TestEvaluation:
    def test_report_arithmetic(self):
        labels = [0, 0, 1, 2, 2, 2]
        preds = [0, 1, 1, 2, 2, 0]
        r = EvaluationReport.from_predictions(labels, preds, 3)
        assert r.overall_accuracy == pytest.approx(400 / 6)
        assert r.per_class_accuracy == pytest.approx([50.0, 100.0, 200 / 3])
        assert sum(map(sum, r.confusion_matrix)) == r.sample_count == 6
        trace = sum(r.confusion_matrix[i][i] for i in range(3))
        assert 100 * trace / r.sample_count == r.overall_accuracy

    def test_constant_predictor_scores_class_frequency(self, manifest):
        ds = PairedDataset(manifest, "test")
        net = build_network(small_config(), seed=0)
        with torch.no_grad():
            net.fc.weight.zero_()
            net.fc.bias.copy_(torch.arange(7.0))
        report = evaluate(net, ds)
        counts = torch.bincount(ds.labels, minlength=7)
        assert report.overall_accuracy == pytest.approx(100.0 * counts[6].item() / len(ds))
        assert report.per_class_accuracy[6] == 100.0

    def test_evaluation_is_deterministic(self, manifest):
        ds = PairedDataset(manifest, "test")
        net = build_network(small_config(), seed=4)
        assert evaluate(net, ds).to_dict() == evaluate(net, ds).to_dict()
        assert net.training
