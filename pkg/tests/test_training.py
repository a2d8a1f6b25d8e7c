import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch import nn

from gliotl import training
from gliotl.errors import LeakageError, TrainingDivergenceError, ValidationError
from gliotl.models import ArchitectureSpec, ModelHandle, build_model, count_parameters, head_parameter_count
from gliotl.preprocess import Volume3D
from gliotl.training import (
    AugmentationPolicy,
    TLStrategy,
    TrainConfig,
    VolumeDataset,
    VolumeSource,
    augment_array,
    augment_volume,
    apply_tl_strategy,
    flip,
    split_pretrain,
    train_model,
    zoom,
)

SHAPE = (16, 16, 16)


def dataset(n, prefix="h", subjects=None, seed=0, per_subject=2):
    """Separable toy data: positives carry a bright cube."""
    r = np.random.default_rng(seed)
    y = (np.arange(n) // per_subject) % 2
    x = r.normal(0, 0.1, size=(n, *SHAPE)).astype(np.float32)
    x[y == 1, 5:11, 5:11, 5:11] += 2.0
    subjects = subjects or [f"{prefix}{i // per_subject}" for i in range(n)]
    return VolumeDataset(x, y, [f"{prefix}_m{i}" for i in range(n)], subjects)


def cfg(**kw):
    base = dict(learning_rate=1e-3, weight_decay=0.0, batch_size=4, max_epochs=3, early_stop_patience=2,
                seed=0, allow_off_grid=True)
    base.update(kw)
    return TrainConfig(**base)


# -- augmentation ----------------------------------------------------------


def test_policy_off_is_identity(rng):
    a = rng.normal(size=SHAPE).astype(np.float32)
    assert np.array_equal(augment_array(a, AugmentationPolicy.off(), rng), a)
    v = Volume3D(a)
    assert np.array_equal(augment_volume(v, AugmentationPolicy.off(), rng).voxels, a)


def test_flip_involution(rng):
    a = rng.normal(size=(4, 5, 6))
    for ax in range(3):
        assert np.array_equal(flip(flip(a, ax), ax), a)


def test_zoom_one_is_identity(rng):
    a = rng.normal(size=(7, 8, 9)).astype(np.float32)
    assert np.max(np.abs(zoom(a, 1.0) - a)) < 1e-6


def test_default_policy_values():
    p = AugmentationPolicy()
    assert (p.flip_prob, p.gaussian_noise_prob, p.zoom_prob, p.elastic_prob) == (0.2, 0.2, 0.2, 0.2)
    assert p.zoom_range == (0.7, 1.3)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_augmentation_keeps_grid(pf, pn, pz, pe, seed):
    a = np.random.default_rng(seed).normal(size=(8, 6, 5)).astype(np.float32)
    out = augment_array(a, AugmentationPolicy(pf, pn, zoom_prob=pz, elastic_prob=pe), np.random.default_rng(seed))
    assert out.shape == a.shape and np.isfinite(out).all()


def test_each_transform_fires_at_its_rate():
    # only noise enabled: fraction of changed outputs estimates the firing probability
    a = np.zeros((4, 4, 4), np.float32)
    r = np.random.default_rng(0)
    pol = AugmentationPolicy(0.0, 0.2, zoom_prob=0.0, elastic_prob=0.0)
    fired = sum(not np.array_equal(augment_array(a, pol, r), a) for _ in range(4000))
    assert abs(fired / 4000 - 0.2) < 0.025


# -- config -------------------------------------------------------------------


def test_config_grid_enforced():
    TrainConfig(learning_rate=1e-5, weight_decay=0.01)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=3e-4)
    with pytest.raises(ValidationError):
        TrainConfig(weight_decay=0.1)
    assert TrainConfig(learning_rate=3e-4, allow_off_grid=True).learning_rate == 3e-4
    d = TrainConfig()
    assert (d.batch_size, d.max_epochs, d.early_stop_patience) == (4, 60, 10)


# -- loop ----------------------------------------------------------------------


def test_patience_arithmetic(tiny_vgg_spec):
    model = build_model(tiny_vgg_spec, 0)
    res = train_model(model, dataset(8), dataset(4, "v"), cfg(max_epochs=20, early_stop_patience=3),
                      evaluate=lambda m, v: 0.6)
    assert res.epochs_run == 4 and res.best_epoch == 1 and res.stopped_early


def test_auc_ties_broken_by_validation_loss(tiny_vgg_spec):
    scripted = iter([(1.0, 0.6), (1.0, 0.5), (1.0, 0.55), (0.9, 0.1), (1.0, 0.5)])
    res = train_model(build_model(tiny_vgg_spec, 0), dataset(8), dataset(4, "v"),
                      cfg(max_epochs=5, early_stop_patience=3), evaluate=lambda m, v: next(scripted))
    # epoch 5 ties epoch 2 on both AUC and loss, which is not an improvement
    assert res.best_epoch == 2 and res.epochs_run == 5 and res.stopped_early is False
    assert res.val_losses == [0.6, 0.5, 0.55, 0.1, 0.5]


def test_max_epochs_bound(tiny_vgg_spec):
    res = train_model(build_model(tiny_vgg_spec, 0), dataset(8), dataset(4, "v"), cfg(max_epochs=1))
    assert res.epochs_run == 1 and len(res.val_aucs) == 1


@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.integers(1, 5))
def test_early_stopping_properties(aucs, patience):
    # replay the stopping rule against scripted AUCs on a 1-parameter stub
    model = _stub_model()
    it = iter(aucs + [0.0] * 100)
    res = train_model(model, dataset(4), dataset(2, "v"), cfg(max_epochs=len(aucs), early_stop_patience=patience),
                      evaluate=lambda m, v: next(it))
    seen = res.val_aucs
    assert res.epochs_run <= len(aucs)
    assert res.best_epoch == int(np.argmax(seen)) + 1
    if res.stopped_early:
        assert res.epochs_run - res.best_epoch >= patience
    else:
        assert res.epochs_run == len(aucs)


class _Stub(nn.Module):
    def __init__(self, value=0.0):
        super().__init__()
        self.backbone = nn.Identity()
        self.head = nn.Linear(1, 1)
        self.value = value

    def forward(self, x):
        return self.head(x.mean(dim=(1, 2, 3, 4))[:, None]).squeeze(1) * (1 + self.value)


def _stub_model(value=0.0):
    return ModelHandle(_Stub(value), ArchitectureSpec.vgg3d(input_shape=SHAPE), 0)


def test_divergence_reports_epoch():
    with pytest.raises(TrainingDivergenceError) as info:
        train_model(_stub_model(float("nan")), dataset(4), dataset(2, "v"), cfg())
    assert info.value.epoch == 1


def test_empty_train_and_leak_rejected(tiny_vgg_spec):
    m = build_model(tiny_vgg_spec, 0)
    with pytest.raises(ValidationError):
        train_model(m, dataset(4).take([]), dataset(2, "v"), cfg())
    with pytest.raises(ValidationError):
        train_model(m, dataset(4), dataset(2, "v").take([]), cfg())
    with pytest.raises(LeakageError):
        train_model(m, dataset(4), dataset(2, "h"), cfg())


def test_identical_seeds_identical_losses(tiny_vgg_spec):
    pol = AugmentationPolicy(0.5, 0.5, zoom_prob=0.5, elastic_prob=0.5)
    runs = [train_model(build_model(tiny_vgg_spec, 1), dataset(8), dataset(4, "v"), cfg(), pol) for _ in range(2)]
    assert runs[0].train_losses == runs[1].train_losses
    assert runs[0].val_aucs == runs[1].val_aucs


def test_best_weights_restored_and_logged(tiny_vgg_spec, tmp_path):
    m = build_model(tiny_vgg_spec, 0)
    aucs = iter([0.5, 0.9, 0.7])
    states = []

    def evaluate(model, val):
        states.append(model.state())
        return next(aucs)

    res = train_model(m, dataset(8), dataset(4, "v"), cfg(max_epochs=3, early_stop_patience=5), evaluate=evaluate,
                      checkpoint_path=tmp_path / "best.pt", epoch_log_path=tmp_path / "log.csv")
    assert res.best_epoch == 2 and res.best_val_auc == 0.9
    for k, v in m.state().items():
        assert torch.equal(v, states[1][k])
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_auc,val_loss,seconds" and len(lines) == 4
    assert res.checkpoint.exists()


def test_learns_separable_toy_data(tiny_vgg_spec):
    spec = ArchitectureSpec.vgg3d(input_shape=SHAPE, conv_block_channels=(4, 4, 8, 8), fc_widths=(8, 8, 4, 1))
    res = train_model(build_model(spec, 0), dataset(16), dataset(8, "v", seed=1),
                      cfg(max_epochs=15, early_stop_patience=15))
    assert res.best_val_auc >= 0.9
    assert res.train_losses[-1] < res.train_losses[0]


# -- transfer learning ------------------------------------------------------------


def test_strategy_from_flags():
    assert TLStrategy.from_flags(True, None) is TLStrategy.MIXED_TRAINING
    assert TLStrategy.from_flags(False, True) is TLStrategy.FEATURE_EXTRACTION
    assert TLStrategy.from_flags(False, False) is TLStrategy.FINE_TUNING
    assert TLStrategy.from_flags(None, None) is TLStrategy.NONE


def test_mixed_training_union_size(tiny_vgg_spec):
    wad = dataset(120, "w", per_subject=3)
    _, res = apply_tl_strategy("mixed_training", tiny_vgg_spec, wad, dataset(40), dataset(8, "v"), cfg(max_epochs=1))
    assert res.n_train == 160 and res.pretrain is None


def _recording(monkeypatch):
    calls = []
    real = training.train_model

    def wrapper(model, train, val, config, policy=None, **kw):
        calls.append({"state": model.state(), "frozen": kw.get("frozen_backbone", False), "n": len(train),
                      "val_subjects": val.subjects, "trainable": count_parameters(model)})
        return real(model, train, val, config, policy, **kw)

    monkeypatch.setattr(training, "train_model", wrapper)
    return calls


def test_feature_extraction_freezes_backbone(tiny_vgg_spec, monkeypatch):
    calls = _recording(monkeypatch)
    wad = dataset(40, "w")
    pol = AugmentationPolicy(0.5, 0.5, zoom_prob=0.0, elastic_prob=0.0)
    model, res = apply_tl_strategy("feature_extraction", tiny_vgg_spec, wad, dataset(12), dataset(8, "v"),
                                   cfg(max_epochs=2), pol)
    assert len(calls) == 2 and calls[1]["frozen"]
    before = calls[1]["state"]
    after = model.state()
    backbone_keys = [k for k in before if k.startswith("backbone.")]
    assert backbone_keys and all(torch.equal(before[k], after[k]) for k in backbone_keys)
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("head."))
    assert calls[1]["trainable"] == head_parameter_count(model) == count_parameters(model)
    assert res.pretrain is not None


def test_fine_tuning_updates_everything(tiny_vgg_spec, monkeypatch):
    calls = _recording(monkeypatch)
    model, _ = apply_tl_strategy("fine_tuning", tiny_vgg_spec, dataset(40, "w"), dataset(12), dataset(8, "v"),
                                 cfg(max_epochs=2, early_stop_patience=5), evaluate=lambda m, v: 0.5 + 0.1 * len(calls))
    assert not calls[1]["frozen"]
    assert calls[1]["trainable"] == count_parameters(model) == model.total_parameter_count
    # pretraining validates on held-out WAD subjects only
    assert all(s.startswith("w") for s in calls[0]["val_subjects"])


def test_fine_tuning_with_zero_target_epochs_returns_pretrained(tiny_vgg_spec, monkeypatch):
    calls = _recording(monkeypatch)
    model, res = apply_tl_strategy("fine_tuning", tiny_vgg_spec, dataset(40, "w"), dataset(12), dataset(8, "v"),
                                   cfg(max_epochs=2), target_max_epochs=0)
    pretrained = calls[1]["state"]
    assert all(torch.equal(v, pretrained[k]) for k, v in model.state().items())
    assert res.epochs_run == 0


@pytest.mark.parametrize("strategy", ["fine_tuning", "feature_extraction"])
def test_pretraining_needs_wad(tiny_vgg_spec, strategy):
    with pytest.raises(ValidationError):
        apply_tl_strategy(strategy, tiny_vgg_spec, None, dataset(8), dataset(4, "v"), cfg())


def test_split_pretrain_holds_out_subjects():
    wad = dataset(200, "w")
    tr, va = split_pretrain(wad, 0.1, seed=3)
    assert not tr.subjects & va.subjects
    assert len(va.subjects) == 10 and len(tr) + len(va) == len(wad)
    assert set(va.y) == {0.0, 1.0}


def test_volume_source_logs_access(small_cohort):
    cohort, _ = small_cohort
    src = VolumeSource((8, 8, 8))
    ds = src.dataset(cohort.had.records[:3], "train")
    assert ds.x.shape == (3, 8, 8, 8)
    assert src.accessed("train") == {r.map_id for r in cohort.had.records[:3]}
    assert src.accessed("test") == set()


def test_dataset_alignment_checked():
    with pytest.raises(ValidationError):
        VolumeDataset(np.zeros((2, 2, 2, 2)), np.zeros(2), ["a", "b"], ["s"])
    with pytest.raises(ValidationError):
        VolumeDataset(np.zeros((2, 2, 2, 2)), np.zeros(3), ["a", "b", "c"], ["s", "s", "s"])
