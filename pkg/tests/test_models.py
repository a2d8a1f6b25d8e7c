import numpy as np
import pytest
import torch
from torch import nn

from gliotl.errors import ValidationError
from gliotl.models import (
    ArchitectureSpec,
    build_model,
    count_parameters,
    freeze_backbone,
    head_parameter_count,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
)


def vgg_closed_form(channels, fc, shape, convs_per_block=2):
    """Hand count: 3x3x3 convs with bias, BN (gamma, beta), then 4 linear layers."""
    total, c_in = 0, 1
    for c in channels:
        for _ in range(convs_per_block):
            total += 27 * c_in * c + c + 2 * c
            c_in = c
    flat = c_in * int(np.prod([s // 16 for s in shape]))
    widths = [flat, *fc]
    total += sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(4))
    return total


def test_tiny_vgg_closed_form(tiny_vgg_spec):
    m = build_model(tiny_vgg_spec, 0)
    assert count_parameters(m) == vgg_closed_form((2, 2, 2, 2), (4, 4, 2, 1), (16, 16, 16))
    # 60 + 114 + 3 * 228 conv/BN terms, 12 + 20 + 10 + 3 head terms
    assert count_parameters(m) == 903


def test_default_budgets():
    vgg = build_model(ArchitectureSpec.vgg3d(), 0)
    assert 7.0e6 <= count_parameters(vgg) <= 8.0e6
    assert count_parameters(vgg) == vgg_closed_form((32, 64, 128, 256), (112, 64, 32, 1), (96, 96, 64))
    assert 18.5e6 <= count_parameters(build_model(ArchitectureSpec.seresnext3d(), 0)) <= 20.5e6


def test_count_single_linear():
    assert count_parameters(nn.Linear(3, 2)) == 8


def test_parameter_count_matches_handle_and_is_seed_invariant(tiny_vgg_spec):
    a, b = build_model(tiny_vgg_spec, 0), build_model(tiny_vgg_spec, 99)
    assert a.parameter_count == count_parameters(a) == count_parameters(b)
    assert a.parameter_count == sum(p.numel() for p in a.module.parameters() if p.requires_grad)


def test_same_seed_same_init(tiny_vgg_spec):
    a, b, c = (build_model(tiny_vgg_spec, s) for s in (5, 5, 6))
    for pa, pb in zip(a.module.parameters(), b.module.parameters()):
        assert torch.equal(pa, pb)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.module.parameters(), c.module.parameters()))


def test_build_does_not_touch_global_rng(tiny_vgg_spec):
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model(tiny_vgg_spec, 1)
    assert torch.equal(torch.rand(3), expected)


def test_freeze_leaves_head_only(tiny_vgg_spec):
    m = build_model(tiny_vgg_spec, 0)
    freeze_backbone(m)
    assert count_parameters(m) == head_parameter_count(m) == 45
    assert m.total_parameter_count == 903


def test_vgg_structure_uses_bn_and_relu(tiny_vgg_spec):
    mods = list(build_model(tiny_vgg_spec, 0).module.modules())
    assert sum(isinstance(x, nn.BatchNorm3d) for x in mods) == 8
    assert sum(isinstance(x, nn.Linear) for x in mods) == 4
    assert sum(isinstance(x, nn.MaxPool3d) for x in mods) == 4


def test_seresnext_has_grouped_convs_and_se():
    spec = ArchitectureSpec.seresnext3d(input_shape=(32, 32, 32), stage_depths=(1, 1), stage_planes=(64, 128))
    mods = list(build_model(spec, 0).module.modules())
    assert any(isinstance(x, nn.Conv3d) and x.groups == 32 for x in mods)
    assert any(type(x).__name__ == "SqueezeExcite3D" for x in mods)


@pytest.mark.parametrize(
    "spec, stage",
    [
        (ArchitectureSpec.vgg3d(input_shape=(8, 16, 16)), "conv block 4"),
        (ArchitectureSpec.seresnext3d(input_shape=(4, 4, 4)), "stage 2"),
    ],
)
def test_too_small_input_names_stage(spec, stage):
    with pytest.raises(ValidationError, match=stage):
        build_model(spec)


def test_spec_invariants():
    with pytest.raises(ValidationError):
        ArchitectureSpec.vgg3d(conv_block_channels=(8, 8, 8))
    with pytest.raises(ValidationError):
        ArchitectureSpec.vgg3d(fc_widths=(8, 8, 8, 2))
    with pytest.raises(ValidationError):
        ArchitectureSpec(family="unet")


def test_predict_range_determinism_and_zero_batch(tiny_vgg_spec, rng):
    m = build_model(tiny_vgg_spec, 0)
    x = rng.normal(size=(5, 1, 16, 16, 16)).astype(np.float32)
    p1, p2 = predict_batch(m, x), predict_batch(m, x)
    assert p1.shape == (5,) and np.all((p1 >= 0) & (p1 <= 1))
    assert np.array_equal(p1, p2)
    z = predict_batch(m, np.zeros((1, 1, 16, 16, 16), np.float32))
    assert z.shape == (1,) and np.isfinite(z).all()
    assert m.module.training  # mode restored


def test_predict_rejects_bad_shape(tiny_vgg_spec):
    m = build_model(tiny_vgg_spec, 0)
    with pytest.raises(ValidationError):
        predict_batch(m, np.zeros((2, 16, 16, 16)))
    with pytest.raises(ValidationError):
        predict_batch(m, np.zeros((2, 1, 8, 16, 16)))


@pytest.mark.parametrize("n", [1, 2, 7])
def test_forward_shape_is_n(tiny_vgg_spec, n):
    m = build_model(tiny_vgg_spec, 0)
    m.module.eval()
    assert m.module(torch.zeros(n, 1, 16, 16, 16)).shape == (n,)


def test_checkpoint_roundtrip(tiny_vgg_spec, tmp_path, rng):
    m = build_model(tiny_vgg_spec, 3)
    path = save_checkpoint(m, tmp_path / "m.pt", epoch=4, val_auc=0.75, trial_id=2)
    back, meta = load_checkpoint(path)
    assert back.spec == m.spec
    assert meta["epoch"] == 4 and meta["val_auc"] == 0.75 and meta["extra"]["trial_id"] == 2
    x = rng.normal(size=(2, 1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(predict_batch(back, x), predict_batch(m, x))


def test_gradient_matches_finite_differences(tiny_vgg_spec, rng):
    m = build_model(tiny_vgg_spec, 0)
    module = m.module.double().eval()
    params = list(module.parameters())
    x = torch.from_numpy(rng.normal(size=(1, 1, 16, 16, 16)))
    y = torch.ones(1, dtype=torch.float64)
    loss_fn = nn.BCEWithLogitsLoss()
    loss = loss_fn(module(x), y)
    analytic = torch.cat([g.ravel() for g in torch.autograd.grad(loss, params)])
    numeric = []
    eps = 1e-6
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn(module(x), y).item()
                flat[i] = old - eps
                down = loss_fn(module(x), y).item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / max(analytic.norm().item(), numeric.norm().item())
    assert rel < 1e-4
