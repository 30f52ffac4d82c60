import numpy as np
import pytest

from vectordream.model import ContractError, ParamVector, StyleConfig, pack_params
from vectordream.optim import (
    AdamConfig,
    LrSchedule,
    Moments,
    NumericalAbort,
    adam_step,
    check_finite,
    clamp_lr,
    descend,
    family_lr,
    lr_at,
    remap_moments,
)
from vectordream.scenes import init_scene

SCHED = LrSchedule()


def test_schedule_anchor_values():
    assert lr_at(SCHED, 0) == 0.01
    assert lr_at(SCHED, 50) == 0.9
    assert lr_at(SCHED, 700) == 0.4


def test_schedule_warmup_linear_and_decay_strict():
    warm = [lr_at(SCHED, i) for i in range(51)]
    assert np.allclose(np.diff(warm), (0.9 - 0.01) / 50)
    decay = [lr_at(SCHED, i) for i in range(51, 701)]
    assert all(a > b for a, b in zip(decay, decay[1:]))
    assert lr_at(SCHED, 51) == pytest.approx(0.8 * 0.5 ** (1 / 650))


def test_schedule_range_checked():
    for it in (-1, 701):
        with pytest.raises(ContractError):
            lr_at(SCHED, it)
    assert clamp_lr(SCHED, 5000) == 0.4


def test_schedule_validation():
    with pytest.raises(ContractError):
        LrSchedule(warmup_start=0.0)
    with pytest.raises(ContractError):
        AdamConfig(beta2=1.0)


def vec(values):
    return ParamVector(np.asarray(values, dtype=np.float64))


def test_adam_zero_gradient_leaves_params():
    p = vec([1.0, -2.0, 3.0])
    values, _ = adam_step(p, vec([0, 0, 0]), Moments.zeros(3), AdamConfig(), 0.5)
    assert np.array_equal(values, p.values)


def test_adam_first_step_is_sign_step():
    values, moments = adam_step(vec([1.0]), vec([2.0]), Moments.zeros(1), AdamConfig(), 0.1)
    assert values[0] - 1.0 == pytest.approx(-0.1, abs=1e-6)
    assert moments.step == 1


def test_adam_deterministic_and_shape_checked():
    p, g, m = vec([0.5, 0.1]), vec([0.3, -1.0]), Moments.zeros(2)
    a = adam_step(p, g, m, AdamConfig(), 0.2)
    b = adam_step(p, g, m, AdamConfig(), 0.2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].v, b[1].v)
    with pytest.raises(ContractError):
        adam_step(p, vec([1.0]), m, AdamConfig(), 0.1)


def test_family_learning_rates():
    style = StyleConfig.for_style("painting")
    scene = init_scene("painting", 2, 32, 32, np.random.default_rng(0))
    layout = pack_params(scene, style).layout
    lr = family_lr(layout, SCHED, 0)
    for slot in layout:
        expect = {"points": 0.01, "stroke_color": 0.1, "stroke_width": 0.01}[slot.family]
        assert np.all(lr[slot.start:slot.stop] == expect)


def test_descend_clamps_colors():
    style = StyleConfig.for_style("iconography")
    scene = init_scene("iconography", 1, 16, 16, np.random.default_rng(0))
    p = pack_params(scene, style)
    grad = np.zeros(len(p))
    fill = p.slots_for("fill")[0]
    grad[fill.start:fill.stop] = -1.0
    out, _ = descend(scene, style, ParamVector(grad, p.layout), Moments.zeros(len(p)), AdamConfig(), 5.0)
    f = out.paths[0].fill
    assert (f.r, f.g, f.b, f.a) == (1.0, 1.0, 1.0, 1.0)


def test_remap_moments_follows_paths():
    style = StyleConfig.for_style("iconography")
    scene = init_scene("iconography", 3, 16, 16, np.random.default_rng(0))
    layout = pack_params(scene, style).layout
    n = layout[-1].stop
    m = Moments(np.arange(n, dtype=float), np.arange(n, dtype=float) * 2, 7)
    order = [scene.paths[0], scene.paths[2], scene.paths[1]]
    new_layout = pack_params(scene.with_paths(order), style).layout
    out = remap_moments(m, layout, new_layout, {0: 0, 2: 1})
    assert out.step == 7
    for old, new in ((0, 0), (2, 1)):
        for fam in ("points", "fill"):
            a = next(s for s in layout if s.path == old and s.family == fam)
            b = next(s for s in new_layout if s.path == new and s.family == fam)
            assert np.array_equal(out.m[b.start:b.stop], m.m[a.start:a.stop])
    dropped = [s for s in new_layout if s.path == 2]
    assert all(not np.any(out.v[s.start:s.stop]) for s in dropped)


def test_check_finite():
    check_finite("x", [1.0, 2.0], 0)
    with pytest.raises(NumericalAbort, match="iteration 4"):
        check_finite("x", [1.0, np.nan], 4)
