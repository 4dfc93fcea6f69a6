import csv

import numpy as np
import pytest

from cropmatch.attack import (
    AttackConfig,
    AttackDiverged,
    AttackError,
    OptimizerState,
    ensemble_similarity_and_grad,
    ifgsm_step,
    mifgsm_step,
    pgd_adam_step,
    project,
    run_attack,
)
from cropmatch.encoders import AdapterEncoder, EncoderEnsemble, NotDifferentiableError, ToyEncoder
from cropmatch.transforms import CropConfig, CropRegion, apply_view, apply_view_vjp, make_view_pair
from conftest import image_pair
from oracles import central_differences, max_relative_error

EPS = 16 / 255


def small_ensemble(side=32):
    return EncoderEnsemble([ToyEncoder(i, side, 16, p) for i, p in enumerate((4, 8, 16))])


def state_with(delta, clean=None):
    clean = np.full_like(delta, 0.5) if clean is None else clean
    s = OptimizerState.zeros(clean)
    return OptimizerState(clean, delta, s.momentum, s.m, s.v2, 0)


# -- config -------------------------------------------------------------------


def test_config_validation():
    for bad in ({"epsilon_255": 0}, {"epsilon_255": 256}, {"epsilon_255": 2.5}, {"steps": 0},
                {"alpha_255": 0}, {"optimizer": "sgd"}):
        with pytest.raises(AttackError):
            AttackConfig(**bad)
    with pytest.raises(ValueError):
        AttackConfig(mode="sideways")


def test_config_round_trip():
    cfg = AttackConfig(epsilon_255=8, mode="local-local", crop_source={"scale_lo": 0.1, "scale_hi": 0.4},
                       alt_transform={"kind": "translation", "fixed": [1, 2]})
    again = AttackConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert cfg.target_crop == cfg.crop_source
    assert cfg.epsilon == 8 / 255 and cfg.alpha == 1 / 255


# -- loss ---------------------------------------------------------------------


def test_aligned_views_are_stationary():
    ens = EncoderEnsemble([ToyEncoder(0, 32, 16, 8)])
    x = np.random.default_rng(0).random((32, 32, 3))
    sim, grad = ensemble_similarity_and_grad(ens, x, x.copy())
    assert sim == 1.0 and not np.any(grad)


def _fixed(vec_hi, vec_lo):
    def f(x):
        return np.array(vec_hi if x.mean() > 0.5 else vec_lo)
    return f


def test_weighted_average_of_member_similarities():
    a = AdapterEncoder({"name": "a", "input_side": 8, "embed_dim": 2, "mean": [0] * 3, "std": [1] * 3},
                       _fixed([1.0, 0.0], [0.2, np.sqrt(0.96)]), lambda x, c: np.zeros(x.shape))
    b = AdapterEncoder({"name": "b", "input_side": 8, "embed_dim": 2, "mean": [0] * 3, "std": [1] * 3},
                       _fixed([1.0, 0.0], [0.6, 0.8]), lambda x, c: np.zeros(x.shape))
    sim, _ = ensemble_similarity_and_grad(EncoderEnsemble([a, b], [0.5, 0.5]), np.ones((8, 8, 3)),
                                          np.zeros((8, 8, 3)))
    assert sim == pytest.approx(0.4, abs=1e-12)


def test_non_differentiable_member_rejected():
    a = AdapterEncoder({"name": "a", "input_side": 8, "embed_dim": 2}, _fixed([1.0, 0.0], [0.0, 1.0]))
    with pytest.raises(NotDifferentiableError):
        ensemble_similarity_and_grad(EncoderEnsemble([a]), np.ones((8, 8, 3)), np.zeros((8, 8, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_ensemble_grad_finite_differences(seed):
    ens = EncoderEnsemble([ToyEncoder(seed + i, 32, 16, p, bias_scale=0.2) for i, p in enumerate((4, 8, 16))],
                          [0.2, 0.3, 0.5])
    r = np.random.default_rng(seed)
    src, tgt = r.random((24, 24, 3)), r.random((24, 24, 3))
    _, grad = ensemble_similarity_and_grad(ens, src, tgt)
    coords = r.choice(src.size, 100, replace=False)
    numeric = central_differences(lambda z: ensemble_similarity_and_grad(ens, z, tgt)[0], src, coords)
    assert max_relative_error(grad.ravel()[coords], numeric) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_crop_chain_grad_finite_differences(seed):
    """Full chain used by the attack: crop, resize, preprocess, embed, cosine."""
    ens = small_ensemble()
    r = np.random.default_rng(seed)
    adv, tgt = r.random((40, 40, 3)), r.random((40, 40, 3))
    region = CropRegion(3, 5, 30, 28)

    def loss(z):
        return ensemble_similarity_and_grad(ens, apply_view(z, region, 40), tgt)[0]

    _, g_view = ensemble_similarity_and_grad(ens, apply_view(adv, region, 40), tgt)
    grad = apply_view_vjp(adv.shape, region, g_view)
    coords = r.choice(adv.size, 100, replace=False)
    assert max_relative_error(grad.ravel()[coords], central_differences(loss, adv, coords)) < 1e-3


# -- projection and steps -----------------------------------------------------


def test_project_examples():
    clean = np.full((4, 4, 3), 0.5)
    assert np.array_equal(project(np.zeros_like(clean), clean, EPS), np.zeros_like(clean))
    assert np.allclose(project(np.full_like(clean, 2 * EPS), clean, EPS), EPS)
    d = project(np.array([[[EPS] * 3]]), np.array([[[0.99] * 3]]), EPS)
    assert np.allclose(d, 0.01, atol=1e-15)


def test_ifgsm_examples():
    cfg = AttackConfig()
    g = np.ones((4, 4, 3))
    s = ifgsm_step(state_with(np.zeros_like(g)), g, cfg)
    assert np.allclose(s.delta, 1 / 255) and s.t == 1
    assert np.array_equal(ifgsm_step(s, np.zeros_like(g), cfg).delta, s.delta)
    sat = ifgsm_step(state_with(np.full_like(g, EPS)), g, cfg)
    assert np.allclose(sat.delta, EPS)
    with pytest.raises(AttackError):
        ifgsm_step(s, np.full_like(g, np.nan), cfg)


def test_mifgsm_examples():
    r = np.random.default_rng(0)
    g = r.standard_normal((4, 4, 3))
    s0 = state_with(np.zeros_like(g))
    cfg = AttackConfig(optimizer="mifgsm", beta=1.0)
    assert np.array_equal(mifgsm_step(s0, g, cfg).delta, ifgsm_step(s0, g, cfg).delta)
    s1 = mifgsm_step(s0, g, cfg)
    s2 = mifgsm_step(s1, np.zeros_like(g), cfg)
    assert np.allclose(s2.delta - s1.delta, np.sign(g) / 255)
    zero = AttackConfig(optimizer="mifgsm", beta=0.0)
    s = s0
    for _ in range(3):
        s = mifgsm_step(s, g, zero)
    assert not np.any(s.momentum) and not np.any(s.delta)


def test_mifgsm_normalized_variant():
    g = np.array([[[1.0, -3.0, 0.0]]])
    cfg = AttackConfig(optimizer="mifgsm", beta=0.5, mifgsm_normalize=True)
    s = mifgsm_step(mifgsm_step(state_with(np.zeros_like(g)), g, cfg), g, cfg)
    assert np.allclose(s.momentum, 1.5 * g / 4)


def test_pgd_adam_examples():
    r = np.random.default_rng(1)
    g = r.standard_normal((4, 4, 3)) * 10
    for beta1 in (0.0, 0.5, 0.9):
        cfg = AttackConfig(optimizer="pgd-adam", beta1=beta1)
        s = pgd_adam_step(state_with(np.zeros_like(g)), g, cfg)
        assert s.t == 1
        assert np.allclose(s.m / (1 - beta1), g)
        assert np.allclose(s.delta, np.sign(g) / 255, rtol=1e-6)
    cfg = AttackConfig(optimizer="pgd-adam")
    s = state_with(np.zeros_like(g))
    for _ in range(5):
        s = pgd_adam_step(s, np.zeros_like(g), cfg)
    assert not np.any(s.delta) and s.t == 5


# -- full loop ----------------------------------------------------------------


def test_single_step_reduction():
    ens = small_ensemble()
    clean, target = image_pair(0, 32)
    cfg = AttackConfig(steps=1, alpha_255=16, mode="global-global")
    res = run_attack(clean, target, cfg, ens)
    _, g0 = ensemble_similarity_and_grad(ens, clean, target)
    assert np.array_equal(res.delta.data, project(EPS * np.sign(g0), clean, EPS))
    assert len(res.trace) == 1


@pytest.mark.parametrize("optimizer", ["ifgsm", "mifgsm", "pgd-adam"])
@pytest.mark.parametrize("mode", ["global-global", "local-global", "global-local", "local-local"])
def test_budget_after_every_step(optimizer, mode):
    clean, target = image_pair(3, 32)
    violations = []

    def check(i, old, new):
        if np.max(np.abs(new.delta)) > EPS or (clean + new.delta).min() < 0 or (clean + new.delta).max() > 1:
            violations.append(i)
        if new.t != old.t + 1:
            violations.append(("t", i))

    run_attack(clean, target, AttackConfig(steps=30, optimizer=optimizer, mode=mode, alpha_255=4), small_ensemble(),
               callback=check)
    assert violations == []


def test_deterministic_given_seed():
    clean, target = image_pair(1, 32)
    cfg = AttackConfig(steps=20, seed=7, mode="local-local")
    a = run_attack(clean, target, cfg, small_ensemble())
    b = run_attack(clean, target, cfg, small_ensemble())
    assert np.array_equal(a.adversarial, b.adversarial) and a.trace == b.trace
    c = run_attack(clean, target, AttackConfig(steps=20, seed=8, mode="local-local"), small_ensemble())
    assert not np.array_equal(a.adversarial, c.adversarial)


def test_replay_reconstructs_every_step():
    """The final delta is the projected accumulation of per-step full-resolution updates."""
    clean, target = image_pair(2, 32)
    ens = small_ensemble()
    cfg = AttackConfig(steps=15, seed=4, mode="local-local", alpha_255=2)
    states = []
    res = run_attack(clean, target, cfg, ens, callback=lambda i, old, new: states.append(new.delta))
    src, tgt = make_view_pair(cfg.mode, cfg.crop_source, cfg.target_crop, np.random.default_rng(cfg.seed))
    delta = np.zeros_like(clean)
    for i in range(cfg.steps):
        adv = clean + delta
        sv = src.next_view(32, 32, 32)
        tv = tgt.next_view(32, 32, 32)
        _, g_view = ensemble_similarity_and_grad(ens, sv(adv), tv(target))
        grad = apply_view_vjp(adv.shape, sv.region, g_view)
        delta = project(delta + cfg.alpha * np.sign(grad), clean, cfg.epsilon)
        assert np.array_equal(delta, states[i])
    assert np.array_equal(res.delta.data, delta)


def test_pasteback_confines_update_to_crop():
    clean, target = image_pair(0, 32)
    cfg = AttackConfig(steps=1, seed=0, pasteback=True, crop_source=CropConfig(0.2, 0.3))
    res = run_attack(clean, target, cfg, small_ensemble())
    src, _ = make_view_pair(cfg.mode, cfg.crop_source, cfg.target_crop, np.random.default_rng(0))
    r = src.next_view(32, 32, 32).region
    outside = np.ones((32, 32), dtype=bool)
    outside[r.top:r.bottom, r.left:r.right] = False
    assert not np.any(res.delta.data[outside]) and np.any(res.delta.data[~outside])


def test_alt_transform_attack_runs():
    clean, target = image_pair(0, 32)
    cfg = AttackConfig(steps=5, alt_transform={"kind": "rotation", "magnitude": 15})
    res = run_attack(clean, target, cfg, small_ensemble())
    assert np.max(np.abs(res.delta.data)) <= EPS


def test_attack_rejects_mismatched_sizes():
    with pytest.raises(AttackError):
        run_attack(np.zeros((32, 32, 3)), np.zeros((16, 16, 3)), AttackConfig(steps=1), small_ensemble())


def test_nonfinite_loss_aborts_with_trace():
    calls = {"n": 0}

    def fwd(x):
        # finite embeddings whose norms overflow make the cosine inf/inf from the 4th call on
        calls["n"] += 1
        if calls["n"] == 1:
            return np.array([1e308, 5e307])
        return np.array([5e307, 1e308]) if calls["n"] > 3 else np.array([1.0, x.mean()])

    enc = AdapterEncoder({"name": "bad", "input_side": 8, "embed_dim": 2}, fwd, lambda x, c: np.ones(x.shape))
    with np.errstate(all="ignore"), pytest.raises(AttackDiverged) as info:
        run_attack(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.2), AttackConfig(steps=10, mode="global-global"),
                   EncoderEnsemble([enc]))
    assert len(info.value.trace) == 2


def test_trace_csv(tmp_path):
    clean, target = image_pair(0, 32)
    res = run_attack(clean, target, AttackConfig(steps=4), small_ensemble())
    rows = list(csv.reader(res.write_trace_csv(tmp_path / "t.csv").open()))
    assert rows[0] == ["step", "ensemble_similarity", *res.member_names]
    assert len(rows) == 5
    assert float(rows[1][1]) == res.trace[0]


def test_attack_raises_similarity():
    clean, target = image_pair(0, 64)
    ens = EncoderEnsemble([ToyEncoder(i, 224, 64, p) for i, p in enumerate((8, 16, 32))])
    res = run_attack(clean, target, AttackConfig(steps=60), ens)
    assert res.final_similarity > res.clean_similarity
    assert len(res.trace) == 60 and len(res.final_similarities) == 3
