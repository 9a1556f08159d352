import math

import numpy as np
import pytest
from scipy.integrate import quad

from nfchan.channel import (
    ArrayConfig,
    CartesianPoint,
    PathParam,
    Scene,
    model_steering,
    received_signal,
    synthesize_channel,
)
from nfchan.codebook import CartesianRegion, build_cartesian_codebook
from nfchan.refine import (
    DegenerateGeometryError,
    EstimateSet,
    OperationCount,
    RefinerConfig,
    correlation_coeff,
    flexible_refine,
    local_grid_refine,
    ls_gains,
    newton_refine,
    q_function,
    q_inverse,
    refine_all,
    residual_power_threshold,
)
from nfchan.scenegen import SceneGenConfig, sample_scene


CFG = ArrayConfig.half_wavelength(128, 6e9)
LAM = CFG.wavelength_m
REGION = CartesianRegion(z_min=0.0, z_max=640 * LAM, x_min=-320 * LAM,
                         x_max=320 * LAM, n_z=128, n_x=128)


def desk_rc(**kw):
    args = dict(delta1=15 * LAM, delta2=15 * LAM, local_step=LAM, r_s=3,
                p_fa=1e-2, noise_var=0.0)
    args.update(kw)
    return RefinerConfig(**args)


def desk_scene(index=0, snr_db=20.0, s=3, seed=0):
    gen = SceneGenConfig(array=CFG, region=REGION, mode="fixed", s_fixed=s,
                         h_ratio=0.5, snr_range_db=(snr_db, snr_db), count=1,
                         seed=seed)
    return sample_scene(gen, index)


# --- Q function --------------------------------------------------------------

def test_q_midpoint():
    assert q_function(0.0) == pytest.approx(0.5, abs=1e-14)


def test_q_inverse_round_trip():
    for p in (0.01, 0.1, 0.5):
        assert q_function(q_inverse(p)) == pytest.approx(p, abs=1e-10)


def test_q_value_against_quadrature_oracle():
    x0 = 1.6448536269514722
    phi = lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
    oracle, _ = quad(phi, x0, 40.0)
    assert q_function(x0) == pytest.approx(oracle, abs=1e-10)
    assert q_function(x0) == pytest.approx(0.05, abs=1e-9)


def test_q_inverse_domain():
    with pytest.raises(ValueError):
        q_inverse(0.0)
    with pytest.raises(ValueError):
        q_inverse(1.0)


def test_threshold_midpoint_pfa():
    sigma2, n = 0.37, 128
    assert residual_power_threshold(sigma2, n, 0.5) == pytest.approx(
        sigma2 * n, rel=1e-9)


# --- correlation -------------------------------------------------------------

def test_correlation_self():
    p = CartesianPoint(z=10.0, x=1.0)
    a = model_steering(CFG, p)
    assert correlation_coeff(CFG, p, a) == pytest.approx(
        float(np.linalg.norm(a)), rel=1e-12)


def test_correlation_orthogonal():
    p = CartesianPoint(z=10.0, x=1.0)
    a = model_steering(CFG, p)
    rng = np.random.default_rng(0)
    y = rng.standard_normal(128) + 1j * rng.standard_normal(128)
    y -= a * (np.vdot(a, y) / np.vdot(a, a))  # project out a
    assert correlation_coeff(CFG, p, y) < 1e-12 * np.linalg.norm(y)


def test_correlation_matches_direct_recomputation():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p = CartesianPoint(z=rng.uniform(5, 30), x=rng.uniform(-15, 15))
        y = rng.standard_normal(128) + 1j * rng.standard_normal(128)
        a = model_steering(CFG, p)
        expected = abs(np.sum(np.conj(a) * y)) / math.sqrt(float(np.sum(np.abs(a) ** 2)))
        assert correlation_coeff(CFG, p, y) == pytest.approx(expected, rel=1e-12)


# --- LS gains ----------------------------------------------------------------

def test_ls_single_path_exact():
    p = CartesianPoint(z=12.0, x=-3.0)
    g = 0.7 - 0.4j
    y = g * model_steering(CFG, p)
    got = ls_gains(CFG, [p], y)
    assert got[0] == pytest.approx(g, rel=1e-10)


def test_ls_orthogonal_signal_gives_zero():
    p = CartesianPoint(z=12.0, x=-3.0)
    a = model_steering(CFG, p)
    rng = np.random.default_rng(2)
    y = rng.standard_normal(128) + 1j * rng.standard_normal(128)
    y -= a * (np.vdot(a, y) / np.vdot(a, a))
    got = ls_gains(CFG, [p], y)
    assert abs(got[0]) < 1e-12 * np.linalg.norm(y)


def test_ls_two_path_recovery_and_orthogonality():
    p1 = CartesianPoint(z=12.0, x=-6.0)
    p2 = CartesianPoint(z=18.0, x=7.0)
    g = np.array([0.9 + 0.1j, -0.3 + 0.5j])
    y = g[0] * model_steering(CFG, p1) + g[1] * model_steering(CFG, p2)
    got = ls_gains(CFG, [p1, p2], y)
    assert np.allclose(got, g, rtol=1e-8)
    a_mat = np.column_stack([model_steering(CFG, p) for p in (p1, p2)])
    resid = y - a_mat @ got
    assert np.all(np.abs(a_mat.conj().T @ resid) <= 1e-8 * np.linalg.norm(y))


def test_ls_duplicate_positions_degenerate():
    p = CartesianPoint(z=12.0, x=-3.0)
    y = model_steering(CFG, p)
    with pytest.raises(DegenerateGeometryError):
        ls_gains(CFG, [p, p], y)


# --- local grid refine --------------------------------------------------------

def test_local_grid_near_truth_and_lattice_optimal():
    """Noiseless single path: the box argmax lands by the true position.

    Exact half-step rounding only holds when the correlation surface is
    isotropic at the pitch scale; on the tilted near-field surface a diagonal
    lattice neighbor can win, so the guarantee is ~one step per axis plus
    lattice optimality (the winner beats the lattice point nearest truth).
    """
    from nfchan.refine import _objective
    rng = np.random.default_rng(3)
    rc = desk_rc()
    for _ in range(10):
        true = CartesianPoint(z=rng.uniform(20 * LAM, 32 * LAM),
                              x=rng.uniform(20 * LAM, 32 * LAM) * rng.choice([-1, 1]))
        y = model_steering(CFG, true)
        start = CartesianPoint(z=true.z + rng.uniform(-8, 8) * LAM,
                               x=true.x + rng.uniform(-8, 8) * LAM)
        got = local_grid_refine(CFG, "cartesian", start, y, rc)
        assert abs(got.z - true.z) <= 1.5 * rc.step1
        assert abs(got.x - true.x) <= 1.5 * rc.step2
        # lattice point nearest truth cannot beat the returned winner
        near = CartesianPoint(
            z=start.z + round((true.z - start.z) / rc.step1) * rc.step1,
            x=start.x + round((true.x - start.x) / rc.step2) * rc.step2)
        assert (_objective(CFG, "cartesian", got.z, got.x, y)
                >= _objective(CFG, "cartesian", near.z, near.x, y) - 1e-12)


def test_local_grid_matches_dense_oracle():
    # 10x finer dense scan over the same box must agree to within the pitches
    rng = np.random.default_rng(4)
    rc = desk_rc(delta1=5 * LAM, delta2=5 * LAM)
    true = CartesianPoint(z=14.0, x=2.0)
    y = model_steering(CFG, true)
    start = CartesianPoint(z=true.z + 3 * LAM, x=true.x - 2 * LAM)
    got = local_grid_refine(CFG, "cartesian", start, y, rc)

    dense = desk_rc(delta1=5 * LAM, delta2=5 * LAM, local_step=LAM / 10)
    dense_best = local_grid_refine(CFG, "cartesian", start, y, dense)
    assert abs(got.z - dense_best.z) <= rc.step1 / 2 + dense.step1 / 2
    assert abs(got.x - dense_best.x) <= rc.step2 / 2 + dense.step2 / 2


def test_local_grid_zero_box_returns_input():
    p = CartesianPoint(z=9.0, x=0.5)
    rc = desk_rc(delta1=0.0, delta2=0.0)
    y = model_steering(CFG, CartesianPoint(z=10.0, x=0.0))
    assert local_grid_refine(CFG, "cartesian", p, y, rc) == p


def test_local_grid_candidate_count_paper_profile():
    # delta1=delta2=20*lam at lam pitch -> 41x41 candidates
    rc = desk_rc(delta1=20 * LAM, delta2=20 * LAM)
    counters = OperationCount()
    p = CartesianPoint(z=12.0, x=0.0)
    y = model_steering(CFG, p)
    local_grid_refine(CFG, "cartesian", p, y, rc, counters=counters)
    assert counters.codeword_evals == 41 * 41


# --- Newton refinement ---------------------------------------------------------

def test_newton_stationary_at_maximizer():
    true = CartesianPoint(z=12.0, x=1.0)
    y = model_steering(CFG, true)
    got, steps, aborted = newton_refine(CFG, true, y, rounds=3)
    assert not aborted
    assert steps == 0
    assert got == true


def test_newton_reaches_dense_grid_maximum():
    from nfchan.refine import _objective
    true = CartesianPoint(z=14.0, x=2.0)
    y = model_steering(CFG, true)
    start = CartesianPoint(z=true.z + LAM, x=true.x - LAM)
    got, steps, aborted = newton_refine(CFG, start, y, rounds=10)
    assert not aborted and steps >= 1
    # dense local oracle around the start
    zs = true.z + np.linspace(-2 * LAM, 2 * LAM, 81)
    xs = true.x + np.linspace(-2 * LAM, 2 * LAM, 81)
    best = max(_objective(CFG, "cartesian", z, x, y) for z in zs for x in xs)
    final = _objective(CFG, "cartesian", got.z, got.x, y)
    assert final >= best * (1 - 1e-6)


def test_newton_objective_monotone_per_step():
    from nfchan.refine import _objective
    rng = np.random.default_rng(5)
    for trial in range(20):
        scene = desk_scene(index=trial, snr_db=20.0, seed=9)
        y = received_signal(CFG, scene, rng_seed=trial)
        p = scene.paths[0].position
        start = CartesianPoint(z=p.z + rng.uniform(-3, 3) * LAM,
                               x=p.x + rng.uniform(-3, 3) * LAM)
        cur = start
        j_prev = _objective(CFG, "cartesian", cur.z, cur.x, y)
        for _ in range(4):
            cur, steps, aborted = newton_refine(CFG, cur, y, rounds=1)
            j_now = _objective(CFG, "cartesian", cur.z, cur.x, y)
            assert j_now >= j_prev - 1e-12 * abs(j_prev)
            j_prev = j_now


# --- refine_all ----------------------------------------------------------------

def test_refine_all_fixed_point_noiseless():
    scene = desk_scene(index=1, snr_db=20.0, seed=1)
    y = synthesize_channel(CFG, scene)  # noiseless
    coarse = [p.position for p in scene.paths]
    est = refine_all(CFG, coarse, y, desk_rc(), region=REGION)
    assert len(est.entries) == 3
    true_sorted = sorted([p.position for p in scene.paths], key=lambda q: q.x)
    got_sorted = sorted(est.positions, key=lambda q: q.x)
    for t, g in zip(true_sorted, got_sorted):
        # both axes sit on numerically flat objective plateaus near the
        # exact maximum (|dJ/J| < 1e-15 within ~1e-5 lambda)
        assert abs(g.z - t.z) <= 1e-4 * LAM
        assert abs(g.x - t.x) <= 1e-4 * LAM
    # reconstruction is numerically exact
    h = synthesize_channel(CFG, scene)
    h_hat = np.zeros_like(h)
    for e in est.entries:
        h_hat += e.gain * model_steering(CFG, e.position)
    nmse = float(np.vdot(h_hat - h, h_hat - h).real / np.vdot(h, h).real)
    assert 10 * math.log10(max(nmse, 1e-300)) <= -120


def test_refine_all_recovers_perturbed_coarse():
    rng = np.random.default_rng(6)
    scene = desk_scene(index=2, snr_db=20.0, seed=2)
    y = synthesize_channel(CFG, scene)
    coarse = [CartesianPoint(z=p.position.z + rng.uniform(-10, 10) * LAM,
                             x=p.position.x + rng.uniform(-10, 10) * LAM)
              for p in scene.paths]
    est = refine_all(CFG, coarse, y, desk_rc(), region=REGION)
    true_sorted = sorted([p.position for p in scene.paths], key=lambda q: q.x)
    got_sorted = sorted(est.positions, key=lambda q: q.x)
    for t, g in zip(true_sorted, got_sorted):
        assert abs(g.z - t.z) <= LAM / 2
        assert abs(g.x - t.x) <= LAM / 2


def test_refine_all_residual_never_grows():
    for seed in range(30):
        scene = desk_scene(index=seed, snr_db=14.0, seed=3)
        y = received_signal(CFG, scene, rng_seed=seed)
        rng = np.random.default_rng(seed)
        coarse = [CartesianPoint(z=p.position.z + rng.uniform(-8, 8) * LAM,
                                 x=p.position.x + rng.uniform(-8, 8) * LAM)
                  for p in scene.paths]
        g0 = ls_gains(CFG, coarse, y)
        a_mat = np.column_stack([model_steering(CFG, p) for p in coarse])
        before = float(np.linalg.norm(y - a_mat @ g0) ** 2)
        est = refine_all(CFG, coarse, y, desk_rc(), region=REGION)
        after = float(np.linalg.norm(est.residual) ** 2)
        assert after <= before * (1 + 1e-12)


def test_refine_all_residual_identity_and_provenance():
    scene = desk_scene(index=4, snr_db=18.0, seed=4)
    y = received_signal(CFG, scene, rng_seed=4)
    rng = np.random.default_rng(7)
    coarse = [CartesianPoint(z=p.position.z + rng.uniform(-5, 5) * LAM,
                             x=p.position.x + rng.uniform(-5, 5) * LAM)
              for p in scene.paths]
    est = refine_all(CFG, coarse, y, desk_rc(), region=REGION)
    assert est.residual_identity_error(CFG, y) <= 1e-9
    assert all(e.provenance in ("coarse", "grid-refined", "newton-refined")
               for e in est.entries)
    assert any(e.provenance == "newton-refined" for e in est.entries)


# --- flexible refiner -----------------------------------------------------------

@pytest.fixture(scope="module")
def desk_codebook():
    return build_cartesian_codebook(CFG, REGION)


def test_flexible_complete_coarse_no_detection(desk_codebook):
    scene = desk_scene(index=5, snr_db=20.0, seed=5)
    y = received_signal(CFG, scene, rng_seed=5)
    rc = desk_rc(noise_var=scene.noise_var)
    counters = OperationCount()
    est = flexible_refine(CFG, [p.position for p in scene.paths], y,
                          desk_codebook, rc, counters=counters)
    assert len(est.entries) == 3
    assert not est.incomplete
    assert all(e.provenance != "detected" for e in est.entries)
    # no full-codebook scan happened: only local grids and ordering evals
    assert counters.codeword_evals < desk_codebook.n_rows


def test_flexible_recovers_missing_path(desk_codebook):
    hits = 0
    for seed in range(20):
        scene = desk_scene(index=seed, snr_db=20.0, seed=6)
        y = received_signal(CFG, scene, rng_seed=seed)
        rc = desk_rc(noise_var=scene.noise_var)
        coarse = [p.position for p in scene.paths[:-1]]  # withhold one path
        est = flexible_refine(CFG, coarse, y, desk_codebook, rc)
        if len(est.entries) == 3:
            hits += 1
    assert hits >= 18


def test_flexible_empty_coarse_detects_everything(desk_codebook):
    scene = desk_scene(index=3, snr_db=22.0, seed=7)
    y = received_signal(CFG, scene, rng_seed=3)
    rc = desk_rc(noise_var=scene.noise_var)
    est = flexible_refine(CFG, [], y, desk_codebook, rc)
    assert len(est.entries) == 3
    assert est.residual_identity_error(CFG, y) <= 1e-9


def test_flexible_max_detect_flags_incomplete(desk_codebook):
    scene = desk_scene(index=6, snr_db=20.0, seed=8)
    y = received_signal(CFG, scene, rng_seed=6)
    rc = desk_rc(noise_var=scene.noise_var, max_detect=1)
    est = flexible_refine(CFG, [], y, desk_codebook, rc)
    assert est.incomplete
    assert len(est.entries) == 1
