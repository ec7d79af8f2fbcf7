import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ossi_kit.analysis import combine_l2, nrmsd
from ossi_kit.bloch import SequenceParams
from ossi_kit.dictionary import ParamGrid, build_dictionary
from ossi_kit.encoding import CoilMaps, EncodingOp
from ossi_kit.errors import DimensionMismatchError, InvalidParameterError, SolverDivergenceError
from ossi_kit.phantom import (GRAY_MATTER, PhantomSpec, Region, make_coil_maps, make_phantom,
                              reference_phantom_spec, synthesize_kspace)
from ossi_kit.recon import (AdmmParams, ManifoldParams, PatchConfig, PatchGrid, admm_tensor_lr,
                            batched_cg, cg_sense, data_shared_init, default_beta, finite_diff,
                            finite_diff_adjoint, lowrank_pgm, nuclear_norm, ossimm,
                            patch_lr_plus_sparse, refold, svt, time_block_scheduler, unfold,
                            zero_filled)
from ossi_kit.recon.pgm import frame_matrices, from_frame_matrices
from ossi_kit.sampling import cartesian_vd_mask
from ossi_kit.voxel import FmriProtocol, VoxelParams


def _cplx(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def _nrmsd_comb(x, truth, mask=None):
    return nrmsd(combine_l2(x), combine_l2(truth), mask)


# ---------------------------------------------------------------------------
# small problem shared by most solver tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    gt = make_phantom(reference_phantom_spec(t_s=20, nx=24, ny=24))
    coils = make_coil_maps(24, 24, 4, seed=0, mask=gt.mask)
    op = EncodingOp(coils, 10, 20, mask=cartesian_vd_mask(24, 4, 4, 0, 10, 20).encoding_mask())
    y, _ = synthesize_kspace(gt, op, seed=0)
    return gt, op, y


@pytest.fixture(scope="module")
def small_admm(small):
    gt, op, y = small
    return admm_tensor_lr(y, op)


# ---------------------------------------------------------------------------
# SVT and unfoldings
# ---------------------------------------------------------------------------

def _prox_obj(X, M, tau):
    return 0.5 * np.linalg.norm(X - M) ** 2 + tau * nuclear_norm(X)


def test_svt_proximal_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        M = _cplx(rng, (6, 5))
        tau = rng.uniform(0.1, 3.0)
        X = svt(M, tau)
        f0 = _prox_obj(X, M, tau)
        scales = rng.choice([1e-3, 1e-2, 1e-1, 1.0], size=1000)
        D = _cplx(rng, (1000, 6, 5)) * scales[:, None, None]
        Y = X[None] + D
        f = 0.5 * np.sum(np.abs(Y - M) ** 2, axis=(1, 2)) + tau * nuclear_norm(Y)
        assert np.all(f >= f0 - 1e-12)


def test_svt_trivial_cases():
    rng = np.random.default_rng(1)
    M = _cplx(rng, (5, 4))
    np.testing.assert_array_equal(svt(M, 0.0), M)
    smax = np.linalg.svd(M, compute_uv=False)[0]
    assert not np.any(np.abs(svt(M, smax)) > 1e-12)
    np.testing.assert_allclose(svt(np.diag([3.0, 1.0]), 2.0), np.diag([1.0, 0.0]), atol=1e-12)
    with pytest.raises(InvalidParameterError):
        svt(M, -1.0)
    with pytest.raises(InvalidParameterError):
        svt(M, 1.0, method="qr")


@pytest.mark.parametrize("shape", [(64, 30), (10, 330), (7, 7), (3, 40, 12)])
def test_svt_gram_matches_svd(shape):
    rng = np.random.default_rng(2)
    M = _cplx(rng, shape)
    s = np.linalg.svd(M, compute_uv=False)
    tau = float(np.median(s))
    a = svt(M, tau, "svd")
    b = svt(M, tau, "gram")
    assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(a)
    np.testing.assert_allclose(nuclear_norm(M, "gram"), nuclear_norm(M), rtol=1e-10)


def test_unfold_small_shapes():
    T = np.arange(24).reshape(2, 3, 4)
    assert unfold(T, 1).shape == (2, 12)
    assert unfold(T, 2).shape == (3, 8)
    assert unfold(T, 3).shape == (4, 6)
    # documented order: remaining axes flattened in C order
    np.testing.assert_array_equal(unfold(T, 2)[1], T[:, 1, :].ravel())
    np.testing.assert_array_equal(unfold(T, 3)[2], T[:, :, 2].ravel())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=3, max_size=5), st.sampled_from([1, 2, 3]))
def test_unfold_refold_round_trip(shape, mode):
    rng = np.random.default_rng(len(shape))
    T = _cplx(rng, tuple(shape))
    back = refold(unfold(T, mode), mode, T.shape)
    assert np.array_equal(back, T)


def test_unfold_errors():
    with pytest.raises(InvalidParameterError):
        unfold(np.zeros((2, 3, 4)), 4)
    with pytest.raises(DimensionMismatchError):
        refold(np.zeros((2, 11)), 1, (2, 3, 4))
    with pytest.raises(DimensionMismatchError):
        unfold(np.zeros((2, 3)), 1)


def test_slow_constant_tensor_mode3_rank_one():
    rng = np.random.default_rng(3)
    T = np.repeat(_cplx(rng, (16, 10, 1)), 12, axis=2)
    assert np.linalg.matrix_rank(unfold(T, 3)) == 1
    assert np.linalg.matrix_rank(unfold(T, 1)) > 1


def _dense_unfold(T, mode):
    I = T.shape
    if mode == 1:
        return np.array([[T[i, j, k] for j in range(I[1]) for k in range(I[2])]
                         for i in range(I[0])])
    if mode == 2:
        return np.array([[T[i, j, k] for i in range(I[0]) for k in range(I[2])]
                         for j in range(I[1])])
    return np.array([[T[i, j, k] for i in range(I[0]) for j in range(I[1])] for k in range(I[2])])


def test_unfold_singular_values_match_dense():
    rng = np.random.default_rng(4)
    T = _cplx(rng, (9, 5, 7))
    for mode in (1, 2, 3):
        a = np.linalg.svd(unfold(T, mode), compute_uv=False)
        b = np.linalg.svd(_dense_unfold(T, mode), compute_uv=False)
        np.testing.assert_allclose(a, b, atol=1e-10)


@pytest.mark.parametrize("shape,dims", [((24, 24), (8, 8)), ((20, 18), (8, 8)), ((9, 9), (12, 4))])
def test_patch_grid_round_trip(shape, dims):
    rng = np.random.default_rng(5)
    X = _cplx(rng, shape + (3, 4))
    g = PatchGrid(shape, dims)
    for shift in [(0, 0), (3, 5)]:
        P = g.extract(X, shift)
        assert P.shape == (g.n_patches, g.patch_size, 3, 4)
        np.testing.assert_array_equal(g.assemble(P, shift), X)


# ---------------------------------------------------------------------------
# time blocks
# ---------------------------------------------------------------------------

def _kept(blocks):
    return [f for b in blocks for f in range(b.keep_start, b.keep_stop)]


@pytest.mark.parametrize("total,block,discard", [(100, 40, 5), (50, 33, 2), (57, 10, 2),
                                                 (100, 40, 0)])
def test_block_tiling(total, block, discard):
    blocks = time_block_scheduler(total, block, discard)
    assert _kept(blocks) == list(range(total))
    for b in blocks:
        assert b.stop - b.start == block
        assert b.start <= b.keep_start < b.keep_stop <= b.stop
    if discard == 0:
        assert all(b.keep_start == b.start for b in blocks[:-1])
    assert blocks[0].keep_start == 0 and blocks[-1].keep_stop == total


def test_block_single_and_errors():
    (b,) = time_block_scheduler(20, 33, 2)
    assert (b.start, b.stop, b.keep_start, b.keep_stop) == (0, 20, 0, 20)
    with pytest.raises(InvalidParameterError):
        time_block_scheduler(50, 10, 5)
    with pytest.raises(InvalidParameterError):
        time_block_scheduler(0, 10, 1)


def test_param_validation():
    with pytest.raises(InvalidParameterError):
        PatchConfig(t_s_block=10, overlap_discard=5)
    with pytest.raises(InvalidParameterError):
        AdmmParams(rho=0)
    with pytest.raises(InvalidParameterError):
        AdmmParams(r=0.5)
    with pytest.raises(InvalidParameterError):
        AdmmParams(lambdas=(1, 1))
    with pytest.raises(InvalidParameterError):
        ManifoldParams(beta=-1)


# ---------------------------------------------------------------------------
# CG and initializations
# ---------------------------------------------------------------------------

def test_finite_diff_adjoint():
    rng = np.random.default_rng(6)
    x = _cplx(rng, (7, 9, 2))
    d = _cplx(rng, (2, 7, 9, 2))
    assert np.vdot(d, finite_diff(x)) == pytest.approx(np.vdot(finite_diff_adjoint(d), x))


def test_cg_sense_full_single_coil():
    rng = np.random.default_rng(7)
    op = EncodingOp(CoilMaps.ones(12, 12), 2, 3, mask=np.ones((1, 12, 2, 3), bool))
    x = _cplx(rng, op.image_shape)
    r = cg_sense(op.forward(x), op, reg=None)
    assert np.linalg.norm(r.images - x) <= 1e-8 * np.linalg.norm(x)


def test_cg_sense_monotone_and_smoothing(small):
    _, op, y = small
    plain = cg_sense(y, op, reg=None)
    quad = cg_sense(y, op, reg=("quadratic", 0.5))
    assert np.linalg.norm(finite_diff(quad.images)) <= np.linalg.norm(finite_diff(plain.images))
    for r in (plain, quad):
        assert np.all(np.isfinite(r.objective_trace))
        assert r.objective_trace[-1] <= r.objective_trace[0]


def test_huber_large_delta_is_quadratic(small):
    _, op, y = small
    q = cg_sense(y, op, reg=("quadratic", 0.1))
    h = cg_sense(y, op, reg=("huber", 0.1, 1e6), huber_passes=1)
    assert np.linalg.norm(h.images - q.images) <= 1e-6 * np.linalg.norm(q.images)
    h3 = cg_sense(y, op, reg={"kind": "huber", "alpha": 0.1, "delta": 1e-3})
    assert np.all(np.diff(h3.objective_trace) <= 1e-12 * h3.objective_trace[0])


def test_cg_sense_errors(small):
    _, op, y = small
    with pytest.raises(InvalidParameterError):
        cg_sense(y, op, reg=("tv", 1.0))
    with pytest.raises(InvalidParameterError):
        cg_sense(y, op, reg=("quadratic", -1.0))
    with pytest.raises(DimensionMismatchError):
        cg_sense(y[..., :5], op)


def test_cg_divergence_raises():
    # a non-Hermitian operator violates the CG assumptions
    A = np.array([[1.0, 40.0], [-40.0, 1.0]]) + 0j
    b = np.array([[1.0], [1.0]]) + 0j
    with pytest.raises(SolverDivergenceError) as exc:
        batched_cg(lambda v: A @ v, b, np.zeros_like(b), 50, axes=(0,))
    assert len(exc.value.trace) >= 6


def test_batched_cg_frames_independent():
    rng = np.random.default_rng(8)
    Q = _cplx(rng, (6, 6))
    H = Q @ Q.conj().T + 6 * np.eye(6)
    B = _cplx(rng, (6, 3))
    x, _ = batched_cg(lambda v: H @ v, B, np.zeros_like(B), 6, axes=(0,))
    np.testing.assert_allclose(x, np.linalg.solve(H, B), atol=1e-8)


def test_data_shared_full_and_window_one(small):
    gt, op, y = small
    full = EncodingOp(op.coils, 10, 20, mask=np.ones((1, 24, 10, 20), bool))
    yf = full.forward(gt.images)
    np.testing.assert_allclose(data_shared_init(yf, full), full.adjoint(yf), atol=1e-12)
    np.testing.assert_allclose(data_shared_init(y, op, window=1), zero_filled(y, op), atol=1e-12)
    with pytest.raises(InvalidParameterError):
        data_shared_init(y, op, window=21)


def test_data_shared_beats_zero_filled(reference_truth, reference_op, reference_noisy):
    gt = reference_truth
    ds = data_shared_init(reference_noisy, reference_op)
    zf = zero_filled(reference_noisy, reference_op)
    assert _nrmsd_comb(ds, gt.images) < _nrmsd_comb(zf, gt.images)


def test_data_shared_nonuniform_full_window():
    rng = np.random.default_rng(9)
    traj = rng.uniform(-4, 4, (40, 2, 4)) + 1j * rng.uniform(-4, 4, (40, 2, 4))
    op = EncodingOp(CoilMaps.ones(8, 8), 2, 4, traj=traj)
    y = _cplx(rng, op.data_shape)
    np.testing.assert_allclose(data_shared_init(y, op, window=1), op.adjoint(y), atol=1e-12)
    ds = data_shared_init(y, op, window=4)
    np.testing.assert_allclose(ds[..., 0], ds[..., 3], atol=1e-12)


# ---------------------------------------------------------------------------
# ADMM tensor low rank
# ---------------------------------------------------------------------------

def test_admm_penalty_free_equals_cg_sense(small):
    gt, op, _ = small
    full = EncodingOp(op.coils, 10, 20, mask=np.ones((1, 24, 10, 20), bool))
    y, _ = synthesize_kspace(gt, full, noise_sigma=0.01, seed=1)
    a = admm_tensor_lr(y, full, admm=AdmmParams(lambda_scale=0.0))
    c = cg_sense(y, full, reg=None)
    assert nrmsd(a.images, c.images) < 1e-4


def test_admm_beats_data_shared_small(small, small_admm):
    gt, op, y = small
    ds = data_shared_init(y, op)
    assert _nrmsd_comb(small_admm.images, gt.images) < _nrmsd_comb(ds, gt.images)
    assert np.all(np.isfinite(small_admm.objective_trace))


def test_admm_beats_data_shared_reference(reference_truth, reference_op, reference_noisy,
                                          admm_noisy):
    gt = reference_truth
    ds = data_shared_init(reference_noisy, reference_op)
    assert _nrmsd_comb(admm_noisy.images, gt.images) < _nrmsd_comb(ds, gt.images)


def test_admm_cycle_spin_seed_robust(reference_truth, reference_op, reference_noisy, admm_noisy):
    other = admm_tensor_lr(reference_noisy, reference_op, PatchConfig(seed=1))
    assert not np.array_equal(other.images, admm_noisy.images)
    a = _nrmsd_comb(admm_noisy.images, reference_truth.images)
    b = _nrmsd_comb(other.images, reference_truth.images)
    assert abs(a - b) < 0.01


def test_admm_primal_residual_drops_tenfold(admm_noisy):
    for blk in admm_noisy.diagnostics["blocks"]:
        pr = blk["primal_residual"]
        assert pr[0] / pr[-1] >= 10.0


def test_admm_deterministic(small, small_admm):
    _, op, y = small
    again = admm_tensor_lr(y, op)
    assert np.array_equal(again.images, small_admm.images)


@pytest.mark.parametrize("variant", ["mllr", "gtlr"])
def test_admm_variants(small, variant):
    gt, op, y = small
    r = admm_tensor_lr(y, op, variant=variant)
    assert r.diagnostics["variant"] == variant
    assert len(r.diagnostics["lambdas"]) == (1 if variant == "mllr" else 3)
    assert _nrmsd_comb(r.images, gt.images) < _nrmsd_comb(zero_filled(y, op), gt.images)


def test_admm_errors(small):
    _, op, y = small
    with pytest.raises(InvalidParameterError):
        admm_tensor_lr(y, op, variant="tucker")
    with pytest.raises(DimensionMismatchError):
        admm_tensor_lr(y[..., :3], op)
    zero = admm_tensor_lr(np.zeros_like(y), op)
    assert not np.any(zero.images)


# ---------------------------------------------------------------------------
# L + S
# ---------------------------------------------------------------------------

def test_lps_infinite_mu_is_admm(small, small_admm):
    _, op, y = small
    r = patch_lr_plus_sparse(y, op, mu=np.inf)
    assert not np.any(r.components["S"])
    assert nrmsd(r.images, small_admm.images) < 1e-3


def test_lps_captures_sparse_component(small):
    gt, op, _ = small
    n = np.arange(10)[:, None]
    t = np.arange(20)[None, :]
    # one coefficient of the fast/slow temporal Fourier basis
    spike = 0.3 * np.abs(gt.images).max() * np.exp(2j * np.pi * (3 * n / 10 + 5 * t / 20))
    x = gt.images.copy()
    x[12, 8] += spike
    y = op.forward(x)
    r = patch_lr_plus_sparse(y, op, mu=0.03)
    S = r.components["S"][12, 8]
    captured = np.real(np.vdot(spike, S)) / np.vdot(spike, spike).real
    assert captured >= 0.5
    np.testing.assert_allclose(r.images, r.components["L"] + r.components["S"])
    res_lps = np.linalg.norm(op.forward(r.images) - y)
    res_ds = np.linalg.norm(op.forward(data_shared_init(y, op)) - y)
    assert res_lps <= res_ds


def test_lps_negative_mu(small):
    _, op, y = small
    with pytest.raises(InvalidParameterError):
        patch_lr_plus_sparse(y, op, mu=-1.0)


# ---------------------------------------------------------------------------
# global low rank (POGM)
# ---------------------------------------------------------------------------

def _rank3_series(rng, nx=12, ny=12, nc=10, ts=4):
    M = np.stack([_cplx(rng, (nx * ny, 3)) @ _cplx(rng, (3, nc)) for _ in range(ts)])
    return from_frame_matrices(M, (nx, ny, nc, ts))


def test_frame_matrix_round_trip():
    rng = np.random.default_rng(10)
    X = _cplx(rng, (5, 6, 3, 4))
    np.testing.assert_array_equal(from_frame_matrices(frame_matrices(X), X.shape), X)


def test_pogm_rank3_exact():
    rng = np.random.default_rng(11)
    X = _rank3_series(rng)
    coils = make_coil_maps(12, 12, 3, seed=1)
    op = EncodingOp(coils, 10, 4, mask=np.ones((1, 12, 10, 4), bool))
    r = lowrank_pgm(op.forward(X), op, alpha=0.0, iters=15, x0=np.zeros_like(X))
    assert np.linalg.norm(r.images - X) <= 1e-6 * np.linalg.norm(X)
    assert r.diagnostics["ranks"] == [3, 3, 3, 3]


def test_pogm_monotone_with_restart(small):
    _, op, y = small
    r = lowrank_pgm(y, op, alpha="auto", iters=15)
    tr = np.asarray(r.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * tr[0])
    assert r.diagnostics["alpha"] > 0
    assert max(r.diagnostics["ranks"]) <= 10


def test_pogm_zero_alpha_monotone(small):
    _, op, y = small
    tr = np.asarray(lowrank_pgm(y, op, alpha=0.0, iters=10).objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * tr[0])


def test_pogm_errors(small):
    _, op, y = small
    with pytest.raises(InvalidParameterError):
        lowrank_pgm(y, op, alpha=-1.0)
    with pytest.raises(InvalidParameterError):
        lowrank_pgm(y, op, alpha="big")
    with pytest.raises(InvalidParameterError):
        lowrank_pgm(y, op, iters=0)


# ---------------------------------------------------------------------------
# OSSIMM
# ---------------------------------------------------------------------------

SEQ = SequenceParams(15.0, 2.7, 10, 10.0)
T1, T2 = GRAY_MATTER
# R2* values on the dictionary grid below
R2S = (18.0, 22.0)
F0 = (-4.0, 6.0)


@pytest.fixture(scope="module")
def manifold_case():
    regions = [Region("ellipse", VoxelParams(T1, T2, 1000.0 / (R2S[0] - 1000.0 / T2), F0[0], 1.0),
                      radii=(0.9, 0.9)),
               Region("rect", VoxelParams(T1, T2, 1000.0 / (R2S[1] - 1000.0 / T2), F0[1], 0.7),
                      lo=(-0.4, -0.4), hi=(0.3, 0.3))]
    prot = FmriProtocol(task=np.zeros(3), drift_hz_per_min=0.0, resp_amp_hz=0.0,
                        frame_period_s=2.0, target_tsnr_db=None)
    gt = make_phantom(PhantomSpec(16, 16, regions, None, prot, n_coils=3))
    grid = ParamGrid(t1_fixed_ms=T1, t2_values_ms=[T2],
                     r2s_values_hz=np.round(np.arange(14.0, 26.01, 0.5), 6),
                     f0_values_hz=np.round(np.arange(-10.0, 10.01, 0.5), 6))
    d = build_dictionary(grid, SEQ)
    coils = make_coil_maps(16, 16, 3, seed=2, mask=gt.mask)
    return gt, d, coils


def test_ossimm_on_manifold_full_sampling(manifold_case):
    gt, d, coils = manifold_case
    op = EncodingOp(coils, 10, 3, mask=np.ones((1, 16, 10, 3), bool))
    y = op.forward(gt.images)
    r = ossimm(y, op, d, ManifoldParams(beta=1e3, outer_iters=2), mask=gt.mask)
    maps = r.param_maps
    np.testing.assert_allclose(maps["r2s"][gt.mask], np.repeat(gt.r2s[gt.mask, None], 3,
                                                               axis=1), atol=1e-9)
    np.testing.assert_allclose(maps["f0"][..., 0][gt.mask], gt.f0[gt.mask], atol=1e-9)
    np.testing.assert_allclose(r.images, gt.images, atol=1e-8)


def test_ossimm_fixed_point(manifold_case):
    gt, d, coils = manifold_case
    op = EncodingOp(coils, 10, 3, mask=cartesian_vd_mask(16, 4, 2, 0, 10, 3).encoding_mask())
    y = op.forward(gt.images)
    r = ossimm(y, op, d, ManifoldParams(outer_iters=1), x0=gt.images, mask=gt.mask)
    assert np.max(np.abs(r.images - gt.images)) <= 1e-8


def test_ossimm_beta_zero_is_cg_sense(manifold_case):
    gt, d, coils = manifold_case
    op = EncodingOp(coils, 10, 3, mask=cartesian_vd_mask(16, 4, 2, 0, 10, 3).encoding_mask())
    y = op.forward(gt.images)
    x0 = np.zeros(op.image_shape, complex)
    r = ossimm(y, op, d, ManifoldParams(beta=0.0, outer_iters=1, cg_iters=5), x0=x0,
               mask=gt.mask)
    c = cg_sense(y, op, reg=None, iters=5)
    np.testing.assert_allclose(r.images, c.images, atol=1e-10)


def test_default_beta_condition_number(manifold_case):
    _, _, coils = manifold_case
    op = EncodingOp(coils, 10, 3, mask=cartesian_vd_mask(16, 4, 2, 0, 10, 3).encoding_mask())
    beta = default_beta(op, kappa=15.0, sigma_max=1.0)
    assert (1.0 + 2 * beta) / (2 * beta) == pytest.approx(15.0)


def test_ossimm_errors(manifold_case):
    gt, d, coils = manifold_case
    op = EncodingOp(coils, 10, 3, mask=np.ones((1, 16, 10, 3), bool))
    y = op.forward(gt.images)
    with pytest.raises(DimensionMismatchError):
        ossimm(y[..., :2], op, d)
    with pytest.raises(DimensionMismatchError):
        ossimm(y, op, d, mask=np.ones((8, 8), bool))
    op5 = EncodingOp(coils, 5, 3, mask=np.ones((1, 16, 5, 3), bool))
    with pytest.raises(DimensionMismatchError):
        ossimm(np.zeros(op5.data_shape), op5, d)
