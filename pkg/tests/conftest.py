"""Shared fixtures: the reference phantom and its 12x Cartesian acquisition."""

import time

import pytest

from ossi_kit.encoding import EncodingOp
from ossi_kit.phantom import make_coil_maps, make_phantom, reference_phantom_spec, synthesize_kspace
from ossi_kit.sampling import cartesian_vd_mask


@pytest.fixture(scope="session")
def reference_truth():
    return make_phantom(reference_phantom_spec())


@pytest.fixture(scope="session")
def reference_op(reference_truth):
    gt = reference_truth
    coils = make_coil_maps(48, 48, 4, seed=0, mask=gt.mask)
    sched = cartesian_vd_mask(48, 12, 2, 0, 10, 50)
    return EncodingOp(coils, 10, 50, mask=sched.encoding_mask())


@pytest.fixture(scope="session")
def reference_noisy(reference_truth, reference_op):
    y, _ = synthesize_kspace(reference_truth, reference_op, target_tsnr_db=38.0, seed=0)
    return y


@pytest.fixture(scope="session")
def reference_clean(reference_truth, reference_op):
    y, _ = synthesize_kspace(reference_truth, reference_op, seed=0)
    return y


def _timed_admm(y, op):
    from ossi_kit.recon import admm_tensor_lr
    t0 = time.perf_counter()
    res = admm_tensor_lr(y, op)
    res.diagnostics["wall_time_s"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def admm_noisy(reference_noisy, reference_op):
    return _timed_admm(reference_noisy, reference_op)


@pytest.fixture(scope="session")
def admm_clean(reference_clean, reference_op):
    return _timed_admm(reference_clean, reference_op)


# acceptance criteria report one line each at the end of the session
_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
