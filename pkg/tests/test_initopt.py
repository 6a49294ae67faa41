import numpy as np
import pytest

from latticeworld.errors import DataError, NumericalAbort
from latticeworld.flowmodel import ToyFlowModel
from latticeworld.fusion import SamplerConfig
from latticeworld.initopt import (
    LinearTrajectory,
    OptConfig,
    SpectralLatent,
    TargetConstraint,
    dice,
    fft3_adjoint,
    fft3_forward,
    fft3_inverse,
    ground_and_exclusion_target,
    iou,
    linear_loss,
    linear_loss_from_endpoint,
    linear_traj_endpoint,
    linear_trajectory,
    optimize_initial_latent,
)
from latticeworld.lattice import DenseLatentGrid, GridDims, MaskVolume

D = 8
CFG = SamplerConfig(steps=2, window_size=D)


def model():
    return ToyFlowModel.create(1, 3, hidden=8, patch_radius=2, embed_dim=4, seed=0)


def noise(seed, shape=(D, D, D, 1)):
    return np.random.default_rng(seed).standard_normal(shape)


def constraint(dims=GridDims(D, D, D)):
    ex = np.zeros(dims.spatial, bool)
    ex[5:] = True
    return ground_and_exclusion_target(dims, 2, ex)


def test_fft_of_delta_is_flat_and_constant_is_dc():
    x = np.zeros((4, 6, 5, 1))
    x[0, 0, 0] = 1.0
    np.testing.assert_allclose(fft3_forward(x).coeffs, 1.0)
    c = np.full((4, 6, 5, 1), 2.5)
    X = fft3_forward(c).coeffs
    assert X[0, 0, 0, 0] == pytest.approx(2.5 * 120)
    X[0, 0, 0, 0] = 0
    assert np.abs(X).max() < 1e-12


def test_fft_round_trip_and_parseval():
    for seed in range(5):
        x = noise(seed, (6, 8, 4, 3))
        X = fft3_forward(x)
        assert np.abs(fft3_inverse(X).data - x).max() <= 1e-6
        n = 6 * 8 * 4
        lhs = np.sum(x ** 2)
        rhs = np.sum(np.abs(X.coeffs) ** 2) / n
        assert abs(lhs - rhs) <= 1e-6 * lhs


def test_adjoint_identity():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 4, 6, 2)) + 1j * rng.standard_normal((4, 4, 6, 2))
    g = rng.standard_normal((4, 4, 6, 2))
    lhs = np.sum(fft3_inverse(X).data * g)
    rhs = np.real(np.sum(X * np.conj(fft3_adjoint(g))))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_hermitian_projection_gives_real_field():
    rng = np.random.default_rng(2)
    X = SpectralLatent(rng.standard_normal((4, 4, 4, 1)) + 1j * rng.standard_normal((4, 4, 4, 1)))
    H = X.enforce_hermitian()
    assert np.abs(np.imag(np.fft.ifftn(H.coeffs, axes=(0, 1, 2)))).max() < 1e-12
    np.testing.assert_allclose(fft3_inverse(H).data, fft3_inverse(X).data, atol=1e-12)


def test_linear_trajectory_endpoints():
    s = noise(3)
    d = noise(4)
    tr = LinearTrajectory(s, d)
    np.testing.assert_array_equal(tr.at(1.0), s)
    np.testing.assert_allclose(tr.at(0.0), s + d)
    np.testing.assert_allclose(tr.at(0.25), s + 0.75 * d)


def test_endpoint_is_full_denoise():
    m = model()
    s = noise(5)
    from latticeworld.fusion import sample_plain

    ref = sample_plain(m, 1, GridDims(D, D, D), CFG, noise=s).data
    np.testing.assert_allclose(linear_traj_endpoint(m, s, 1, CFG).data, ref, atol=1e-12)


def test_endpoint_jacobian_is_identity_under_stop_gradient():
    m = model()
    s = noise(6)
    tr = linear_trajectory(m, s, 0, CFG)
    rng = np.random.default_rng(0)
    h = 1e-3
    for _ in range(20):
        k = tuple(rng.integers(D, size=3)) + (0,)
        e = np.zeros_like(s)
        e[k] = 1.0
        plus = LinearTrajectory(s + h * e, tr.displacement).endpoint()
        minus = LinearTrajectory(s - h * e, tr.displacement).endpoint()
        col = (plus - minus) / (2 * h)
        assert np.abs(col - e).max() <= 1e-5


@pytest.mark.parametrize("param", ["direct", "spectral"])
def test_linear_loss_gradient_matches_finite_differences(param):
    m = model()
    s = noise(7)
    cons = constraint()
    disp = linear_trajectory(m, s, 0, CFG).displacement
    loss, g = linear_loss(m, s, cons, 0, CFG, param, displacement=disp)
    rng = np.random.default_rng(1)
    h = 1e-5
    if param == "direct":
        for _ in range(20):
            k = tuple(rng.integers(D, size=3)) + (0,)
            e = np.zeros_like(s)
            e[k] = h
            lp = linear_loss(m, s + e, cons, 0, CFG, displacement=disp)[0]
            lm = linear_loss(m, s - e, cons, 0, CFG, displacement=disp)[0]
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[k]) <= 1e-4 * max(abs(fd), 1e-6)
        return
    X = np.fft.fftn(s, axes=(0, 1, 2))

    def loss_at(Xp):
        return linear_loss(m, np.real(np.fft.ifftn(Xp, axes=(0, 1, 2))), cons, 0, CFG, displacement=disp)[0]

    for i in range(20):
        k = tuple(rng.integers(D, size=3)) + (0,)
        part = 1.0 if i % 2 == 0 else 1j
        e = np.zeros_like(X)
        e[k] = h * part
        fd = (loss_at(X + e) - loss_at(X - e)) / (2 * h)
        an = g[k].real if part == 1.0 else g[k].imag
        assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-6)


def test_loss_zero_when_satisfied_and_ignores_unmasked_voxels():
    cons = constraint()
    end = np.where(cons.region, cons.target, 0.0)[..., None]
    loss, g = linear_loss_from_endpoint(end, cons)
    assert loss == 0.0 and not g.any()
    rng = np.random.default_rng(2)
    bumped = end + np.where(cons.region, 0.0, rng.standard_normal(cons.region.shape))[..., None]
    assert linear_loss_from_endpoint(bumped, cons)[0] == 0.0
    end2 = end.copy()
    end2[0, 0, 0, 0] += 0.5
    assert linear_loss_from_endpoint(end2, cons)[0] == pytest.approx(0.25)


def test_constraint_validation():
    with pytest.raises(DataError):
        TargetConstraint(MaskVolume(np.full((2, 2, 2), 0.5)), np.zeros((2, 2, 2)))
    with pytest.raises(DataError):
        TargetConstraint(MaskVolume(np.ones((2, 2, 2))), np.zeros((2, 2, 3)))
    empty = TargetConstraint(MaskVolume(np.zeros((2, 2, 2))), np.zeros((2, 2, 2)))
    with pytest.raises(DataError):
        linear_loss_from_endpoint(np.zeros((2, 2, 2, 1)), empty)
    with pytest.raises(DataError):
        OptConfig(parameterization="fourier")


def test_iou_and_dice_examples():
    a = np.zeros((2, 2, 2), bool)
    b = np.zeros((2, 2, 2), bool)
    assert iou(a, b) == 1.0 and dice(a, b) == 1.0
    a[0, 0, 0] = a[0, 0, 1] = True
    b[0, 0, 1] = b[1, 1, 1] = True
    assert iou(a, b) == pytest.approx(1 / 3)
    assert dice(a, b) == pytest.approx(0.5)
    assert iou(a, a) == 1.0


def test_lr_zero_gives_flat_trace():
    m = model()
    res = optimize_initial_latent(m, noise(8), constraint(), OptConfig(lr=0.0, max_steps=5), 0, CFG)
    assert len(res.loss) == 5
    assert len(set(res.loss)) == 1
    np.testing.assert_array_equal(res.latent.data, noise(8))


def test_converges_immediately_when_already_satisfied():
    m = model()
    s = noise(9)
    end = linear_traj_endpoint(m, s, 0, CFG).data[..., 0]
    cons = TargetConstraint(MaskVolume(np.ones(end.shape)), np.where(end > 0, 1.0, -1.0))
    res = optimize_initial_latent(m, s, cons, OptConfig(max_steps=5), 0, CFG)
    assert res.converged and res.steps_to_threshold == 0 and len(res.rows()) == 1
    assert res.dice[0] == 1.0


def test_spectral_gd_equals_direct_gd_at_scaled_lr():
    m = model()
    s = noise(10)
    cons = constraint()
    n = D ** 3
    a = optimize_initial_latent(m, s, cons, OptConfig(lr=0.05 * n, max_steps=4, optimizer="gd",
                                                      dice_threshold=2.0), 0, CFG)
    b = optimize_initial_latent(m, s, cons, OptConfig(lr=0.05, max_steps=4, optimizer="gd",
                                                      parameterization="direct", dice_threshold=2.0), 0, CFG)
    np.testing.assert_allclose(a.loss, b.loss, rtol=1e-9)
    np.testing.assert_allclose(a.latent.data, b.latent.data, atol=1e-9)


def test_optimization_decreases_loss_and_reports_rows():
    m = model()
    res = optimize_initial_latent(m, noise(11), constraint(), OptConfig(lr=1.0, max_steps=6, dice_threshold=2.0), 0, CFG)
    assert len(res.rows()) == 6
    assert res.rows()[0][0] == 0
    assert res.loss[-1] < res.loss[0]
    assert all(0.0 <= v <= 1.0 for v in res.iou + res.dice)


def test_divergence_aborts_with_partial_trace():
    m = model()
    cfg = OptConfig(lr=1e300, max_steps=4, optimizer="gd", parameterization="direct", dice_threshold=2.0)
    with pytest.raises(NumericalAbort) as info:
        optimize_initial_latent(m, noise(12), constraint(), cfg, 0, CFG)
    res = info.value.result
    assert np.isfinite(res.loss[0]) and not np.isfinite(res.loss[-1])
    assert len(res.loss) >= 2


def test_non_finite_start_is_a_data_error():
    s = noise(12)
    s[0, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        optimize_initial_latent(model(), s, constraint(), OptConfig(max_steps=3), 0, CFG)


def test_determinism():
    m = model()
    cfg = OptConfig(lr=2.0, max_steps=4, dice_threshold=2.0)
    a = optimize_initial_latent(m, noise(13), constraint(), cfg, 1, CFG)
    b = optimize_initial_latent(m, noise(13), constraint(), cfg, 1, CFG)
    assert a.loss == b.loss
    np.testing.assert_array_equal(a.latent.data, b.latent.data)
    assert isinstance(a.latent, DenseLatentGrid)
