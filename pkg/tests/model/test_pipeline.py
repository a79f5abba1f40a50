import numpy as np
import pytest

from fmsr.data.grid import EnsembleSet, Field, Trajectory
from fmsr.data.regrid import coarsen, interpolate_up
from fmsr.data.residual import NormStats
from fmsr.errors import ValidationError
from fmsr.model.diffnet import VelocityNet
from fmsr.model.flow_match import FMConfig
from fmsr.model.pipeline import *
from fmsr.model.utils import keyed_rng


def _stats(catalog, mu_r=0.0, sigma_r=1.0):
    n = len(catalog)
    return NormStats(
        labels=tuple(catalog.labels),
        mu_x=np.zeros(n),
        sigma_x=np.ones(n),
        mu_r=np.full(n, mu_r),
        sigma_r=np.full(n, sigma_r),
        count=10,
    )


@pytest.fixture
def operator(tiny_net, catalog, plans):
    coarsen_plan, up = plans
    return SROperator(
        net=tiny_net,
        stats=_stats(catalog, sigma_r=0.5),
        plan_up=up,
        plan_coarsen=coarsen_plan,
        cfg=FMConfig(n_sample_steps=3),
    )


def _trajectory(make_field, grid, init_time=4, T=3, seed=0):
    states = tuple(
        make_field(grid, seed=seed + k, timestamp=init_time + k + 1, dtype=np.float32)
        for k in range(T)
    )
    return Trajectory(init_time=init_time, states=states)


def test_operator_validation(tiny_net, tiny_arch, catalog, plans):
    coarsen_plan, up = plans
    cfg = FMConfig()
    with pytest.raises(ValidationError):
        SROperator(tiny_net, _stats(catalog), coarsen_plan, up, cfg)
    with pytest.raises(ValidationError):
        SROperator(VelocityNet(tiny_arch, 3), _stats(catalog), up, coarsen_plan, cfg)


def test_zero_residual_gives_bicubic(tiny_net, catalog, plans, make_field, lr_grid):
    coarsen_plan, up = plans
    op = SROperator(tiny_net, _stats(catalog), up, coarsen_plan, FMConfig(n_sample_steps=2))
    lr = make_field(lr_grid, seed=1, dtype=np.float32)
    zeros = interpolate_up(lr, up).with_data(np.zeros((len(catalog),) + up.dst.shape))
    hr = super_resolve_state(op, lr, keyed_rng(0), noise=zeros)
    assert hr.grid == up.dst and hr.data.dtype == np.float32
    np.testing.assert_array_equal(hr.data, interpolate_up(lr, up).data)

    op = SROperator(tiny_net, _stats(catalog, mu_r=1.5), up, coarsen_plan, FMConfig(n_sample_steps=2))
    hr = super_resolve_state(op, lr, keyed_rng(0), noise=zeros)
    np.testing.assert_allclose(hr.data, interpolate_up(lr, up).data + 1.5, rtol=1e-6, atol=1e-6)

    with pytest.raises(ValidationError):
        super_resolve_state(op, hr, keyed_rng(0))


def test_state_uses_its_stream(operator, make_field, lr_grid, plans):
    _, up = plans
    lr = make_field(lr_grid, seed=2, dtype=np.float32)
    hr = super_resolve_state(operator, lr, keyed_rng(7, 0, 1, 0))
    # the zero-initialized net leaves the noise draw untouched
    eps = keyed_rng(7, 0, 1, 0).standard_normal((2,) + up.dst.shape)
    expected = interpolate_up(lr, up).data.astype(np.float64) + 0.5 * eps
    np.testing.assert_allclose(hr.data, expected, rtol=1e-5, atol=1e-5)


def test_trajectory_leads_are_keyed(operator, make_field, lr_grid):
    traj = _trajectory(make_field, lr_grid)
    a = super_resolve_trajectory(operator, traj, seed=3)
    b = super_resolve_trajectory(operator, traj, seed=3)
    np.testing.assert_array_equal(a.stack(), b.stack())
    assert a.init_time == traj.init_time and a.T == 3
    assert [s.timestamp for s in a.states] == [5, 6, 7]

    # a lead super-resolved on its own draws the same stream as inside the trajectory
    alone = Trajectory(init_time=traj.init_time, states=(traj.states[2],))
    np.testing.assert_array_equal(
        super_resolve_trajectory(operator, alone, seed=3).states[0].data, a.states[2].data
    )
    reversed_traj = Trajectory(init_time=traj.init_time, states=traj.states[::-1])
    np.testing.assert_array_equal(
        super_resolve_trajectory(operator, reversed_traj, seed=3).stack()[::-1], a.stack()
    )

    other_member = super_resolve_trajectory(operator, traj, seed=3, member=1)
    other_draw = super_resolve_trajectory(operator, traj, seed=3, draw=1)
    assert not np.array_equal(other_member.stack(), a.stack())
    assert not np.array_equal(other_draw.stack(), a.stack())


def test_super_resolve_ensemble(operator, make_field, lr_grid):
    ens = EnsembleSet(
        members=tuple(_trajectory(make_field, lr_grid, seed=10 * m) for m in range(3))
    )
    out = super_resolve_ensemble(operator, ens, seed=5)
    assert out.M == 3 and out.grid == operator.plan_up.dst
    for m in range(3):
        expected = super_resolve_trajectory(operator, ens.members[m], seed=5, member=m)
        np.testing.assert_array_equal(out.members[m].stack(), expected.stack())


def _roll_step(f: Field) -> Field:
    return Field(
        grid=f.grid,
        channels=f.channels,
        data=np.roll(f.data, 1, axis=-1),
        timestamp=f.timestamp + 1,
    )


def test_pipeline_integrated_rollout(operator, make_field, lr_grid):
    init = make_field(lr_grid, seed=4, timestamp=8, dtype=np.float32)
    traj = pipeline_integrated_rollout(operator, init, _roll_step, T=3, seed=2)
    assert traj.T == 3 and traj.grid == lr_grid and traj.init_time == 8
    assert [s.timestamp for s in traj.states] == [9, 10, 11]

    x = init
    for k in range(3):
        hr = super_resolve_state(operator, x, keyed_rng(2, 0, k, 0))
        x = _roll_step(coarsen(hr, operator.plan_coarsen))
        np.testing.assert_array_equal(traj.states[k].data, x.data)

    again = pipeline_integrated_rollout(operator, init, _roll_step, T=3, seed=2)
    np.testing.assert_array_equal(again.stack(), traj.stack())
    with pytest.raises(ValidationError):
        pipeline_integrated_rollout(operator, init, _roll_step, T=0, seed=2)

    # zero is a valid initialization time, a missing timestamp is not
    zero = Field(grid=lr_grid, channels=init.channels, data=init.data, timestamp=0)
    assert pipeline_integrated_rollout(operator, zero, _roll_step, T=1, seed=2).init_time == 0
    untimed = Field(grid=lr_grid, channels=init.channels, data=init.data)
    with pytest.raises(ValidationError):
        pipeline_integrated_rollout(operator, untimed, _roll_step, T=1, seed=2)


def test_zero_shot_apply(operator, make_field, hr_grid, lr_grid):
    foreign = _trajectory(make_field, hr_grid, seed=20)
    out = zero_shot_apply(operator, foreign, seed=1)
    coarse = Trajectory(
        init_time=foreign.init_time,
        states=tuple(coarsen(s, operator.plan_coarsen) for s in foreign.states),
    )
    np.testing.assert_array_equal(
        out.stack(), super_resolve_trajectory(operator, coarse, seed=1).stack()
    )
    with pytest.raises(ValidationError):
        zero_shot_apply(operator, _trajectory(make_field, lr_grid), seed=1)


def test_smooth_spectrally(catalog, hr_grid):
    lon = np.deg2rad(hr_grid.lon_centers)
    data = np.broadcast_to(3.0 + np.cos(4 * lon), (len(catalog),) + hr_grid.shape)
    f = Field(grid=hr_grid, channels=catalog, data=data)
    out = smooth_spectrally(f, cutoff_k=2.0)
    expected = 3.0 + np.exp(-4.0) * np.cos(4 * lon)
    np.testing.assert_allclose(out.data, np.broadcast_to(expected, data.shape), atol=1e-12)
    with pytest.raises(ValidationError):
        smooth_spectrally(f, cutoff_k=0.0)
