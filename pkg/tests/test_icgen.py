import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdflow.fields import GridSpec, Rng
from rdflow.icgen import (FAMILIES, IcParams, annulus_field, gaussian_field, ic_annulus, ic_dot_lattice,
                          ic_multi_gaussian, ic_noisy_gaussian, ic_patch, ic_single_gaussian, ic_stripes,
                          ic_turing_noise, lattice_centers, lattice_field, patch_field, sample_batch,
                          sample_ic, stripes_field)
from rdflow.systems import homogeneous_equilibrium, system

G32 = GridSpec(32)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_finite_ranged_deterministic(family):
    s = system("gs")
    for seed in range(5):
        a, meta = sample_ic(family, Rng(seed), G32, s)
        b, _ = sample_ic(family, Rng(seed), G32, s)
        assert a.shape == (1, 2, 32, 32) and np.all(np.isfinite(a))
        assert np.array_equal(a, b)
        assert meta["family"] == family
        json.dumps(meta)
        if family in ("noisy_gaussian", "turing_noise"):
            # may exceed [0, 1] by a few noise standard deviations
            assert a.min() > -0.2 and a.max() < 1.2
        else:
            assert a.min() >= 0 and a.max() <= 1


def test_unknown_family():
    with pytest.raises(ValueError):
        sample_ic("spiral_waves", Rng(0), G32)
    with pytest.raises(ValueError):
        sample_ic("turing_noise", Rng(0), G32)


def test_param_validation():
    with pytest.raises(ValueError):
        IcParams(sigma=(0.2, 0.1))
    with pytest.raises(ValueError):
        IcParams(sigma=(0.0, 0.1))
    with pytest.raises(ValueError):
        IcParams(sigma=(0.1, 0.6))
    with pytest.raises(ValueError):
        IcParams(noise_sigma=-1)


def test_single_gaussian_peak_and_range():
    for seed in range(10):
        u, meta = ic_single_gaussian(Rng(seed), G32)
        for ch, m in enumerate(meta["channels"]):
            assert 0.05 <= m["sigma"] <= 0.20
            f = u[0, ch]
            c = G32.centers()
            d2 = np.min([((x - m["center"][0] + 0.5) % 1 - 0.5) ** 2 for x in c]) + \
                np.min([((y - m["center"][1] + 0.5) % 1 - 0.5) ** 2 for y in c])
            assert np.exp(-d2 / (2 * m["sigma"] ** 2)) - 1e-12 <= f.max() <= 1.0
            assert f.min() > 0


def test_gaussian_peak_one_on_cell_center():
    f = gaussian_field(G32, (G32.centers()[5], G32.centers()[20]), 0.1)
    assert f.max() == 1.0 and f[5, 20] == 1.0


def test_gaussian_period_shift():
    a = gaussian_field(G32, (0.3, 0.7), 0.08)
    b = gaussian_field(G32, (1.3, -0.3), 0.08)
    assert np.allclose(a, b, atol=1e-14)


@given(st.integers(-40, 40), st.integers(-40, 40))
@settings(max_examples=25, deadline=None)
def test_center_shift_commutes_with_cell_shift(k, m):
    g = GridSpec(16)
    c = (0.21, 0.64)
    shifted_c = (c[0] + k * g.h, c[1] + m * g.h)
    a = np.roll(gaussian_field(g, c, 0.1), (k, m), axis=(0, 1))
    assert np.allclose(gaussian_field(g, shifted_c, 0.1), a, atol=1e-12)
    a = np.roll(annulus_field(g, c, 0.2, 0.05), (k, m), axis=(0, 1))
    assert np.allclose(annulus_field(g, shifted_c, 0.2, 0.05), a, atol=1e-12)


def test_multi_gaussian_degenerate_and_meta():
    centers = [(0.4, 0.6)] * 3
    avg = sum(gaussian_field(G32, c, 0.1) for c in centers) / 3
    assert np.allclose(avg, gaussian_field(G32, (0.4, 0.6), 0.1), atol=1e-15)
    u, meta = ic_multi_gaussian(Rng(4), G32)
    r = Rng(4)
    n0 = r.integers(2, 5)
    assert meta["channels"][0]["n"] == n0
    assert all(2 <= m["n"] <= 5 and len(m["centers"]) == m["n"] for m in meta["channels"])
    assert u.min() > 0 and u.max() <= 1


def test_noisy_gaussian_zero_noise_and_statistics():
    zero, _ = ic_noisy_gaussian(Rng(3), G32, IcParams(noise_sigma=0.0))
    clean, _ = ic_single_gaussian(Rng(3), G32)
    assert np.array_equal(zero, clean)
    g = GridSpec(128)
    noisy, _ = ic_noisy_gaussian(Rng(8), g)
    base, _ = ic_single_gaussian(Rng(8), g)
    eta = noisy - base
    assert abs(eta.var() / 0.02**2 - 1) < 0.1
    rho = np.corrcoef(eta[0, 0].ravel(), eta[0, 1].ravel())[0, 1]
    assert abs(rho) < 0.05


def test_patch_area_and_wrap():
    f = patch_field(G32, (0.5, 0.5), 0.25, 0.375)
    assert set(np.unique(f)) <= {0.0, 1.0}
    assert f.sum() == 8 * 12
    edge = patch_field(G32, (0.0, 0.0), 0.25, 0.25)
    assert edge[0, 0] == edge[-1, -1] == edge[0, -1] == edge[-1, 0] == 1
    assert edge.sum() == 8 * 8
    for seed in range(5):
        u, meta = ic_patch(Rng(seed), G32)
        for ch, m in enumerate(meta["channels"]):
            assert 0.2 <= m["w"] <= 0.4 and 0.2 <= m["h"] <= 0.4
            count = u[0, ch].sum()
            assert abs(count - m["w"] * m["h"] * 32 * 32) <= (m["w"] + m["h"]) * 32 + 4


def test_patch_matches_loop_oracle():
    c, w, h = (0.93, 0.1), 0.3, 0.22
    f = patch_field(G32, c, w, h)
    xs = G32.centers()
    for i, x in enumerate(xs):
        for j, y in enumerate(xs):
            dx = min(abs(x - c[0]), 1 - abs(x - c[0]))
            dy = min(abs(y - c[1]), 1 - abs(y - c[1]))
            assert f[i, j] == float(dx < w / 2 and dy < h / 2)


@pytest.mark.parametrize("kind", ["fn", "gs", "lo"])
def test_turing_noise(kind):
    s = system(kind)
    u_star, v_star = homogeneous_equilibrium(s)
    exact, meta = ic_turing_noise(Rng(1), G32, s, IcParams(turing_sigma=0.0))
    assert np.all(exact[0, 0] == u_star) and np.all(exact[0, 1] == v_star)
    noisy, _ = ic_turing_noise(Rng(1), G32, s)
    tol = 3 * 0.02 / 32
    assert abs(noisy[0, 0].mean() - u_star) < tol and abs(noisy[0, 1].mean() - v_star) < tol
    assert meta["equilibrium"] == [u_star, v_star]


def test_annulus_ridge_symmetry_range():
    s = 2.5 / 32
    f = annulus_field(G32, (0.5, 0.5), 0.25, s)
    assert f.min() > 0 and f.max() <= 1
    assert f.max() >= 0.99
    # center on a cell corner: the cell-center lattice is symmetric under the 4-fold rotation about it
    assert np.allclose(f, np.rot90(f), atol=1e-14)
    assert np.allclose(f, f.T, atol=1e-14)
    for seed in range(5):
        _, meta = ic_annulus(Rng(seed), G32)
        for m in meta["channels"]:
            assert 0.15 <= m["r0"] <= 0.30 and 0.03 <= m["s"] <= 0.08


def test_stripes_spectrum_and_mean():
    f = stripes_field(G32, 0.0, 2)
    assert np.allclose(f, f[:, :1])  # constant along each row index's columns
    spec = np.abs(np.fft.rfft(f[:, 0] - f[:, 0].mean()))
    assert int(np.argmax(spec)) == 2
    assert abs(f.mean() - 0.5) < 0.02
    g = stripes_field(G32, np.pi / 2, 3)
    assert abs(g.mean() - 0.5) < 0.02
    for seed in range(10):
        u, meta = ic_stripes(Rng(seed), G32)
        assert u.min() >= 0 and u.max() <= 1
        assert all(2 <= m["f"] <= 6 for m in meta["channels"])


def test_stripes_snapped_are_periodic():
    g = GridSpec(16)
    for phi in np.linspace(0, 2 * np.pi, 13):
        f = stripes_field(g, phi, 5)
        # evaluate one period over: the field on a shifted grid equals the rolled field
        x, y = g.mesh()
        assert np.allclose(stripes_field(g, phi, 5), f)
        kx, ky = round(5 * np.cos(phi)), round(5 * np.sin(phi))
        shifted = 0.5 * (1 + np.sin(2 * np.pi * (kx * (x + 1) + ky * (y + 1))))
        assert np.allclose(shifted, f, atol=1e-10)


def test_dot_lattice_gs_antiphase():
    for seed in range(6):
        u, meta = ic_dot_lattice(Rng(seed), G32, system("gs"))
        g = u[0, 0]
        assert g.max() == 1.0
        assert meta["anti_phase"]
        assert np.isclose(u[0, 1].max(), 0.1 * (1 - g.min()))
        assert u[0, 1].max() <= 0.1
        m = meta["channels"][0]
        assert 4 <= m["nx"] <= 7 and 4 <= m["ny"] <= 7
        assert np.all(np.array(m["jitter_x"]) >= 0) and np.all(np.array(m["jitter_x"]) <= 0.2)


def test_dot_lattice_independent_for_other_systems():
    u, meta = ic_dot_lattice(Rng(2), G32, system("fn"))
    assert not meta["anti_phase"] and len(meta["channels"]) == 2
    assert u[0, 0].max() == 1.0 and u[0, 1].max() == 1.0
    forced, meta = ic_dot_lattice(Rng(2), G32, system("fn"), IcParams(lattice_anti_phase="always"))
    assert meta["anti_phase"]


def test_dot_lattice_peak_count():
    g = GridSpec(128)
    nx, ny = 5, 4
    # small fixed jitter keeps peaks off the midpoints between cell centers (no ties)
    jx = np.random.default_rng(0).uniform(0.02, 0.18, (nx, ny))
    jy = np.random.default_rng(1).uniform(0.02, 0.18, (nx, ny))
    field = lattice_field(g, lattice_centers(nx, ny, jx, jy), 0.12 * min(1 / nx, 1 / ny))
    nb = np.max([np.roll(field, (a, b), axis=(0, 1)) for a in (-1, 0, 1) for b in (-1, 0, 1) if a or b], axis=0)
    assert int(np.sum(field > nb)) == nx * ny


def test_sample_batch():
    s = system("lo")
    batch = sample_batch("annulus", 4, Rng(6), G32, s)
    assert batch.states.shape == (4, 2, 32, 32)
    assert [m["index"] for m in batch.meta] == [0, 1, 2, 3]
    single, _ = sample_ic("annulus", Rng(6).derive(2), G32, s)
    assert np.array_equal(batch.states[2:3], single)
    with pytest.raises(ValueError):
        sample_batch("annulus", 0, Rng(6), G32)


def test_metadata_round_trips_through_trajectory_file(tmp_path):
    from rdflow.solver import generate_trajectory, load_trajectory, save_trajectory
    s = system("gs")
    ic, meta = sample_ic("dot_lattice", Rng(1), GridSpec(8), s)
    tr = generate_trajectory(ic, s, 0.001, 1, dt_ref=1e-3)
    save_trajectory(tmp_path / "t", tr, meta={"ic": meta})
    assert load_trajectory(tmp_path / "t").meta["ic"] == json.loads(json.dumps(meta))
