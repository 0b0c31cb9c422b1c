"""Smoke tests for the python bindings: build a tiny model, run the
solvers, and sanity-check the exposed operations."""

import math
import sys

import numpy as np

import epinf


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def make_tiny_model(seed=3, n=4, m=6, q=5, tau=1.0, eta=0.9):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, n)) / math.sqrt(n)
    b = rng.standard_normal((q, n)) / math.sqrt(n)
    model = epinf.ModelSpec()
    model.X = epinf.dense_op(x)
    model.B = epinf.dense_op(b)
    model.y = rng.standard_normal(m)
    model.noise_var = 0.8
    model.sites = [epinf.site("laplace", tau) for _ in range(q)]
    model.eta = eta
    model.validate()
    return model


def test_operators():
    w = epinf.wavelet_op(8, 8, 2)
    v = np.random.default_rng(0).standard_normal(64)
    assert approx(np.linalg.norm(w.apply(v)), np.linalg.norm(v), 1e-12)
    back = w.apply_adjoint(w.apply(v))
    assert np.max(np.abs(back - v)) < 1e-10

    d = epinf.diff_op(4, 4)
    assert d.rows == 32
    assert np.max(np.abs(d.apply(np.ones(16)))) == 0.0

    st = epinf.stacked_op([w, epinf.diff_op(8, 8)])
    assert st.rows == 3 * 64


def test_tilted_moments():
    site = epinf.site("flat")
    m = epinf.tilted_moments(2.0, 1.0, site, 1.0)
    assert approx(m.mean, 0.5, 1e-12)
    assert approx(m.second_moment, 0.75, 1e-12)
    lap = epinf.site("laplace", 1.0)
    sym = epinf.tilted_moments(1.0, 0.0, lap, 1.0)
    assert abs(sym.mean) < 1e-12
    assert approx(sym.log_zhat, 0.271064068755351, 1e-10)


def test_gauss_backend():
    model = make_tiny_model()
    q = model.B.rows
    g = epinf.build_gauss_state(model, np.full(q, 0.5), np.zeros(q))
    assert g.z.shape == (q,)
    assert np.all(g.z > 0)
    assert np.all(g.diag_ainv > 0)
    # dual bound tight at the construction point
    assert approx(g.gstar, float(np.dot(g.z, np.full(q, 0.5))) - g.logdet, 1e-10)


def test_solvers_agree():
    model = make_tiny_model()
    fast = epinf.run_solver(model, solver="fast")
    seq = epinf.run_solver(model, solver="sequential")
    assert fast.converged and seq.converged
    assert not fast.fallback_used
    assert fast.residual < 1e-5
    assert abs(epinf.delta_metric(fast.phi_star, seq.phi_star)) < 1e-4
    assert len(fast.trace) >= 1
    assert fast.n_var_comp >= 1


def test_vb_baseline():
    model = make_tiny_model(tau=1.2, eta=1.0)
    vb = epinf.vb_solve(model)
    assert vb.converged
    assert np.all(vb.pi > 0)
    # the bound value sits above the EP energy estimate's -2 log Z scale
    assert math.isfinite(vb.phi_vb)


def test_harness_config():
    model = epinf.build_model_from_config(
        {
            "experiment": "cartesian_mri",
            "height": "16",
            "width": "16",
            "phase_encodes": "4",
            "noise_var": "1e-3",
            "seed": "5",
        }
    )
    assert model.X.rows == 64  # 4 columns x 16
    assert model.B.rows == 3 * 256


def main():
    tests = [(k, v) for k, v in sorted(globals().items()) if k.startswith("test_")]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"ok   {name}")
        except Exception as e:  # noqa: BLE001
            print(f"FAIL {name}: {e!r}")
            failed += 1
    return failed


if __name__ == "__main__":
    sys.exit(main())
