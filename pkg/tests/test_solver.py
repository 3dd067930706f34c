"""Solver tests: gradient identities, step sizing, iteration invariants,
termination paths, and report serialization."""

import json
import math

import numpy as np
import pytest

from eit_cs.errors import InputError, SolverBlowupError
from eit_cs.forward import ConductivityField, ForwardOperator
from eit_cs.masks import ideal_oracle
from eit_cs.phantoms import psnr
from eit_cs.protocol import build_protocol
from eit_cs.prox import RegularizerConfig
from eit_cs.solver import (DESCENT_SLACK, VARIANTS, SolveReport, SolverConfig,
                           choose_step_size, cluster_point_bound,
                           estimate_beta, estimate_gamma, grad_f, objective,
                           read_report, run_pgm, variant_name, write_report)

BOX = (0.1, 3.0)


@pytest.fixture(scope="module")
def lab(mesh8, adj8):
    """Small noise-free reconstruction problem shared by the solver tests."""
    proto = build_protocol("adjacent-adjacent", 8)
    op = ForwardOperator(mesh8, proto, z=1e-2, order=1)
    n = mesh8.n
    sigma0 = np.ones(n)
    sig = np.ones(n)
    d2 = np.sum((mesh8.vertices - np.array([0.35, 0.2])) ** 2, axis=1)
    sig[d2 < 0.3**2] = 2.0
    truth = ConductivityField(sig, bounds=BOX)
    meas = op.phi(truth.values)
    mask = ideal_oracle(truth, sigma0, adj8)
    return {
        "mesh": mesh8,
        "adj": adj8,
        "op": op,
        "sigma0": sigma0,
        "truth": truth,
        "meas": meas,
        "mask": mask,
    }


def make_reg(lab, penalty, masked):
    return RegularizerConfig(
        penalty=penalty,
        sigma0=lab["sigma0"],
        bounds=BOX,
        mask=lab["mask"] if masked else None,
        adjacency=lab["adj"] if penalty == "tv" else None,
    )


def make_config(lab, variant, lam=1e-7, **kw):
    penalty = "tv" if variant.startswith("pgm-tv") else "l1"
    reg = make_reg(lab, penalty, variant.endswith("-mo"))
    return SolverConfig(variant=variant, lam=lam, reg=reg, **kw)


class _StubJacobian:
    def __init__(self, entries):
        self.entries = np.asarray(entries, dtype=np.float64)


class ConstantOperator:
    """phi fixed at a constant vector, Jacobian fixed; the smooth part of
    the objective never moves, which isolates the termination logic."""

    def __init__(self, c, entries):
        self.c = np.asarray(c, dtype=np.float64)
        self._jac = _StubJacobian(entries)

    @property
    def m(self):
        return self.c.size

    @property
    def n(self):
        return self._jac.entries.shape[1]

    def phi(self, sigma):
        return self.c.copy()

    def jacobian(self, sigma):
        return self._jac

    def phi_and_jacobian(self, sigma):
        return self.phi(sigma), self._jac


class PoisonedOperator(ConstantOperator):
    """Finite at the anchor point, NaN everywhere else."""

    def __init__(self, c, entries, anchor):
        super().__init__(c, entries)
        self.anchor = np.asarray(anchor, dtype=np.float64)

    def phi(self, sigma):
        if np.array_equal(np.asarray(sigma, dtype=np.float64), self.anchor):
            return self.c.copy()
        return np.full(self.m, np.nan)


class RecordingOperator:
    """Pass-through wrapper that captures every field phi evaluates."""

    def __init__(self, op):
        self._op = op
        self.seen = []

    @property
    def m(self):
        return self._op.m

    @property
    def n(self):
        return self._op.n

    def phi(self, sigma):
        self.seen.append(np.array(sigma, dtype=np.float64, copy=True))
        return self._op.phi(sigma)

    def jacobian(self, sigma):
        return self._op.jacobian(sigma)

    def phi_and_jacobian(self, sigma):
        return self._op.phi_and_jacobian(sigma)


class TestSolverConfig:
    def test_variant_names(self):
        assert variant_name("l1", False) == "pgm-l1"
        assert variant_name("tv", True) == "pgm-tv-mo"
        assert tuple(variant_name(p, m) for m in (False, True)
                     for p in ("l1", "tv")) == VARIANTS

    def test_accepts_all_variants(self, lab):
        for variant in VARIANTS:
            cfg = make_config(lab, variant)
            assert cfg.variant == variant

    def test_rejects_unknown_variant(self, lab):
        with pytest.raises(InputError):
            SolverConfig(variant="pgm-l2", lam=1.0,
                         reg=make_reg(lab, "l1", False))

    def test_rejects_bad_scalars(self, lab):
        reg = make_reg(lab, "l1", False)
        for kw in ({"lam": 0.0}, {"lam": -1.0}, {"rho": -1e-3},
                   {"mu": 0.0}, {"mu": "fast"}, {"max_iters": 0},
                   {"tol": 0.0}):
            with pytest.raises(InputError):
                SolverConfig(variant="pgm-l1", lam=kw.pop("lam", 1.0),
                             reg=reg, **kw)

    def test_rejects_penalty_mismatch(self, lab):
        with pytest.raises(InputError):
            SolverConfig(variant="pgm-tv", lam=1.0,
                         reg=make_reg(lab, "l1", False))

    def test_rejects_mask_mismatch(self, lab):
        with pytest.raises(InputError):
            SolverConfig(variant="pgm-l1-mo", lam=1.0,
                         reg=make_reg(lab, "l1", False))
        with pytest.raises(InputError):
            SolverConfig(variant="pgm-l1", lam=1.0,
                         reg=make_reg(lab, "l1", True))


class TestGradF:
    def test_zero_residual_zero_rho_gives_zero(self, lab):
        sigma = lab["sigma0"]
        meas = lab["op"].phi(sigma)
        g = grad_f(sigma, meas, lam=1.0, rho=0.0, op=lab["op"])
        assert np.array_equal(g, np.zeros_like(sigma))

    def test_rho_term_is_exactly_linear(self, lab):
        # With a zero residual the data term vanishes bitwise, so the
        # quadratic term is all that remains.
        sigma = lab["truth"].values
        meas = lab["op"].phi(sigma)
        lam, rho = 0.37, 2.5
        g = grad_f(sigma, meas, lam=lam, rho=rho, op=lab["op"])
        assert np.array_equal(g, lam * rho * sigma)

    def test_rho_term_shift_against_nonzero_residual(self, lab):
        sigma = lab["sigma0"]
        meas = lab["meas"]
        lam, rho = 0.8, 0.6
        g1 = grad_f(sigma, meas, lam=lam, rho=rho, op=lab["op"])
        g0 = grad_f(sigma, meas, lam=lam, rho=0.0, op=lab["op"])
        assert np.allclose(g1 - g0, lam * rho * sigma, rtol=1e-12, atol=1e-15)

    def test_matches_directional_finite_differences(self, lab):
        op, meas = lab["op"], lab["meas"]
        lam, rho = 1e-3, 1e-2
        rng = np.random.default_rng(7)
        sigma = np.clip(lab["truth"].values + 0.05 * rng.normal(size=op.n),
                        0.2, 2.8)

        def f(vals):
            resid = op.phi(vals) - meas
            return 0.5 * float(resid @ resid) \
                + 0.5 * lam * rho * float(vals @ vals)

        g = grad_f(sigma, meas, lam=lam, rho=rho, op=op)
        h = 1e-5
        for _ in range(10):
            d = rng.normal(size=op.n)
            d /= np.linalg.norm(d)
            fd = (f(sigma + h * d) - f(sigma - h * d)) / (2.0 * h)
            exact = float(g @ d)
            assert fd == pytest.approx(exact, rel=1e-5)


class TestChooseStepSize:
    def test_unit_beta_no_quadratic(self):
        assert choose_step_size(1.0, 1.0, 0.0) == pytest.approx(0.495)

    def test_quadratic_branch_binds(self):
        mu = choose_step_size(1.0, 1e6, 1.0)
        assert mu == pytest.approx(0.99 / (2e6))

    def test_rejects_nonpositive_beta(self):
        for bad in (0.0, -1.0):
            with pytest.raises(InputError):
                choose_step_size(bad, 1.0, 0.0)

    def test_auto_step_descends_from_start(self, lab):
        cfg = make_config(lab, "pgm-l1", lam=1e-7, max_iters=10)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
        diffs = np.diff(rep.objective_trace)
        assert diffs.size >= 1
        assert np.all(diffs < 0.0)


class TestEstimateBeta:
    def test_matches_dense_spectral_norm(self, lab):
        # power iteration approaches the top eigenvalue from below; the
        # disk's rotational symmetry makes the top pair nearly degenerate,
        # which slows the last digits
        jac = lab["op"].jacobian(lab["sigma0"]).entries
        s_max = np.linalg.svd(jac, compute_uv=False)[0]
        est = estimate_beta(lab["op"], lab["sigma0"])
        assert est <= s_max**2 * (1.0 + 1e-9)
        assert est >= s_max**2 * (1.0 - 1e-4)

    def test_support_restriction_matches_submatrix(self, lab):
        support = np.flatnonzero(lab["mask"].bits)
        jac = lab["op"].jacobian(lab["sigma0"]).entries[:, support]
        s_max = np.linalg.svd(jac, compute_uv=False)[0]
        est = estimate_beta(lab["op"], lab["sigma0"], support=support)
        assert est == pytest.approx(s_max**2, rel=1e-6)

    def test_bool_support_equals_index_support(self, lab):
        support = np.flatnonzero(lab["mask"].bits)
        flags = np.zeros(lab["op"].n, dtype=bool)
        flags[support] = True
        a = estimate_beta(lab["op"], lab["sigma0"], support=support)
        b = estimate_beta(lab["op"], lab["sigma0"], support=flags)
        assert a == b

    def test_restricted_is_much_smaller_than_global(self, lab):
        # Interior columns carry far less sensitivity than boundary ones;
        # this gap is why masked solves need the restricted constant.
        full = estimate_beta(lab["op"], lab["sigma0"])
        sub = estimate_beta(lab["op"], lab["sigma0"],
                            support=np.flatnonzero(lab["mask"].bits))
        assert sub < 0.1 * full

    def test_rejects_empty_support(self, lab):
        with pytest.raises(InputError):
            estimate_beta(lab["op"], lab["sigma0"],
                          support=np.array([], dtype=int))


class TestObjective:
    def test_truth_equals_reference_leaves_quadratic_only(self, lab):
        op = lab["op"]
        sigma0 = lab["sigma0"]
        meas = op.phi(sigma0)
        cfg = make_config(lab, "pgm-l1", lam=0.5, rho=2.0)
        val = objective(sigma0, meas, cfg, op)
        assert val == 0.5 * 0.5 * 2.0 * float(sigma0 @ sigma0)

    def test_outside_box_is_infinite(self, lab):
        cfg = make_config(lab, "pgm-l1")
        bad = lab["sigma0"].copy()
        bad[0] = BOX[1] + 1.0
        assert objective(bad, lab["meas"], cfg, lab["op"]) == math.inf

    def test_off_mask_mismatch_is_infinite(self, lab):
        cfg = make_config(lab, "pgm-l1-mo")
        off = np.flatnonzero(np.asarray(lab["mask"].bits) == 0)
        bad = lab["sigma0"].copy()
        bad[off[0]] += 0.25
        assert objective(bad, lab["meas"], cfg, lab["op"]) == math.inf


class TestRunPgm:
    def test_near_stationary_start_stays_put(self, lab):
        meas = lab["op"].phi(lab["sigma0"])
        cfg = make_config(lab, "pgm-l1", lam=1e-10, tol=1e-6, max_iters=50)
        rep = run_pgm(lab["sigma0"], meas, cfg, lab["op"])
        assert rep.termination == "converged"
        assert np.linalg.norm(rep.sigma - lab["sigma0"]) \
            / np.linalg.norm(lab["sigma0"]) < 1e-5

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_objective_descends_everywhere(self, lab, variant):
        cfg = make_config(lab, variant, lam=1e-7, max_iters=40)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
        diffs = np.diff(rep.objective_trace)
        assert np.all(diffs <= DESCENT_SLACK)
        assert rep.objective_trace[-1] <= rep.objective_trace[0]

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_trace_lengths_match_iterations(self, lab, variant):
        cfg = make_config(lab, variant, lam=1e-7, max_iters=15)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
        assert len(rep.objective_trace) == rep.iterations + 1
        assert len(rep.change_trace) == rep.iterations + 1

    def test_every_evaluated_candidate_is_feasible(self, lab):
        recorder = RecordingOperator(lab["op"])
        cfg = make_config(lab, "pgm-tv-mo", lam=1e-6, max_iters=25)
        run_pgm(lab["sigma0"], lab["meas"], cfg, recorder)
        off = np.asarray(lab["mask"].bits) == 0
        assert recorder.seen
        for vals in recorder.seen:
            assert vals.min() >= BOX[0] and vals.max() <= BOX[1]
            assert np.array_equal(vals[off], lab["sigma0"][off])

    def test_masked_output_pins_off_support_exactly(self, lab):
        cfg = make_config(lab, "pgm-l1-mo", lam=1e-7, max_iters=60)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
        off = np.asarray(lab["mask"].bits) == 0
        assert np.array_equal(rep.sigma[off], lab["sigma0"][off])
        assert not np.array_equal(rep.sigma, lab["sigma0"])

    def test_mask_raises_reconstruction_quality(self, lab):
        truth = lab["truth"].values
        scores = {}
        for variant in ("pgm-tv", "pgm-tv-mo"):
            cfg = make_config(lab, variant, lam=1e-7, max_iters=200)
            rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
            scores[variant] = psnr(rep.sigma, truth)
        assert scores["pgm-tv-mo"] > scores["pgm-tv"]

    def test_rejects_bad_measurements(self, lab):
        cfg = make_config(lab, "pgm-l1")
        with pytest.raises(InputError):
            run_pgm(lab["sigma0"], lab["meas"][:-1], cfg, lab["op"])
        bad = lab["meas"].copy()
        bad[0] = np.inf
        with pytest.raises(InputError):
            run_pgm(lab["sigma0"], bad, cfg, lab["op"])

    def test_infeasible_init_is_projected(self, lab):
        init = lab["sigma0"].copy()
        init[:4] = BOX[1] + 5.0
        cfg = make_config(lab, "pgm-l1", lam=1e-7, max_iters=5)
        rep = run_pgm(init, lab["meas"], cfg, lab["op"])
        assert rep.sigma.max() <= BOX[1]
        assert np.isfinite(rep.objective_trace[0])


class TestTerminationPaths:
    def _stub_reg(self, n=3):
        return RegularizerConfig(penalty="l1", sigma0=np.full(n, 0.5),
                                 bounds=(0.0, 1.0))

    def test_stall_when_no_step_descends(self):
        # The smooth part is constant and the gradient points away from
        # the reference, so every candidate raises the penalty and no
        # halving can help.
        op = ConstantOperator(c=np.zeros(3), entries=np.eye(3))
        meas = np.ones(3)
        cfg = SolverConfig(variant="pgm-l1", lam=0.1, reg=self._stub_reg(),
                           rho=0.0, mu=1.0, max_iters=20)
        rep = run_pgm(np.full(3, 0.5), meas, cfg, op)
        assert rep.termination == "stalled"
        assert rep.iterations == 0
        assert np.array_equal(rep.sigma, np.full(3, 0.5))

    def test_blowup_at_initial_point_carries_report(self):
        op = ConstantOperator(c=np.full(3, np.nan), entries=np.eye(3))
        cfg = SolverConfig(variant="pgm-l1", lam=0.1, reg=self._stub_reg(),
                           rho=0.0, mu=1.0, max_iters=20)
        with pytest.raises(SolverBlowupError) as err:
            run_pgm(np.full(3, 0.5), np.ones(3), cfg, op)
        rep = err.value.report
        assert rep is not None
        assert rep.termination == "blowup"
        assert rep.iterations == 0

    def test_blowup_mid_run_carries_partial_trace(self):
        anchor = np.full(3, 0.5)
        op = PoisonedOperator(c=np.zeros(3), entries=np.eye(3), anchor=anchor)
        # gradient pulls toward the reference, so the candidate moves and
        # hits the poisoned region
        cfg = SolverConfig(variant="pgm-l1", lam=1e-6,
                           reg=RegularizerConfig(penalty="l1",
                                                 sigma0=np.full(3, 0.25),
                                                 bounds=(0.0, 1.0)),
                           rho=0.0, mu=0.5, max_iters=20)
        with pytest.raises(SolverBlowupError) as err:
            run_pgm(anchor, np.ones(3), cfg, op)
        rep = err.value.report
        assert rep.termination == "blowup"
        assert math.isfinite(rep.objective_trace[0])
        assert not math.isfinite(rep.objective_trace[-1])
        assert math.isnan(rep.change_trace[-1])


class TestSolveReport:
    def test_rejects_mismatched_trace_lengths(self):
        with pytest.raises(InputError):
            SolveReport(sigma=np.ones(2), objective_trace=(1.0, 0.5),
                        change_trace=(0.0,), mu=0.1, iterations=1,
                        termination="converged", variant="pgm-l1",
                        lam=1.0, rho=0.0)

    def test_round_trips_through_json(self, lab, tmp_path):
        cfg = make_config(lab, "pgm-l1-mo", lam=1e-7, max_iters=10)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"],
                      alpha_hat=0.5, gamma_hat=0.1)
        path = tmp_path / "report.json"
        write_report(rep, path)
        back = read_report(path)
        assert np.array_equal(back.sigma, rep.sigma)
        assert back.objective_trace == rep.objective_trace
        assert back.change_trace == rep.change_trace
        assert back.mu == rep.mu
        assert back.termination == rep.termination
        assert back.variant == rep.variant
        assert back.beta_hat == rep.beta_hat
        assert back.q == rep.q

    def test_contraction_estimate_recorded(self, lab):
        cfg = make_config(lab, "pgm-l1", lam=1e-7, max_iters=5, rho=0.0)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"],
                      alpha_hat=0.2, gamma_hat=0.05)
        expect = 1.0 - rep.mu * 0.2 + 2.0 * rep.mu * 0.05
        assert rep.q == pytest.approx(expect)

    def test_file_is_plain_json(self, lab, tmp_path):
        cfg = make_config(lab, "pgm-l1", lam=1e-7, max_iters=3)
        rep = run_pgm(lab["sigma0"], lab["meas"], cfg, lab["op"])
        path = tmp_path / "report.json"
        write_report(rep, path)
        payload = json.loads(path.read_text())
        assert payload["variant"] == "pgm-l1"
        assert len(payload["objective_trace"]) == payload["iterations"] + 1


class TestEstimateGamma:
    def test_nonnegative_and_deterministic(self, lab):
        a = estimate_gamma(lab["op"], BOX, n_pairs=4, seed=3)
        b = estimate_gamma(lab["op"], BOX, n_pairs=4, seed=3)
        assert a >= 0.0 and math.isfinite(a)
        assert a == b

    def test_shrinking_box_shrinks_remainder(self, lab):
        wide = estimate_gamma(lab["op"], BOX, n_pairs=5, seed=0)
        narrow = estimate_gamma(lab["op"], (0.95, 1.05), n_pairs=5, seed=0)
        assert narrow < wide

    def test_support_restriction_needs_reference(self, lab):
        support = np.flatnonzero(lab["mask"].bits)
        with pytest.raises(InputError):
            estimate_gamma(lab["op"], BOX, n_pairs=2, support=support)
        val = estimate_gamma(lab["op"], BOX, n_pairs=2, support=support,
                             sigma0=lab["sigma0"])
        assert val >= 0.0 and math.isfinite(val)


class TestClusterPointBound:
    def test_positive_denominator_reports_both_sides(self):
        out = cluster_point_bound(np.zeros(3), np.full(3, 0.1),
                                  objective_at_true=1.0, alpha_hat=1.0,
                                  lam=0.0, rho=0.0, gamma_hat=0.25)
        assert out["condition_holds"]
        assert out["denominator"] == pytest.approx(0.5)
        assert out["rhs"] == pytest.approx(8.0)
        assert out["lhs"] == pytest.approx(0.03)
        assert out["holds"] is True

    def test_violated_bound_reports_false(self):
        out = cluster_point_bound(np.zeros(2), np.full(2, 10.0),
                                  objective_at_true=1e-3, alpha_hat=1.0,
                                  lam=0.0, rho=0.0, gamma_hat=0.0)
        assert out["holds"] is False

    def test_nonpositive_denominator_marks_condition(self):
        out = cluster_point_bound(np.zeros(2), np.ones(2),
                                  objective_at_true=1.0, alpha_hat=0.1,
                                  lam=0.0, rho=0.0, gamma_hat=0.5)
        assert out["condition_holds"] is False
        assert out["rhs"] == math.inf
        assert out["holds"] is None
