import numpy as np
import pytest

from asyncadmm.problems import solve_reference
from asyncadmm.protocol import ProtocolConfig, StoppingRule
from asyncadmm.simnet import Distribution, FifoLink, SimConfig, sim_run

from conftest import quad_problem


def make_cfg(rho=1.0, gamma=0.0, tau=1, a_min=1, max_iter=50, **stop_kw):
    return ProtocolConfig(rho=rho, gamma=gamma, tau=tau, a_min=a_min,
                          stop=StoppingRule(max_iter=max_iter, **stop_kw))


class TestDistributions:
    def test_fixed_uniform_lognormal(self, rng):
        assert Distribution.fixed(2.0).sample(rng) == 2.0
        u = Distribution.uniform(1.0, 3.0).sample(rng)
        assert 1.0 <= u <= 3.0
        assert Distribution.lognormal(0.0, 1.0).sample(rng) > 0.0

    def test_dict_round_trip(self):
        for d in (Distribution.fixed(1.5), Distribution.uniform(0.5, 2.0),
                  Distribution.lognormal(-0.3, 0.8)):
            assert Distribution.from_dict(d.to_dict()) == d

    def test_nonpositive_compute_rejected(self):
        sim = SimConfig(compute=Distribution.fixed(0.0))
        with pytest.raises(ValueError):
            sim.compute_for(2)

    def test_negative_latency_rejected(self):
        sim = SimConfig(latency=Distribution.uniform(-1.0, 1.0))
        with pytest.raises(ValueError):
            sim.compute_for(2)


class TestFifoLink:
    def test_clamps_overtaking(self):
        link = FifoLink()
        t1 = link.schedule(0.0, 5.0)
        t2 = link.schedule(1.0, 0.5)  # would overtake without the clamp
        assert t1 == 5.0 and t2 == 5.0
        t3 = link.schedule(6.0, 0.0)
        assert t3 == 6.0


class TestSimRuns:
    def test_equal_times_full_arrivals(self):
        p = quad_problem(seed=3, N=4, n=3)
        cfg = make_cfg(tau=1, a_min=4, max_iter=20)
        sim = SimConfig(seed=0, compute=Distribution.fixed(1.0))
        tr = sim_run(p, cfg, sim)
        assert all(a == (0, 1, 2, 3) for a in tr.arrivals)

    def test_replay_determinism(self):
        p = quad_problem(seed=3, N=3, n=3)
        cfg = make_cfg(tau=4, a_min=1, max_iter=60)
        sim = SimConfig(seed=77, compute=Distribution.lognormal(0.0, 0.6),
                        latency=Distribution.uniform(0.0, 0.2))
        t1 = sim_run(p, cfg, sim)
        t2 = sim_run(p, cfg, sim)
        assert t1.arrivals == t2.arrivals
        assert t1.times == t2.times
        for k in range(t1.iterations + 1):
            assert np.array_equal(t1.x0(k), t2.x0(k))
            assert np.array_equal(t1.x_cache(k), t2.x_cache(k))
        assert t1.to_csv() == t2.to_csv()

    def test_two_speed_arrival_ratio(self):
        # fast worker (1s) should arrive ~10x more often than the slow (10s)
        p = quad_problem(seed=3, N=2, n=2)
        cfg = make_cfg(tau=11, a_min=1, max_iter=200)
        sim = SimConfig(seed=0, compute=[Distribution.fixed(1.0),
                                         Distribution.fixed(10.0)],
                        master_compute=Distribution.fixed(1e-3))
        tr = sim_run(p, cfg, sim)
        fast = sum(1 for a in tr.arrivals if 0 in a)
        slow = sum(1 for a in tr.arrivals if 1 in a)
        assert 9 <= fast / slow <= 11

    def test_matches_hand_schedule_reference(self):
        # independent event-schedule oracle for two fixed-speed workers,
        # zero latency, no staleness constraint (tau large); speeds are
        # non-commensurate so no two deliveries ever coincide
        c = [1.0, 9.7]
        mc = 0.5
        arrivals_ref = []
        report_at = [c[0], c[1]]  # after the initial broadcast at t=0
        master_free = 0.0
        for _ in range(40):
            # the master wakes at the earliest report after it is free and
            # batches everything that arrived up to that moment
            t = max(min(report_at), master_free)
            batch = tuple(i for i in range(2) if report_at[i] <= t)
            done = t + mc
            arrivals_ref.append(batch)
            for i in batch:
                report_at[i] = done + c[i]
            master_free = done
        p = quad_problem(seed=3, N=2, n=2)
        cfg = make_cfg(tau=1000, a_min=1, max_iter=40)
        sim = SimConfig(seed=0, compute=[Distribution.fixed(c[0]),
                                         Distribution.fixed(c[1])],
                        master_compute=Distribution.fixed(mc))
        tr = sim_run(p, cfg, sim)
        assert tr.arrivals == arrivals_ref

    def test_clock_accounting_identity(self):
        p = quad_problem(seed=5, N=3, n=3)
        cfg = make_cfg(tau=3, a_min=1, max_iter=80)
        sim = SimConfig(seed=11, compute=Distribution.lognormal(0.0, 0.5),
                        latency=Distribution.uniform(0.0, 0.3),
                        master_compute=Distribution.uniform(0.001, 0.01))
        tr = sim_run(p, cfg, sim)
        for actor, acct in tr.clock.items():
            assert acct.compute + acct.wait == pytest.approx(acct.end, rel=1e-9), actor

    def test_broadcast_discipline(self):
        # one broadcast per consumed report (plus the initial one), except
        # that the stopping iteration sends Shutdown instead
        p = quad_problem(seed=5, N=3, n=3)
        cfg = make_cfg(tau=4, a_min=1, max_iter=60)
        sim = SimConfig(seed=2, compute=Distribution.lognormal(0.0, 0.8))
        tr = sim_run(p, cfg, sim)
        got = tr.meta["broadcasts_received"]
        last = set(tr.arrivals[-1])
        for i in range(3):
            consumed = len(tr.arrivals_of(i))
            assert got[i] == 1 + consumed - (1 if i in last else 0)

    def test_fifo_under_random_latency(self):
        # random latencies with a final broadcast/shutdown race: the run must
        # still terminate cleanly with every invariant intact
        p = quad_problem(seed=5, N=3, n=3)
        cfg = make_cfg(tau=5, a_min=1, max_iter=25)
        sim = SimConfig(seed=9, compute=Distribution.lognormal(0.0, 1.0),
                        latency=Distribution.uniform(0.0, 2.0))
        tr = sim_run(p, cfg, sim)
        assert tr.iterations == 25
        assert tr.bounded_delay_violations() == []
        assert tr.d_recursion_violations() == []

    def test_late_reports_are_discarded_and_logged(self):
        p = quad_problem(seed=5, N=2, n=2)
        cfg = make_cfg(tau=50, a_min=1, max_iter=3)
        sim = SimConfig(seed=0, compute=[Distribution.fixed(1.0),
                                         Distribution.fixed(100.0)],
                        master_compute=Distribution.fixed(1e-3))
        tr = sim_run(p, cfg, sim)
        # the slow worker's only report lands long after max_iter fired
        assert tr.discarded_reports and tr.discarded_reports[0][0] == 1

    def test_single_worker_matches_reference(self):
        p = quad_problem(seed=8, N=1, n=3)
        ref = solve_reference(p, 1e-12)
        cfg = make_cfg(rho=2.0, tau=1, a_min=1, max_iter=2000,
                       consensus_tol=1e-9, stationarity_tol=1e-9)
        tr = sim_run(p, cfg, SimConfig(seed=1, compute=Distribution.fixed(1.0)))
        assert tr.objective[-1] == pytest.approx(ref.f_star, abs=1e-6)

    def test_bounded_delay_over_seeds(self):
        p = quad_problem(seed=2, N=4, n=2)
        cfg = make_cfg(tau=4, a_min=1, max_iter=120)
        for seed in range(5):
            sim = SimConfig(seed=seed, compute=Distribution.lognormal(0.0, 1.0))
            tr = sim_run(p, cfg, sim)
            assert tr.bounded_delay_violations() == []
            assert tr.d_recursion_violations() == []
            assert tr.stale_copy_violations() == []
