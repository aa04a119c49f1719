import numpy as np
import pytest

from asyncadmm.problems import solve_reference
from asyncadmm.protocol import ProtocolConfig, StoppingRule, run_scheduled
from asyncadmm.trace import CSV_COLUMNS, Trace, read_trace_csv

from conftest import quad_problem


def sample_trace(store_history=True, iters=12):
    p = quad_problem(seed=3, N=3, n=2)
    ref = solve_reference(p, 1e-10)
    cfg = ProtocolConfig(rho=2.0, tau=3, a_min=1,
                         stop=StoppingRule(max_iter=iters))
    return run_scheduled(p, cfg, lambda k: [k % 3], iters, f_star=ref.f_star,
                         store_history=store_history)


class TestCsv:
    def test_schema_and_round_trip(self, tmp_path):
        tr = sample_trace()
        path = tmp_path / "trace.csv"
        tr.write_csv(path)
        records = read_trace_csv(path)
        assert len(records) == tr.iterations + 1
        assert records[0].k == 0 and records[0].arrivals == 0
        for k, rec in enumerate(records):
            assert rec.objective == tr.objective[k]
            assert rec.delta == tr.delta(k)
            assert rec.consensus_err == tr.consensus_err(k)
        header = path.read_text().splitlines()[0]
        assert tuple(header.split(",")) == CSV_COLUMNS

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_trace_csv(path)


class TestNpz:
    def test_round_trip(self, tmp_path):
        tr = sample_trace()
        path = tmp_path / "trace.npz"
        tr.save_npz(path)
        back = Trace.load_npz(path)
        assert back.arrivals == tr.arrivals
        assert back.f_star == tr.f_star
        assert back.meta["backend"] == "scheduled"
        for k in range(tr.iterations + 1):
            assert np.array_equal(back.x0(k), tr.x0(k))
            assert np.array_equal(back.x_cache(k), tr.x_cache(k))
            assert np.array_equal(back.lam_cache(k), tr.lam_cache(k))
        assert back.lagrangian == tr.lagrangian
        assert [d.tolist() for d in back.d_tops] == [d.tolist() for d in tr.d_tops]

    def test_round_trip_without_history(self, tmp_path):
        tr = sample_trace(store_history=False)
        path = tmp_path / "trace.npz"
        tr.save_npz(path)
        back = Trace.load_npz(path)
        assert not back.store_history
        assert np.array_equal(back.x_cache(back.iterations),
                              tr.x_cache(tr.iterations))
        with pytest.raises(ValueError):
            back.x_cache(0)


class TestIndexHelpers:
    def test_kbar_ktilde_khat(self):
        tr = sample_trace(iters=9)  # arrivals: 0,1,2,0,1,2,...
        assert tr.kbar(0, 3) == 0
        assert tr.kbar(0, 6) == 3
        assert tr.ktilde(1, 3) == 1
        assert tr.khat(1, 3) == -1   # worker 1's arrival at 1 was its first
        assert tr.ktilde(1, 6) == 4
        assert tr.khat(1, 6) == 1
        assert tr.kbar(2, 2) == -1   # first arrival

    def test_scalar_telemetry_matches_history(self):
        tr = sample_trace()
        for k in range(tr.iterations + 1):
            direct = float(np.sum((tr.x_cache(k) - tr.x0(k)) ** 2))
            assert tr.consensus_err(k) == pytest.approx(direct, rel=1e-15)
