import numpy as np
import pytest

from fedbatman import batman, fl, netsim, nn
from fedbatman.core import SeededRng
from fedbatman.netsim import EventQueue, FlSettings, Link, LinkModel, OgmSettings, Scenario


class TestQueue:
    def test_equal_time_fifo(self):
        q = EventQueue()
        netsim.schedule(q, 1.0, "a")
        netsim.schedule(q, 1.0, "b")
        netsim.schedule(q, 0.5, "c")
        assert [q.pop().kind for _ in range(3)] == ["c", "a", "b"]

    def test_current_time_allowed(self):
        q = EventQueue()
        netsim.schedule(q, 2.0, "a")
        q.pop()
        netsim.schedule(q, 2.0, "b")
        assert q.pop().time == 2.0

    def test_past_rejected(self):
        q = EventQueue()
        netsim.schedule(q, 2.0, "a")
        q.pop()
        with pytest.raises(netsim.CausalityError, match="causality violation"):
            netsim.schedule(q, 2.0 - 1e-9, "b")

    def test_total_order(self):
        q = EventQueue()
        rng = SeededRng(0)
        for t in rng.uniform(0, 5, 200):
            q.schedule(float(np.floor(t)), "x")
        keys = [(e.time, e.seq) for e in (q.pop() for _ in range(200))]
        assert keys == sorted(keys) and len(set(keys)) == 200


class TestSend:
    def test_delivery_time(self):
        assert netsim.send(Link(latency_s=0.1), "p", 5.0, SeededRng(0)) == 5.1

    def test_always_drop(self):
        rng = SeededRng(0)
        assert all(netsim.send(Link(drop_prob=1.0), "p", 0.0, rng) is None for _ in range(1000))

    def test_disconnected(self):
        assert netsim.send(Link(connected=False), "p", 0.0, SeededRng(0)) is None

    def test_monte_carlo(self):
        rng = SeededRng(42)
        delivered = sum(netsim.send(Link(drop_prob=0.5), "p", 0.0, rng) is not None for _ in range(10_000))
        assert abs(delivered / 10_000 - 0.5) < 0.02

    def test_deterministic(self):
        a = [netsim.send(Link(drop_prob=0.3), "p", 0.0, r) for r in [SeededRng(1)] for _ in range(50)]
        b = [netsim.send(Link(drop_prob=0.3), "p", 0.0, r) for r in [SeededRng(1)] for _ in range(50)]
        assert a == b

    def test_link_validation(self):
        with pytest.raises(ValueError):
            Link(latency_s=-1)
        with pytest.raises(ValueError):
            Link(drop_prob=1.5)
        with pytest.raises(ValueError):
            LinkModel(3).set(0, 0, Link())

    def test_link_model(self):
        model = LinkModel.from_edges(4, [(0, 1), (1, 2)])
        assert model.neighbors(1) == [0, 2]
        assert not model.link(0, 3).connected


def baseline_scenario(trace, **kw):
    return Scenario(trace=trace, **kw)


@pytest.fixture(scope="module")
def trained_model():
    from fedbatman.dataset import make_fig3_dataset, make_windows
    cfg = nn.LstmConfig()
    samples = make_windows(make_fig3_dataset(), 4)
    return fl.train_centralized(samples, cfg, nn.init_params_from_seed(cfg, 0), seed=0).params, cfg


class TestRouting:
    def test_baseline_fig3(self, fig3_trace):
        metrics = netsim.run_scenario(baseline_scenario(fig3_trace))
        assert len(metrics.steps) == 46
        assert metrics.switch_times() == [20]
        assert metrics.steps[-1].switches == 1

    def test_baseline_matches_selector(self, fig3_trace):
        metrics = netsim.run_scenario(baseline_scenario(fig3_trace))
        for step in metrics.steps:
            assert step.chosen_route == batman.select_next_hop_baseline(fig3_trace.costs[step.t])
            assert step.step_cost == fig3_trace.costs[step.t, step.chosen_route]

    def test_cumulative_cost(self, fig3_trace):
        metrics = netsim.run_scenario(baseline_scenario(fig3_trace))
        expected = sum(min(fig3_trace.costs[t]) for t in range(4, 50))
        assert metrics.cumulative_cost == pytest.approx(expected, abs=1e-9)

    def test_predictive_switch_window(self, fig3_trace, trained_model):
        params, cfg = trained_model
        pred = netsim.run_scenario(baseline_scenario(
            fig3_trace, selector=batman.SelectorMode("predictive", params, cfg)))
        base = netsim.run_scenario(baseline_scenario(fig3_trace))
        assert 16 <= pred.first_switch() <= 20
        assert pred.cumulative_cost <= base.cumulative_cost + 1e-9
        summary = netsim.compare_runs(base, pred)
        assert 0 <= summary["switch_time_delta"] <= 4

    def test_ogm_cost_source(self):
        links = LinkModel.from_edges(4, [(1, 2), (1, 3), (2, 0), (3, 0)])
        links.set(3, 0, Link(drop_prob=0.5))
        sc = Scenario(num_nodes=4, links=links, cost_source="ogm", destination=0, route_neighbors=(2, 3),
                      ticks=20, seed=1)
        metrics = netsim.run_scenario(sc)
        assert len(metrics.steps) == 16
        # the lossy branch via node 3 never beats the clean one
        assert all(s.chosen_route == 0 for s in metrics.steps[4:])

    def test_scenario_validation(self, fig3_trace):
        with pytest.raises(ValueError):
            Scenario(num_nodes=1, trace=fig3_trace)
        with pytest.raises(ValueError, match="trace too short"):
            Scenario(trace=fig3_trace.__class__(np.ones((4, 2))))
        with pytest.raises(ValueError):
            Scenario()
        with pytest.raises(ValueError):
            Scenario(trace=fig3_trace, cost_source="ogm")
        with pytest.raises(ValueError):
            Scenario(trace=fig3_trace, decision_node=5)


class TestConservation:
    @pytest.mark.parametrize("drop", [0.0, 0.2, 0.7])
    def test_packets(self, fig3_trace, drop):
        sc = baseline_scenario(fig3_trace, links=LinkModel.full_mesh(4, drop_prob=drop), num_nodes=4, seed=3)
        metrics = netsim.run_scenario(sc)
        c = metrics.counters
        assert c["sent"] > 0 and c["sent"] == c["delivered"] + c["dropped"]
        if drop == 0.0:
            assert c["dropped"] == 0

    def test_ogm_flood_bounds(self, fig3_trace):
        metrics = netsim.run_scenario(baseline_scenario(fig3_trace, num_nodes=5,
                                                        links=LinkModel.from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])))
        assert metrics.ogm_stats
        for (orig, _), stats in metrics.ogm_stats.items():
            assert stats["forwards"] <= 4
            assert orig not in stats["reached"]
            assert stats["first_seen"] == len(stats["reached"]) <= 4


def fl_scenario(samples, **fl_kw):
    return Scenario(num_nodes=3, fl=FlSettings(**fl_kw), fl_samples=samples, model_config=nn.LstmConfig(hidden_size=4),
                    ogm=OgmSettings(enabled=False), seed=0)


class TestFederatedRounds:
    def test_ten_rounds(self, fig3_samples):
        metrics = netsim.run_scenario(fl_scenario(fig3_samples))
        assert [r.round for r in metrics.rounds] == list(range(1, 11))
        assert metrics.retries == 0
        assert all(r.elapsed_ms > 0 for r in metrics.rounds)

    def test_in_band_matches_direct(self, fig3_samples):
        cfg = nn.LstmConfig(hidden_size=4)
        metrics = netsim.run_scenario(fl_scenario(fig3_samples))
        init = nn.init_params_from_seed(cfg, 0)
        params, reports, _ = fl.run_training(fl.make_clients(fig3_samples, 2, init, 0), init, 10, 5, cfg)
        assert metrics.final_params == params
        assert metrics.global_losses() == [r.global_loss for r in reports]

    def test_out_of_band_and_parallel(self, fig3_samples):
        ref = netsim.run_scenario(fl_scenario(fig3_samples, rounds=3))
        assert netsim.run_scenario(fl_scenario(fig3_samples, rounds=3, in_band=False)).final_params == ref.final_params
        assert netsim.run_scenario(fl_scenario(fig3_samples, rounds=3, parallel=True)).final_params == ref.final_params

    def test_round_failed(self, fig3_samples):
        sc = fl_scenario(fig3_samples, rounds=2)
        sc.links = LinkModel.full_mesh(3, drop_prob=1.0)
        with pytest.raises(netsim.RoundFailed, match="round failed"):
            netsim.run_scenario(sc)

    def test_retry_recovers_identically(self, fig3_samples):
        # find a seed whose drops force at least one retry, then check training is unaffected
        for seed in range(20):
            sc = fl_scenario(fig3_samples, rounds=4)
            sc.links = LinkModel.full_mesh(3, drop_prob=0.1)
            sc.seed = seed
            try:
                metrics = netsim.run_scenario(sc)
            except netsim.RoundFailed:
                continue
            if metrics.retries:
                break
        else:
            pytest.fail("no seed produced a recoverable retry")
        clean = fl_scenario(fig3_samples, rounds=4)
        clean.seed = seed
        assert metrics.final_params == netsim.run_scenario(clean).final_params

    def test_convergence_stop(self, fig3_samples):
        metrics = netsim.run_scenario(fl_scenario(fig3_samples, convergence_tol=1e9))
        assert len(metrics.rounds) == 2


class TestOutputs:
    def test_metrics_csv_deterministic(self, fig3_trace, tmp_path):
        for name in ("a.csv", "b.csv"):
            sc = baseline_scenario(fig3_trace, links=LinkModel.full_mesh(3, drop_prob=0.3), seed=9)
            netsim.write_metrics_csv(netsim.run_scenario(sc), tmp_path / name)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header == "t,mode,chosen_route,step_cost,cumulative_cost,switches"

    def test_metrics_round_trip(self, fig3_trace, tmp_path):
        metrics = netsim.run_scenario(baseline_scenario(fig3_trace))
        netsim.write_metrics_csv(metrics, tmp_path / "m.csv")
        assert netsim.read_metrics_csv(tmp_path / "m.csv").steps == metrics.steps

    def test_sim_rounds_round_trip(self, fig3_samples, tmp_path):
        metrics = netsim.run_scenario(fl_scenario(fig3_samples, rounds=2))
        netsim.write_sim_rounds_csv(metrics, tmp_path / "r.csv")
        back = netsim.read_sim_rounds_csv(tmp_path / "r.csv")
        assert [(r.round, r.client_losses, r.global_loss) for r in back] == \
            [(r.round, r.client_losses, r.global_loss) for r in metrics.rounds]


class TestCompare:
    def test_identical(self, fig3_trace):
        log = netsim.run_scenario(baseline_scenario(fig3_trace))
        summary = netsim.compare_runs(log, log)
        assert summary["switch_time_delta"] == 0 and summary["cumulative_cost_delta"] == 0.0

    def test_mismatched(self, fig3_trace):
        log = netsim.run_scenario(baseline_scenario(fig3_trace))
        short = netsim.MetricsLog(steps=log.steps[:10])
        with pytest.raises(ValueError):
            netsim.compare_runs(log, short)

    def test_loss_curves(self, fig3_samples):
        cfg = nn.LstmConfig(hidden_size=4)
        fed = netsim.run_scenario(fl_scenario(fig3_samples))
        central = fl.train_centralized(fig3_samples, cfg, nn.init_params_from_seed(cfg, 0), 0)
        diffs = netsim.compare_loss_curves(central.eval_losses, fed.global_losses())
        assert len(diffs) == 10 and all(d >= 0 for d in diffs)
        with pytest.raises(ValueError):
            netsim.compare_loss_curves([1.0], [1.0, 2.0])
