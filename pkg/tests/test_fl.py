import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbatman import fl, nn
from fedbatman.core import ParameterVector, SeededRng
from fedbatman.fl import CorruptMessage, ParamMessage, RoundError


def random_vector(seed, d=160):
    return ParameterVector(SeededRng(seed).normal(d))


class TestWireFormat:
    def test_round_trip_bitwise(self):
        w = random_vector(0)
        data = fl.serialize_params(w, round_idx=3, sender=2)
        assert fl.deserialize_params(data) == w
        assert fl.decode_params(data)[:2] == (3, 2)

    def test_layout(self):
        w = ParameterVector([1.5, -2.0])
        data = fl.serialize_params(w, round_idx=7, sender=1)
        assert data[:4] == b"FLP1"
        assert data[4:8] == (7).to_bytes(4, "little")
        assert data[8:12] == (1).to_bytes(4, "little")
        assert data[12:20] == (2).to_bytes(8, "little")
        assert data[20:28] == np.float64(1.5).tobytes()
        assert int.from_bytes(data[-4:], "little") == zlib.crc32(data[:-4])
        assert len(data) == 20 + 16 + 4

    def test_empty_vector(self):
        data = fl.serialize_params(ParameterVector.zeros(0))
        assert len(data) == 24
        assert len(fl.deserialize_params(data)) == 0

    def test_specials_preserved(self):
        w = ParameterVector([-0.0, 5e-324, 1.7976931348623157e308])
        assert fl.deserialize_params(fl.serialize_params(w)) == w

    def test_truncated(self):
        data = fl.serialize_params(random_vector(1))
        with pytest.raises(CorruptMessage, match="corrupt parameter message"):
            fl.deserialize_params(data[:-1])
        with pytest.raises(CorruptMessage):
            fl.deserialize_params(b"FLP")

    def test_bad_magic(self):
        data = bytearray(fl.serialize_params(random_vector(1)))
        data[0] ^= 0xFF
        with pytest.raises(CorruptMessage):
            fl.deserialize_params(bytes(data))

    @settings(max_examples=200, deadline=None)
    @given(pos=st.integers(0, 20 + 8 * 10 + 3), bit=st.integers(0, 7))
    def test_single_bit_flip_detected(self, pos, bit):
        data = bytearray(fl.serialize_params(random_vector(2, 10)))
        data[pos] ^= 1 << bit
        with pytest.raises(CorruptMessage):
            fl.deserialize_params(bytes(data))

    def test_envelope_mismatch(self):
        msg = ParamMessage.pack(1, 2, random_vector(0, 4))
        forged = ParamMessage(sender=2, round=2, payload=msg.payload)
        with pytest.raises(CorruptMessage):
            forged.unpack()


class TestAggregate:
    def test_two_clients(self):
        msgs = [ParamMessage.pack(1, 1, ParameterVector([0.0, 2.0])), ParamMessage.pack(2, 1, ParameterVector([2.0, 4.0]))]
        assert fl.aggregate(msgs).tolist() == [1.0, 3.0]

    def test_identity(self):
        w = random_vector(4)
        assert fl.aggregate([ParamMessage.pack(1, 1, w)]) == w

    def test_naive_oracle(self):
        vecs = [random_vector(s) for s in range(3)]
        msgs = [ParamMessage.pack(j + 1, 1, v) for j, v in enumerate(vecs)]
        oracle = [sum(float(v.values[i]) for v in vecs) / 3 for i in range(160)]
        assert np.max(np.abs(fl.aggregate(msgs).values - oracle)) < 1e-12

    def test_arrival_order_irrelevant(self):
        msgs = [ParamMessage.pack(j, 1, random_vector(j)) for j in (1, 2, 3, 4, 5)]
        reference = fl.aggregate(msgs)
        for seed in range(10):
            order = SeededRng(seed).permutation(5)
            assert fl.aggregate([msgs[k] for k in order]) == reference

    def test_errors(self):
        a = ParamMessage.pack(1, 1, random_vector(0, 4))
        with pytest.raises(RoundError, match="round incomplete"):
            fl.aggregate([a], expected=[1, 2])
        with pytest.raises(RoundError, match="round incomplete"):
            fl.aggregate([])
        with pytest.raises(RoundError, match="mixed rounds"):
            fl.aggregate([a, ParamMessage.pack(2, 2, random_vector(1, 4))])
        with pytest.raises(RoundError, match="duplicate"):
            fl.aggregate([a, a])
        with pytest.raises(ValueError):
            fl.aggregate([a, ParamMessage.pack(2, 1, random_vector(1, 5))])


class TestGlobalObjective:
    def test_zero_params(self, fig3_samples, default_config):
        value = fl.global_objective(ParameterVector.zeros(default_config.num_params), [fig3_samples], default_config)
        assert abs(value - math.log(2)) < 1e-15

    def test_single_sample(self, fig3_samples, default_config):
        w = nn.init_params_from_seed(default_config, 3)
        s = fig3_samples[7]
        expected = nn.bce_loss(nn.lstm_forward(w, s.window, default_config)[0], s.label)
        assert abs(fl.global_objective(w, [[s]], default_config) - expected) < 1e-15

    def test_flat_loop_oracle(self, fig3_samples, default_config):
        w = nn.init_params_from_seed(default_config, 5)
        parts = [fig3_samples[:10], fig3_samples[10:40], fig3_samples[40:]]
        total = 0.0
        for part in parts:
            for s in part:
                total += nn.bce_loss(nn.lstm_forward(w, s.window, default_config)[0], s.label)
        assert abs(fl.global_objective(w, parts, default_config) - total / 46) < 1e-12

    def test_empty(self, default_config):
        with pytest.raises(ValueError):
            fl.global_objective(ParameterVector.zeros(default_config.num_params), [[], []], default_config)


def identical_clients(samples, config, j, seed=0):
    init = nn.init_params_from_seed(config, seed)
    return [fl.ClientState(node=k + 1, params=init, adam=nn.AdamState.fresh(len(init)),
                           samples=list(samples), rng=SeededRng(seed).spawn(2, 0)) for k in range(j)], init


class TestClientEpoch:
    def test_step_count(self, fig3_samples, default_config):
        clients, _ = identical_clients(fig3_samples[:23], default_config, 1)
        updated, loss = fl.client_local_epoch(clients[0], 5, default_config)
        assert updated.adam.step_count == 5
        assert math.isfinite(loss) and loss >= 0

    def test_identical_clients_identical_result(self, fig3_samples, default_config):
        clients, _ = identical_clients(fig3_samples[:23], default_config, 2)
        a, _ = fl.client_local_epoch(clients[0], 5, default_config)
        b, _ = fl.client_local_epoch(clients[1], 5, default_config)
        assert a.params == b.params

    def test_empty_rejected(self, default_config):
        with pytest.raises(ValueError):
            fl.ClientState(node=1, params=ParameterVector.zeros(4), adam=nn.AdamState.fresh(4), samples=[],
                           rng=SeededRng(0))


class TestRound:
    def test_identical_data(self, fig3_samples, default_config):
        clients, init = identical_clients(fig3_samples[:20], default_config, 3)
        solo, _ = fl.client_local_epoch(identical_clients(fig3_samples[:20], default_config, 1)[0][0], 5, default_config)
        _, new_global, report = fl.run_round(clients, init, 5, default_config)
        # three identical vectors average exactly only up to rounding
        assert np.max(np.abs(new_global.values - solo.params.values)) < 1e-15
        assert set(report.client_losses) == {1, 2, 3}

    def test_identical_data_power_of_two_exact(self, fig3_samples, default_config):
        clients, init = identical_clients(fig3_samples[:20], default_config, 4)
        solo, _ = fl.client_local_epoch(identical_clients(fig3_samples[:20], default_config, 1)[0][0], 5, default_config)
        _, new_global, _ = fl.run_round(clients, init, 5, default_config)
        assert new_global == solo.params

    def test_zero_batch_rejected(self, fig3_samples, default_config):
        clients, init = identical_clients(fig3_samples[:5], default_config, 1)
        with pytest.raises(ValueError):
            fl.run_round(clients, init, 0, default_config)

    def test_first_round_improves(self, fig3_samples, default_config):
        init = nn.init_params_from_seed(default_config, 0)
        clients = fl.make_clients(fig3_samples, 2, init, seed=0)
        assert sorted(len(c.samples) for c in clients) == [23, 23]
        before = fl.global_objective(init, [c.samples for c in clients], default_config)
        updated, new_global, report = fl.run_round(clients, init, 5, default_config)
        assert report.global_loss < before
        assert all(c.params == new_global for c in updated)

    def test_parallel_matches_serial(self, fig3_samples, default_config):
        init = nn.init_params_from_seed(default_config, 1)
        serial = fl.run_training(fl.make_clients(fig3_samples, 3, init, 1), init, 3, 5, default_config)
        parallel = fl.run_training(fl.make_clients(fig3_samples, 3, init, 1), init, 3, 5, default_config, parallel=True)
        assert serial[0] == parallel[0]


class TestTraining:
    def test_k_rounds(self, fig3_samples, small_config):
        init = nn.init_params_from_seed(small_config, 0)
        _, reports, _ = fl.run_training(fl.make_clients(fig3_samples, 2, init, 0), init, 10, 5, small_config)
        assert [r.round for r in reports] == list(range(1, 11))
        assert all(math.isfinite(r.global_loss) for r in reports)

    def test_huge_tolerance_stops_at_two(self, fig3_samples, small_config):
        init = nn.init_params_from_seed(small_config, 0)
        _, reports, _ = fl.run_training(fl.make_clients(fig3_samples, 2, init, 0), init, 10, 5, small_config,
                                        convergence_tol=1e9)
        assert [r.round for r in reports] == [1, 2]

    def test_zero_rounds(self, fig3_samples, small_config):
        init = nn.init_params_from_seed(small_config, 0)
        with pytest.raises(ValueError):
            fl.run_training(fl.make_clients(fig3_samples, 2, init, 0), init, 0, 5, small_config)

    @pytest.mark.parametrize("seed", [0, 3])
    def test_one_client_equals_centralized(self, fig3_samples, default_config, seed):
        init = nn.init_params_from_seed(default_config, seed)
        fed, _, _ = fl.run_training(fl.make_clients(fig3_samples, 1, init, seed), init, 4, 5, default_config)
        central = fl.train_centralized(fig3_samples, default_config, init, seed, epochs=4)
        assert fed == central.params

    def test_identical_data_fresh_adam(self, fig3_samples, default_config):
        clients, init = identical_clients(fig3_samples[:30], default_config, 2)
        solo, _ = identical_clients(fig3_samples[:30], default_config, 1)
        for k in range(1, 4):
            clients, g, _ = fl.run_round(clients, init if k == 1 else g, 5, default_config, k, fresh_adam=True)
            solo, sg, _ = fl.run_round(solo, init if k == 1 else sg, 5, default_config, k, fresh_adam=True)
            assert g == sg


def test_rounds_csv_round_trip(tmp_path):
    reports = [fl.RoundReport(1, {1: 0.5, 2: 0.25}, 0.4, 3.0), fl.RoundReport(2, {1: 0.1, 2: 0.2}, 0.15, 2.5)]
    fl.write_rounds_csv(reports, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "round,client_id,local_loss,global_loss,elapsed_ms"
    assert len(lines) == 5
    assert fl.read_rounds_csv(tmp_path / "r.csv") == reports
