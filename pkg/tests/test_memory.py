import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perimem.errors import ScheduleError, ShapeError
from perimem.memory import (
    EnergyNet,
    GruLayer,
    MemoryPool,
    UpdateSchedule,
    covariance_loss,
    covariance_penalty,
    covariance_penalty_backward,
    energy_scores,
    expand,
    final_slots_batch,
    glorot_uniform,
    gru_cell,
    gru_cell_batch,
    memory_covariance,
    read,
    read_batch,
    run_sequence,
    run_sequence_batch,
    sequence_backward,
    step,
)


def random_layer(rng, input_dim, state_dim):
    """Layer with every tensor dense and nonzero, unlike the fresh-init layout."""
    s = 0.4
    return GruLayer(
        w_z=rng.uniform(-s, s, (state_dim, input_dim)),
        u_z=rng.uniform(-s, s, (state_dim, state_dim)),
        b_z=rng.uniform(-s, s, state_dim),
        w_r=rng.uniform(-s, s, (state_dim, input_dim)),
        u_r=rng.uniform(-s, s, (state_dim, state_dim)),
        b_r=rng.uniform(-s, s, state_dim),
        w_c=rng.uniform(-s, s, (state_dim, input_dim)),
        u_c=rng.uniform(-s, s, (state_dim, state_dim)),
        b_c=rng.uniform(-s, s, state_dim),
    )


def zero_layer(input_dim, state_dim):
    z = lambda *shape: np.zeros(shape)
    return GruLayer(
        w_z=z(state_dim, input_dim), u_z=z(state_dim, state_dim), b_z=z(state_dim),
        w_r=z(state_dim, input_dim), u_r=z(state_dim, state_dim), b_r=z(state_dim),
        w_c=z(state_dim, input_dim), u_c=z(state_dim, state_dim), b_c=z(state_dim),
    )


def random_stack(rng, in_dim, state_dim, periods):
    layers = [random_layer(rng, in_dim, state_dim)]
    for _ in periods[1:]:
        layers.append(random_layer(rng, state_dim, state_dim))
    return layers, UpdateSchedule(periods)


def gru_oracle(layer, x, h):
    """Plain-Python transcription of the gated update, one scalar at a time."""

    def mat_vec(m, v):
        return [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]

    def sig(v):
        return [1.0 / (1.0 + math.exp(-t)) for t in v]

    z = sig([a + b + c for a, b, c in zip(mat_vec(layer.w_z, x), mat_vec(layer.u_z, h), layer.b_z)])
    r = sig([a + b + c for a, b, c in zip(mat_vec(layer.w_r, x), mat_vec(layer.u_r, h), layer.b_r)])
    rh = [ri * hi for ri, hi in zip(r, h)]
    c = [
        math.tanh(a + b + d)
        for a, b, d in zip(mat_vec(layer.w_c, x), mat_vec(layer.u_c, rh), layer.b_c)
    ]
    return np.array([(1.0 - zi) * hi + zi * ci for zi, hi, ci in zip(z, h, c)])


class TestSchedule:
    def test_periods_validated(self):
        with pytest.raises(ScheduleError):
            UpdateSchedule(())
        with pytest.raises(ScheduleError):
            UpdateSchedule((1, 0))
        with pytest.raises(ScheduleError, match="first layer"):
            UpdateSchedule((2, 4))
        with pytest.raises(ScheduleError, match="non-decreasing"):
            UpdateSchedule((1, 4, 2))

    def test_layers_due_examples(self):
        s = UpdateSchedule((1, 2, 4))
        assert s.layers_due(3) == [1]
        assert s.layers_due(4) == [1, 2, 3]
        six = UpdateSchedule((1, 2, 4, 8, 16, 32))
        assert six.layers_due(32) == [1, 2, 3, 4, 5, 6]

    def test_step_index_must_be_positive(self):
        with pytest.raises(ScheduleError):
            UpdateSchedule((1,)).layers_due(0)

    def test_repeated_periods_allowed(self):
        s = UpdateSchedule((1, 1, 2))
        assert s.layers_due(1) == [1, 2]
        assert s.depth == 3


class TestGruCell:
    def test_zero_parameters_halve_the_state(self, rng):
        layer = zero_layer(3, 4)
        h = rng.uniform(-1, 1, 4)
        assert np.allclose(gru_cell(layer, np.zeros(3), h), 0.5 * h, rtol=0, atol=1e-15)

    def test_saturated_update_gate_erases_state(self, rng):
        layer = zero_layer(3, 4)
        layer.b_z[:] = 10.0
        h = rng.uniform(-2, 2, 4)
        out = gru_cell(layer, rng.uniform(-1, 1, 3), h)
        assert np.abs(out).max() < 1e-4

    def test_matches_scalar_oracle(self, rng):
        layer = random_layer(rng, 5, 4)
        x = rng.uniform(-1, 1, 5)
        h = rng.uniform(-1, 1, 4)
        assert np.allclose(gru_cell(layer, x, h), gru_oracle(layer, x, h), rtol=0, atol=1e-12)

    def test_dimension_mismatch_rejected(self, rng):
        layer = random_layer(rng, 5, 4)
        with pytest.raises(ShapeError, match="input shape"):
            gru_cell(layer, np.zeros(6), np.zeros(4))
        with pytest.raises(ShapeError, match="state shape"):
            gru_cell(layer, np.zeros(5), np.zeros(3))

    def test_batched_cell_matches_single(self, rng):
        layer = random_layer(rng, 5, 4)
        x = rng.uniform(-1, 1, (3, 5))
        h = rng.uniform(-1, 1, (3, 4))
        out, (z, r, c) = gru_cell_batch(layer, x, h)
        for b in range(3):
            assert np.allclose(out[b], gru_cell(layer, x[b], h[b]), rtol=0, atol=1e-12)
        assert z.shape == r.shape == c.shape == (3, 4)


class TestLayerInit:
    def test_fresh_layer_is_a_decayed_average(self, rng):
        layer = GruLayer.init(6, 4, rng)
        for gate in ("z", "r", "c"):
            assert not getattr(layer, f"u_{gate}").any()
            assert not getattr(layer, f"b_{gate}").any()
            assert getattr(layer, f"w_{gate}").any()

    def test_glorot_bound(self, rng):
        layer = GruLayer.init(6, 4, rng)
        limit = np.sqrt(6.0 / (4 + 6))
        assert np.abs(layer.w_z).max() <= limit

    def test_gate_bias_span_spreads_update_bias(self):
        layer = GruLayer.init(6, 32, np.random.default_rng(0), gate_bias_span=64.0)
        assert (layer.b_z <= 0.0).all()
        assert layer.b_z.min() >= -np.log(64.0)
        assert layer.b_z.max() > -np.log(2.0)  # some units stay fast
        assert not layer.b_r.any() and not layer.b_c.any()

    def test_span_below_one_rejected(self, rng):
        with pytest.raises(ShapeError, match="gate_bias_span"):
            GruLayer.init(4, 4, rng, gate_bias_span=0.5)

    def test_bad_dims_rejected(self, rng):
        with pytest.raises(ShapeError):
            GruLayer.init(0, 4, rng)

    def test_deterministic_per_rng_seed(self):
        a = GruLayer.init(5, 3, np.random.default_rng(9), gate_bias_span=8.0)
        b = GruLayer.init(5, 3, np.random.default_rng(9), gate_bias_span=8.0)
        for name, t in a.tensors().items():
            assert np.array_equal(t, b.tensors()[name])


class TestStep:
    def test_slow_layer_skipped_on_first_step(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool = MemoryPool.zeros(2, 4)
        out = step(pool, layers, schedule, rng.uniform(-1, 1, 5))
        assert out.step_count == 1
        assert out.slots[0].any()
        assert not out.slots[1].any()

    def test_zero_parameters_from_zero_pool_stay_zero(self):
        layers = [zero_layer(5, 4)]
        out = step(MemoryPool.zeros(1, 4), layers, UpdateSchedule((1,)), np.ones(5))
        assert not out.slots.any()

    def test_second_step_consumes_fresh_lower_slot(self, rng):
        """Hand-unrolled two-step trace: the slow layer reads the value the fast
        layer holds after this same step, not the previous one."""
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        x1, x2 = rng.uniform(-1, 1, 5), rng.uniform(-1, 1, 5)

        pool = step(MemoryPool.zeros(2, 4), layers, schedule, x1)
        pool = step(pool, layers, schedule, x2)

        slot1_after_1 = gru_cell(layers[0], x1, np.zeros(4))
        slot1_after_2 = gru_cell(layers[0], x2, slot1_after_1)
        slot2_after_2 = gru_cell(layers[1], slot1_after_2, np.zeros(4))
        assert np.array_equal(pool.slots[0], slot1_after_2)
        assert np.array_equal(pool.slots[1], slot2_after_2)

    def test_original_pool_untouched(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool = MemoryPool.zeros(2, 4)
        before = pool.slots.copy()
        step(pool, layers, schedule, rng.uniform(-1, 1, 5))
        assert np.array_equal(pool.slots, before)
        assert pool.step_count == 0

    def test_depth_mismatch_rejected(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        with pytest.raises(ShapeError, match="depth"):
            step(MemoryPool.zeros(3, 4), layers, schedule, np.zeros(5))


class TestRunSequence:
    def test_single_event_equals_one_step(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        x = rng.uniform(-1, 1, 5)
        a = run_sequence(layers, schedule, [x])
        b = step(MemoryPool.zeros(2, 4), layers, schedule, x)
        assert np.array_equal(a.slots, b.slots)

    def test_fold_identity(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2, 4))
        events = [rng.uniform(-1, 1, 5) for _ in range(9)]
        whole = run_sequence(layers, schedule, events)
        pool = MemoryPool.zeros(3, 4)
        for x in events:
            pool = step(pool, layers, schedule, x)
        assert np.array_equal(whole.slots, pool.slots)
        assert whole.step_count == pool.step_count == 9

    @settings(max_examples=20, deadline=None)
    @given(split=st.integers(1, 11), seed=st.integers(0, 500))
    def test_prefix_then_suffix_matches_whole(self, split, seed):
        r = np.random.default_rng(seed)
        layers, schedule = random_stack(r, 5, 4, (1, 2, 4))
        events = [r.uniform(-1, 1, 5) for _ in range(12)]
        whole = run_sequence(layers, schedule, events)
        pool = run_sequence(layers, schedule, events[:split])
        for x in events[split:]:
            pool = step(pool, layers, schedule, x)
        assert np.array_equal(whole.slots, pool.slots)

    def test_update_counts_follow_periods(self, rng):
        """Count actual slot rewrites over 24 steps; layer j changes floor(T / period) times."""
        layers, schedule = random_stack(rng, 5, 4, (1, 2, 4))
        pool = MemoryPool.zeros(3, 4)
        changes = [0, 0, 0]
        for _ in range(24):
            nxt = step(pool, layers, schedule, rng.uniform(-1, 1, 5))
            for j in range(3):
                if not np.array_equal(nxt.slots[j], pool.slots[j]):
                    changes[j] += 1
            pool = nxt
        assert changes == [24 // 1, 24 // 2, 24 // 4]

    def test_faster_layers_update_at_least_as_often(self, rng):
        schedule = UpdateSchedule((1, 2, 4, 8, 16, 32))
        for horizon in (7, 40, 100):
            counts = [
                sum(1 for i in range(1, horizon + 1) if i % p == 0)
                for p in schedule.periods
            ]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_empty_sequence_rejected(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1,))
        with pytest.raises(ShapeError, match="empty"):
            run_sequence(layers, schedule, [])


def random_energy(rng, slot_dim, query_dim, hidden=6):
    return EnergyNet(
        w1=rng.uniform(-0.5, 0.5, (hidden, slot_dim + query_dim)),
        b1=rng.uniform(-0.5, 0.5, hidden),
        w2=rng.uniform(-0.5, 0.5, hidden),
        b2=rng.uniform(-0.5, 0.5, 1),
    )


class TestRead:
    def test_identical_slots_return_that_slot(self, rng):
        slot = rng.uniform(-1, 1, 4)
        pool = MemoryPool(slots=np.tile(slot, (3, 1)), step_count=5)
        energy = random_energy(rng, 4, 2)
        rep, weights = read(pool, energy, rng.uniform(-1, 1, 2))
        assert np.allclose(rep, slot, rtol=0, atol=1e-12)
        assert abs(weights.sum() - 1.0) < 1e-12

    def test_constant_energy_gives_uniform_weights(self, rng):
        energy = random_energy(rng, 4, 2)
        energy.w2[:] = 0.0  # scores collapse to the output bias
        pool = MemoryPool(slots=rng.uniform(-1, 1, (3, 4)), step_count=1)
        _, weights = read(pool, energy, rng.uniform(-1, 1, 2))
        assert np.allclose(weights, 1.0 / 3.0, rtol=0, atol=1e-12)

    def test_matches_explicit_oracle(self, rng):
        """Three-slot read against a plain transcription: energy, softmax, weighted sum."""
        energy = random_energy(rng, 4, 2)
        slots = rng.uniform(-1, 1, (3, 4))
        query = rng.uniform(-1, 1, 2)

        scores = []
        for j in range(3):
            joint = list(slots[j]) + list(query)
            hidden = [
                max(0.0, sum(energy.w1[i][k] * joint[k] for k in range(6)) + energy.b1[i])
                for i in range(energy.w1.shape[0])
            ]
            scores.append(sum(energy.w2[i] * hidden[i] for i in range(len(hidden))) + energy.b2[0])
        exps = [math.exp(s) for s in scores]
        w_oracle = np.array([e / sum(exps) for e in exps])
        r_oracle = sum(w_oracle[j] * slots[j] for j in range(3))

        rep, weights = read(MemoryPool(slots=slots, step_count=1), energy, query)
        assert np.allclose(weights, w_oracle, rtol=0, atol=1e-12)
        assert np.allclose(rep, r_oracle, rtol=0, atol=1e-12)

    def test_weights_sum_to_one_over_random_pools(self, rng):
        for _ in range(25):
            d = int(rng.integers(1, 6))
            energy = random_energy(rng, 4, 3)
            pool = MemoryPool(slots=rng.uniform(-5, 5, (d, 4)), step_count=1)
            _, weights = read(pool, energy, rng.uniform(-5, 5, 3))
            assert abs(weights.sum() - 1.0) < 1e-12
            assert ((weights > 0.0) & (weights <= 1.0)).all()

    def test_width_mismatch_rejected(self, rng):
        energy = random_energy(rng, 4, 2)
        with pytest.raises(ShapeError, match="energy input width"):
            energy_scores(energy, np.zeros((3, 4)), np.zeros(5))


class TestCovariance:
    def test_hand_evaluated_example(self):
        c = memory_covariance(np.array([[1.0, -1.0], [1.0, 1.0]]))
        assert np.array_equal(c, [[1.0, 0.0], [0.0, 0.0]])
        assert covariance_loss(c) == 0.0

    def test_zero_pool_zero_matrix(self):
        assert not memory_covariance(np.zeros((3, 4))).any()

    def test_symmetric_with_nonnegative_diagonal(self, rng):
        for _ in range(10):
            c = memory_covariance(rng.uniform(-2, 2, (4, 6)))
            assert np.allclose(c, c.T, rtol=0, atol=1e-15)
            assert (np.diag(c) >= 0.0).all()

    def test_single_slot_loss_is_zero(self, rng):
        pool = rng.uniform(-1, 1, (1, 8))
        assert covariance_loss(memory_covariance(pool)) == 0.0

    def test_correlated_example(self):
        assert covariance_loss(np.array([[1.0, 1.0], [1.0, 1.0]])) == 1.0
        assert covariance_loss(np.diag([3.0, 2.0, 1.0])) == 0.0

    def test_loss_nonnegative_and_zero_iff_offdiag_vanishes(self, rng):
        for _ in range(10):
            c = memory_covariance(rng.uniform(-2, 2, (3, 5)))
            loss = covariance_loss(c)
            assert loss >= 0.0
            off = c[~np.eye(3, dtype=bool)]
            assert (loss == 0.0) == (not off.any())

    def test_matches_scalar_transcription(self, rng):
        """Independent row-centered covariance plus half-sum-of-squares, plain loops."""
        for _ in range(20):
            d, p = int(rng.integers(1, 5)), int(rng.integers(1, 8))
            m = rng.uniform(-2, 2, (d, p))
            means = [sum(m[a]) / p for a in range(d)]
            c_oracle = [
                [sum((m[a][k] - means[a]) * (m[b][k] - means[b]) for k in range(p)) / p
                 for b in range(d)]
                for a in range(d)
            ]
            loss_oracle = 0.5 * sum(
                c_oracle[a][b] ** 2 for a in range(d) for b in range(d) if a != b
            )
            c = memory_covariance(m)
            assert np.max(np.abs(c - np.array(c_oracle))) < 1e-10
            assert abs(covariance_loss(c) - loss_oracle) < 1e-10

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            memory_covariance(np.zeros(3))
        with pytest.raises(ShapeError):
            covariance_loss(np.zeros((2, 3)))


class TestExpand:
    def test_appended_layer_becomes_due_at_its_period(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool = run_sequence(layers, schedule, [rng.uniform(-1, 1, 5) for _ in range(4)])
        _, layers2, schedule2 = expand(pool, layers, schedule, new_period=4)
        assert schedule2.periods == (1, 2, 4)
        assert 3 in schedule2.layers_due(4)
        assert len(layers2) == 3

    def test_existing_state_bitwise_preserved(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool = run_sequence(layers, schedule, [rng.uniform(-1, 1, 5) for _ in range(5)])
        pool2, layers2, _ = expand(pool, layers, schedule, new_period=4)
        assert np.array_equal(pool2.slots[:2], pool.slots)
        assert not pool2.slots[2].any()
        assert pool2.step_count == pool.step_count
        for old, new in zip(layers, layers2):
            for name, t in old.tensors().items():
                assert np.array_equal(t, new.tensors()[name])

    def test_new_slot_sleeps_until_first_due_step(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool2, layers2, schedule2 = expand(
            MemoryPool.zeros(2, 4), layers, schedule, new_period=8
        )
        for k in range(7):  # steps 1..7, none divisible by 8
            pool2 = step(pool2, layers2, schedule2, rng.uniform(-1, 1, 5))
            assert not pool2.slots[2].any()
        pool2 = step(pool2, layers2, schedule2, rng.uniform(-1, 1, 5))
        assert pool2.slots[2].any()

    def test_smaller_period_rejected(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 4))
        with pytest.raises(ScheduleError, match="must be >="):
            expand(MemoryPool.zeros(2, 4), layers, schedule, new_period=2)

    def test_expansion_deterministic_per_seed(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2))
        pool = MemoryPool.zeros(2, 4)
        _, a, _ = expand(pool, layers, schedule, 4, seed=3, gate_bias_span=16.0)
        _, b, _ = expand(pool, layers, schedule, 4, seed=3, gate_bias_span=16.0)
        for name, t in a[-1].tensors().items():
            assert np.array_equal(t, b[-1].tensors()[name])
        assert (a[-1].b_z < 0.0).any()  # span applied to the fresh layer


class TestBatchedPaths:
    def test_batch_forward_matches_single_sample_fold(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1, 2, 4))
        events = rng.uniform(-1, 1, (3, 8, 5))
        history, _ = run_sequence_batch(layers, schedule, events)
        lean = final_slots_batch(layers, schedule, events)
        assert np.array_equal(history[-1].transpose(1, 0, 2), lean)
        for b in range(3):
            pool = run_sequence(layers, schedule, list(events[b]))
            assert np.allclose(lean[b], pool.slots, rtol=0, atol=1e-12)

    def test_batch_read_matches_single(self, rng):
        energy = random_energy(rng, 4, 3)
        slots = rng.uniform(-1, 1, (5, 3, 4))
        query = rng.uniform(-1, 1, (5, 3))
        rep, weights, _ = read_batch(energy, slots, query)
        for b in range(5):
            r1, w1 = read(MemoryPool(slots=slots[b], step_count=1), energy, query[b])
            assert np.allclose(rep[b], r1, rtol=0, atol=1e-12)
            assert np.allclose(weights[b], w1, rtol=0, atol=1e-12)

    def test_batch_covariance_matches_single(self, rng):
        slots = rng.uniform(-1, 1, (4, 3, 6))
        batched = covariance_penalty(slots)
        for b in range(4):
            single = covariance_loss(memory_covariance(slots[b]))
            assert abs(batched[b] - single) < 1e-12

    def test_covariance_backward_matches_finite_differences(self, rng):
        slots = rng.uniform(-1, 1, (2, 3, 4))
        coeff = 0.7
        analytic = covariance_penalty_backward(slots, coeff)
        fd = np.zeros_like(slots)
        h = 1e-6
        flat = slots.reshape(-1)
        out = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = coeff * covariance_penalty(slots).sum()
            flat[i] = orig - h
            down = coeff * covariance_penalty(slots).sum()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
        assert np.max(np.abs(analytic - fd)) < 1e-6

    def test_sequence_backward_matches_finite_differences(self, rng):
        # Project final slots onto a fixed direction and differentiate one tensor.
        layers, schedule = random_stack(rng, 4, 3, (1, 2))
        events = rng.uniform(-1, 1, (2, 6, 4))
        direction = rng.uniform(-1, 1, (2, 2, 3))

        def loss():
            return float((final_slots_batch(layers, schedule, events) * direction).sum())

        history, caches = run_sequence_batch(layers, schedule, events)
        grads, d_events = sequence_backward(
            layers, schedule, events, history, caches, direction.transpose(1, 0, 2)
        )

        target = layers[1].w_c
        h = 1e-6
        fd = np.zeros_like(target)
        for i in range(target.shape[0]):
            for j in range(target.shape[1]):
                orig = target[i, j]
                target[i, j] = orig + h
                up = loss()
                target[i, j] = orig - h
                down = loss()
                target[i, j] = orig
                fd[i, j] = (up - down) / (2 * h)
        assert np.max(np.abs(grads[1]["w_c"] - fd)) < 1e-6

        fd_e = np.zeros_like(events)
        flat, out = events.reshape(-1), fd_e.reshape(-1)
        for i in range(0, flat.size, 7):  # spot-check a stride of coordinates
            orig = flat[i]
            flat[i] = orig + h
            up = loss()
            flat[i] = orig - h
            down = loss()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
        mask = fd_e != 0.0
        assert np.max(np.abs((d_events - fd_e)[mask])) < 1e-6

    def test_empty_batch_sequence_rejected(self, rng):
        layers, schedule = random_stack(rng, 5, 4, (1,))
        with pytest.raises(ShapeError):
            run_sequence_batch(layers, schedule, np.zeros((2, 0, 5)))


class TestGlorot:
    def test_bound_and_shape(self, rng):
        w = glorot_uniform(rng, 8, 6)
        assert w.shape == (8, 6)
        assert np.abs(w).max() <= np.sqrt(6.0 / 14.0)
