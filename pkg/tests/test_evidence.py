from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatclean.evidence import EvidenceLedger


def test_update_hand_value():
    led = EvidenceLedger(visibility=[0], grad_ema=[1.0], age=[0], ema_decay=0.99)
    led.update(np.array([False]), np.array([0.0]))
    assert led.grad_ema[0] == pytest.approx(0.99)


def test_update_converges_monotonically_to_constant():
    led = EvidenceLedger.zeros(1, ema_decay=0.99)
    c = 0.7
    prev = 0.0
    for _ in range(2000):
        led.update(np.array([True]), np.array([c]))
        assert led.grad_ema[0] >= prev - 1e-15
        prev = led.grad_ema[0]
    assert led.grad_ema[0] == pytest.approx(c, rel=1e-6)


def test_no_hits_keeps_visibility_and_ages():
    led = EvidenceLedger.zeros(3)
    led.update(np.zeros(3, dtype=bool), np.zeros(3))
    assert np.array_equal(led.visibility, [0, 0, 0])
    assert np.array_equal(led.age, [1, 1, 1])


def test_update_length_mismatch():
    led = EvidenceLedger.zeros(3)
    with pytest.raises(ValueError):
        led.update(np.zeros(2, dtype=bool), np.zeros(2))


def test_spawn_and_remove():
    led = EvidenceLedger.zeros(0)
    led.spawn(2)
    assert len(led) == 2 and np.all(led.age == 0)
    led.update(np.array([True, False]), np.array([0.5, 0.1]))
    led.spawn(1)
    led.remove([0])
    assert len(led) == 2
    assert led.visibility[0] == 0  # former index 1 shifted down
    with pytest.raises(IndexError):
        led.remove([5])


def test_visibility_bounded_by_age():
    rng = np.random.default_rng(0)
    led = EvidenceLedger.zeros(10)
    for _ in range(50):
        led.update(rng.random(10) < 0.5, rng.random(10))
    assert np.all(led.visibility <= led.age)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["spawn", "remove", "update"]),
                          st.integers(0, 5)), max_size=30))
def test_ledger_stays_aligned_with_synthetic_cloud(ops):
    """Metamorphic: random interleavings of spawn/remove/update keep the
    ledger length equal to an independently tracked count."""
    rng = np.random.default_rng(0)
    led = EvidenceLedger.zeros(3)
    count = 3
    for op, arg in ops:
        if op == "spawn":
            led.spawn(arg)
            count += arg
        elif op == "remove" and count > 0:
            k = min(arg, count)
            idx = rng.choice(count, size=k, replace=False)
            led.remove(idx)
            count -= k
        elif op == "update":
            led.update(rng.random(count) < 0.5, rng.random(count))
        assert len(led) == count


def test_grad_ema_is_convex_combination():
    rng = np.random.default_rng(1)
    led = EvidenceLedger.zeros(1, ema_decay=0.9)
    history = [0.0]
    for _ in range(100):
        norm = float(rng.random() * 3)
        history.append(norm)
        led.update(np.array([True]), np.array([norm]))
        assert min(history) - 1e-12 <= led.grad_ema[0] <= max(history) + 1e-12


def test_stabilization_gate_boundaries():
    led = EvidenceLedger(visibility=[0, 0], grad_ema=[0, 0], age=[499, 500])
    gate = led.stabilization_gate(500)
    assert not gate[0] and gate[1]


def test_fresh_spawn_gated_for_min_age():
    led = EvidenceLedger.zeros(1)
    for step in range(500):
        assert not led.stabilization_gate(500)[0]
        led.update(np.array([False]), np.array([0.0]))
    assert led.stabilization_gate(500)[0]


def test_sidecar_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    led = EvidenceLedger(visibility=rng.integers(0, 100, 17),
                         grad_ema=rng.random(17),
                         age=rng.integers(0, 1000, 17),
                         ema_decay=0.97)
    path = tmp_path / "evidence.bin"
    led.save(path)
    back = EvidenceLedger.load(path)
    assert np.array_equal(back.visibility, led.visibility)
    assert np.array_equal(back.grad_ema, led.grad_ema)
    assert np.array_equal(back.age, led.age)
    assert back.ema_decay == led.ema_decay


def test_sidecar_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a ledger at all")
    with pytest.raises(ValueError):
        EvidenceLedger.load(path)
