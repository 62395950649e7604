"""Smoke test for the organism_py extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/python

then run `python3 python/smoke_test.py`.
"""

import json
import math
import random
import tempfile

import organism_py as om


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def network_gradient():
    net = om.Network([3, 4, 2], activation="gelu", seed=1)
    assert len(net.weights) == 3 * 4 + 4 * 2
    xs = [[0.1, -0.4, 0.7]]
    ys = [[1.0, 0.0]]
    loss, grad = net.loss_gradient(xs, ys, loss="cross-entropy")
    assert loss > 0 and len(grad) == len(net.weights)

    h = 1e-6
    w = net.weights
    for i in (0, 7, 19):
        up, down = list(w), list(w)
        up[i] += h
        down[i] -= h
        lu, _ = om.Network([3, 4, 2], "gelu", weights=up).loss_gradient(xs, ys, "cross-entropy")
        ld, _ = om.Network([3, 4, 2], "gelu", weights=down).loss_gradient(xs, ys, "cross-entropy")
        assert abs((lu - ld) / (2 * h) - grad[i]) < 1e-6


def particle_replicates():
    p = om.ParticleNetwork(seed=3)
    assert len(p.weights) == 5 * 3 + 3 * 3 + 3
    p.self_train(200)
    assert p.replication_error() < 1e-5, p.replication_error()
    assert p.classify() == "SR"
    assert close(p.replicate(), p.weights, 1e-5)
    steps_sr, steps_div = p.self_application_chain(max_steps=20)
    assert steps_sr <= steps_div


def organism_learns_addition():
    on = om.OrganismNetwork([2, 3, 3, 1], activation="linear", seed=0)
    assert on.particle_count == 2 * 3 + 3 * 3 + 3
    rng = random.Random(0)
    data = [[rng.random(), rng.random()] for _ in range(200)]
    targets = [[a + b] for a, b in data]
    first = None
    for epoch in range(15):
        for i in range(0, len(data), 50):
            loss = on.task_step(data[i:i + 50], targets[i:i + 50])
            first = loss if first is None else first
            on.self_train(5)
    assert loss < first, (first, loss)
    assert on.resub_margin(data[:20]) < 1e-8
    net = on.resubstitute()
    assert close(net.forward([0.2, 0.3]), on.forward([0.2, 0.3]), 1e-8)
    census = on.census()
    assert sum(census.values()) == on.particle_count
    dropped = on.dropout("F")
    assert dropped.census()["F"] == 0


def runner_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = f'out_dir = "{tmp}"\nadd_epochs = 2\nseed = 5\n'
        summary = json.loads(om.run_command("exp-add", cfg))
        assert summary["experiment"] == "exp-add"
        on = om.OrganismNetwork.load(f"{tmp}/seed-5/checkpoint.bin")
        assert on.layers == [2, 3, 3, 1]
        out = on.forward([0.25, 0.5])
        assert len(out) == 1 and math.isfinite(out[0])


def bad_input_raises():
    for call in (
        lambda: om.Network([3, 2], activation="tanh"),
        lambda: om.OrganismNetwork([2, 1]).forward([1.0]),
        lambda: om.run_command("exp-add", "nope = 1"),
    ):
        try:
            call()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for check in (network_gradient, particle_replicates, organism_learns_addition, runner_round_trip, bad_input_raises):
        check()
        print(f"ok  {check.__name__}")
    print("smoke test passed")
