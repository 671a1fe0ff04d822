"""Smoke test for the pyretalign extension.

Build first:
    cargo build --release -p retalign-py --features extension-module
then run from the repository root:
    python python/smoke.py
"""

import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_extension():
    built = os.path.join(ROOT, "target", "release", "libpyretalign.so")
    staging = tempfile.mkdtemp()
    shutil.copy(built, os.path.join(staging, "pyretalign.so"))
    sys.path.insert(0, staging)
    import pyretalign

    return pyretalign


def main():
    rl = import_extension()

    assert rl.double_check_select([1.0, 4.0, 2.5, 4.0], 3.0) == 2
    assert rl.double_check_select([1.0, 3.0, 5.0], 4.0) == 1
    assert rl.expectile_loss(2.0, 0.5) == 0.5 * 4.0
    assert math.isclose(rl.expectile_loss(1.0, 0.9) / rl.expectile_loss(-1.0, 0.9), 9.0)
    assert rl.abs_error(10.0, [3.0, 4.0]) == 3.0

    env = rl.Env("dial", seed=1)
    obs = env.reset()
    total = 0.0
    while not env.done:
        obs, reward, _ = env.step([1.0])
        total += reward
    assert total == env.horizon, total

    data = rl.Dataset.collect("dial", 200, seed=3)
    assert len(data) == 200
    assert data.r_max == max(data.returns())
    assert len(data.drop_top(10.0)) == 180

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "dial.jsonl")
        data.save(path)
        assert rl.Dataset.load(path).returns() == data.returns()

        model = rl.Model.train(data, ["model.embed_dim=16", "model.ff_dim=32", "model.q_hidden=16"], steps=20)
        ckpt = os.path.join(tmp, "m.ckpt")
        model.save(ckpt)
        model = rl.Model.load(ckpt)
        assert model.n_params > 0

    achieved, rewards = model.rollout("dial", 10.0, data.r_max, n_candidates=16, seed=2)
    assert len(rewards) == 20 and math.isclose(achieved, sum(rewards))
    rows = model.sweep("dial", [5.0, 15.0], data.r_max, episodes=1, n_candidates=8)
    assert [r[0] for r in rows] == [5.0, 15.0]

    try:
        rl.Env("no-such-env")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown env id should raise ValueError")

    print(f"pyretalign smoke ok: {model.n_params} params, rollout return {achieved:.2f}")


if __name__ == "__main__":
    main()
