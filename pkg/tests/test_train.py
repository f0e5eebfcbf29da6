import csv
import math

import numpy as np
import pytest
import torch

from fusionregister.data import RunConfig
from fusionregister.errors import CheckpointError, ContractError, TrainingAbort
from fusionregister.simulate import IDENTITY, make_training_sample, synthetic_corpus
from fusionregister.train import (
    fit,
    init_state,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train_step,
)


def tiny(**kw):
    base = dict(pyramid_depth=2, base_channels=4, patch_size=16, batch_size=2, epochs=2)
    base.update(kw)
    return RunConfig(**base)


def pairs(n=4, size=16, seed=0):
    return [(p.visible, p.infrared) for p in synthetic_corpus(n, size, seed=seed)]


def batch(seed=0, n=2):
    rng = np.random.default_rng(seed)
    return [make_training_sample(vi, ir, rng) for vi, ir in pairs(n, seed=seed)]


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert lr_schedule(0, 100) == 2e-4
        assert lr_schedule(100, 100) == 1e-6
        assert lr_schedule(50, 100) == pytest.approx((2e-4 + 1e-6) / 2)

    def test_monotone_and_bounded(self):
        vals = [lr_schedule(s, 37, 1e-3, 1e-5) for s in range(38)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert all(1e-5 <= v <= 1e-3 for v in vals)

    @pytest.mark.parametrize("step,total", [(-1, 10), (11, 10), (0, 0)])
    def test_out_of_range(self, step, total):
        with pytest.raises(ContractError):
            lr_schedule(step, total)


class TestStep:
    def test_zero_lr_leaves_parameters(self):
        state = init_state(tiny(), seed=1)
        before = [p.detach().clone() for p in state.model.parameters()]
        _, loss, comps = train_step(state, batch(), lr=0.0)
        assert math.isfinite(loss) and set(comps) == {"edge", "global", "frequency", "detail"}
        assert all(torch.equal(a, b) for a, b in zip(before, state.model.parameters()))
        assert state.step == 1

    def test_update_changes_parameters(self):
        state = init_state(tiny(), seed=1)
        before = [p.detach().clone() for p in state.model.parameters()]
        train_step(state, batch(), lr=1e-3)
        changed = sum(not torch.equal(a, b) for a, b in zip(before, state.model.parameters()))
        assert changed > 0

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            state = init_state(tiny(), seed=4)
            losses = [train_step(state, batch(s))[1] for s in range(3)]
            runs.append((losses, [p.detach().clone() for p in state.model.parameters()]))
        assert runs[0][0] == runs[1][0]
        assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))

    def test_non_finite_aborts(self):
        state = init_state(tiny(), seed=0)
        b = batch()
        b[0].fused[..., 0, 0] = float("nan")
        with pytest.raises(TrainingAbort):
            train_step(state, b)

    def test_mixed_shapes_rejected(self):
        vi, ir = pairs(1)[0]
        big = make_training_sample(
            torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32), params=IDENTITY
        )
        small = make_training_sample(vi, ir, params=IDENTITY)
        with pytest.raises(ContractError):
            train_step(init_state(tiny()), [big, small])


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        state = init_state(tiny(), total_steps=10, seed=2)
        train_step(state, batch())
        save_checkpoint(state, tmp_path / "c.npz", 1.0)
        back = load_checkpoint(tmp_path / "c.npz")
        assert back.step == state.step and back.total_steps == 10
        for a, b in zip(state.model.state_dict().values(), back.model.state_dict().values()):
            assert torch.equal(a, b)
        # continuing from the checkpoint reproduces the uninterrupted run
        rng_state = torch.get_rng_state()
        b1 = batch(7)
        _, l1, _ = train_step(state, b1)
        torch.set_rng_state(rng_state)
        _, l2, _ = train_step(back, b1)
        assert l1 == l2
        for a, b in zip(state.model.parameters(), back.model.parameters()):
            assert torch.equal(a, b)

    def test_numpy_rng_restored(self, tmp_path):
        state = init_state(tiny(), seed=3)
        state.rng.random(5)
        save_checkpoint(state, tmp_path / "c.npz")
        back = load_checkpoint(tmp_path / "c.npz")
        assert state.rng.random() == back.rng.random()

    def test_architecture_mismatch(self, tmp_path):
        save_checkpoint(init_state(tiny()), tmp_path / "c.npz")
        with pytest.raises(CheckpointError, match="architecture mismatch"):
            load_checkpoint(tmp_path / "c.npz", tiny(pyramid_depth=3))

    def test_training_knobs_do_not_block_loading(self, tmp_path):
        save_checkpoint(init_state(tiny()), tmp_path / "c.npz")
        back = load_checkpoint(tmp_path / "c.npz", tiny(lr_start=1e-3))
        assert back.config.lr_start == 1e-3

    def test_truncated(self, tmp_path):
        path = save_checkpoint(init_state(tiny()), tmp_path / "c.npz")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.npz")


class TestFit:
    def test_writes_log_and_checkpoints(self, tmp_path):
        state = init_state(tiny(), total_steps=4, seed=0)
        rows = fit(state, pairs(4), tmp_path, epochs=2)
        assert len(rows) == 4 and state.epoch == 2 and state.step == 4
        with open(tmp_path / "log.csv") as fh:
            logged = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in logged] == [1, 2, 3, 4]
        assert float(logged[0]["lr"]) == 2e-4 and float(logged[-1]["lr"]) < 2e-4
        names = {p.name for p in (tmp_path / "ckpt").iterdir()}
        assert {"last.npz", "best.npz", "epoch_0000.npz", "epoch_0001.npz"} <= names

    def test_resume_appends(self, tmp_path):
        state = init_state(tiny(), total_steps=4, seed=0)
        fit(state, pairs(4), tmp_path, epochs=1)
        back = load_checkpoint(tmp_path / "ckpt" / "last.npz")
        fit(back, pairs(4), tmp_path, epochs=1)
        with open(tmp_path / "log.csv") as fh:
            steps = [int(r["step"]) for r in csv.DictReader(fh)]
        assert steps == [1, 2, 3, 4] and back.epoch == 2

    def test_crops_large_pairs(self):
        state = init_state(tiny(batch_size=1), total_steps=1, seed=0)
        rows = fit(state, pairs(1, size=40), epochs=1)
        assert len(rows) == 1 and math.isfinite(rows[0]["total"])
