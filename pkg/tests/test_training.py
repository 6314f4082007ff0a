import numpy as np
import pytest
import torch

from stylerecon import networks, training
from stylerecon.training import TrainConfig


def tiny_config(**kw):
    base = dict(cycles=2, da_iters_per_cycle=2, recon_iters_per_cycle=2, batch_size=2, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture
def state(small_train_set):
    st = training.new_state(tiny_config(), small_train_set.image_size)
    training.reinitialize_domain_adaptation(st)
    return st


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cycles=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"cycles": 2, "bogus": 1})
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_da_phase_leaves_recon_untouched(state, small_train_set):
    before = snapshot(state.recon)
    i2r_before = snapshot(state.i2r)
    training.train_da_phase(state, small_train_set, 2)
    assert same(before, snapshot(state.recon))
    assert not same(i2r_before, snapshot(state.i2r))


def test_recon_phase_leaves_translators_untouched(state, small_train_set):
    nets = (state.i2r, state.r2i, state.disc)
    before = [snapshot(n) for n in nets]
    r_before = networks.flat_parameters(state.recon)
    training.train_recon_phase(state, small_train_set, 1)
    assert all(same(b, snapshot(n)) for b, n in zip(before, nets))
    assert not torch.equal(r_before, networks.flat_parameters(state.recon))


def test_zero_da_iterations_only_touch_nothing(state, small_train_set):
    before = [snapshot(n) for n in (state.recon, state.i2r, state.r2i, state.disc)]
    rng_state = state.sample_rng.bit_generator.state
    training.train_da_phase(state, small_train_set, 0)
    after = [snapshot(n) for n in (state.recon, state.i2r, state.r2i, state.disc)]
    assert all(same(a, b) for a, b in zip(before, after))
    assert state.sample_rng.bit_generator.state == rng_state and state.da_steps == 0


def test_step_counters(small_train_set):
    cfg = tiny_config(cycles=1, da_iters_per_cycle=1, recon_iters_per_cycle=1)
    st = training.run_training(cfg, small_train_set)
    assert (st.da_steps, st.recon_steps, st.step) == (1, 1, 2)
    assert [r["phase"] for r in st.history] == ["da", "recon"]


def test_reinitialization_is_fresh_each_cycle(small_train_set):
    seen = []
    training.run_training(tiny_config(cycles=2, da_iters_per_cycle=0, recon_iters_per_cycle=0),
                          small_train_set, on_cycle_end=lambda s: seen.append(networks.flat_parameters(s.i2r)))
    # untrained translators of consecutive cycles come from successive draws of the init stream
    assert not torch.equal(seen[0], seen[1])
    assert abs(float(seen[0].std() - seen[1].std())) < 0.01


def test_reinitialization_independent_of_previous_training(small_train_set):
    # the next cycle's fresh networks depend on the init stream only, not on how far the
    # previous translators were trained
    fresh = []
    for da in (0, 2):
        st = training.new_state(tiny_config(), small_train_set.image_size)
        training.reinitialize_domain_adaptation(st)
        training.train_da_phase(st, small_train_set, da)
        training.reinitialize_domain_adaptation(st)
        fresh.append(networks.flat_parameters(st.i2r))
    assert torch.equal(fresh[0], fresh[1])


def test_gradients_reach_recon_only_in_recon_phase(state, small_train_set):
    training.train_recon_phase(state, small_train_set, 1)
    assert all(p.grad is None for p in state.i2r.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in state.recon.parameters())


def test_losses_logged_and_finite(small_train_set, tmp_path):
    st = training.run_training(tiny_config(), small_train_set, tmp_path)
    assert all(np.isfinite(v) for row in st.history for k, v in row.items() if k.startswith("loss"))
    rows = training.read_loss_log(tmp_path / "losses.csv")
    assert len(rows) == st.step and list(rows[0]) == list(training.LOG_COLUMNS)
    assert sorted(p.name for p in tmp_path.glob("cycle_*.pt")) == ["cycle_000.pt", "cycle_001.pt"]


def test_checkpoint_roundtrip(small_train_set, tmp_path):
    st = training.run_training(tiny_config(cycles=1), small_train_set, tmp_path)
    ckpt = training.load_checkpoint(tmp_path / "cycle_000.pt")
    assert ckpt["format"] == training.CHECKPOINT_FORMAT and ckpt["cycle"] == 0
    back = training.state_from_checkpoint(ckpt)
    assert back.cycle_index == 1 and back.step == st.step
    assert same(snapshot(back.recon), snapshot(st.recon))
    assert same(snapshot(back.i2r), snapshot(st.i2r))
    assert back.sample_rng.bit_generator.state == st.sample_rng.bit_generator.state
    assert torch.equal(back.noise_gen.get_state(), st.noise_gen.get_state())
    net = training.load_reconstruction(tmp_path / "cycle_000.pt")
    assert not net.training


def test_resume_reproduces_uninterrupted_run(small_train_set, tmp_path):
    full = training.run_training(tiny_config(), small_train_set, tmp_path / "full")
    part = training.run_training(tiny_config(cycles=1), small_train_set, tmp_path / "part")
    resumed = training.run_training(tiny_config(), small_train_set, tmp_path / "part",
                                    resume=tmp_path / "part" / "cycle_000.pt")
    assert len(resumed.history) == len(full.history)
    for a, b in zip(full.history, resumed.history):
        assert a.keys() == b.keys()
        for k in a:
            if k.startswith("loss"):
                assert abs(a[k] - b[k]) <= 1e-5 * max(1.0, abs(a[k]))
    assert part.cycle_index == 1


def test_bad_checkpoint_rejected(tmp_path):
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(training.CheckpointError):
        training.load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(training.CheckpointError):
        training.load_checkpoint(tmp_path / "missing.pt")


def test_failed_save_keeps_previous_checkpoint(state, tmp_path, monkeypatch):
    path = tmp_path / "c.pt"
    training.save_checkpoint(state, path)
    good = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(torch, "save", boom)
    with pytest.raises(training.CheckpointError):
        training.save_checkpoint(state, path)
    assert path.read_bytes() == good


def test_same_seed_same_run(small_train_set):
    a = training.run_training(tiny_config(cycles=1), small_train_set)
    b = training.run_training(tiny_config(cycles=1), small_train_set)
    assert a.history == b.history
    assert same(snapshot(a.recon), snapshot(b.recon))
