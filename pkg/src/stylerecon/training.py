"""Interleaved training: per cycle, a fresh domain adaptation, then the reconstruction network.

Each cycle re-creates the two translators and the discriminator, trains them
against renderings of the current reconstructions, and then trains the
reconstruction network against the frozen translator's pseudo-renderings.
Only the reconstruction network (and its optimizer) persists across cycles.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import networks
from .geometry import FLATTEN_WEIGHT, LAPLACIAN_WEIGHT, mesh_regularizers
from .losses import (LossWeights, combined_translator_losses, loss_cycle, loss_discriminator,
                     loss_jaccard, loss_reconstruction, loss_style, loss_style_non_saturating)
from .renderer import DEFAULT_DEPTH_GAMMA, DEFAULT_SMOOTHING, CameraBatch, render_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stylerecon-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "cycle", "phase", "loss_D", "loss_S", "loss_J", "loss_C", "loss_Fi2r",
               "loss_Fr2i", "loss_R", "loss_reg")
BRIGHTNESS_DA_ITERS = 400
STYLE_LOSSES = {"saturating": loss_style, "non_saturating": loss_style_non_saturating}


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    cycles: int = 20
    da_iters_per_cycle: int = 1500
    recon_iters_per_cycle: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-4
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    smoothing: float = DEFAULT_SMOOTHING
    depth_gamma: float = DEFAULT_DEPTH_GAMMA
    laplacian_weight: float = LAPLACIAN_WEIGHT
    flatten_weight: float = FLATTEN_WEIGHT
    style_loss: str = "non_saturating"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if self.style_loss not in STYLE_LOSSES:
            raise ValueError(f"style_loss must be one of {sorted(STYLE_LOSSES)}")
        if self.cycles < 1 or self.batch_size < 1:
            raise ValueError("cycles and batch_size must be positive")
        if self.da_iters_per_cycle < 0 or self.recon_iters_per_cycle < 0:
            raise ValueError("iteration counts must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, fused=True)


@dataclass
class CycleState:
    """Everything needed to continue training bit-for-bit."""

    config: TrainConfig
    image_size: int
    recon: networks.ReconstructionNet
    recon_opt: torch.optim.Optimizer
    init_gen: torch.Generator
    noise_gen: torch.Generator
    sample_rng: np.random.Generator
    cycle_index: int = 0
    step: int = 0
    da_steps: int = 0
    recon_steps: int = 0
    i2r: torch.nn.Module | None = None
    r2i: torch.nn.Module | None = None
    disc: torch.nn.Module | None = None
    i2r_opt: torch.optim.Optimizer | None = None
    r2i_opt: torch.optim.Optimizer | None = None
    disc_opt: torch.optim.Optimizer | None = None
    history: list = field(default_factory=list)


def new_state(config: TrainConfig, image_size: int) -> CycleState:
    """Fresh state; the three RNG streams (init / noise / sampling) derive from ``config.seed``."""
    seeds = np.random.SeedSequence(config.seed).generate_state(3)
    init_gen = networks.make_generator(int(seeds[0]))
    recon = networks.build_reconstruction(image_size, init_gen)
    return CycleState(config, image_size, recon, _adam(recon.parameters(), config.learning_rate),
                      init_gen, networks.make_generator(int(seeds[1])),
                      np.random.default_rng(int(seeds[2])))


def reinitialize_domain_adaptation(state: CycleState) -> None:
    """New translators, discriminator and optimizers drawn from the init stream."""
    lr = state.config.learning_rate
    state.i2r = networks.reinitialize("i2r", state.init_gen)
    state.r2i = networks.reinitialize("r2i", state.init_gen)
    state.disc = networks.reinitialize("D", state.init_gen)
    state.i2r_opt = _adam(state.i2r.parameters(), lr)
    state.r2i_opt = _adam(state.r2i.parameters(), lr)
    state.disc_opt = _adam(state.disc.parameters(), lr)


def _render(state: CycleState, vertices, cams: CameraBatch):
    cfg = state.config
    return render_batch(vertices, state.recon.template.faces, cams, smoothing=cfg.smoothing,
                        depth_gamma=cfg.depth_gamma)


def _record(state: CycleState, phase: str, **losses) -> None:
    row = {"step": state.step, "cycle": state.cycle_index, "phase": phase}
    row.update({k: float(v) for k, v in losses.items()})
    state.history.append(row)
    state.step += 1


def da_step(state: CycleState, x: torch.Tensor, cams: CameraBatch) -> dict:
    """One update of D, then F_i2r, then F_r2i, each on a fresh forward pass."""
    w = state.config.loss_weights
    i2r, r2i, disc = state.i2r, state.r2i, state.disc
    state.recon.eval()
    with torch.no_grad():
        rendered = _render(state, state.recon.vertices(x), cams).float()

    # D is trained to score renderings high, so that ``loss_style`` (which pushes
    # D(translated) up) opposes it; the other slot order makes both players agree.
    with torch.no_grad():
        translated = i2r(x)
    l_d = loss_discriminator(disc(translated), disc(rendered))
    state.disc_opt.zero_grad(set_to_none=True)
    l_d.backward(inputs=list(disc.parameters()))
    state.disc_opt.step()

    translated = i2r(x)
    noise = torch.randn(translated.shape, generator=state.noise_gen) * w.noise_sigma
    l_c = loss_cycle(x, r2i(translated + noise), w.huber_threshold)
    l_s = STYLE_LOSSES[state.config.style_loss](disc(translated))
    l_j = loss_jaccard(rendered, translated, w.jaccard_delta)
    l_i2r, _ = combined_translator_losses(l_c, l_s, l_j, w)
    state.i2r_opt.zero_grad(set_to_none=True)
    l_i2r.backward(inputs=list(i2r.parameters()))
    state.i2r_opt.step()

    with torch.no_grad():
        translated = i2r(x)
    noise = torch.randn(translated.shape, generator=state.noise_gen) * w.noise_sigma
    l_c2 = loss_cycle(x, r2i(translated + noise), w.huber_threshold)
    _, l_r2i = combined_translator_losses(l_c2, 0.0, 0.0, w)
    state.r2i_opt.zero_grad(set_to_none=True)
    l_r2i.backward(inputs=list(r2i.parameters()))
    state.r2i_opt.step()

    losses = dict(loss_D=l_d.item(), loss_S=l_s.item(), loss_J=l_j.item(), loss_C=l_c.item(),
                  loss_Fi2r=l_i2r.item(), loss_Fr2i=l_r2i.item())
    _record(state, "da", **losses)
    state.da_steps += 1
    return losses


def recon_step(state: CycleState, x, y, cams_x: CameraBatch, cams_y: CameraBatch) -> dict:
    """One update of the reconstruction network against frozen pseudo-renderings."""
    cfg = state.config
    state.i2r.eval()
    with torch.no_grad():
        trans_x, trans_y = state.i2r(torch.cat([x, y])).chunk(2)
    state.recon.train()
    verts = state.recon.vertices(x)
    cams = CameraBatch(torch.cat([cams_x.azimuth, cams_y.azimuth]),
                       torch.cat([cams_x.elevation, cams_y.elevation]),
                       torch.cat([cams_x.distance, cams_y.distance]), cams_x.image_size,
                       cams_x.viewing_angle)
    rend_x, rend_y = _render(state, torch.cat([verts, verts]), cams).chunk(2)
    l_r = loss_reconstruction(rend_x, trans_x, rend_y, trans_y, cfg.loss_weights.huber_threshold)
    reg = mesh_regularizers(verts, state.recon.template.faces, cfg.laplacian_weight, cfg.flatten_weight)
    loss = l_r + reg
    state.recon_opt.zero_grad(set_to_none=True)
    loss.backward()
    state.recon_opt.step()
    state.i2r.train()
    losses = dict(loss_R=l_r.item(), loss_reg=reg.item())
    _record(state, "recon", **losses)
    state.recon_steps += 1
    return losses


def train_da_phase(state: CycleState, data, iters: int | None = None) -> CycleState:
    """Domain adaptation for ``iters`` steps (default from the config); R stays frozen."""
    iters = state.config.da_iters_per_cycle if iters is None else iters
    for p in state.recon.parameters():
        p.requires_grad_(False)
    try:
        for _ in range(iters):
            x, cams = data.sample_images(state.sample_rng, state.config.batch_size)
            da_step(state, x, cams)
    finally:
        for p in state.recon.parameters():
            p.requires_grad_(True)
    return state


def train_recon_phase(state: CycleState, data, iters: int | None = None) -> CycleState:
    """Reconstruction training for ``iters`` steps; translators and D stay frozen."""
    iters = state.config.recon_iters_per_cycle if iters is None else iters
    frozen = [state.i2r, state.r2i, state.disc]
    for net in frozen:
        for p in net.parameters():
            p.requires_grad_(False)
    try:
        for _ in range(iters):
            x, y, cx, cy, _ = data.sample_pairs(state.sample_rng, state.config.batch_size)
            recon_step(state, x, y, cx, cy)
    finally:
        for net in frozen:
            for p in net.parameters():
                p.requires_grad_(True)
    return state


# -- checkpoints ----------------------------------------------------------------------------


def state_to_checkpoint(state: CycleState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "cycle": state.cycle_index,
        "image_size": state.image_size,
        "config": state.config.to_dict(),
        "counters": {"step": state.step, "da_steps": state.da_steps, "recon_steps": state.recon_steps},
        "recon": state.recon.state_dict(),
        "i2r": state.i2r.state_dict() if state.i2r is not None else None,
        "r2i": state.r2i.state_dict() if state.r2i is not None else None,
        "D": state.disc.state_dict() if state.disc is not None else None,
        "optim": {"recon": state.recon_opt.state_dict(),
                  "i2r": state.i2r_opt.state_dict() if state.i2r_opt is not None else None,
                  "r2i": state.r2i_opt.state_dict() if state.r2i_opt is not None else None,
                  "D": state.disc_opt.state_dict() if state.disc_opt is not None else None},
        "rng": {"init": state.init_gen.get_state(), "noise": state.noise_gen.get_state(),
                "sample": state.sample_rng.bit_generator.state},
    }


def save_checkpoint(state: CycleState, path) -> Path:
    """Atomic write: a failed save never clobbers the previous file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(state_to_checkpoint(state), tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


def state_from_checkpoint(ckpt: dict, config: TrainConfig | None = None) -> CycleState:
    """Rebuild a state positioned at the start of the cycle after the saved one."""
    config = TrainConfig.from_dict(ckpt["config"]) if config is None else config
    state = new_state(config, ckpt["image_size"])
    state.recon.load_state_dict(ckpt["recon"])
    state.recon_opt.load_state_dict(ckpt["optim"]["recon"])
    if ckpt["i2r"] is not None:
        reinitialize_domain_adaptation(state)
        state.i2r.load_state_dict(ckpt["i2r"])
        state.r2i.load_state_dict(ckpt["r2i"])
        state.disc.load_state_dict(ckpt["D"])
        state.i2r_opt.load_state_dict(ckpt["optim"]["i2r"])
        state.r2i_opt.load_state_dict(ckpt["optim"]["r2i"])
        state.disc_opt.load_state_dict(ckpt["optim"]["D"])
    state.init_gen.set_state(ckpt["rng"]["init"])
    state.noise_gen.set_state(ckpt["rng"]["noise"])
    state.sample_rng.bit_generator.state = ckpt["rng"]["sample"]
    state.cycle_index = ckpt["cycle"] + 1
    state.step = ckpt["counters"]["step"]
    state.da_steps = ckpt["counters"]["da_steps"]
    state.recon_steps = ckpt["counters"]["recon_steps"]
    return state


def load_reconstruction(path) -> networks.ReconstructionNet:
    """The reconstruction network of a checkpoint, in eval mode."""
    ckpt = load_checkpoint(path)
    net = networks.ReconstructionNet(ckpt["image_size"])
    net.load_state_dict(ckpt["recon"])
    return net.eval()


# -- driver ---------------------------------------------------------------------------------


def write_loss_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, restval="")
        writer.writeheader()
        writer.writerows(history)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_training(config: TrainConfig, data, out_dir=None, resume=None, da_iters: int | None = None,
                 on_cycle_end=None) -> CycleState:
    """Train for ``config.cycles`` cycles, writing ``cycle_XXX.pt`` and ``losses.csv`` to ``out_dir``.

    ``resume`` is a checkpoint path; training continues with the following
    cycle and the loss log is continued from that checkpoint's history.
    ``da_iters`` overrides ``config.da_iters_per_cycle``.
    """
    if resume is not None:
        state = state_from_checkpoint(load_checkpoint(resume), config)
        prior = Path(resume).parent / "losses.csv"
        if prior.exists():
            state.history = [_parse_row(r) for r in read_loss_log(prior) if int(r["step"]) < state.step]
    else:
        state = new_state(config, data.image_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    da_iters = config.da_iters_per_cycle if da_iters is None else da_iters
    while state.cycle_index < config.cycles:
        reinitialize_domain_adaptation(state)
        train_da_phase(state, data, da_iters)
        train_recon_phase(state, data)
        log.info("cycle %d done: step %d", state.cycle_index, state.step)
        if out_dir is not None:
            save_checkpoint(state, out_dir / f"cycle_{state.cycle_index:03d}.pt")
            write_loss_log(state.history, out_dir / "losses.csv")
        if on_cycle_end is not None:
            on_cycle_end(state)
        state.cycle_index += 1
    return state


def _parse_row(row: dict) -> dict:
    out = {"step": int(row["step"]), "cycle": int(row["cycle"]), "phase": row["phase"]}
    for k in LOG_COLUMNS[3:]:
        if row.get(k, "") != "":
            out[k] = float(row[k])
    return out
