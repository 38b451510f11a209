"""Latent-action pretraining (LAPO) and its IDM-decoding variant (LAPO+).

Stage 1 trains a latent IDM and a latent forward model through a vector
quantisation bottleneck on action-free image transitions. LAPO then fits a
latent policy to the pre-quantised latents and decodes it on the labeled set;
LAPO+ decodes the latent IDM instead and finishes with IDM labeling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gridworld import N_ACTIONS, Grid, Transition, render_img
from .learning import sample_actions


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class LatentConfig:
    latent_dim: int = 8
    codebook_size: int = 16
    commitment_coeff: float = 0.25
    # (pretraining, short stage, long stage) in optimizer steps, ratio 5:1:6
    stage_steps: tuple[int, int, int] = (1000, 200, 1200)
    channels: int = 32
    blocks: int = 3
    hidden: int = 128
    decoder_hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if min(self.stage_steps) <= 0:
            raise ValueError("stage step counts must be positive")
        if self.latent_dim <= 0 or self.codebook_size <= 0:
            raise ValueError("latent_dim and codebook_size must be positive")


# small networks ----------------------------------------------------------------

def _conv_encoder(rng, prefix: str, in_ch: int, cfg: LatentConfig, shape: tuple[int, int], out_dim: int) -> dict:
    p = {}
    ch = in_ch
    h, w = shape
    for i in range(cfg.blocks):
        p[f"{prefix}K{i}"] = ad.init_weight(rng, (cfg.channels, ch, 3, 3), ch * 9, f"{prefix}K{i}")
        p[f"{prefix}kb{i}"] = ad.init_bias((cfg.channels,), f"{prefix}kb{i}")
        ch = cfg.channels
        h, w = h // 2, w // 2
    flat = ch * max(h, 1) * max(w, 1)
    p[f"{prefix}W0"] = ad.init_weight(rng, (cfg.hidden, flat), flat, f"{prefix}W0")
    p[f"{prefix}b0"] = ad.init_bias((cfg.hidden,), f"{prefix}b0")
    p[f"{prefix}W1"] = ad.init_weight(rng, (out_dim, cfg.hidden), cfg.hidden, f"{prefix}W1")
    p[f"{prefix}b1"] = ad.init_bias((out_dim,), f"{prefix}b1")
    return p


def _apply_encoder(p: dict, prefix: str, x: ad.Tensor, blocks: int) -> ad.Tensor:
    h = x
    for i in range(blocks):
        h = ad.relu(ad.conv2d(h, p[f"{prefix}K{i}"], p[f"{prefix}kb{i}"], padding=1))
        if h.shape[2] >= 2 and h.shape[3] >= 2:
            h = ad.maxpool2x2(h)
    h = ad.relu(ad.linear(ad.flatten(h), p[f"{prefix}W0"], p[f"{prefix}b0"]))
    return ad.linear(h, p[f"{prefix}W1"], p[f"{prefix}b1"])


def _mlp(rng, prefix: str, sizes: list[int]) -> dict:
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"{prefix}W{i}"] = ad.init_weight(rng, (b, a), a, f"{prefix}W{i}")
        p[f"{prefix}b{i}"] = ad.init_bias((b,), f"{prefix}b{i}")
    return p


def _apply_mlp(p: dict, prefix: str, x: ad.Tensor, n_layers: int) -> ad.Tensor:
    h = x
    for i in range(n_layers):
        h = ad.linear(h, p[f"{prefix}W{i}"], p[f"{prefix}b{i}"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def _fdm(rng, cfg: LatentConfig) -> dict:
    """Fully convolutional forward model on [s ; broadcast z]."""
    c_in = 3 + cfg.latent_dim
    return {
        "fK0": ad.init_weight(rng, (cfg.channels, c_in, 3, 3), c_in * 9, "fK0"),
        "fkb0": ad.init_bias((cfg.channels,), "fkb0"),
        "fK1": ad.init_weight(rng, (cfg.channels, cfg.channels, 3, 3), cfg.channels * 9, "fK1"),
        "fkb1": ad.init_bias((cfg.channels,), "fkb1"),
        "fK2": ad.init_weight(rng, (3, cfg.channels, 3, 3), cfg.channels * 9, "fK2"),
        "fkb2": ad.init_bias((3,), "fkb2"),
    }


def _apply_fdm(p: dict, s: np.ndarray, zq: ad.Tensor) -> ad.Tensor:
    B, _, H, W = s.shape
    zmap = ad.mul(ad.reshape(zq, (B, zq.shape[1], 1, 1)), np.ones((1, 1, H, W)))
    h = ad.concat([ad.Tensor(s), zmap], axis=1)
    h = ad.relu(ad.conv2d(h, p["fK0"], p["fkb0"], padding=1))
    h = ad.relu(ad.conv2d(h, p["fK1"], p["fkb1"], padding=1))
    return ad.add(ad.conv2d(h, p["fK2"], p["fkb2"], padding=1), ad.Tensor(s))


# quantisation -------------------------------------------------------------------

def nearest_code(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row (Euclidean), lowest index on ties."""
    d = ((z[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def quantize(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return codebook[nearest_code(z, codebook)]


def vq_bottleneck(z: ad.Tensor, codebook: ad.Tensor, commitment: float) -> tuple[ad.Tensor, ad.Tensor, np.ndarray]:
    """Straight-through quantisation plus codebook and commitment losses."""
    idx = nearest_code(z.data, codebook.data)
    zq = ad.straight_through(z, codebook.data[idx])
    codebook_loss = ad.mse_loss(ad.take_rows(codebook, idx), z.detach())
    commit_loss = ad.mse_loss(z, ad.Tensor(codebook.data[idx]))
    return zq, ad.add(codebook_loss, ad.mul(commit_loss, commitment)), idx


# the stack ----------------------------------------------------------------------

@dataclass
class LatentStack:
    config: LatentConfig
    image_shape: tuple[int, int]
    lidm: dict
    lfdm: dict
    codebook: ad.Tensor
    latent_policy: dict
    decode_head: dict
    stages_done: set = field(default_factory=set)
    history: dict = field(default_factory=dict)

    # forward helpers
    def lidm_latents(self, s: np.ndarray, s2: np.ndarray) -> ad.Tensor:
        x = ad.Tensor(np.concatenate([s, s2], axis=1))
        return _apply_encoder(self.lidm, "h", x, self.config.blocks)

    def policy_latents(self, s: np.ndarray) -> ad.Tensor:
        return _apply_encoder(self.latent_policy, "p", ad.Tensor(s), self.config.blocks)

    def decode_logits(self, z) -> ad.Tensor:
        z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
        return _apply_mlp(self.decode_head, "d", z, len(self.config.decoder_hidden) + 1)

    def reconstruct(self, s: np.ndarray, s2: np.ndarray) -> tuple[ad.Tensor, ad.Tensor, np.ndarray]:
        z = self.lidm_latents(s, s2)
        zq, vq_loss, idx = vq_bottleneck(z, self.codebook, self.config.commitment_coeff)
        return _apply_fdm(self.lfdm, s, zq), vq_loss, idx

    def parameter_groups(self) -> dict[str, dict]:
        return {
            "lidm": self.lidm,
            "lfdm": self.lfdm,
            "codebook": {"codebook": self.codebook},
            "latent_policy": self.latent_policy,
            "decode_head": self.decode_head,
        }

    def snapshot(self) -> dict[str, dict[str, np.ndarray]]:
        return {g: {k: t.data.copy() for k, t in ps.items()} for g, ps in self.parameter_groups().items()}

    def save(self, path) -> None:
        params = {f"{g}/{k}": t for g, ps in self.parameter_groups().items() for k, t in ps.items()}
        header = {
            "kind": "latent_stack",
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.__dict__.items()},
            "image_shape": list(self.image_shape),
            "codebook": {"size": self.config.codebook_size, "dim": self.config.latent_dim},
            "stages_done": sorted(self.stages_done),
        }
        ad.save_checkpoint(path, params, header)


def _require(stack: LatentStack, *stages: str) -> None:
    missing = [s for s in stages if s not in stack.stages_done]
    if missing:
        raise StageOrderError(f"stage(s) {missing} must run first")


def _images(records, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    s = np.stack([render_img(grid, t.s, t.goal) for t in records])
    s2 = np.stack([render_img(grid, t.s_next, t.goal) for t in records])
    return s, s2


def _batches(rng: np.random.Generator, n: int, size: int, steps: int):
    size = min(size, n)
    for _ in range(steps):
        yield rng.choice(n, size=size, replace=False) if size < n else np.arange(n)


def init_stack(config: LatentConfig, image_shape: tuple[int, int]) -> LatentStack:
    rng = np.random.default_rng(config.seed)
    cfg = config
    lidm = _conv_encoder(rng, "h", 6, cfg, image_shape, cfg.latent_dim)
    lfdm = _fdm(rng, cfg)
    codebook = ad.Tensor(rng.normal(0.0, 0.1, size=(cfg.codebook_size, cfg.latent_dim)), requires_grad=True, name="codebook")
    policy = _conv_encoder(rng, "p", 3, cfg, image_shape, cfg.latent_dim)
    head = _mlp(rng, "d", [cfg.latent_dim, *cfg.decoder_hidden, N_ACTIONS])
    return LatentStack(cfg, image_shape, lidm, lfdm, codebook, policy, head)


# stages --------------------------------------------------------------------------

def lapo_stage1(unlabeled, grid: Grid, config: LatentConfig, state_format: str = "img") -> LatentStack:
    """Joint LIDM/LFDM pretraining on reconstruction of s' through the VQ bottleneck."""
    if state_format != "img":
        raise ValueError("latent pretraining reconstructs pixels and needs img states")
    records = list(unlabeled)
    if not records:
        raise ValueError("no transitions to pretrain on")
    stack = init_stack(config, (grid.height, grid.width))
    s, s2 = _images(records, grid)
    # seed the codebook with LIDM outputs so every code starts near the data
    rng = np.random.default_rng(config.seed + 1)
    z0 = stack.lidm_latents(s, s2).data
    pick = rng.choice(len(z0), size=config.codebook_size, replace=len(z0) < config.codebook_size)
    stack.codebook.data = z0[pick] + rng.normal(0.0, 1e-2, size=stack.codebook.shape)

    stack.history["stage1_initial_recon"] = reconstruction_loss(stack, records, grid)
    params = {**stack.lidm, **stack.lfdm, "codebook": stack.codebook}
    opt = ad.Adam(params, lr=config.lr)
    losses = []
    for idx in _batches(rng, len(records), config.batch_size, config.stage_steps[0]):
        opt.zero_grad()
        pred, vq_loss, _ = stack.reconstruct(s[idx], s2[idx])
        recon = ad.mse_loss(pred, s2[idx])
        ad.add(recon, vq_loss).backward()
        opt.step()
        losses.append(float(recon.data))
    stack.history["stage1_recon"] = losses
    stack.stages_done.add("stage1")
    return stack


def reconstruction_loss(stack: LatentStack, records, grid: Grid) -> float:
    s, s2 = _images(list(records), grid)
    pred, _, _ = stack.reconstruct(s, s2)
    return float(((pred.data - s2) ** 2).mean())


def code_usage(stack: LatentStack, records, grid: Grid) -> np.ndarray:
    s, s2 = _images(list(records), grid)
    idx = nearest_code(stack.lidm_latents(s, s2).data, stack.codebook.data)
    return np.bincount(idx, minlength=stack.config.codebook_size)


def lapo_stage2_policy(stack: LatentStack, unlabeled, grid: Grid, steps: int | None = None) -> LatentStack:
    """Fit the latent policy to the frozen LIDM's pre-quantised latents (MSE)."""
    _require(stack, "stage1")
    records = list(unlabeled)
    s, s2 = _images(records, grid)
    target = stack.lidm_latents(s, s2).data
    cfg = stack.config
    rng = np.random.default_rng(cfg.seed + 2)
    opt = ad.Adam(stack.latent_policy, lr=cfg.lr)
    losses = []
    for idx in _batches(rng, len(records), cfg.batch_size, steps or cfg.stage_steps[2]):
        opt.zero_grad()
        loss = ad.mse_loss(stack.policy_latents(s[idx]), target[idx])
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    stack.history["stage2_policy"] = losses
    stack.stages_done.add("latent_policy")
    return stack


def _fit_head(stack: LatentStack, z: np.ndarray, y: np.ndarray, steps: int, seed_offset: int) -> list[float]:
    cfg = stack.config
    rng = np.random.default_rng(cfg.seed + seed_offset)
    opt = ad.Adam(stack.decode_head, lr=cfg.lr)
    losses = []
    for idx in _batches(rng, len(y), cfg.batch_size, steps):
        opt.zero_grad()
        loss = ad.cross_entropy_loss(stack.decode_logits(z[idx]), y[idx])
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses


def _labels(records) -> np.ndarray:
    if not records:
        raise ValueError("labeled dataset is empty")
    if any(t.a is None for t in records):
        raise ValueError("labeled records need actions")
    return np.array([t.a for t in records], dtype=np.int64)


class LatentPolicy:
    """phi(pi~(s)): the LAPO policy."""

    def __init__(self, stack: LatentStack, grid: Grid):
        self.stack, self.grid = stack, grid

    def action_probs(self, records) -> np.ndarray:
        s = np.stack([render_img(self.grid, t.s, t.goal) for t in records])
        z = self.stack.policy_latents(s).data
        return ad.softmax(self.stack.decode_logits(z)).data


class LatentIDM:
    """phi(h~(s, s')): the LAPO+ IDM."""

    def __init__(self, stack: LatentStack, grid: Grid):
        self.stack, self.grid = stack, grid

    def action_probs(self, records) -> np.ndarray:
        s, s2 = _images(list(records), self.grid)
        z = self.stack.lidm_latents(s, s2).data
        return ad.softmax(self.stack.decode_logits(z)).data


def lapo_stage3_decode_policy(stack: LatentStack, labeled, grid: Grid, steps: int | None = None) -> LatentPolicy:
    _require(stack, "stage1", "latent_policy")
    records = list(labeled)
    y = _labels(records)
    s = np.stack([render_img(grid, t.s, t.goal) for t in records])
    z = stack.policy_latents(s).data
    stack.history["stage3_decode"] = _fit_head(stack, z, y, steps or stack.config.stage_steps[1], 3)
    stack.stages_done.add("decode_policy")
    return LatentPolicy(stack, grid)


def lapo_plus_stage2_decode_idm(stack: LatentStack, labeled, grid: Grid, steps: int | None = None) -> LatentIDM:
    _require(stack, "stage1")
    records = list(labeled)
    y = _labels(records)
    s, s2 = _images(records, grid)
    z = stack.lidm_latents(s, s2).data
    stack.history["plus_stage2_decode"] = _fit_head(stack, z, y, steps or stack.config.stage_steps[1], 4)
    stack.stages_done.add("decode_idm")
    return LatentIDM(stack, grid)


class ImagePolicy:
    """Conv encoder plus decoder head, trained end to end by behavior cloning."""

    def __init__(self, config: LatentConfig, image_shape: tuple[int, int], grid: Grid, seed: int):
        rng = np.random.default_rng(seed)
        self.config, self.grid = config, grid
        self.params = {
            **_conv_encoder(rng, "p", 3, config, image_shape, config.latent_dim),
            **_mlp(rng, "d", [config.latent_dim, *config.decoder_hidden, N_ACTIONS]),
        }

    def logits(self, s: np.ndarray) -> ad.Tensor:
        z = _apply_encoder(self.params, "p", ad.Tensor(s), self.config.blocks)
        return _apply_mlp(self.params, "d", z, len(self.config.decoder_hidden) + 1)

    def action_probs(self, records) -> np.ndarray:
        s = np.stack([render_img(self.grid, t.s, t.goal) for t in records])
        return ad.softmax(self.logits(s)).data


def lapo_plus_stage3_label(latent_idm: LatentIDM, unlabeled, grid: Grid, steps: int | None = None, mode: str = "sample") -> ImagePolicy:
    """IDM labeling with phi(h~) labels, then BC of a fresh image policy."""
    stack = latent_idm.stack
    _require(stack, "stage1", "decode_idm")
    cfg = stack.config
    records = list(unlabeled)
    probs = latent_idm.action_probs(records)
    rng = np.random.default_rng(cfg.seed + 5)
    y = probs.argmax(axis=1) if mode == "argmax" else sample_actions(probs, rng)
    relabeled = [Transition(t.s, int(a), t.s_next, t.goal) for t, a in zip(records, y)]
    policy = ImagePolicy(cfg, stack.image_shape, grid, cfg.seed + 6)
    s = np.stack([render_img(grid, t.s, t.goal) for t in relabeled])
    opt = ad.Adam(policy.params, lr=cfg.lr)
    losses = []
    for idx in _batches(rng, len(y), cfg.batch_size, steps or cfg.stage_steps[2]):
        opt.zero_grad()
        loss = ad.cross_entropy_loss(policy.logits(s[idx]), y[idx])
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    stack.history["plus_stage3_bc"] = losses
    stack.stages_done.add("label_policy")
    return policy


def run_lapo(unlabeled, labeled, grid: Grid, config: LatentConfig, stack: LatentStack | None = None) -> tuple[LatentPolicy, LatentStack]:
    stack = stack or lapo_stage1(unlabeled, grid, config)
    lapo_stage2_policy(stack, unlabeled, grid)
    return lapo_stage3_decode_policy(stack, labeled, grid), stack


def run_lapo_plus(unlabeled, labeled, grid: Grid, config: LatentConfig, stack: LatentStack | None = None) -> tuple[ImagePolicy, LatentStack]:
    stack = stack or lapo_stage1(unlabeled, grid, config)
    idm = lapo_plus_stage2_decode_idm(stack, labeled, grid)
    return lapo_plus_stage3_label(idm, unlabeled, grid), stack
