"""Policy and IDM architectures plus closed-form IDM constructions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .gridworld import DIRECTIONS, N_ACTIONS, DomainError, Grid, make_open_grid, render_img, step

KINDS = ("LC", "MLP5", "CNN1", "CNN5")
POS_KINDS = ("LC", "MLP5")
IMG_KINDS = ("CNN1", "CNN5")
MLP_HIDDEN = (100,) * 5
CNN5_CHANNELS = 128
CNN5_DENSE = 128


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    role: str = "policy"  # "policy" | "idm"
    state_format: str = "pos"  # "pos" | "img"
    goal_conditioned: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown architecture {self.kind!r}")
        if self.role not in ("policy", "idm"):
            raise ConfigError(f"unknown role {self.role!r}")
        if self.state_format not in ("pos", "img"):
            raise ConfigError(f"unknown state format {self.state_format!r}")
        if (self.kind in POS_KINDS) != (self.state_format == "pos"):
            raise ConfigError(f"{self.kind} cannot be paired with {self.state_format} states")
        if self.goal_conditioned and self.state_format == "img":
            raise ConfigError("goal conditioning is only defined for pos states")

    @property
    def input_dim(self) -> int:
        """Vector input size (pos) or channel count (img)."""
        if self.state_format == "img":
            return 6 if self.role == "idm" else 3
        return (4 if self.role == "idm" else 2) + (2 if self.goal_conditioned else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def _cnn5_flat(h: int, w: int) -> int:
    for _ in range(3):
        h, w = h // 2, w // 2
    if h == 0 or w == 0:
        raise ConfigError("CNN5 needs images of at least 8x8")
    return CNN5_CHANNELS * h * w


class Model:
    """A parameterized distribution over the 4 actions."""

    def __init__(self, spec: ArchSpec, params: dict[str, ad.Tensor], image_shape: tuple[int, int] | None = None):
        self.spec = spec
        self.params = params
        self.image_shape = image_shape

    # inputs -----------------------------------------------------------------
    def encode(self, records, grid: Grid) -> np.ndarray:
        """Build the input array for a batch of transitions."""
        sp = self.spec
        if sp.state_format == "img":
            if self.image_shape is not None and self.image_shape != (grid.height, grid.width):
                raise DomainError(f"model expects {self.image_shape} images, grid is {grid.height}x{grid.width}")
            imgs = []
            for t in records:
                x = render_img(grid, t.s, t.goal)
                if sp.role == "idm":
                    x = np.concatenate([x, render_img(grid, t.s_next, t.goal)])
                imgs.append(x)
            return np.stack(imgs) if imgs else np.zeros((0, sp.input_dim, grid.height, grid.width))
        rows = []
        for t in records:
            row = list(t.s)
            if sp.role == "idm":
                row += list(t.s_next)
            if sp.goal_conditioned:
                if t.goal is None:
                    raise DomainError("goal-conditioned model needs records carrying a goal")
                row += list(t.goal)
            rows.append(row)
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), sp.input_dim)

    # forward ----------------------------------------------------------------
    def logits(self, x) -> ad.Tensor:
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        p = self.params
        kind = self.spec.kind
        expected = (self.spec.input_dim,)
        if x.shape[1:2] != expected:
            raise DomainError(f"{kind} expects input width {expected[0]}, got shape {x.shape}")
        if kind == "LC":
            return ad.linear(x, p["W"], p["b"])
        if kind == "MLP5":
            h = x
            for i in range(len(MLP_HIDDEN)):
                h = ad.relu(ad.linear(h, p[f"W{i}"], p[f"b{i}"]))
            return ad.linear(h, p["W_out"], p["b_out"])
        if kind == "CNN1":
            return ad.global_max_pool(ad.conv2d(x, p["K"], p.get("b")))
        h = x
        for i in range(3):
            h = ad.maxpool2x2(ad.relu(ad.conv2d(h, p[f"K{i}"], p[f"kb{i}"], padding=1)))
        h = ad.flatten(h)
        h = ad.relu(ad.linear(h, p["W0"], p["b0"]))
        h = ad.relu(ad.linear(h, p["W1"], p["b1"]))
        return ad.linear(h, p["W_out"], p["b_out"])

    def predict(self, x) -> np.ndarray:
        return ad.softmax(self.logits(x)).data

    def log_prob(self, x, actions) -> np.ndarray:
        logp = ad.log_softmax(self.logits(x)).data
        actions = np.asarray(actions, dtype=np.int64)
        return logp[np.arange(len(actions)), actions]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            self.params[k].data = np.array(v, dtype=np.float64)

    def save(self, path) -> None:
        header = {"arch": self.spec.to_dict(), "image_shape": self.image_shape}
        ad.save_checkpoint(path, self.params, header)

    @classmethod
    def from_checkpoint(cls, path) -> Model:
        values, header = ad.load_checkpoint(path)
        spec = ArchSpec(**header["arch"])
        shape = header.get("image_shape")
        params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
        return cls(spec, params, tuple(shape) if shape else None)


def build(spec: ArchSpec, seed: int = 0, image_shape: tuple[int, int] | None = None) -> Model:
    rng = np.random.default_rng(seed)
    w, b = ad.init_weight, ad.init_bias
    d = spec.input_dim
    params: dict[str, ad.Tensor] = {}
    if spec.kind == "LC":
        params["W"] = w(rng, (N_ACTIONS, d), d, "W")
        params["b"] = b((N_ACTIONS,), "b")
    elif spec.kind == "MLP5":
        fan = d
        for i, width in enumerate(MLP_HIDDEN):
            params[f"W{i}"] = w(rng, (width, fan), fan, f"W{i}")
            params[f"b{i}"] = b((width,), f"b{i}")
            fan = width
        params["W_out"] = w(rng, (N_ACTIONS, fan), fan, "W_out")
        params["b_out"] = b((N_ACTIONS,), "b_out")
    elif spec.kind == "CNN1":
        params["K"] = w(rng, (N_ACTIONS, d, 3, 3), d * 9, "K")
        params["b"] = b((N_ACTIONS,), "b")
    else:
        if image_shape is None:
            raise ConfigError("CNN5 needs the image shape to size its dense layers")
        fan = d
        for i in range(3):
            params[f"K{i}"] = w(rng, (CNN5_CHANNELS, fan, 3, 3), fan * 9, f"K{i}")
            params[f"kb{i}"] = b((CNN5_CHANNELS,), f"kb{i}")
            fan = CNN5_CHANNELS
        flat = _cnn5_flat(*image_shape)
        params["W0"] = w(rng, (CNN5_DENSE, flat), flat, "W0")
        params["b0"] = b((CNN5_DENSE,), "b0")
        params["W1"] = w(rng, (CNN5_DENSE, CNN5_DENSE), CNN5_DENSE, "W1")
        params["b1"] = b((CNN5_DENSE,), "b1")
        params["W_out"] = w(rng, (N_ACTIONS, CNN5_DENSE), CNN5_DENSE, "W_out")
        params["b_out"] = b((N_ACTIONS,), "b_out")
    return Model(spec, params, image_shape)


# closed-form IDMs -----------------------------------------------------------

# rows = actions (right, left, up, down), columns = (dx, dy)
MOTION_MATRIX = np.array([[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]]).T


def analytic_idm_pos(temperature: float = 1e-3) -> Model:
    """Linear IDM: logits = W (s' - s) / temperature, as one map on (s, s')."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    V = np.concatenate([-MOTION_MATRIX, MOTION_MATRIX], axis=1) / temperature
    spec = ArchSpec("LC", "idm", "pos")
    params = {"W": ad.Tensor(V, name="W"), "b": ad.Tensor(np.zeros(N_ACTIONS), name="b")}
    return Model(spec, params)


def motion_kernels() -> np.ndarray:
    """[4, 6, 3, 3] kernels (-V^a, V^a) with V^a the one-step motion patch x'_a - x_a.

    Patches come from rendering a 3x3 open grid, so they follow whatever
    channel convention :func:`render_img` uses.
    """
    patch_grid = make_open_grid(3)
    centre = (1, 1)
    kernels = np.zeros((N_ACTIONS, 6, 3, 3))
    for a in range(len(DIRECTIONS)):
        nxt = step(patch_grid, centre, a)
        x = render_img(patch_grid, centre, goal=centre)
        x2 = render_img(patch_grid, nxt, goal=centre)
        v = x2 - x
        kernels[a, :3] = -v
        kernels[a, 3:] = v
    return kernels


def analytic_idm_img(grid_context: Grid | tuple[int, int] | None = None, temperature: float = 1e-3) -> Model:
    """One-layer CNN IDM: conv with motion kernels, global max pool, softmax / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(grid_context, Grid):
        shape = (grid_context.height, grid_context.width)
    else:
        shape = grid_context
    spec = ArchSpec("CNN1", "idm", "img")
    params = {
        "K": ad.Tensor(motion_kernels() / temperature, name="K"),
        "b": ad.Tensor(np.zeros(N_ACTIONS), name="b"),
    }
    return Model(spec, params, shape)


def motion_scores(x: np.ndarray) -> np.ndarray:
    """Pre-softmax scores of the closed-form image IDM at temperature 1."""
    return ad.global_max_pool(ad.conv2d(ad.Tensor(x), ad.Tensor(motion_kernels()))).data
