"""Graph-convolutional denoising autoencoder, its critic, and the loss terms."""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import CheckpointError, NumericError
from .tabular import ColumnSpec

AE_PARAMS = ("theta1", "theta2", "theta3", "theta4")
CRITIC_PARAMS = ("w1", "b1", "w2", "b2", "w3", "b3")
PARAM_ORDER = AE_PARAMS + CRITIC_PARAMS

CE_CLAMP = 1e-7

_MAGIC = b"GINN"
_VERSION = 1
_HEADER = struct.Struct("<4sBIIIIB")


@dataclass(frozen=True)
class GinnConfig:
    embedding_dim: int = 128
    use_skip: bool = True
    use_global: bool = True
    use_adversarial: bool = True
    identity_adjacency: bool = False
    alpha: float | str = "auto"
    gamma: float = 1.0
    lambda_gp: float = 10.0
    # the critic score is O(1) per row while L_A is a per-entry mean near 1e-2,
    # so an unscaled adversarial term swamps the reconstruction signal
    adversarial_weight: float = 0.03
    dropout_rate: float = 0.5
    critic_hidden: int = 128

    def __post_init__(self):
        if self.embedding_dim < 1 or self.critic_hidden < 1:
            raise ValueError("embedding_dim and critic_hidden must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.alpha != "auto" and not 0.0 <= float(self.alpha) <= 1.0:
            raise ValueError(f"alpha must be 'auto' or in [0, 1], got {self.alpha}")
        if self.gamma < 0 or self.lambda_gp < 0 or self.adversarial_weight < 0:
            raise ValueError("gamma, lambda_gp and adversarial_weight must be nonnegative")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @property
    def flags(self) -> int:
        return (
            int(self.use_skip)
            | int(self.use_global) << 1
            | int(self.use_adversarial) << 2
            | int(self.identity_adjacency) << 3
        )

    def with_flags(self, flags: int) -> "GinnConfig":
        return replace(
            self,
            use_skip=bool(flags & 1),
            use_global=bool(flags & 2),
            use_adversarial=bool(flags & 4),
            identity_adjacency=bool(flags & 8),
        )


# named rungs of the ablation ladder
VARIANTS = {
    "dae": dict(identity_adjacency=True, use_skip=False, use_global=False, use_adversarial=False),
    "ginn": dict(use_skip=False, use_global=False, use_adversarial=False),
    "ginn-skip": dict(use_skip=True, use_global=False, use_adversarial=False),
    "ginn-skip-global": dict(use_skip=True, use_global=True, use_adversarial=False),
    "a-ginn": dict(use_skip=False, use_global=False, use_adversarial=True),
    "a-ginn-skip": dict(use_skip=True, use_global=False, use_adversarial=True),
    "a-ginn-skip-global": dict(use_skip=True, use_global=True, use_adversarial=True),
}


def variant_config(name: str, base: GinnConfig | None = None) -> GinnConfig:
    if name not in VARIANTS:
        raise KeyError(name)
    base = base or GinnConfig()
    flags = dict(identity_adjacency=False)
    flags.update(VARIANTS[name])
    return replace(base, **flags)


class GinnModel:
    """Autoencoder weights ``theta1..theta4`` plus critic weights, as float64 arrays."""

    def __init__(self, params: Mapping[str, np.ndarray], config: GinnConfig):
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_ORDER}
        self.config = config
        d, m = self.params["theta1"].shape
        h = self.params["w1"].shape[1]
        expected = {
            "theta1": (d, m), "theta2": (m, d), "theta3": (d, d), "theta4": (d, d),
            "w1": (d, h), "b1": (1, h), "w2": (h, h), "b2": (1, h), "w3": (h, 1), "b3": (1, 1),
        }
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")
            if not np.isfinite(self.params[k]).all():
                raise NumericError(f"parameter {k} is not finite")

    @property
    def d(self) -> int:
        return self.params["theta1"].shape[0]

    @property
    def m(self) -> int:
        return self.params["theta1"].shape[1]

    @property
    def h(self) -> int:
        return self.params["w1"].shape[1]

    def copy(self) -> "GinnModel":
        return GinnModel({k: v.copy() for k, v in self.params.items()}, self.config)

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def bind(self, tape: ag.Tape, names: Sequence[str]) -> dict[str, Tensor]:
        """Tensors for all parameters; those in ``names`` are recorded on ``tape``."""
        out = self.constants()
        for k in names:
            out[k] = tape.variable(self.params[k], name=k)
        return out

    def trainable_autoencoder(self) -> tuple[str, ...]:
        names = ["theta1", "theta2"]
        if self.config.use_skip and not self.config.identity_adjacency:
            names.append("theta3")
        if self.config.use_global:
            names.append("theta4")
        return tuple(names)


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(d: int, config: GinnConfig, seed: int | np.random.Generator = 0) -> GinnModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    m, h = config.embedding_dim, config.critic_hidden
    params = {
        "theta1": _glorot(rng, d, m),
        "theta2": _glorot(rng, m, d),
        "theta3": _glorot(rng, d, d),
        "theta4": _glorot(rng, d, d),
        "w1": _glorot(rng, d, h),
        "b1": np.zeros((1, h)),
        "w2": _glorot(rng, h, h),
        "b2": np.zeros((1, h)),
        "w3": _glorot(rng, h, 1),
        "b3": np.zeros((1, 1)),
    }
    return GinnModel(params, config)


# ---------------------------------------------------------------------------
# forward passes


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def encode(model: GinnModel, L_hat: sp.spmatrix, Xin, params=None) -> Tensor:
    """``H = ReLU(L_hat Xin theta1)``; ``L_hat`` is ignored under identity adjacency."""
    P = params or model.constants()
    Xin = _as_tensor(Xin)
    if Xin.shape[1] != model.d:
        raise ValueError(f"input has {Xin.shape[1]} columns, model expects {model.d}")
    if not model.config.identity_adjacency:
        if L_hat.shape != (Xin.shape[0], Xin.shape[0]):
            raise ValueError(f"operator {L_hat.shape} does not match {Xin.shape[0]} rows")
        Xin = ag.spmm(L_hat, Xin)
    return ag.relu(ag.matmul(Xin, P["theta1"]))


def decode(
    model: GinnModel,
    L_hat: sp.spmatrix,
    L_tilde: sp.spmatrix,
    H: Tensor,
    Xin,
    g: np.ndarray | None = None,
    params=None,
) -> Tensor:
    """Sigmoid of the base term plus the optional skip and global terms."""
    cfg = model.config
    P = params or model.constants()
    Xin = _as_tensor(Xin)
    base = ag.matmul(H, P["theta2"])
    if not cfg.identity_adjacency:
        base = ag.spmm(L_hat, base)
    z = base
    if cfg.use_skip and not cfg.identity_adjacency:
        z = ag.add(z, ag.matmul(ag.spmm(L_tilde, Xin), P["theta3"]))
    if cfg.use_global:
        if g is None:
            raise ValueError("use_global needs the global attribute vector g")
        row = ag.matmul(Tensor(np.asarray(g, dtype=float).reshape(1, -1)), P["theta4"])
        z = ag.add_row(z, row)
    return ag.sigmoid(z)


def forward(model: GinnModel, L_hat, L_tilde, Xin, g=None, params=None) -> Tensor:
    H = encode(model, L_hat, Xin, params)
    return decode(model, L_hat, L_tilde, H, Xin, g, params)


def global_vector(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Per-column mean of observed entries (observed frequency for one-hot columns)."""
    counts = M.sum(axis=0)
    sums = (X * M).sum(axis=0)
    out = np.zeros(X.shape[1])
    np.divide(sums, counts, out=out, where=counts > 0)
    return out


def input_noise(Xin: np.ndarray, M: np.ndarray, label_cols, rate: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout on observed, non-label entries.

    Returns the noisy input and the 0/1 drop mask (1 = zeroed).
    """
    rng = np.random.default_rng(seed)
    Xin = np.asarray(Xin, dtype=float)
    if rate == 0.0:
        return Xin.copy(), np.zeros_like(Xin)
    eligible = np.asarray(M, dtype=bool).copy()
    if label_cols is not None:
        eligible[:, label_cols[0]:label_cols[1]] = False
    dropped = eligible & (rng.random(Xin.shape) < rate)
    out = np.where(eligible, Xin / (1.0 - rate), Xin)
    out[dropped] = 0.0
    return out, dropped.astype(float)


# ---------------------------------------------------------------------------
# losses


def resolve_alpha(specs: Sequence[ColumnSpec], alpha: float | str) -> float:
    """``auto``: numerical variables over all variables (a one-hot group counts once)."""
    if alpha != "auto":
        alpha = float(alpha)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        return alpha
    if not specs:
        return 1.0
    return sum(s.is_numerical for s in specs) / len(specs)


def reconstruction_loss(X, Xhat: Tensor, M, specs: Sequence[ColumnSpec], alpha) -> Tensor:
    """``alpha * MSE(numerical) + (1 - alpha) * BCE(one-hot)`` over observed entries."""
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=float)
    a = resolve_alpha(specs, alpha)
    num = np.zeros(X.shape[1], dtype=bool)
    for s in specs:
        if s.is_numerical:
            num[s.start:s.stop] = True
    num_mask = M * num
    cat_mask = M * ~num
    n_num, n_cat = num_mask.sum(), cat_mask.sum()

    loss = Tensor(np.zeros((1, 1)))
    if n_num > 0 and a > 0:
        diff = ag.sub(Xhat, Tensor(X))
        mse = ag.sum(ag.mul(Tensor(num_mask), ag.square(diff)))
        loss = ag.add(loss, ag.scale(mse, a / n_num))
    if n_cat > 0 and a < 1:
        p = ag.clip(Xhat, CE_CLAMP, 1.0 - CE_CLAMP)
        pos = ag.mul(Tensor(cat_mask * X), ag.log(p))
        one_minus = ag.sub(Tensor(np.ones(X.shape)), p)
        neg = ag.mul(Tensor(cat_mask * (1.0 - X)), ag.log(one_minus))
        ce = ag.sum(ag.add(pos, neg))
        loss = ag.add(loss, ag.scale(ce, -(1.0 - a) / n_cat))
    return loss


def critic_forward(model: GinnModel, rows, params=None) -> Tensor:
    """Three-layer ReLU network with a linear scalar output."""
    P = params or model.constants()
    x = _as_tensor(rows)
    h = ag.relu(ag.add_row(ag.matmul(x, P["w1"]), P["b1"]))
    h = ag.relu(ag.add_row(ag.matmul(h, P["w2"]), P["b2"]))
    return ag.add_row(ag.matmul(h, P["w3"]), P["b3"])


def gradient_penalty(model: GinnModel, mix_rows, params=None) -> Tensor:
    """``mean((||grad_x C(x)||_2 - 1)^2)`` at the mixed rows, differentiable in the weights."""
    P = params or model.constants()
    tape = next((t.tape for t in P.values() if t.tape is not None), None)
    if tape is None:
        tape = ag.Tape()
    mix = _as_tensor(mix_rows)
    if mix.tape is not tape:
        mix = tape.watch(mix)
    scores = critic_forward(model, mix, P)
    (gx,) = ag.grad(tape, ag.sum(scores), [mix], create_graph=True)
    norms = ag.row_norm(gx)
    return ag.mean(ag.square(ag.sub(norms, Tensor(np.ones(norms.shape)))))


def critic_loss(model: GinnModel, real_rows, fake_rows, mix_rows, lambda_gp: float, params=None) -> Tensor:
    P = params or model.constants()
    loss = ag.sub(
        ag.mean(critic_forward(model, fake_rows, P)),
        ag.mean(critic_forward(model, real_rows, P)),
    )
    if lambda_gp > 0:
        penalty = gradient_penalty(model, mix_rows, P)
        if not np.isfinite(penalty.value).all():
            raise NumericError("gradient penalty is not finite")
        loss = ag.add(loss, ag.scale(penalty, lambda_gp))
    return loss


def global_loss(Xhat: Tensor, g: np.ndarray) -> Tensor:
    """MSE between the column means of ``Xhat`` and the global vector ``g``."""
    n = Xhat.shape[0]
    means = ag.scale(ag.matmul(Tensor(np.ones((1, n))), Xhat), 1.0 / n)
    target = Tensor(np.asarray(g, dtype=float).reshape(1, -1))
    return ag.mean(ag.square(ag.sub(means, target)))


def generator_loss(
    recon: Tensor,
    model: GinnModel,
    fake_rows: Tensor,
    params=None,
    g: np.ndarray | None = None,
) -> Tensor:
    """Reconstruction loss minus ``adversarial_weight`` times the critic's mean
    score on the imputed rows.

    With ``use_global`` and ``g`` given, adds ``gamma * global_loss``.
    """
    P = params or model.constants()
    loss = recon
    if model.config.use_adversarial:
        score = ag.mean(critic_forward(model, fake_rows, P))
        loss = ag.sub(loss, ag.scale(score, model.config.adversarial_weight))
    if model.config.use_global and g is not None and model.config.gamma > 0:
        loss = ag.add(loss, ag.scale(global_loss(fake_rows, g), model.config.gamma))
    return loss


def sample_mix(real_rows, fake_rows, seed) -> np.ndarray:
    """Entry-wise fair coin between the real and the imputed value."""
    real = np.asarray(real_rows, dtype=float)
    fake = np.asarray(fake_rows, dtype=float)
    if real.shape != fake.shape:
        raise ValueError(f"shape mismatch {real.shape} vs {fake.shape}")
    rng = np.random.default_rng(seed)
    pick_real = rng.random(real.shape) < 0.5
    return np.where(pick_real, real, fake)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GinnModel, path) -> None:
    """Binary layout: magic, version, d, m, h, d_g, flags, then float64 LE params."""
    d_g = model.params["theta4"].shape[0]
    parts = [_HEADER.pack(_MAGIC, _VERSION, model.d, model.m, model.h, d_g, model.config.flags)]
    for k in PARAM_ORDER:
        parts.append(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, config: GinnConfig | None = None) -> GinnModel:
    """Read a checkpoint; architecture flags in the file override ``config``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError("checkpoint too short")
    magic, version, d, m, h, d_g, flags = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CheckpointError("not a GINN checkpoint (bad magic)")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shapes = {
        "theta1": (d, m), "theta2": (m, d), "theta3": (d, d), "theta4": (d_g, d),
        "w1": (d, h), "b1": (1, h), "w2": (h, h), "b2": (1, h), "w3": (h, 1), "b3": (1, 1),
    }
    total = _HEADER.size + 8 * sum(a * b for a, b in shapes.values())
    if len(blob) != total:
        raise CheckpointError(f"checkpoint has {len(blob)} bytes, expected {total}")
    params = {}
    offset = _HEADER.size
    for k in PARAM_ORDER:
        r, c = shapes[k]
        params[k] = np.frombuffer(blob, dtype="<f8", count=r * c, offset=offset).reshape(r, c).copy()
        offset += 8 * r * c
    base = config or GinnConfig()
    base = replace(base, embedding_dim=m, critic_hidden=h).with_flags(flags)
    return GinnModel(params, base)
