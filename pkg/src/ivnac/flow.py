"""The variant invertible network.

A single image is replicated into ``C`` channels (variable augmentation)
and pushed through a stack of invertible blocks, each one

    actnorm -> invertible 1x1 channel mix -> two-way affine coupling

The coupling transforms the two channel halves in turn::

    y1 = x1 * exp(s1(x2)) + t1(x2)
    y2 = x2 * exp(s2(y1)) + t2(y1)

and is undone in the opposite order (x2 first, then x1).  Log-scales are
soft-clamped to ``[-alpha, alpha]`` with ``alpha * tanh(s / alpha)``; the
inverse uses the same clamped values, so invertibility is exact.

Every layer takes an optional :class:`~ivnac.autodiff.Tape`.  With a tape
the parameters are tracked as leaves and the pass is differentiable;
without one it is a plain numpy evaluation.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DimensionError, InversionError, IvnacError


@dataclass(frozen=True)
class FlowConfig:
    n_blocks: int = 8
    channels: int = 2
    hidden: int = 8
    scale_clamp: float = 2.0
    slope: float = 0.2
    cond_limit: float = 1e6
    dense: bool = True

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ContractError(f"n_blocks must be positive, got {self.n_blocks}")
        if self.channels < 2 or self.channels % 2:
            raise ContractError(f"augmentation width must be even and >= 2, got {self.channels}")
        if self.hidden < 1:
            raise ContractError(f"hidden width must be positive, got {self.hidden}")
        if self.scale_clamp <= 0:
            raise ContractError(f"scale_clamp must be positive, got {self.scale_clamp}")

    def to_dict(self) -> dict:
        return asdict(self)


def _track(array: np.ndarray, tape: Optional[Tape], name: Optional[str] = None) -> Tensor:
    if tape is None:
        return Tensor._wrap(array)
    return tape.leaf(array, name)


def _dtype():
    return ad.default_dtype()


# --------------------------------------------------------------------------
# layers


class DenseSubnet:
    """Five 3x3 same-padded convolutions; leaky ReLU after the first four.

    With ``dense`` each layer sees the subnet input concatenated with every
    earlier layer's output (a dense block); otherwise the layers form a
    plain chain.
    """

    n_layers = 5

    def __init__(self, c_in: int, c_out: int, hidden: int, rng=None, slope: float = 0.2, dense: bool = True):
        self.slope = slope
        self.dense = dense
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i in range(self.n_layers):
            ci = c_in + i * hidden if dense else (c_in if i == 0 else hidden)
            co = c_out if i == self.n_layers - 1 else hidden
            if rng is None or i == self.n_layers - 1:
                # a zero final layer makes the coupling start as the identity
                w = np.zeros((co, ci, 3, 3), dtype=_dtype())
            else:
                std = np.sqrt(2.0 / ((1.0 + slope**2) * ci * 9))
                w = (rng.standard_normal((co, ci, 3, 3)) * std).astype(_dtype())
            self.weights.append(w)
            self.biases.append(np.zeros((1, co, 1, 1), dtype=_dtype()))

    def __call__(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        feats = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inp = ad.concat(feats) if self.dense and i > 0 else h
            h = ad.conv2d(inp, _track(w, tape), _track(b, tape), padding=1)
            if i < self.n_layers - 1:
                h = ad.leaky_relu(h, self.slope)
                feats.append(h)
        return h

    def parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"conv{i}.weight", w
            yield f"conv{i}.bias", b


class ActNorm:
    """Per-channel affine map with data-dependent initialization."""

    def __init__(self, channels: int):
        self.scale = np.ones((1, channels, 1, 1), dtype=_dtype())
        self.bias = np.zeros((1, channels, 1, 1), dtype=_dtype())
        self.initialized = False

    def initialize(self, x: np.ndarray) -> None:
        """Set scale/bias so ``x`` comes out with zero mean and unit variance per channel."""
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        std = x.std(axis=(0, 2, 3), keepdims=True)
        # a constant channel has nothing to standardize; only centre it
        std = np.where(std > 1e-6, std, 1.0)
        self.scale[...] = 1.0 / std
        self.bias[...] = -mean / std
        self.initialized = True

    def _check(self, training: bool):
        if training and not self.initialized:
            raise ContractError("actnorm applied in training before data-dependent initialization")
        if np.any(self.scale == 0):
            raise ContractError("actnorm scale has a zero entry")

    def forward(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        self._check(tape is not None)
        return ad.affine_channels(x, _track(self.scale, tape), _track(self.bias, tape))

    def inverse(self, y: Tensor, tape: Optional[Tape] = None) -> Tensor:
        self._check(tape is not None)
        return ad.unaffine_channels(y, _track(self.scale, tape), _track(self.bias, tape))

    def parameters(self):
        yield "scale", self.scale
        yield "bias", self.bias


class InvConv1x1:
    """Learnable invertible channel mix; W^-1 comes from a cached LU factorization."""

    def __init__(self, channels: int, rng=None, cond_limit: float = 1e6, index: Optional[int] = None):
        if rng is None:
            w = np.eye(channels)
        else:
            q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
            w = q * np.sign(np.diag(r))
        self.weight = w.astype(_dtype()).reshape(channels, channels, 1, 1)
        self.cond_limit = cond_limit
        self.index = index
        self._cache_key: Optional[np.ndarray] = None
        self._cache_inv: Optional[np.ndarray] = None

    @property
    def matrix(self) -> np.ndarray:
        C = self.weight.shape[0]
        return self.weight.reshape(C, C)

    def _fail(self, msg):
        where = f"block {self.index}: " if self.index is not None else ""
        raise InversionError(f"{where}{msg}", block=self.index)

    def check(self) -> float:
        """Condition number of W, raising :class:`InversionError` if it is unusable."""
        w = self.matrix.astype(np.float64)
        if not np.isfinite(w).all():
            self._fail("1x1 mixing matrix has non-finite entries")
        cond = float(np.linalg.cond(w))
        if not np.isfinite(cond) or cond > self.cond_limit:
            self._fail(f"1x1 mixing matrix is singular or ill-conditioned (cond={cond:.3g})")
        return cond

    def inverse_matrix(self) -> np.ndarray:
        w = self.matrix
        if self._cache_key is None or not np.array_equal(self._cache_key, w):
            self.check()
            lu = scipy.linalg.lu_factor(w.astype(np.float64))
            inv = scipy.linalg.lu_solve(lu, np.eye(w.shape[0]))
            self._cache_key = w.copy()
            self._cache_inv = inv.astype(w.dtype)
        return self._cache_inv

    def forward(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        return ad.conv2d(x, _track(self.weight, tape))

    def inverse(self, y: Tensor, tape: Optional[Tape] = None) -> Tensor:
        w_inv = ad.inv1x1(_track(self.weight, tape), inverse=self.inverse_matrix())
        return ad.conv2d(y, w_inv)

    def parameters(self):
        yield "weight", self.weight


class AffineCoupling:
    """Two-way affine coupling with subnets s1, t1 (on x2) and s2, t2 (on y1)."""

    def __init__(self, channels: int, hidden: int, rng=None, scale_clamp: float = 2.0, slope: float = 0.2,
                 dense: bool = True):
        if channels % 2:
            raise DimensionError(f"coupling needs an even channel count, got {channels}")
        half = channels // 2
        self.scale_clamp = scale_clamp
        self.s1 = DenseSubnet(half, half, hidden, rng, slope, dense)
        self.t1 = DenseSubnet(half, half, hidden, rng, slope, dense)
        self.s2 = DenseSubnet(half, half, hidden, rng, slope, dense)
        self.t2 = DenseSubnet(half, half, hidden, rng, slope, dense)

    def log_scale(self, s: Tensor) -> Tensor:
        a = self.scale_clamp
        return ad.scale(ad.tanh(ad.scale(s, 1.0 / a)), a)

    def forward_halves(self, x1, x2, tape=None):
        y1 = ad.mul(x1, ad.exp(self.log_scale(self.s1(x2, tape)))) + self.t1(x2, tape)
        y2 = ad.mul(x2, ad.exp(self.log_scale(self.s2(y1, tape)))) + self.t2(y1, tape)
        return y1, y2

    def inverse_halves(self, y1, y2, tape=None):
        # x2 depends only on y1, so it must be recovered first
        x2 = ad.mul(y2 - self.t2(y1, tape), ad.exp(-self.log_scale(self.s2(y1, tape))))
        x1 = ad.mul(y1 - self.t1(x2, tape), ad.exp(-self.log_scale(self.s1(x2, tape))))
        return x1, x2

    def forward(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        return ad.concat(self.forward_halves(*ad.split(x), tape))

    def inverse(self, y: Tensor, tape: Optional[Tape] = None) -> Tensor:
        return ad.concat(self.inverse_halves(*ad.split(y), tape))

    def subnets(self):
        return (("s1", self.s1), ("t1", self.t1), ("s2", self.s2), ("t2", self.t2))

    def parameters(self):
        for name, net in self.subnets():
            for pname, p in net.parameters():
                yield f"{name}.{pname}", p


class FlowBlock:
    def __init__(self, index: int, config: FlowConfig, rng=None):
        C = config.channels
        self.index = index
        self.actnorm = ActNorm(C)
        self.invconv = InvConv1x1(C, rng, config.cond_limit, index)
        self.coupling = AffineCoupling(C, config.hidden, rng, config.scale_clamp, config.slope, config.dense)

    def forward(self, x, tape=None):
        x = self.actnorm.forward(x, tape)
        x = self.invconv.forward(x, tape)
        return self.coupling.forward(x, tape)

    def inverse(self, y, tape=None):
        y = self.coupling.inverse(y, tape)
        y = self.invconv.inverse(y, tape)
        return self.actnorm.inverse(y, tape)

    def parameters(self):
        for prefix, layer in (("actnorm", self.actnorm), ("invconv", self.invconv), ("coupling", self.coupling)):
            for name, p in layer.parameters():
                yield f"{prefix}.{name}", p


def _tag_block(err: IvnacError, index: int) -> IvnacError:
    if getattr(err, "block", None) is None:
        err.block = index
        err.args = (f"block {index}: {err}",) + err.args[1:]
    return err


class FlowModel:
    """Ordered stack of invertible blocks acting on ``config.channels`` channels.

    ``init="glow"`` draws orthogonal 1x1 mixes and He-initialized subnets
    (final conv zero) from ``seed``; ``init="identity"`` makes every layer
    the identity and marks actnorm as initialized.
    """

    def __init__(self, config: Optional[FlowConfig] = None, seed: int = 0, init: str = "glow"):
        self.config = config or FlowConfig()
        if init not in ("glow", "identity"):
            raise ContractError(f"unknown init scheme {init!r}")
        rng = np.random.default_rng(seed) if init == "glow" else None
        self.blocks = [FlowBlock(i, self.config, rng) for i in range(self.config.n_blocks)]
        if init == "identity":
            for b in self.blocks:
                b.actnorm.initialized = True

    @property
    def initialized(self) -> bool:
        return all(b.actnorm.initialized for b in self.blocks)

    def _check_input(self, x: Tensor):
        if x.shape[1] != self.config.channels:
            raise DimensionError(
                f"model expects {self.config.channels} channels, got {x.shape[1]}"
            )

    def forward(self, x: Tensor, tape: Optional[Tape] = None) -> Tensor:
        self._check_input(x)
        for block in self.blocks:
            try:
                x = block.forward(x, tape)
            except IvnacError as err:
                raise _tag_block(err, block.index)
        return x

    def inverse(self, y: Tensor, tape: Optional[Tape] = None) -> Tensor:
        self._check_input(y)
        for block in reversed(self.blocks):
            try:
                y = block.inverse(y, tape)
            except IvnacError as err:
                raise _tag_block(err, block.index)
        return y

    def data_init(self, x_aug: Tensor) -> None:
        """Initialize every actnorm from the activations the batch produces."""
        self._check_input(x_aug)
        x = x_aug.detach()
        for block in self.blocks:
            block.actnorm.initialize(x.data)
            x = block.forward(x)

    def parameters(self) -> List[Tuple[str, np.ndarray]]:
        """All parameter arrays, in checkpoint order."""
        return [
            (f"block{b.index}.{name}", p) for b in self.blocks for name, p in b.parameters()
        ]

    def n_parameters(self) -> int:
        return int(sum(p.size for _, p in self.parameters()))

    def check_invertible(self) -> None:
        for b in self.blocks:
            b.invconv.check()

    def copy(self) -> "FlowModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "FlowModel":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = self.copy()
        for b in clone.blocks:
            b.actnorm.scale = b.actnorm.scale.astype(dtype)
            b.actnorm.bias = b.actnorm.bias.astype(dtype)
            b.invconv.weight = b.invconv.weight.astype(dtype)
            b.invconv._cache_key = None
            for _, net in b.coupling.subnets():
                net.weights = [w.astype(dtype) for w in net.weights]
                net.biases = [x.astype(dtype) for x in net.biases]
        return clone


def random_model(config: Optional[FlowConfig] = None, seed: int = 0, weight_scale: float = 0.2) -> FlowModel:
    """A model with every parameter drawn at random (final subnet layers included).

    Actnorm scales and the singular values of the 1x1 mixes are drawn
    log-uniformly around 1, so neither direction of the flow is
    systematically expansive and all layer invariants hold.
    """
    rng = np.random.default_rng(seed)
    model = FlowModel(config, seed=int(rng.integers(2**31)))
    dt = _dtype()
    for b in model.blocks:
        C = b.actnorm.scale.shape[1]
        b.actnorm.scale[...] = np.exp(rng.uniform(-0.4, 0.4, (1, C, 1, 1)))
        b.actnorm.bias[...] = rng.normal(0.0, 0.3, (1, C, 1, 1))
        b.actnorm.initialized = True
        q, _ = np.linalg.qr(rng.standard_normal((C, C)))
        w = q @ np.diag(np.exp(rng.uniform(-0.3, 0.3, C)))
        b.invconv.weight[...] = w.reshape(C, C, 1, 1)
        for _, net in b.coupling.subnets():
            for w_arr, b_arr in zip(net.weights, net.biases):
                fan_in = w_arr.shape[1] * 9
                w_arr[...] = (rng.standard_normal(w_arr.shape) * weight_scale / np.sqrt(fan_in)).astype(dt)
                b_arr[...] = rng.normal(0.0, 0.05, b_arr.shape).astype(dt)
    return model


# --------------------------------------------------------------------------
# functional surface


@dataclass
class LatentOutput:
    ct: Tensor
    z: Tensor

    def joined(self) -> Tensor:
        return ad.concat([self.ct, self.z])


def augment(image: Tensor, channels: int) -> Tensor:
    """Replicate a single-channel image into ``channels`` identical channels."""
    if channels < 2 or channels % 2:
        raise ContractError(f"augmentation width must be even and >= 2, got {channels}")
    if image.shape[1] != 1:
        raise DimensionError(f"augment expects one channel, got {image.shape[1]}")
    return ad.concat([image] * channels)


def extract_ct(y_aug: Tensor) -> LatentOutput:
    """Channel 0 is the synthetic CT; the remaining channels are the latent z."""
    if y_aug.shape[1] < 2:
        raise ContractError(f"extract_ct needs at least 2 channels, got {y_aug.shape[1]}")
    ct, z = ad.split(y_aug, 1)
    return LatentOutput(ct, z)


def coupling_forward(x1: Tensor, x2: Tensor, layer: AffineCoupling, tape=None):
    return layer.forward_halves(x1, x2, tape)


def coupling_inverse(y1: Tensor, y2: Tensor, layer: AffineCoupling, tape=None):
    return layer.inverse_halves(y1, y2, tape)


def invconv_apply(x: Tensor, layer: InvConv1x1, direction: str = "forward", tape=None) -> Tensor:
    if direction == "forward":
        return layer.forward(x, tape)
    if direction == "inverse":
        return layer.inverse(x, tape)
    raise ContractError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def actnorm_apply(x: Tensor, layer: ActNorm, direction: str = "forward", tape=None) -> Tensor:
    if direction == "forward":
        return layer.forward(x, tape)
    if direction == "inverse":
        return layer.inverse(x, tape)
    raise ContractError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def actnorm_init(layer: ActNorm, first_batch: Tensor) -> None:
    layer.initialize(first_batch.data)


def model_forward(x_aug: Tensor, model: FlowModel, tape=None) -> Tensor:
    return model.forward(x_aug, tape)


def model_inverse(y_aug: Tensor, model: FlowModel, tape=None) -> Tensor:
    return model.inverse(y_aug, tape)
