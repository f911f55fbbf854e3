"""A small DeepONet written against plain numpy arrays.

The kernel estimate at grid node ``x`` is

    k_hat(x) = out_shift + out_scale * (sum_k branch_k(s) trunk_k(x) + bias)

where ``s`` is the normalised estimate sampled at fixed sensor locations.
Gradients are derived by hand; all randomness flows from a Philox generator
so training is bit-reproducible on one platform.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import Grid1D, GridFunction, _check_same_grid

ACTIVATIONS = ("tanh", "relu")

MODEL_MAGIC = b"DONM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHBxIIIIq")


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: numpy's counter-based Philox bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 3:
            raise ValueError("an MLP needs input, at least one hidden layer and output")
        if min(widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


def _init_layers(spec: MlpSpec, rng: np.random.Generator) -> list:
    layers = []
    w = spec.layer_widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        layers.append([rng.normal(0.0, std, size=(fan_in, fan_out)), np.zeros(fan_out)])
    return layers


@dataclass
class DeepOnetModel:
    branch: MlpSpec
    trunk: MlpSpec
    branch_layers: list
    trunk_layers: list
    sensors: np.ndarray
    output_bias: float = 0.0
    in_shift: Optional[np.ndarray] = None
    in_scale: Optional[np.ndarray] = None
    out_shift: float = 0.0
    out_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.branch.layer_widths[-1] != self.trunk.layer_widths[-1]:
            raise ValueError("branch and trunk output widths must match")
        if self.trunk.layer_widths[0] != 1:
            raise ValueError("trunk input width must be 1")
        if self.branch.activation != self.trunk.activation:
            raise ValueError("branch and trunk must share one activation")
        self.sensors = np.asarray(self.sensors, dtype=np.float64)
        width = self.branch.layer_widths[0]
        if width % self.sensors.size:
            raise ValueError("branch input width must be a multiple of the sensor count")
        if self.in_shift is None:
            self.in_shift = np.zeros(width)
        if self.in_scale is None:
            self.in_scale = np.ones(width)
        self.in_shift = np.asarray(self.in_shift, dtype=np.float64)
        self.in_scale = np.asarray(self.in_scale, dtype=np.float64)

    @classmethod
    def initialize(
        cls,
        m: int = 101,
        p: int = 32,
        branch_hidden: Sequence[int] = (64, 64),
        trunk_hidden: Sequence[int] = (32, 32),
        activation: str = "tanh",
        seed: int = 0,
        B: float = 5.0,
        n_inputs: int = 1,
    ) -> "DeepOnetModel":
        """Glorot-normal weights; inputs scaled by 1/B and outputs by B e^B
        until :func:`train` refits the scaling to data."""
        rng = make_rng(seed)
        branch = MlpSpec((m * n_inputs, *branch_hidden, p), activation)
        trunk = MlpSpec((1, *trunk_hidden, p), activation)
        return cls(
            branch=branch,
            trunk=trunk,
            branch_layers=_init_layers(branch, rng),
            trunk_layers=_init_layers(trunk, rng),
            sensors=np.linspace(0.0, 1.0, m),
            in_scale=np.full(m * n_inputs, B),
            out_scale=B * math.exp(B),
            seed=seed,
        )

    @classmethod
    def zeros(cls, m: int = 101, p: int = 32, **kw) -> "DeepOnetModel":
        model = cls.initialize(m=m, p=p, **kw)
        for layer in model.branch_layers + model.trunk_layers:
            for arr in layer:
                arr[...] = 0.0
        model.output_bias = 0.0
        model.in_shift[:] = 0.0
        model.in_scale[:] = 1.0
        model.out_shift, model.out_scale = 0.0, 1.0
        return model

    @property
    def m(self) -> int:
        return self.sensors.size

    @property
    def p(self) -> int:
        return self.branch.layer_widths[-1]

    @property
    def n_params(self) -> int:
        return self.branch.n_params + self.trunk.n_params + 1

    def parameters(self) -> list:
        """Weight and bias arrays, branch layers first. The scalar
        ``output_bias`` is kept separately."""
        out = [a for layer in self.branch_layers for a in layer]
        out += [a for layer in self.trunk_layers for a in layer]
        return out

    def copy(self) -> "DeepOnetModel":
        return replace(
            self,
            branch_layers=[[W.copy(), b.copy()] for W, b in self.branch_layers],
            trunk_layers=[[W.copy(), b.copy()] for W, b in self.trunk_layers],
            sensors=self.sensors.copy(),
            in_shift=self.in_shift.copy(),
            in_scale=self.in_scale.copy(),
        )

    def check_finite(self) -> None:
        arrays = self.parameters() + [self.in_shift, self.in_scale]
        scalars = [self.output_bias, self.out_shift, self.out_scale]
        if not all(np.all(np.isfinite(a)) for a in arrays) or not np.all(np.isfinite(scalars)):
            raise ValueError("model contains non-finite parameters")


# Plain MLP passes.


def _act(z, name):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, a, name):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


def _mlp_forward(layers, X, activation):
    cache = [(None, X)]
    a = X
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = a @ W + b
        a = z if i == last else _act(z, activation)
        cache.append((z, a))
    return a, cache


def _mlp_backward(layers, cache, d_out, activation):
    grads = [None] * len(layers)
    dz = d_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_prev = cache[i][1]
        grads[i] = [a_prev.T @ dz, dz.sum(axis=0)]
        if i > 0:
            z_prev, a_prev_act = cache[i]
            dz = (dz @ W.T) * _act_grad(z_prev, a_prev_act, activation)
    return grads


def normalize_inputs(model: DeepOnetModel, S: np.ndarray) -> np.ndarray:
    return (S - model.in_shift) / model.in_scale


def trunk_features(model: DeepOnetModel, x: np.ndarray) -> np.ndarray:
    out, _ = _mlp_forward(model.trunk_layers, np.asarray(x, dtype=np.float64)[:, None],
                          model.trunk.activation)
    return out


def branch_features(model: DeepOnetModel, S: np.ndarray) -> np.ndarray:
    out, _ = _mlp_forward(model.branch_layers, normalize_inputs(model, S),
                          model.branch.activation)
    return out


def predict(model: DeepOnetModel, S: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Kernels for a batch of raw sensor inputs ``S`` (rows) at nodes ``x``."""
    z = branch_features(model, np.atleast_2d(S)) @ trunk_features(model, x).T
    return model.out_shift + model.out_scale * (z + model.output_bias)


def sensor_values(model: DeepOnetModel, f: GridFunction) -> np.ndarray:
    if f.grid.n_points == model.m and np.allclose(f.grid.x, model.sensors, atol=1e-14):
        return f.values
    return np.interp(model.sensors, f.grid.x, f.values)


def forward(model: DeepOnetModel, beta_hat: GridFunction) -> GridFunction:
    """Neural kernel estimate on ``beta_hat``'s grid."""
    if not np.all(np.isfinite(beta_hat.values)):
        raise ValueError("non-finite input")
    model.check_finite()
    k = predict(model, sensor_values(model, beta_hat), beta_hat.grid.x)[0]
    return GridFunction(beta_hat.grid, k)


def forward_derivative(
    model_k1: DeepOnetModel, beta_hat: GridFunction, beta_hat_t: GridFunction
) -> GridFunction:
    """Neural estimate of the kernel's rate of change along ``beta_hat_t``."""
    _check_same_grid(beta_hat, beta_hat_t)
    if model_k1.branch.layer_widths[0] != 2 * model_k1.m:
        raise ValueError("derivative model needs a branch input of width 2m")
    model_k1.check_finite()
    s = np.concatenate([sensor_values(model_k1, beta_hat), sensor_values(model_k1, beta_hat_t)])
    k1 = predict(model_k1, s, beta_hat.grid.x)[0]
    return GridFunction(beta_hat.grid, k1)


class NeuralKernel:
    """Neural kernel operator bound to one grid.

    Trunk features depend only on the evaluation nodes, so they are computed
    once here; each call then costs a sensor read, one branch pass and an
    ``(n, p)`` matvec.
    """

    def __init__(self, model: DeepOnetModel, grid: Grid1D):
        model.check_finite()
        self.model = model
        self.grid = grid
        self._basis = trunk_features(model, grid.x) * model.out_scale
        self._offset = model.out_shift + model.out_scale * model.output_bias
        # sensors that coincide with every k-th node are read by slicing
        self._stride = None
        if (grid.n_points - 1) % (model.m - 1) == 0:
            k = (grid.n_points - 1) // (model.m - 1)
            if np.allclose(grid.x[::k], model.sensors, rtol=0, atol=1e-12):
                self._stride = k
        # inference-only branch pass: no backprop cache, scaling folded in
        self._layers = [(W, b) for W, b in model.branch_layers]
        self._shift = model.in_shift
        self._inv_scale = 1.0 / model.in_scale
        self._act = model.branch.activation

    def __call__(self, beta_hat: GridFunction) -> GridFunction:
        v = beta_hat.values
        if self._stride is not None:
            s = v[::self._stride]
        else:
            s = np.interp(self.model.sensors, self.grid.x, v)
        a = (s - self._shift) * self._inv_scale
        for W, b in self._layers[:-1]:
            a = _act(a @ W + b, self._act)
        W, b = self._layers[-1]
        return GridFunction(self.grid, self._basis @ (a @ W + b) + self._offset)


# Training.


@dataclass
class TrainReport:
    epochs_run: int
    final_train_rel_l2: float
    final_test_rel_l2: float
    wall_time_s: float
    rng_seed: int
    final_train_loss: float = float("nan")
    loss_history: list = field(default_factory=list, repr=False)


def loss_and_grads(model: DeepOnetModel, S: np.ndarray, Y: np.ndarray, x: np.ndarray):
    """Mean squared error in normalised output units and its gradient.

    Returns ``(loss, grads)`` with ``grads`` ordered like
    :meth:`DeepOnetModel.parameters` followed by the output bias.
    """
    act = model.branch.activation
    bout, bcache = _mlp_forward(model.branch_layers, normalize_inputs(model, S), act)
    tout, tcache = _mlp_forward(model.trunk_layers, x[:, None], act)
    pred = bout @ tout.T + model.output_bias
    target = (Y - model.out_shift) / model.out_scale
    r = pred - target
    loss = float(np.mean(r * r))
    d = (2.0 / r.size) * r
    gb = _mlp_backward(model.branch_layers, bcache, d @ tout, act)
    gt = _mlp_backward(model.trunk_layers, tcache, d.T @ bout, act)
    grads = [g for layer in gb for g in layer] + [g for layer in gt for g in layer]
    grads.append(np.array(d.sum()))
    return loss, grads


def relative_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of ``|pred - target| / |target|`` (discrete 2-norms)."""
    num = np.linalg.norm(pred - target, axis=-1)
    den = np.linalg.norm(target, axis=-1)
    den = np.where(den > 0, den, 1.0)
    return float(np.mean(num / den))


def fit_scaling(model: DeepOnetModel, S: np.ndarray, Y: np.ndarray, blocks: int = 1) -> None:
    """Standardise inputs blockwise and outputs globally from training data."""
    width = S.shape[1]
    size = width // blocks
    for j in range(blocks):
        block = S[:, j * size:(j + 1) * size]
        std = float(block.std())
        model.in_shift[j * size:(j + 1) * size] = float(block.mean())
        model.in_scale[j * size:(j + 1) * size] = std if std > 1e-12 else 1.0
    std = float(Y.std())
    model.out_shift = float(Y.mean())
    model.out_scale = std if std > 1e-12 else 1.0


def fit(
    model: DeepOnetModel,
    S_train: np.ndarray,
    Y_train: np.ndarray,
    x: np.ndarray,
    *,
    S_test: Optional[np.ndarray] = None,
    Y_test: Optional[np.ndarray] = None,
    epochs: int = 1000,
    lr: float = 1e-3,
    final_lr: float = 1e-5,
    batch_size: int = 128,
    seed: int = 0,
    rescale: bool = True,
    blocks: int = 1,
    log_every: int = 0,
    logger=None,
) -> TrainReport:
    """Adam (0.9, 0.999) on mean squared error with exponential lr decay."""
    if len(S_train) == 0:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    rng = make_rng(seed)
    if rescale:
        fit_scaling(model, S_train, Y_train, blocks)
    params = model.parameters()
    bias = np.array(model.output_bias)
    params.append(bias)
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    n = len(S_train)
    decay = (final_lr / lr) ** (1.0 / max(epochs - 1, 1))
    step = 0
    history = []
    loss = float("nan")
    for epoch in range(epochs):
        lr_e = lr * decay**epoch
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            model.output_bias = float(bias)
            loss, grads = loss_and_grads(model, S_train[idx], Y_train[idx], x)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * len(idx)
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, a, v in zip(params, grads, m1, m2):
                a *= b1
                a += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr_e * (a / c1) / (np.sqrt(v / c2) + eps)
        model.output_bias = float(bias)
        history.append(total / n)
        if logger is not None and log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d loss %.3e lr %.2e", epoch + 1, history[-1], lr_e)
    train_rel = relative_l2(predict(model, S_train, x), Y_train)
    test_rel = float("nan")
    if S_test is not None and len(S_test):
        test_rel = relative_l2(predict(model, S_test, x), Y_test)
    return TrainReport(
        epochs_run=epochs,
        final_train_rel_l2=train_rel,
        final_test_rel_l2=test_rel,
        wall_time_s=time.perf_counter() - t0,
        rng_seed=seed,
        final_train_loss=history[-1] if history else float("nan"),
        loss_history=history,
    )


def split_by_run(run_ids: np.ndarray, test_fraction: float, seed: int):
    """Hold out whole runs (one sigma draw each); at least one run each side
    when there are two or more runs."""
    runs = np.unique(run_ids)
    rng = make_rng(seed)
    n_test = int(round(test_fraction * len(runs)))
    if len(runs) > 1:
        n_test = min(max(n_test, 1), len(runs) - 1)
    else:
        n_test = 0
    test_runs = np.sort(rng.permutation(runs)[:n_test])
    test_mask = np.isin(run_ids, test_runs)
    return np.flatnonzero(~test_mask), np.flatnonzero(test_mask)


def train(
    dataset,
    model: DeepOnetModel,
    epochs: int = 1000,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    test_fraction: float = 0.1,
    **kw,
) -> TrainReport:
    """Fit ``model`` to a :class:`backstep.dataset.KernelDataset`."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.m != model.m or not np.allclose(dataset.sensors, model.sensors):
        raise ValueError("dataset sensors differ from model sensors")
    train_idx, test_idx = split_by_run(dataset.run_ids, test_fraction, seed)
    S, Y = dataset.beta_hat, dataset.kernels
    x = Grid1D(dataset.n_points).x
    return fit(
        model, S[train_idx], Y[train_idx], x,
        S_test=S[test_idx], Y_test=Y[test_idx],
        epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, **kw,
    )


# Binary model files.


def _layer_arrays(model):
    return [a for W, b in model.branch_layers + model.trunk_layers for a in (W, b)]


def save_model(model: DeepOnetModel, path) -> None:
    bw, tw = model.branch.layer_widths, model.trunk.layer_widths
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            MODEL_MAGIC, MODEL_VERSION, ACTIVATIONS.index(model.branch.activation),
            model.m, model.p, len(bw), len(tw), int(model.seed),
        ))
        fh.write(struct.pack(f"<{len(bw)}I", *bw))
        fh.write(struct.pack(f"<{len(tw)}I", *tw))
        floats = [
            model.in_shift, model.in_scale,
            np.array([model.out_shift, model.out_scale, model.output_bias]),
            model.sensors,
        ] + _layer_arrays(model)
        for arr in floats:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_header(buf: bytes):
    if len(buf) < _HEADER.size:
        raise ModelFormatError("truncated model header")
    magic, version, act, m, p, nb, nt, seed = _HEADER.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not a DeepONet model file")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    off = _HEADER.size
    need = off + 4 * (nb + nt)
    if len(buf) < need:
        raise ModelFormatError("truncated model header")
    bw = struct.unpack_from(f"<{nb}I", buf, off)
    tw = struct.unpack_from(f"<{nt}I", buf, off + 4 * nb)
    if act >= len(ACTIVATIONS):
        raise ModelFormatError(f"unknown activation id {act}")
    header = dict(version=version, activation=ACTIVATIONS[act], m=m, p=p,
                  branch_widths=bw, trunk_widths=tw, seed=seed)
    return header, need


def load_model(path) -> DeepOnetModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    h, off = _read_header(buf)
    branch = MlpSpec(h["branch_widths"], h["activation"])
    trunk = MlpSpec(h["trunk_widths"], h["activation"])
    width = branch.layer_widths[0]
    shapes = [(width,), (width,), (3,), (h["m"],)]
    for spec in (branch, trunk):
        w = spec.layer_widths
        for a, b in zip(w[:-1], w[1:]):
            shapes += [(a, b), (b,)]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(buf) != off + 8 * total:
        raise ModelFormatError(
            f"model payload has {len(buf) - off} bytes, expected {8 * total}"
        )
    flat = np.frombuffer(buf, dtype="<f8", offset=off).astype(np.float64)
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).copy())
        pos += size
    in_shift, in_scale, scal, sensors = arrays[:4]
    layers = [list(pair) for pair in zip(arrays[4::2], arrays[5::2])]
    nb = len(branch.layer_widths) - 1
    return DeepOnetModel(
        branch=branch, trunk=trunk,
        branch_layers=layers[:nb], trunk_layers=layers[nb:],
        sensors=sensors, output_bias=float(scal[2]),
        in_shift=in_shift, in_scale=in_scale,
        out_shift=float(scal[0]), out_scale=float(scal[1]), seed=h["seed"],
    )


def inspect_model(path) -> dict:
    model = load_model(path)
    with open(path, "rb") as fh:
        header, _ = _read_header(fh.read(4096))
    header.update(
        n_params=model.n_params,
        in_scale=(float(model.in_scale.min()), float(model.in_scale.max())),
        out_shift=model.out_shift,
        out_scale=model.out_scale,
    )
    return header
