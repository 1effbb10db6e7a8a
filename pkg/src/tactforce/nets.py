"""Small feed-forward building blocks with hand-written backpropagation.

Everything runs in float64 numpy.  Layers cache what they need during
``forward`` and return input gradients from ``backward`` while filling
``grads`` (aligned with ``params``).  ``Sequential`` packs and unpacks the
flat trainable-parameter vector used for serialization and for gradient
checking.
"""

from __future__ import annotations

import numpy as np


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training; carries the epoch index."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Layer:
    """Base layer: no parameters, identity behaviour."""

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator):
        super().__init__()
        self.w = _uniform_init(rng, (nout, nin), nin)
        self.b = _uniform_init(rng, (nout,), nin)
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x, train=False):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.grads[0][...] = dout.T @ self._x
        self.grads[1][...] = dout.sum(axis=0)
        return dout @ self.w


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0.0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class GridReshape(Layer):
    """Flat taxel vector (B, 3n) -> channel grid (B, 3, h, w).

    Taxel i occupies grid cell (i // w, i % w); the three activity axes
    become the input channels.
    """

    def __init__(self, n: int, h: int, w: int):
        super().__init__()
        if h * w != n:
            raise ValueError(f"grid {h}x{w} incompatible with n={n}")
        self.n, self.h, self.w = n, h, w

    def forward(self, x, train=False):
        b = x.shape[0]
        return x.reshape(b, self.n, 3).transpose(0, 2, 1).reshape(b, 3, self.h, self.w)

    def backward(self, dout):
        b = dout.shape[0]
        return dout.reshape(b, 3, self.n).transpose(0, 2, 1).reshape(b, 3 * self.n)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) padded input -> (B, C*k*k, Ho*Wo) patch matrix."""
    b, c, h, w = xp.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((b, c, k, k, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + ho, dj:dj + wo]
    return cols.reshape(b, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape, k: int) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back to the padded input."""
    b, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    dcols = dcols.reshape(b, c, k, k, ho, wo)
    dxp = np.zeros(shape)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + ho, dj:dj + wo] += dcols[:, :, di, dj]
    return dxp


class Conv2D(Layer):
    """2D convolution (cross-correlation) with zero padding."""

    def __init__(self, cin: int, cout: int, k: int, pad: int, rng: np.random.Generator):
        super().__init__()
        fan_in = cin * k * k
        self.w = _uniform_init(rng, (cout, cin, k, k), fan_in)
        self.b = _uniform_init(rng, (cout,), fan_in)
        self.k, self.pad = k, pad
        self.params = [self.w, self.b]
        self.grads = [np.zeros_like(self.w), np.zeros_like(self.b)]

    def forward(self, x, train=False):
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        self._xp_shape = xp.shape
        self._cols = _im2col(xp, self.k)
        cout = self.w.shape[0]
        wm = self.w.reshape(cout, -1)
        b_, _, h, w_ = xp.shape
        ho, wo = h - self.k + 1, w_ - self.k + 1
        out = np.matmul(wm, self._cols) + self.b[None, :, None]
        return out.reshape(b_, cout, ho, wo)

    def backward(self, dout):
        b, cout, ho, wo = dout.shape
        dm = dout.reshape(b, cout, ho * wo)
        dw = np.matmul(dm, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.grads[0][...] = dw.reshape(self.w.shape)
        self.grads[1][...] = dm.sum(axis=(0, 2))
        wm = self.w.reshape(cout, -1)
        dcols = np.matmul(wm.T, dm)
        dxp = _col2im(dcols, self._xp_shape, self.k)
        p = self.pad
        return dxp[:, :, p:-p, p:-p] if p else dxp


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (batch, height, width).

    Training uses batch statistics and updates the running estimates with
    momentum 0.1; inference normalises with the running statistics.  The
    running buffers are state, not trainable parameters.
    """

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = np.ones(c)
        self.beta = np.zeros(c)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum, self.eps = momentum, eps
        self.params = [self.gamma, self.beta]
        self.grads = [np.zeros_like(self.gamma), np.zeros_like(self.beta)]

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        self._std = np.sqrt(var + self.eps)
        self._xc = x - mean[None, :, None, None]
        self._xhat = self._xc / self._std[None, :, None, None]
        self._train = train
        return self.gamma[None, :, None, None] * self._xhat + self.beta[None, :, None, None]

    def backward(self, dout):
        self.grads[0][...] = (dout * self._xhat).sum(axis=(0, 2, 3))
        self.grads[1][...] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma[None, :, None, None]
        inv_std = 1.0 / self._std[None, :, None, None]
        if not self._train:
            return dxhat * inv_std
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dvar = (dxhat * self._xc).sum(axis=(0, 2, 3)) * (-0.5) * self._std ** -3
        dmean = -(dxhat * inv_std).sum(axis=(0, 2, 3)) \
            + dvar * (-2.0 / m) * self._xc.sum(axis=(0, 2, 3))
        return (dxhat * inv_std
                + dvar[None, :, None, None] * 2.0 * self._xc / m
                + dmean[None, :, None, None] / m)


class GlobalAvgPool(Layer):
    """(B, C, H, W) -> (B, C) spatial mean."""

    def forward(self, x, train=False):
        self._hw = x.shape[2] * x.shape[3]
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None], self._shape) / self._hw


class Sequential:
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def param_arrays(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def grad_arrays(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.param_arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.param_arrays()])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        k = 0
        for p in self.param_arrays():
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size

    def shape_manifest(self) -> list[list]:
        return [[type(layer).__name__, [list(p.shape) for p in layer.params]]
                for layer in self.layers]

    def get_buffers(self) -> dict[str, list[float]]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm2D):
                out[f"bn{i}_mean"] = layer.running_mean.tolist()
                out[f"bn{i}_var"] = layer.running_var.tolist()
        return out

    def set_buffers(self, buffers: dict) -> None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm2D):
                layer.running_mean[...] = np.asarray(buffers[f"bn{i}_mean"], dtype=float)
                layer.running_var[...] = np.asarray(buffers[f"bn{i}_var"], dtype=float)


def build_mlp(n: int, rng: np.random.Generator) -> Sequential:
    """3n -> 16 (ReLU) -> 3 linear; 48n + 67 trainable parameters."""
    return Sequential([Dense(3 * n, 16, rng), ReLU(), Dense(16, 3, rng)])


def build_cnn(n: int, h: int, w: int, rng: np.random.Generator) -> Sequential:
    """Convolutional grid model; 2479 trainable parameters on the 6x5 grid.

    Two same-padded 3x3 convolutions (6 then 12 channels, ReLU), batch
    norm, a valid 2x2 convolution to 24 channels (ReLU), global average
    pooling, then 24 -> 16 (ReLU) -> 3 linear.
    """
    if h < 2 or w < 2:
        raise ValueError("grid must be at least 2x2 for the 2x2 convolution")
    return Sequential([
        GridReshape(n, h, w),
        Conv2D(3, 6, 3, pad=1, rng=rng), ReLU(),
        Conv2D(6, 12, 3, pad=1, rng=rng), ReLU(),
        BatchNorm2D(12),
        Conv2D(12, 24, 2, pad=0, rng=rng), ReLU(),
        GlobalAvgPool(),
        Dense(24, 16, rng), ReLU(),
        Dense(16, 3, rng),
    ])


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient wrt pred."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def _relu_masks(net: Sequential) -> list[np.ndarray]:
    return [layer._mask.copy() for layer in net.layers if isinstance(layer, ReLU)]


def gradient_check(net: Sequential, x: np.ndarray, y: np.ndarray, *,
                   n_coords: int = 20, step: float = 1e-4,
                   seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    The loss is piecewise smooth in the parameters; a coordinate whose
    perturbation flips any ReLU mask sits on a kink where central
    differences are invalid, so such draws are skipped and redrawn (the
    analytic gradient is still exercised at ``n_coords`` valid points).
    """
    rng = np.random.default_rng(seed)
    theta0 = net.get_flat()

    def loss_and_masks(theta):
        net.set_flat(theta)
        pred = net.forward(x, train=True)
        return mse_loss(pred, y)[0], _relu_masks(net)

    net.set_flat(theta0)
    pred = net.forward(x, train=True)
    _, dpred = mse_loss(pred, y)
    net.backward(dpred)
    grad = np.concatenate([g.ravel() for g in net.grad_arrays()])

    worst, checked, attempts = 0.0, 0, 0
    while checked < n_coords:
        attempts += 1
        if attempts > 50 * n_coords:
            raise RuntimeError("could not find enough kink-free coordinates")
        i = int(rng.integers(net.n_params))
        e = np.zeros_like(theta0)
        e[i] = step
        up, masks_up = loss_and_masks(theta0 + e)
        dn, masks_dn = loss_and_masks(theta0 - e)
        if any(not np.array_equal(a, b) for a, b in zip(masks_up, masks_dn)):
            continue
        numeric = (up - dn) / (2.0 * step)
        denom = max(abs(numeric), abs(grad[i]), 1e-12)
        worst = max(worst, abs(numeric - grad[i]) / denom)
        checked += 1
    net.set_flat(theta0)
    return worst


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_minibatch(net: Sequential, x: np.ndarray, y: np.ndarray, *,
                    epochs: int, batch_size: int, learning_rate: float,
                    seed: int = 0) -> list[float]:
    """Adam minimisation of the MSE; returns per-epoch mean training loss.

    Batches are reshuffled every epoch from a generator seeded once, so the
    whole run is a pure function of (initial weights, data, seed).
    """
    rng = np.random.default_rng(seed)
    n = len(x)
    opt = Adam(net.param_arrays(), lr=learning_rate)
    curve = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            pred = net.forward(x[idx], train=True)
            loss, dpred = mse_loss(pred, y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            net.backward(dpred)
            opt.step(net.grad_arrays())
            total += loss * len(idx)
            seen += len(idx)
        curve.append(total / seen)
    return curve
