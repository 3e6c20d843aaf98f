"""Shallow per-token convolutional foreground/background classifier.

The model is a stack of hidden blocks, each convolution -> batch norm ->
ReLU at the token-map width, followed by a two-channel 1x1 head. Kernels are
1x1 except optionally 3x3 in the first block (reflect padding). All math is
plain numpy; the analytic backward pass is verified against central finite
differences by the test suite.

Arrays are channel-last: grids (B, H, W, D), logits (B, H, W, 2). Channel 0
is background, channel 1 foreground; equal logits predict background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FormatError
from .maskops import Mask
from .merge import MergedMap

MODEL_MAGIC = b"CAFM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIIQ")
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class AtfConfig:
    """Architecture knobs: 2 hidden blocks is the small-dataset preset,
    3 the large-dataset one, 1 the tiny variant; ``first_kernel=3`` swaps a
    3x3 kernel into the first block."""

    dim: int
    n_hidden_blocks: int = 2
    first_kernel: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise DataError("dim must be >= 1")
        if self.n_hidden_blocks < 1:
            raise DataError("n_hidden_blocks must be >= 1")
        if self.first_kernel not in (1, 3):
            raise DataError("first_kernel must be 1 or 3")

    def kernel_of(self, block_index: int) -> int:
        return self.first_kernel if block_index == 0 else 1


@dataclass
class AtfBlock:
    weight: np.ndarray  # (D, D, k, k)
    bias: np.ndarray  # (D,)
    gamma: np.ndarray
    beta: np.ndarray
    run_mean: np.ndarray
    run_var: np.ndarray
    eps: float = BN_EPS


@dataclass
class AtfModel:
    blocks: list
    head_weight: np.ndarray  # (2, D, 1, 1)
    head_bias: np.ndarray  # (2,)
    config: AtfConfig

    @property
    def dtype(self):
        return self.head_weight.dtype

    @property
    def n_params(self) -> int:
        total = 0
        for block in self.blocks:
            total += block.weight.size + block.bias.size + block.gamma.size + block.beta.size
        return total + self.head_weight.size + self.head_bias.size

    def copy(self) -> "AtfModel":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "AtfModel":
        blocks = [
            AtfBlock(
                weight=b.weight.astype(dtype),
                bias=b.bias.astype(dtype),
                gamma=b.gamma.astype(dtype),
                beta=b.beta.astype(dtype),
                run_mean=b.run_mean.astype(dtype),
                run_var=b.run_var.astype(dtype),
                eps=b.eps,
            )
            for b in self.blocks
        ]
        return AtfModel(
            blocks=blocks,
            head_weight=self.head_weight.astype(dtype),
            head_bias=self.head_bias.astype(dtype),
            config=replace(self.config),
        )


def init_atf(config: AtfConfig, dtype=np.float32) -> AtfModel:
    """Uniform +-1/sqrt(fan_in) conv weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(config.seed)
    d = config.dim
    blocks = []
    for i in range(config.n_hidden_blocks):
        k = config.kernel_of(i)
        bound = 1.0 / np.sqrt(d * k * k)
        blocks.append(
            AtfBlock(
                weight=rng.uniform(-bound, bound, size=(d, d, k, k)).astype(dtype),
                bias=np.zeros(d, dtype=dtype),
                gamma=np.ones(d, dtype=dtype),
                beta=np.zeros(d, dtype=dtype),
                run_mean=np.zeros(d, dtype=dtype),
                run_var=np.ones(d, dtype=dtype),
            )
        )
    bound = 1.0 / np.sqrt(d)
    head_weight = rng.uniform(-bound, bound, size=(2, d, 1, 1)).astype(dtype)
    return AtfModel(
        blocks=blocks,
        head_weight=head_weight,
        head_bias=np.zeros(2, dtype=dtype),
        config=replace(config),
    )


def _reflect_indices(n: int, r: int) -> np.ndarray:
    idx = np.arange(-r, n + r)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - idx)


def _conv_forward(x, weight, bias):
    kh, kw = weight.shape[2], weight.shape[3]
    if kh == 1 and kw == 1:
        return np.tensordot(x, weight[:, :, 0, 0], axes=([3], [1])) + bias
    b, h, w, _ = x.shape
    ri = _reflect_indices(h, kh // 2)
    ci = _reflect_indices(w, kw // 2)
    xp = x[:, ri][:, :, ci]
    out = np.zeros((b, h, w, weight.shape[0]), dtype=x.dtype)
    for dr in range(kh):
        for dc in range(kw):
            out += np.tensordot(
                xp[:, dr : dr + h, dc : dc + w, :], weight[:, :, dr, dc], axes=([3], [1])
            )
    return out + bias


def _conv_backward(dout, x, weight):
    kh, kw = weight.shape[2], weight.shape[3]
    db = dout.sum(axis=(0, 1, 2))
    if kh == 1 and kw == 1:
        dw = np.tensordot(dout, x, axes=([0, 1, 2], [0, 1, 2]))[:, :, None, None]
        dx = np.tensordot(dout, weight[:, :, 0, 0], axes=([3], [0]))
        return dx, dw.astype(weight.dtype), db
    b, h, w, cin = x.shape
    r = kh // 2
    ri = _reflect_indices(h, r)
    ci = _reflect_indices(w, r)
    xp = x[:, ri][:, :, ci]
    dw = np.empty_like(weight)
    dxp = np.zeros_like(xp)
    for dr in range(kh):
        for dc in range(kw):
            window = xp[:, dr : dr + h, dc : dc + w, :]
            dw[:, :, dr, dc] = np.tensordot(dout, window, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, dr : dr + h, dc : dc + w, :] += np.tensordot(
                dout, weight[:, :, dr, dc], axes=([3], [0])
            )
    # fold the padded gradient back through the reflection
    hp, wp = h + 2 * r, w + 2 * r
    flat_dest = (ri[:, None] * w + ci[None, :]).ravel()
    dx_flat = np.zeros((h * w, b * cin), dtype=x.dtype)
    np.add.at(dx_flat, flat_dest, dxp.transpose(1, 2, 0, 3).reshape(hp * wp, b * cin))
    dx = dx_flat.reshape(h, w, b, cin).transpose(2, 0, 1, 3)
    return dx, dw, db


def _bn_forward(z, block: AtfBlock, train: bool, update_running: bool):
    if train:
        mu = z.mean(axis=(0, 1, 2))
        var = z.var(axis=(0, 1, 2))
        if update_running:
            m = BN_MOMENTUM
            block.run_mean = ((1 - m) * block.run_mean + m * mu).astype(block.run_mean.dtype)
            block.run_var = ((1 - m) * block.run_var + m * var).astype(block.run_var.dtype)
    else:
        mu, var = block.run_mean, block.run_var
    inv_std = 1.0 / np.sqrt(var + np.asarray(block.eps, dtype=z.dtype))
    xhat = (z - mu) * inv_std
    return block.gamma * xhat + block.beta, xhat, inv_std


def _bn_backward(dy, xhat, inv_std, gamma):
    n = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    dz = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 1, 2))
        - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dz, dgamma, dbeta


def _forward(model: AtfModel, grids, train: bool, update_running: bool = False):
    a = grids
    caches = []
    for block in model.blocks:
        z = _conv_forward(a, block.weight, block.bias)
        y, xhat, inv_std = _bn_forward(z, block, train, update_running)
        active = y > 0
        caches.append((a, xhat, inv_std, active))
        a = np.where(active, y, 0)
    logits = _conv_forward(a, model.head_weight, model.head_bias)
    return logits, (caches, a)


def _as_batch(grids, targets=None):
    grids = np.asarray(grids)
    if grids.ndim == 3:
        grids = grids[None]
    if grids.ndim != 4:
        raise DataError(f"grids must be (H,W,D) or (B,H,W,D), got shape {grids.shape}")
    if targets is None:
        return grids, None
    targets = np.asarray(targets)
    if targets.ndim == 2:
        targets = targets[None]
    if targets.shape != grids.shape[:3]:
        raise DataError(f"target shape {targets.shape} does not match grids {grids.shape[:3]}")
    return grids, targets.astype(np.int64)


def atf_forward(model: AtfModel, grid, mode: str = "eval") -> np.ndarray:
    """Logits (2, H, W) for one grid; ``train`` mode uses this grid's own
    batch statistics, ``eval`` the stored running statistics."""
    if mode not in ("train", "eval"):
        raise DataError(f"unknown mode {mode!r}")
    grids, _ = _as_batch(np.asarray(grid, dtype=model.dtype))
    if grids.shape[3] != model.config.dim:
        raise DataError(f"grid dim {grids.shape[3]} != model dim {model.config.dim}")
    logits, _ = _forward(model, grids, train=(mode == "train"))
    return logits[0].transpose(2, 0, 1)


def atf_predict(model: AtfModel, mmap: MergedMap) -> Mask:
    """Per-cell argmax over the two channels; ties go to background."""
    logits = atf_forward(model, mmap.grid, mode="eval")
    return Mask((logits[1] > logits[0]).astype(np.uint8))


def _loss_and_dlogits(logits, targets):
    shift = logits.max(axis=-1, keepdims=True)
    exps = np.exp(logits - shift)
    total = exps.sum(axis=-1, keepdims=True)
    log_probs = (logits - shift) - np.log(total)
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked.astype(np.float64).mean())
    n_tokens = targets.size
    dlogits = exps / total
    np.subtract.at(dlogits.reshape(-1, 2), (np.arange(n_tokens), targets.ravel()), 1.0)
    dlogits /= n_tokens
    return loss, dlogits


def atf_loss(model: AtfModel, grids, targets, train: bool = True) -> float:
    """Mean two-class cross-entropy over all tokens; pure, no state update."""
    grids, targets = _as_batch(np.asarray(grids, dtype=model.dtype), targets)
    logits, _ = _forward(model, grids, train=train)
    loss, _ = _loss_and_dlogits(logits, targets)
    return loss


def _grad_vector(model, caches, a_last, dlogits):
    da, dw_head, db_head = _conv_backward(dlogits, a_last, model.head_weight)
    block_grads = []
    for block, (a_in, xhat, inv_std, active) in zip(
        reversed(model.blocks), reversed(caches)
    ):
        dy = np.where(active, da, 0)
        dz, dgamma, dbeta = _bn_backward(dy, xhat, inv_std, block.gamma)
        da, dw, db = _conv_backward(dz, a_in, block.weight)
        block_grads.append((dw, db, dgamma, dbeta))
    parts = []
    for dw, db, dgamma, dbeta in reversed(block_grads):
        parts += [dw.ravel(), db, dgamma, dbeta]
    parts += [dw_head.ravel(), db_head]
    return np.concatenate([np.asarray(p, dtype=model.dtype).ravel() for p in parts])


def atf_loss_grad(model: AtfModel, grids, targets):
    """Loss and analytic gradient of every trainable parameter.

    Gradients come back as one flat vector in the layout of
    :func:`get_param_vector`. Batch-norm runs on batch statistics and the
    running statistics are left untouched.
    """
    grids, targets = _as_batch(np.asarray(grids, dtype=model.dtype), targets)
    logits, (caches, a_last) = _forward(model, grids, train=True)
    loss, dlogits = _loss_and_dlogits(logits, targets)
    return loss, _grad_vector(model, caches, a_last, dlogits)


def get_param_vector(model: AtfModel) -> np.ndarray:
    """Trainable parameters flattened: per block weight, bias, gamma, beta;
    then head weight and bias. Running statistics are buffers, not included."""
    parts = []
    for block in model.blocks:
        parts += [block.weight.ravel(), block.bias, block.gamma, block.beta]
    parts += [model.head_weight.ravel(), model.head_bias]
    return np.concatenate(parts)


def set_param_vector(model: AtfModel, vector: np.ndarray) -> None:
    vector = np.asarray(vector)
    if vector.size != model.n_params:
        raise DataError(f"expected {model.n_params} parameters, got {vector.size}")
    offset = 0

    def pull(shape, dtype):
        nonlocal offset
        n = int(np.prod(shape))
        out = vector[offset : offset + n].reshape(shape).astype(dtype)
        offset += n
        return out

    for block in model.blocks:
        block.weight = pull(block.weight.shape, block.weight.dtype)
        block.bias = pull(block.bias.shape, block.bias.dtype)
        block.gamma = pull(block.gamma.shape, block.gamma.dtype)
        block.beta = pull(block.beta.shape, block.beta.dtype)
    model.head_weight = pull(model.head_weight.shape, model.head_weight.dtype)
    model.head_bias = pull(model.head_bias.shape, model.head_bias.dtype)


@dataclass
class TrainConfig:
    epochs: int
    lr0: float = 0.1
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.lr0 < 0:
            raise DataError("lr0 must be >= 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.schedule != "cosine":
            raise DataError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        return 0.5 * self.lr0 * (1.0 + np.cos(np.pi * epoch / self.epochs))


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    token_accs: list = field(default_factory=list)
    lrs: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss,token_acc,lr\n")
            rows = zip(self.losses, self.token_accs, self.lrs)
            for epoch, (loss, acc, lr) in enumerate(rows):
                fh.write(f"{epoch},{loss!r},{acc!r},{lr!r}\n")


def train_atf(dataset, tcfg: TrainConfig, acfg: AtfConfig, progress=None):
    """SGD with momentum over shuffled minibatches of (MergedMap, Mask) pairs.

    The input maps are never modified; only filter parameters move.
    Deterministic for fixed configs and seeds. ``progress`` is called as
    ``progress(epoch, loss, token_acc, lr)`` after each epoch.
    """
    if not dataset:
        raise DataError("empty training dataset")
    grids = []
    targets = []
    shape = None
    for mmap, mask in dataset:
        if mmap.dim != acfg.dim:
            raise DataError(f"map dim {mmap.dim} != configured dim {acfg.dim}")
        if shape is None:
            shape = (mmap.height, mmap.width, mmap.dim)
        elif (mmap.height, mmap.width, mmap.dim) != shape:
            raise DataError("inconsistent map shapes across dataset")
        if (mask.height, mask.width) != shape[:2]:
            raise DataError(f"mask {mask.height}x{mask.width} does not match grid {shape[:2]}")
        grids.append(np.asarray(mmap.grid, dtype=np.float32))
        targets.append(mask.bits.astype(np.int64))
    grids = np.stack(grids)
    targets = np.stack(targets)

    model = init_atf(acfg)
    theta = get_param_vector(model)
    velocity = np.zeros_like(theta)
    rng = np.random.default_rng(tcfg.seed)
    log = TrainLog()
    n = len(dataset)
    for epoch in range(tcfg.epochs):
        lr = float(tcfg.lr_at(epoch))
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        seen_tokens = 0
        for start in range(0, n, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            batch_grids = grids[batch].astype(model.dtype)
            batch_targets = targets[batch]
            logits, (caches, a_last) = _forward(model, batch_grids, train=True, update_running=True)
            loss, dlogits = _loss_and_dlogits(logits, batch_targets)
            grad = _grad_vector(model, caches, a_last, dlogits)
            velocity = tcfg.momentum * velocity + grad
            theta = theta - lr * velocity
            set_param_vector(model, theta)
            n_tokens = batch_targets.size
            loss_sum += loss * n_tokens
            predicted = (logits[..., 1] > logits[..., 0]).astype(np.int64)
            correct += int((predicted == batch_targets).sum())
            seen_tokens += n_tokens
        log.losses.append(loss_sum / seen_tokens)
        log.token_accs.append(correct / seen_tokens)
        log.lrs.append(lr)
        if progress is not None:
            progress(epoch, log.losses[-1], log.token_accs[-1], lr)
    return model, log


def save_model(model: AtfModel, path) -> None:
    """Versioned binary dump: header, config, then float32 parameters and
    batch-norm buffers in declaration order."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(
            _MODEL_HEADER.pack(
                MODEL_MAGIC, MODEL_VERSION, cfg.n_hidden_blocks, cfg.first_kernel, cfg.dim, cfg.seed
            )
        )
        for block in model.blocks:
            for arr in (block.weight, block.bias, block.gamma, block.beta, block.run_mean, block.run_var):
                fh.write(np.asarray(arr, dtype="<f4").tobytes())
            fh.write(np.asarray([block.eps], dtype="<f4").tobytes())
        fh.write(np.asarray(model.head_weight, dtype="<f4").tobytes())
        fh.write(np.asarray(model.head_bias, dtype="<f4").tobytes())


def load_model(path) -> AtfModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n_blocks, first_kernel, dim, seed = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config = AtfConfig(dim=dim, n_hidden_blocks=n_blocks, first_kernel=first_kernel, seed=seed)
    expected = 0
    for i in range(n_blocks):
        k = config.kernel_of(i)
        expected += dim * dim * k * k + 5 * dim + 1
    expected += 2 * dim + 2
    if len(data) != _MODEL_HEADER.size + 4 * expected:
        raise FormatError(
            f"{path}: size mismatch, expected {_MODEL_HEADER.size + 4 * expected} bytes, got {len(data)}"
        )
    floats = np.frombuffer(data, dtype="<f4", offset=_MODEL_HEADER.size)
    if not np.isfinite(floats).all():
        raise FormatError(f"{path}: non-finite parameter value")
    offset = 0

    def pull(shape):
        nonlocal offset
        n = int(np.prod(shape))
        out = floats[offset : offset + n].reshape(shape).copy()
        offset += n
        return out

    blocks = []
    for i in range(n_blocks):
        k = config.kernel_of(i)
        blocks.append(
            AtfBlock(
                weight=pull((dim, dim, k, k)),
                bias=pull((dim,)),
                gamma=pull((dim,)),
                beta=pull((dim,)),
                run_mean=pull((dim,)),
                run_var=pull((dim,)),
                eps=float(pull((1,))[0]),
            )
        )
    head_weight = pull((2, dim, 1, 1))
    head_bias = pull((2,))
    return AtfModel(blocks=blocks, head_weight=head_weight, head_bias=head_bias, config=config)


def hidden_activations(model: AtfModel, mmap: MergedMap) -> list:
    """Post-ReLU activations of each hidden block in eval mode, for the
    separability diagnostics; returns (H, W, D) arrays, one per block."""
    grids, _ = _as_batch(np.asarray(mmap.grid, dtype=model.dtype))
    outs = []
    a = grids
    for block in model.blocks:
        z = _conv_forward(a, block.weight, block.bias)
        y, _, _ = _bn_forward(z, block, train=False, update_running=False)
        a = np.where(y > 0, y, 0)
        outs.append(a[0].copy())
    return outs
