"""Plain and regularized multilayer perceptrons, trained with numpy backprop.

A plain block is Dense -> ReLU. A regularized block appends Gaussian noise,
batch normalization and dropout, and can concatenate the block input onto
its output (skip connection). Plain nets use Adam, regularized ones AdamW with
decoupled weight decay and optional weight averaging over the tail epochs.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from geoact.activities import N_CLASSES
from geoact.errors import InvalidHyperparameterError, TrainingDivergedError
from geoact.models.base import ModelSpec, Standardizer, TrainedModel, check_labels, softmax

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BN_EPS = 1e-3

COMMON_DEFAULTS = {
    "hidden_layers": 3,
    "units": 128,
    "learning_rate": 1e-3,
    "batch_size": 128,
    "max_epochs": 500,
    "patience": 10,
    "tol": 1e-3,
    "val_fraction": 0.1,
    "dtype": "float32",
}
RMLP_DEFAULTS = {
    **COMMON_DEFAULTS,
    "dropout_rate": 0.1,
    "weight_decay": 1e-4,
    "stddev": 0.1,
    "skip": True,
    "swa": True,
    "swa_epochs": 5,
    "batch_norm": True,
}


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype):
        limit = np.sqrt(6.0 / (n_in + n_out))  # Glorot uniform
        self.W = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)

    def params(self):
        return [self.W, self.b]

    def decays(self):
        return [True, False]

    def forward(self, x, train, rng):
        self.x = x
        return x @ self.W + self.b

    def backward(self, dy):
        self.grads = [self.x.T @ dy, dy.sum(axis=0)]
        return dy @ self.W.T


class ReLU:
    def params(self):
        return []

    def decays(self):
        return []

    def forward(self, x, train, rng):
        self.mask = x > 0
        return x * self.mask

    def backward(self, dy):
        self.grads = []
        return dy * self.mask


class GaussianNoise:
    def __init__(self, stddev: float):
        self.stddev = stddev
        self.frozen = False
        self.noise = None

    def params(self):
        return []

    def decays(self):
        return []

    def forward(self, x, train, rng):
        if not train or self.stddev == 0:
            return x
        if not self.frozen or self.noise is None:
            self.noise = (rng.standard_normal(x.shape) * self.stddev).astype(x.dtype)
        return x + self.noise

    def backward(self, dy):
        self.grads = []
        return dy


class Dropout:
    def __init__(self, rate: float):
        self.rate = rate
        self.frozen = False
        self.mask = None

    def params(self):
        return []

    def decays(self):
        return []

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            self.mask = None
            return x
        if not self.frozen or self.mask is None:
            keep = rng.random(x.shape) >= self.rate
            self.mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self.mask

    def backward(self, dy):
        self.grads = []
        return dy if self.mask is None else dy * self.mask


class BatchNorm:
    def __init__(self, width: int, dtype):
        self.gamma = np.ones(width, dtype=dtype)
        self.beta = np.zeros(width, dtype=dtype)
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.update_running = True
        self.start_epoch()

    def start_epoch(self) -> None:
        self._n = 0
        self._sum = np.zeros(self.gamma.shape, dtype=np.float64)
        self._sq = np.zeros(self.gamma.shape, dtype=np.float64)

    def finish_epoch(self) -> None:
        """Running statistics become the row-weighted average of this epoch's batches."""
        if self._n == 0:
            return
        mean = self._sum / self._n
        self.running_mean[...] = mean
        self.running_var[...] = np.maximum(self._sq / self._n - mean**2, 0.0)

    def params(self):
        return [self.gamma, self.beta]

    def decays(self):
        return [False, False]

    def forward(self, x, train, rng):
        if not train:
            return (x - self.running_mean) / np.sqrt(self.running_var + BN_EPS) * self.gamma + self.beta
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if self.update_running:
            m = x.shape[0]
            self._n += m
            self._sum += m * mu
            self._sq += m * (var.astype(np.float64) + mu.astype(np.float64) ** 2)
        self.inv_std = 1.0 / np.sqrt(var + BN_EPS)
        self.xhat = (x - mu) * self.inv_std
        return self.xhat * self.gamma + self.beta

    def backward(self, dy):
        m = dy.shape[0]
        self.grads = [(dy * self.xhat).sum(axis=0), dy.sum(axis=0)]
        dxhat = dy * self.gamma
        return (
            self.inv_std / m
            * (m * dxhat - dxhat.sum(axis=0) - self.xhat * (dxhat * self.xhat).sum(axis=0))
        )


class Block:
    def __init__(self, layers: list, skip: bool):
        self.layers = layers
        self.skip = skip

    def forward(self, x, train, rng):
        h = x
        for layer in self.layers:
            h = layer.forward(h, train, rng)
        self.in_width = x.shape[1]
        return np.concatenate([x, h], axis=1) if self.skip else h

    def backward(self, dy):
        if self.skip:
            dx_skip, dh = dy[:, : self.in_width], dy[:, self.in_width:]
        else:
            dx_skip, dh = None, dy
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dh if dx_skip is None else dh + dx_skip


class Network:
    def __init__(self, n_in: int, n_out: int, cfg: dict, regularized: bool, rng: np.random.Generator):
        dtype = np.dtype(cfg["dtype"])
        self.dtype = dtype
        self.blocks: list[Block] = []
        width = n_in
        for _ in range(int(cfg["hidden_layers"])):
            layers: list = [Dense(width, int(cfg["units"]), rng, dtype), ReLU()]
            skip = False
            if regularized:
                layers.append(GaussianNoise(float(cfg["stddev"])))
                if cfg["batch_norm"]:
                    layers.append(BatchNorm(int(cfg["units"]), dtype))
                layers.append(Dropout(float(cfg["dropout_rate"])))
                skip = bool(cfg["skip"])
            self.blocks.append(Block(layers, skip))
            width = int(cfg["units"]) + (width if skip else 0)
        self.head = Dense(width, n_out, rng, dtype)

    @property
    def layers(self):
        return [l for b in self.blocks for l in b.layers] + [self.head]

    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params()]

    def decays(self) -> list[bool]:
        return [d for l in self.layers for d in l.decays()]

    def grads(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads]

    def batchnorms(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def freeze(self, frozen: bool = True) -> None:
        """Reuse the last noise/dropout draws and stop running-stat updates.

        Makes a training-mode forward pass a pure function of the
        parameters, which finite-difference checks need.
        """
        for layer in self.layers:
            if isinstance(layer, (GaussianNoise, Dropout)):
                layer.frozen = frozen
            elif isinstance(layer, BatchNorm):
                layer.update_running = not frozen

    def forward(self, X, train: bool = False, rng=None):
        h = X
        for b in self.blocks:
            h = b.forward(h, train, rng)
        return self.head.forward(h, train, rng)

    def backward(self, dlogits):
        dh = self.head.backward(dlogits)
        for b in reversed(self.blocks):
            dh = b.backward(dh)
        return dh

    def loss_and_grads(self, X, Y, train: bool = True, rng=None) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy of one-hot ``Y`` and its parameter gradients."""
        logits = self.forward(X, train, rng)
        P = softmax(logits)
        loss = float(-np.mean(np.sum(Y * np.log(np.clip(P, np.finfo(P.dtype).tiny, None)), axis=1)))
        self.backward((P - Y) / X.shape[0])
        return loss, self.grads()

    def get_state(self) -> list[np.ndarray]:
        state = [p.copy() for p in self.params()]
        for bn in self.batchnorms():
            state += [bn.running_mean.copy(), bn.running_var.copy()]
        return state

    def set_state(self, state: list[np.ndarray]) -> None:
        targets = self.params()
        for bn in self.batchnorms():
            targets += [bn.running_mean, bn.running_var]
        for dst, src in zip(targets, state):
            dst[...] = src


class Adam:
    """Adam; with ``weight_decay`` > 0 the decoupled (AdamW) update is applied."""

    def __init__(self, params, decays, lr: float, weight_decay: float = 0.0):
        self.params = params
        self.decays = decays
        self.lr = lr
        self.wd = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1 - ADAM_BETA1**self.t
        c2 = 1 - ADAM_BETA2**self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decays):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            if self.wd and decay:
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


class MLPModel(TrainedModel):
    family = "mlp"
    regularized = False

    def __init__(self, n_features, n_classes=N_CLASSES, fingerprint=None):
        super().__init__(n_features, n_classes, fingerprint)
        self.net: Network | None = None
        self.scaler: Standardizer | None = None
        self.cfg: dict = {}
        self.history_: dict[str, list[float]] = {"train_loss": [], "val_loss": [], "best_val_loss": []}
        self.best_epoch_: int = -1

    def _raw_proba(self, X):
        Z = self.scaler.transform(X).astype(self.net.dtype)
        return softmax(self.net.forward(Z, train=False).astype(np.float64))

    def _state(self):
        arrays = {f"p{i}": a for i, a in enumerate(self.net.get_state())}
        arrays["mean"], arrays["scale"] = self.scaler.mean, self.scaler.scale
        meta = {"cfg": self.cfg, "history": self.history_, "best_epoch": self.best_epoch_}
        return meta, arrays

    @classmethod
    def _from_state(cls, meta, arrays):
        n_in = arrays["mean"].shape[0]
        m = cls(n_in)
        m.cfg = meta["cfg"]
        m.history_ = meta["history"]
        m.best_epoch_ = meta["best_epoch"]
        m.scaler = Standardizer(arrays["mean"], arrays["scale"])
        state = [arrays[f"p{i}"] for i in range(sum(1 for k in arrays if k.startswith("p")))]
        head_width = [a for a in state if a.ndim == 2][-1].shape[1]
        m.net = Network(n_in, head_width, m.cfg, cls.regularized, np.random.default_rng(0))
        m.net.set_state(state)
        return m


class RMLPModel(MLPModel):
    family = "rmlp"
    regularized = True


def resolve_params(family: str, params: dict) -> dict:
    defaults = RMLP_DEFAULTS if family == "rmlp" else COMMON_DEFAULTS
    unknown = set(params) - set(defaults)
    if unknown:
        raise InvalidHyperparameterError(f"unknown {family} hyperparameters: {sorted(unknown)}")
    cfg = {**defaults, **params}
    if int(cfg["hidden_layers"]) < 0 or int(cfg["units"]) < 1:
        raise InvalidHyperparameterError("hidden_layers must be >= 0 and units >= 1")
    if not cfg["learning_rate"] > 0:
        raise InvalidHyperparameterError("learning_rate must be positive")
    if family == "rmlp":
        if not 0 <= cfg["dropout_rate"] < 1:
            raise InvalidHyperparameterError("dropout_rate must be in [0, 1)")
        if cfg["weight_decay"] < 0 or cfg["stddev"] < 0:
            raise InvalidHyperparameterError("weight_decay and stddev must be >= 0")
    return cfg


def _validation_split(y: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    from geoact.ingest import stratified_assignment

    if fraction <= 0 or len(y) < 10:
        return np.zeros(len(y), dtype=bool)
    return stratified_assignment(y, fraction, seed)


def mlp_fit(
    X: np.ndarray,
    y: np.ndarray,
    spec: ModelSpec | dict | None = None,
    n_classes: int = N_CLASSES,
    fingerprint: str | None = None,
    family: str | None = None,
) -> MLPModel:
    """Train a plain (``mlp``) or regularized (``rmlp``) network.

    A stratified ``val_fraction`` of the rows drives early stopping; the best
    epoch's weights (or their tail average when ``swa`` is on) are kept.
    """
    if spec is None:
        spec = ModelSpec(family or "mlp")
    elif isinstance(spec, dict):
        spec = ModelSpec(family or "mlp", spec)
    family = spec.family
    if family not in ("mlp", "rmlp"):
        raise ValueError(f"mlp_fit cannot train family {family!r}")
    cfg = resolve_params(family, spec.params)
    regularized = family == "rmlp"
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, n_classes)
    rng = np.random.default_rng(spec.seed)
    dtype = np.dtype(cfg["dtype"])

    val_mask = _validation_split(y, float(cfg["val_fraction"]), spec.seed)
    X_tr, y_tr = X[~val_mask], y[~val_mask]
    X_va, y_va = X[val_mask], y[val_mask]
    scaler = Standardizer().fit(X_tr)
    Z_tr = scaler.transform(X_tr).astype(dtype)
    Z_va = scaler.transform(X_va).astype(dtype)
    Y_tr = np.eye(n_classes, dtype=dtype)[y_tr]
    Y_va = np.eye(n_classes, dtype=dtype)[y_va]

    model = RMLPModel(X.shape[1], n_classes, fingerprint) if regularized else MLPModel(X.shape[1], n_classes, fingerprint)
    model.spec, model.cfg, model.scaler = spec, cfg, scaler
    net = Network(X.shape[1], n_classes, cfg, regularized, rng)
    model.net = net
    opt = Adam(net.params(), net.decays(), float(cfg["learning_rate"]), float(cfg.get("weight_decay", 0.0)) if regularized else 0.0)

    swa = regularized and bool(cfg["swa"])
    # overflow on a diverging run surfaces as a non-finite loss
    with np.errstate(over="ignore", invalid="ignore"):
        best_state, best_window, best_val = _train_loop(net, opt, model, cfg, Z_tr, Y_tr, Z_va, Y_va, rng, swa)

    net.set_state(best_state)
    if swa and len(best_window) > 1:
        averaged = [np.mean(np.stack(parts), axis=0).astype(dtype) for parts in zip(*best_window)]
        net.set_state(averaged)
        _refresh_batchnorm(net, Z_tr, int(cfg["batch_size"]))
        if len(Z_va) and _ce(net, Z_va, Y_va) > best_val:
            net.set_state(best_state)  # averaging did not help on validation
    return model


def _train_loop(net, opt, model, cfg, Z_tr, Y_tr, Z_va, Y_va, rng, swa):
    """Epoch loop with early stopping; returns the best state, its SWA window and loss."""
    window: deque[list[np.ndarray]] = deque(maxlen=max(1, int(cfg.get("swa_epochs", 1))))
    best_window: list[list[np.ndarray]] = []
    best_state = net.get_state()
    best_val = np.inf
    wait = 0
    bs = int(cfg["batch_size"])
    n = len(Z_tr)
    for epoch in range(int(cfg["max_epochs"])):
        perm = rng.permutation(n)
        total = 0.0
        for b in net.batchnorms():
            b.start_epoch()
        for s in range(0, n, bs):
            idx = perm[s:s + bs]
            if len(idx) < 2 and net.batchnorms():
                continue  # batch statistics need at least two rows
            loss, grads = net.loss_and_grads(Z_tr[idx], Y_tr[idx], train=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            opt.step(grads)
            total += loss * len(idx)
        train_loss = total / max(n, 1)
        for b in net.batchnorms():
            b.finish_epoch()
        val_loss = _ce(net, Z_va, Y_va) if len(Z_va) else train_loss
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}", epoch=epoch)
        model.history_["train_loss"].append(float(train_loss))
        model.history_["val_loss"].append(float(val_loss))
        if swa:
            window.append(net.get_state())
        if val_loss < best_val - float(cfg["tol"]):
            best_val = val_loss
            best_state = net.get_state()
            best_window = list(window)
            model.best_epoch_ = epoch
            wait = 0
        else:
            wait += 1
        model.history_["best_val_loss"].append(float(best_val))
        if wait >= int(cfg["patience"]):
            break
    return best_state, best_window, best_val


def _ce(net: Network, Z: np.ndarray, Y: np.ndarray) -> float:
    P = softmax(net.forward(Z, train=False).astype(np.float64))
    return float(-np.mean(np.log(np.clip(np.sum(P * Y, axis=1), 1e-15, None))))


def _refresh_batchnorm(net: Network, Z: np.ndarray, bs: int) -> None:
    """Recompute running statistics for averaged weights with one pass over ``Z``.

    Runs in training mode without noise, dropout or weight updates, so each
    layer normalizes with its own batch statistics.
    """
    bns = net.batchnorms()
    if not bns:
        return
    saved = [(l, getattr(l, "rate", None), getattr(l, "stddev", None)) for l in net.layers]
    for l in net.layers:
        if isinstance(l, Dropout):
            l.rate = 0.0
        if isinstance(l, GaussianNoise):
            l.stddev = 0.0
    for b in bns:
        b.start_epoch()
    for s in range(0, len(Z), bs):
        if len(Z[s:s + bs]) >= 2:
            net.forward(Z[s:s + bs], train=True, rng=None)
    for b in bns:
        b.finish_epoch()
    for l, rate, std in saved:
        if isinstance(l, Dropout):
            l.rate = rate
        if isinstance(l, GaussianNoise):
            l.stddev = std


def rmlp_fit(X, y, spec=None, n_classes: int = N_CLASSES, fingerprint=None) -> MLPModel:
    if spec is None or isinstance(spec, dict):
        spec = ModelSpec("rmlp", spec or {})
    return mlp_fit(X, y, spec, n_classes, fingerprint)
