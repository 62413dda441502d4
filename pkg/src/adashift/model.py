"""Desk-scale differentiable model trained with hand-derived gradients.

The network is a tanh MLP feature extractor, a linear projection head, a
temperature-scaled cosine classifier (with a plain linear variant for
ablations) and a small domain discriminator on the extracted features.
Adversarial training uses gradient reversal: the discriminator parameters
descend the domain loss while the feature extractor receives that loss's
gradient negated and scaled by a schedule coefficient. All gradients are
derived per layer and checked against central finite differences in the test
suite; no autodiff framework is involved.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DivergenceError

_CKPT_MAGIC = b"ADCK"
_CKPT_VERSION = 1

# domain label convention: source = 1, target = 0
SOURCE_DOMAIN_LABEL = 1


def grl_coefficient(progress: float, schedule: str = "logistic") -> float:
    """Gradient-reversal coefficient at training progress s in [0, 1].

    'logistic' is 2 / (1 + exp(-s)), starting at 1; 'warmup' is the ramp
    2 / (1 + exp(-10 s)) - 1, starting at 0.
    """
    s = float(progress)
    if schedule == "logistic":
        return 2.0 / (1.0 + np.exp(-s))
    if schedule == "warmup":
        return 2.0 / (1.0 + np.exp(-10.0 * s)) - 1.0
    raise ValueError(f"unknown GRL schedule {schedule!r}")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class ToyModel:
    """Parameter container plus forward/backward passes.

    Parameter blocks: f_w1/f_b1/f_w2/f_b2 (feature extractor), p_w/p_b
    (projection head), c_w (classifier weight columns; c_b only for the
    linear variant), d_w1..d_b3 (discriminator).
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        feature_dim: int,
        embed_dim: int,
        num_classes: int,
        disc_hidden: int = 32,
        temperature: float = 0.1,
        classifier: str = "cosine",
        rng: np.random.Generator | None = None,
    ):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        if classifier not in ("cosine", "linear"):
            raise ValueError(f"unknown classifier {classifier!r}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        self.disc_hidden = disc_hidden
        self.temperature = temperature
        self.classifier = classifier
        rng = rng or np.random.default_rng(0)

        def w(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        self.params: dict[str, np.ndarray] = {
            "f_w1": w(input_dim, hidden_dim),
            "f_b1": np.zeros(hidden_dim),
            "f_w2": w(hidden_dim, feature_dim),
            "f_b2": np.zeros(feature_dim),
            "p_w": w(feature_dim, embed_dim),
            "p_b": np.zeros(embed_dim),
            "c_w": rng.normal(0.0, 1.0, size=(embed_dim, num_classes)),
            "d_w1": w(feature_dim, disc_hidden),
            "d_b1": np.zeros(disc_hidden),
            "d_w2": w(disc_hidden, disc_hidden),
            "d_b2": np.zeros(disc_hidden),
            "d_w3": w(disc_hidden, 1),
            "d_b3": np.zeros(1),
        }
        if classifier == "linear":
            self.params["c_b"] = np.zeros(num_classes)

    # parameter blocks updated by the supervised loss
    def class_param_names(self) -> list[str]:
        names = ["f_w1", "f_b1", "f_w2", "f_b2", "p_w", "p_b", "c_w"]
        if self.classifier == "linear":
            names.append("c_b")
        return names

    def feature_param_names(self) -> list[str]:
        return ["f_w1", "f_b1", "f_w2", "f_b2"]

    def disc_param_names(self) -> list[str]:
        return ["d_w1", "d_b1", "d_w2", "d_b2", "d_w3", "d_b3"]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # forward passes -----------------------------------------------------

    def _feature_forward(self, X: np.ndarray) -> dict:
        p = self.params
        Z1 = X @ p["f_w1"] + p["f_b1"]
        A1 = np.tanh(Z1)
        Z2 = A1 @ p["f_w2"] + p["f_b2"]
        F = np.tanh(Z2)
        return {"X": X, "A1": A1, "F": F}

    def _head_forward(self, F: np.ndarray) -> dict:
        p = self.params
        E = F @ p["p_w"] + p["p_b"]
        if self.classifier == "cosine":
            e_norm = np.linalg.norm(E, axis=1)
            if np.any(e_norm == 0):
                raise ValueError("zero-norm embedding: cosine scores undefined")
            w_norm = np.linalg.norm(p["c_w"], axis=0)
            if np.any(w_norm == 0):
                raise ValueError("zero-norm classifier weight column")
            E_hat = E / e_norm[:, None]
            W_hat = p["c_w"] / w_norm[None, :]
            S = (E_hat @ W_hat) / self.temperature
            return {"E": E, "E_hat": E_hat, "W_hat": W_hat, "e_norm": e_norm, "w_norm": w_norm, "S": S}
        S = E @ p["c_w"] + p["c_b"]
        return {"E": E, "S": S}

    def _disc_forward(self, F: np.ndarray) -> dict:
        p = self.params
        H1 = np.tanh(F @ p["d_w1"] + p["d_b1"])
        H2 = np.tanh(H1 @ p["d_w2"] + p["d_b2"])
        U = (H2 @ p["d_w3"])[:, 0] + p["d_b3"][0]
        return {"F": F, "H1": H1, "H2": H2, "U": U}

    def features(self, X: np.ndarray) -> np.ndarray:
        return self._feature_forward(np.asarray(X, dtype=np.float64))["F"]

    def class_scores(self, X: np.ndarray) -> np.ndarray:
        """Softmax inputs of the classifier (cosine similarities over tau)."""
        F = self.features(X)
        return self._head_forward(F)["S"]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return np.exp(_log_softmax(self.class_scores(X)))

    def domain_proba(self, X: np.ndarray) -> np.ndarray:
        """Discriminator probability that a sample is from the source domain."""
        F = self.features(X)
        return _sigmoid(self._disc_forward(F)["U"])

    # backward passes ----------------------------------------------------

    def _feature_backward(self, cache: dict, dF: np.ndarray, grads: dict):
        p = self.params
        dZ2 = dF * (1.0 - cache["F"] ** 2)
        grads["f_w2"] += cache["A1"].T @ dZ2
        grads["f_b2"] += dZ2.sum(axis=0)
        dA1 = dZ2 @ p["f_w2"].T
        dZ1 = dA1 * (1.0 - cache["A1"] ** 2)
        grads["f_w1"] += cache["X"].T @ dZ1
        grads["f_b1"] += dZ1.sum(axis=0)

    def _head_backward(self, fcache: dict, hcache: dict, dS: np.ndarray, grads: dict):
        p = self.params
        if self.classifier == "cosine":
            dE_hat = (dS @ hcache["W_hat"].T) / self.temperature
            dW_hat = (hcache["E_hat"].T @ dS) / self.temperature
            E_hat = hcache["E_hat"]
            dE = (dE_hat - (dE_hat * E_hat).sum(axis=1, keepdims=True) * E_hat) / hcache["e_norm"][:, None]
            W_hat = hcache["W_hat"]
            grads["c_w"] += (dW_hat - (dW_hat * W_hat).sum(axis=0, keepdims=True) * W_hat) / hcache["w_norm"][None, :]
        else:
            dE = dS @ p["c_w"].T
            grads["c_w"] += hcache["E"].T @ dS
            grads["c_b"] += dS.sum(axis=0)
        grads["p_w"] += fcache["F"].T @ dE
        grads["p_b"] += dE.sum(axis=0)
        dF = dE @ p["p_w"].T
        self._feature_backward(fcache, dF, grads)

    def _disc_backward(self, cache: dict, dU: np.ndarray, grads: dict) -> np.ndarray:
        p = self.params
        dH2 = dU[:, None] @ p["d_w3"].T
        grads["d_w3"] += cache["H2"].T @ dU[:, None]
        grads["d_b3"] += dU.sum()
        dZ2 = dH2 * (1.0 - cache["H2"] ** 2)
        grads["d_w2"] += cache["H1"].T @ dZ2
        grads["d_b2"] += dZ2.sum(axis=0)
        dH1 = dZ2 @ p["d_w2"].T
        dZ1 = dH1 * (1.0 - cache["H1"] ** 2)
        grads["d_w1"] += cache["F"].T @ dZ1
        grads["d_b1"] += dZ1.sum(axis=0)
        return dZ1 @ p["d_w1"].T


def _cross_entropy_term(model: ToyModel, X, y, grads: dict | None) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ValueError("label out of range")
    fcache = model._feature_forward(X)
    hcache = model._head_forward(fcache["F"])
    logp = _log_softmax(hcache["S"])
    n = X.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    if grads is not None:
        dS = np.exp(logp)
        dS[np.arange(n), y] -= 1.0
        dS /= n
        model._head_backward(fcache, hcache, dS, grads)
    return loss


def supervised_loss(model: ToyModel, X_s, y_s, X_l=None, y_l=None) -> float:
    """Cross-entropy on the source batch plus, when present, the labeled-target batch."""
    loss = _cross_entropy_term(model, X_s, y_s, None)
    if X_l is not None and len(X_l) > 0:
        loss += _cross_entropy_term(model, X_l, y_l, None)
    return loss


def supervised_loss_and_grads(model: ToyModel, X_s, y_s, X_l=None, y_l=None):
    grads = model.zero_grads()
    loss = _cross_entropy_term(model, X_s, y_s, grads)
    if X_l is not None and len(X_l) > 0:
        loss += _cross_entropy_term(model, X_l, y_l, grads)
    return loss, grads


def _domain_term(model: ToyModel, X, source: bool, grads: dict | None) -> float:
    X = np.asarray(X, dtype=np.float64)
    fcache = model._feature_forward(X)
    dcache = model._disc_forward(fcache["F"])
    u = dcache["U"]
    n = X.shape[0]
    # -log sigma(u) for source rows, -log(1 - sigma(u)) for target rows
    loss = float(_softplus(-u if source else u).mean())
    if grads is not None:
        dU = (_sigmoid(u) - (1.0 if source else 0.0)) / n
        dF = model._disc_backward(dcache, dU, grads)
        model._feature_backward(fcache, dF, grads)
    return loss


def adversarial_loss(model: ToyModel, X_s, X_t) -> float:
    """Domain-discrimination loss; the feature extractor is trained to raise it."""
    return _domain_term(model, X_s, True, None) + _domain_term(model, X_t, False, None)


def adversarial_loss_and_grads(model: ToyModel, X_s, X_t):
    """Loss plus its plain (unreversed) gradients for both phi and theta_f."""
    grads = model.zero_grads()
    loss = _domain_term(model, X_s, True, grads) + _domain_term(model, X_t, False, grads)
    return loss, grads


def total_loss(model: ToyModel, X_s, y_s, X_l, y_l, X_t) -> float:
    return supervised_loss(model, X_s, y_s, X_l, y_l) + adversarial_loss(model, X_s, X_t)


def training_gradients(model: ToyModel, X_s, y_s, X_l, y_l, X_t, lam: float):
    """Per-block update directions with gradient reversal applied.

    Returns (loss_sup, loss_adv, grads) where the feature blocks carry
    grad(sup) - lam * grad(adv) and the discriminator blocks carry grad(adv).
    """
    loss_sup, grads = supervised_loss_and_grads(model, X_s, y_s, X_l, y_l)
    loss_adv, adv = adversarial_loss_and_grads(model, X_s, X_t)
    for name in model.feature_param_names():
        grads[name] -= lam * adv[name]
    for name in model.disc_param_names():
        grads[name] += adv[name]
    return loss_sup, loss_adv, grads


def sgd_step(model: ToyModel, grads: dict, lr: float, weight_decay: float):
    for name, p in model.params.items():
        p -= lr * (grads[name] + weight_decay * p)


def train_round(
    model: ToyModel,
    source_X: np.ndarray,
    source_y: np.ndarray,
    rho: np.ndarray,
    labeled_X: np.ndarray | None,
    labeled_y: np.ndarray | None,
    pool_X: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    weight_decay: float,
    grl_schedule: str = "logistic",
    adversarial: bool = True,
    rng: np.random.Generator,
    epoch_callback=None,
) -> list[tuple]:
    """Minibatch SGD for one round; returns the per-step loss trace.

    Source batches are drawn with replacement from rho, target and
    labeled-target batches uniformly with replacement. Aborts with
    DivergenceError on a non-finite loss.
    """
    n_s = source_X.shape[0]
    n_pool = pool_X.shape[0]
    n_l = 0 if labeled_X is None else len(labeled_X)
    steps_per_epoch = max(1, n_s // batch_size)
    total_steps = epochs * steps_per_epoch
    trace = []
    step = 0
    for epoch in range(epochs):
        for _ in range(steps_per_epoch):
            idx_s = rng.choice(n_s, size=batch_size, replace=True, p=rho)
            idx_t = rng.choice(n_pool, size=batch_size, replace=True)
            bX_l = bY_l = None
            if n_l > 0:
                idx_l = rng.choice(n_l, size=min(batch_size, n_l), replace=True)
                bX_l, bY_l = labeled_X[idx_l], labeled_y[idx_l]
            progress = step / max(1, total_steps - 1)
            lam = grl_coefficient(progress, grl_schedule) if adversarial else 0.0
            if adversarial:
                loss_sup, loss_adv, grads = training_gradients(
                    model, source_X[idx_s], source_y[idx_s], bX_l, bY_l, pool_X[idx_t], lam
                )
            else:
                loss_sup, grads = supervised_loss_and_grads(
                    model, source_X[idx_s], source_y[idx_s], bX_l, bY_l
                )
                loss_adv = 0.0
            loss = loss_sup + loss_adv
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch} step {step}")
            sgd_step(model, grads, learning_rate, weight_decay)
            trace.append((epoch, step, loss, loss_sup, loss_adv, lam))
            step += 1
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return trace


def pretrain(model, source_X, source_y, *, epochs, batch_size, learning_rate, weight_decay, rng):
    """Source-only warm start: plain cross-entropy, uniform batches."""
    n_s = source_X.shape[0]
    uniform = np.full(n_s, 1.0 / n_s)
    return train_round(
        model, source_X, source_y, uniform, None, None, source_X,
        epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
        weight_decay=weight_decay, adversarial=False, rng=rng,
    )


def evaluate(model: ToyModel, X, y) -> tuple[float, np.ndarray]:
    """Accuracy and per-class accuracy (NaN for classes absent from y)."""
    pred = np.argmax(model.predict_proba(X), axis=1)
    y = np.asarray(y, dtype=np.int64)
    acc = float((pred == y).mean())
    per_class = np.full(model.num_classes, np.nan)
    for c in range(model.num_classes):
        mask = y == c
        if mask.any():
            per_class[c] = float((pred[mask] == c).mean())
    return acc, per_class


def clone_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# checkpoints ------------------------------------------------------------


def save_checkpoint(model: ToyModel, path: str | Path):
    header = {
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "feature_dim": model.feature_dim,
        "embed_dim": model.embed_dim,
        "num_classes": model.num_classes,
        "disc_hidden": model.disc_hidden,
        "temperature": model.temperature,
        "classifier": model.classifier,
        "source_domain_label": SOURCE_DOMAIN_LABEL,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> ToyModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        model = ToyModel(
            input_dim=header["input_dim"],
            hidden_dim=header["hidden_dim"],
            feature_dim=header["feature_dim"],
            embed_dim=header["embed_dim"],
            num_classes=header["num_classes"],
            disc_hidden=header["disc_hidden"],
            temperature=header["temperature"],
            classifier=header["classifier"],
        )
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            data = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8")
            if name not in model.params:
                raise DataFormatError(f"{path}: unexpected parameter {name!r}")
            model.params[name] = data.reshape(shape).astype(np.float64)
    return model
