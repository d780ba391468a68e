"""Adam optimizer and the epoch-based training / evaluation loop.

Every augmented training sample gets its own random stream derived from
(global seed, epoch, sample index), so an epoch's sample sequence does
not depend on how the work is scheduled, and an interrupted run resumed
from a checkpoint replays the remaining epochs exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .augment import AugmentConfig, augment_pair
from .dataio import Case
from .errors import ConfigError, DataError, ShapeError
from .model import Network, expand_nn, forward, backward, predict_mask, \
    shrink_mask, shrink_mean
from .objective import LOSS_FUNCTIONS, dice_coefficient, mae, mse
from .tensor import derive_stream


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: list[tuple[str, np.ndarray]], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params:
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: list[tuple[str, np.ndarray]],
              grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected moment update, applied to the parameters in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


@dataclass
class TrainPlan:
    epochs: int = 50
    batch_size: int = 16
    samples_per_epoch: int = 5500
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: str | None = None          # None -> take it from the network config
    checkpoint_every: int = 10
    val_fraction: float = 0.2
    val_every: int = 1

    def validate(self) -> "TrainPlan":
        for name in ("epochs", "batch_size", "samples_per_epoch",
                     "checkpoint_every", "val_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.loss is not None and self.loss not in LOSS_FUNCTIONS:
            raise ConfigError(f"loss must be one of {sorted(LOSS_FUNCTIONS)}")
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "samples_per_epoch": self.samples_per_epoch,
            "seed": self.seed,
            "augment": self.augment.to_dict(),
            "loss": self.loss,
            "checkpoint_every": self.checkpoint_every,
            "val_fraction": self.val_fraction,
            "val_every": self.val_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "augment" in kwargs:
            kwargs["augment"] = AugmentConfig.from_dict(kwargs["augment"])
        return cls(**kwargs).validate()


def split_cases(cases: list[Case], val_fraction: float,
                seed: int) -> tuple[list[Case], list[Case]]:
    """Deterministic train/validation split by seeded case shuffle."""
    if not cases:
        raise DataError("empty dataset")
    perm = derive_stream(seed, 0xC0FFEE).permutation(len(cases))
    n_val = int(round(val_fraction * len(cases)))
    val_ids = set(perm[:n_val].tolist())
    train = [c for i, c in enumerate(cases) if i not in val_ids]
    val = [c for i, c in enumerate(cases) if i in val_ids]
    return train, val


def case_slices(cases: list[Case]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for c in cases:
        if c.masks is None:
            raise DataError(f"case {c.case_id} has no masks")
        out.extend((c.images[i], c.masks[i]) for i in range(c.images.shape[0]))
    return out


def train_epoch(net: Network, train_slices, val_cases, plan: TrainPlan,
                state: AdamState, epoch: int) -> dict:
    """One pass of samples_per_epoch freshly-augmented samples.

    Returns the per-epoch record written to the run log. Validation
    metrics are filled on epochs matching plan.val_every (and on the
    last epoch) when a validation split exists, otherwise left null.
    """
    if not train_slices:
        raise DataError("training split is empty")
    t0 = time.perf_counter()
    cfg = net.config
    loss_fn = LOSS_FUNCTIONS[plan.loss or cfg.loss]
    params = net.named_params()
    sf = cfg.shrink_factor

    loss_total = 0.0
    n_seen = 0
    for start in range(0, plan.samples_per_epoch, plan.batch_size):
        bsz = min(plan.batch_size, plan.samples_per_epoch - start)
        imgs = np.empty((bsz, 1) + cfg.net_input_size(), dtype=np.float32)
        masks = np.empty((bsz,) + cfg.net_input_size(), dtype=np.float32)
        for k in range(bsz):
            idx = start + k
            img, mask = train_slices[idx % len(train_slices)]
            rng = derive_stream(plan.seed, epoch, idx)
            img, mask = augment_pair(img, mask, rng, plan.augment)
            imgs[k, 0] = shrink_mean(img, sf)
            masks[k] = shrink_mask(mask, sf)
        probs, cache = forward(net, imgs, "train")
        loss = loss_fn(probs, masks)
        grads = backward(net, cache, loss.dprob)
        adam_step(params, grads, state)
        loss_total += loss.value * bsz
        n_seen += bsz

    report = {
        "epoch": epoch,
        "mean_loss": loss_total / n_seen,
        "val_dice": None,
        "val_mse": None,
        "val_mae": None,
    }
    due = (epoch + 1) % plan.val_every == 0 or epoch + 1 == plan.epochs
    if val_cases and due:
        _, agg = evaluate(net, val_cases)
        report["val_dice"] = agg["dice_mean"]
        report["val_mse"] = agg["mse_mean"]
        report["val_mae"] = agg["mae_mean"]
    report["wall_seconds"] = time.perf_counter() - t0
    return report


def _case_probs(net: Network, images: np.ndarray,
                chunk: int = 8) -> np.ndarray:
    """Infer-mode probabilities for a stack of slices, at full resolution."""
    sf = net.config.shrink_factor
    out = []
    for s in range(0, images.shape[0], chunk):
        x = shrink_mean(images[s:s + chunk], sf)[:, None].astype(np.float32)
        probs, _ = forward(net, x, "infer")
        out.append(expand_nn(probs, sf))
    return np.concatenate(out, axis=0)


def evaluate(net: Network, cases: list[Case], threshold: float = 0.5,
             per_slice: bool = False) -> tuple[list[dict], dict]:
    """Dice / MSE / MAE per case plus mean-and-std aggregates.

    Dice is computed on the pooled pixels of each case (per_slice=True
    switches to the mean of per-slice Dice values); MSE and MAE compare
    the soft probability map against the binary truth.
    """
    if not cases:
        raise DataError("empty dataset")
    rows = []
    for case in cases:
        if case.masks is None:
            raise DataError(f"case {case.case_id} has no masks")
        probs = _case_probs(net, case.images)
        pred = predict_mask(probs, threshold)
        if per_slice:
            dice = float(np.mean([
                dice_coefficient(pred[i], case.masks[i])
                for i in range(pred.shape[0])]))
        else:
            dice = dice_coefficient(pred, case.masks)
        rows.append({
            "case_id": case.case_id,
            "dice": dice,
            "mse": mse(probs, case.masks),
            "mae": mae(probs, case.masks),
        })
    agg = {}
    for key in ("dice", "mse", "mae"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        agg[f"{key}_mean"] = float(vals.mean())
        agg[f"{key}_std"] = float(vals.std())
    agg["cases"] = len(rows)
    return rows, agg
