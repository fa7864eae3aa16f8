"""Training recipes: losses, Nadam, learning-rate schedule, folds, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .infer import decode, plan_tiles, predict_image
from .metrics import evaluate
from .netgraph import Network, NetworkConfig, build_network, count_parameters
from .preprocess import to_six_channel
from .sampler import DatasetIndex, batch_stream

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float = 0.001
    lr_decay: float = 0.99
    iterations_per_epoch: int = 400
    epochs: int = 250
    batch_size: int = 4

    def __post_init__(self):
        if self.initial_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("initial_lr must be > 0 and lr_decay in (0, 1]")
        if self.iterations_per_epoch < 1 or self.epochs < 1:
            raise ValueError("iterations_per_epoch and epochs must be positive")

    @classmethod
    def digestpath(cls) -> "TrainSchedule":
        return cls(iterations_per_epoch=400, epochs=250)

    @classmethod
    def gleason(cls) -> "TrainSchedule":
        return cls(iterations_per_epoch=250, epochs=400)


def learning_rate(epoch: int, sched: TrainSchedule = TrainSchedule()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return sched.initial_lr * sched.lr_decay**epoch


# --------------------------------------------------------------------------
# loss


def loss(pred, target, mode: str = "categorical_ce"):
    """Mean over pixels of -sum_c target_c log(pred_c); channels on axis 1.

    Accepts torch tensors (differentiable) or numpy arrays (returns float).
    Soft targets are allowed; the value is cross-entropy, not KL.
    """
    if mode not in ("binary_ce", "categorical_ce"):
        raise ValueError(f"unknown loss mode {mode!r}")
    as_numpy = not isinstance(pred, torch.Tensor)
    p = torch.as_tensor(pred)
    t = torch.as_tensor(target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ")
    if torch.isnan(p).any() or torch.isnan(t).any():
        raise ValueError("NaN in loss inputs")
    if mode == "binary_ce" and p.shape[1] != 2:
        raise ValueError("binary_ce expects a 2-channel probability map")
    value = -(t * torch.log(p.clamp(EPS, 1.0))).sum(dim=1).mean()
    return float(value) if as_numpy else value


# --------------------------------------------------------------------------
# optimizer


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class NadamState:
    step: int = 0
    mu_product: float = 1.0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {"step": self.step, "mu_product": self.mu_product, "m": self.m, "v": self.v}

    @classmethod
    def from_state_dict(cls, d: dict) -> "NadamState":
        return cls(d["step"], d["mu_product"], list(d["m"]), list(d["v"]))


def _momentum(step: int, beta1: float, schedule_decay: float) -> float:
    return beta1 * (1.0 - 0.5 * 0.96 ** (step * schedule_decay))


def optimizer_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: NadamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    schedule_decay: float = 0.004,
) -> NadamState:
    """One Nadam update (Nesterov momentum with the warming momentum schedule).

    ``params`` are updated in place.  Non-finite gradients refuse the step
    and leave parameters and state untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {tuple(p.shape)} vs grad {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in parameter {i}; step refused")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")

    t = state.step + 1
    mu_t = _momentum(t, beta1, schedule_decay)
    mu_next = _momentum(t + 1, beta1, schedule_decay)
    mu_product = state.mu_product * mu_t
    bias2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bias2).sqrt_().add_(eps)
            p.addcdiv_(g, denom, value=-lr * (1.0 - mu_t) / (1.0 - mu_product))
            p.addcdiv_(m, denom, value=-lr * mu_next / (1.0 - mu_product * mu_next))
    state.step = t
    state.mu_product = mu_product
    return state


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]
    validation_fold: int = 0
    seed: int = 0

    def fold(self, i: int) -> list[str]:
        return sorted(a for a, f in self.assignments.items() if f == i)

    def train_ids(self, validation_fold: int | None = None) -> list[str]:
        v = self.validation_fold if validation_fold is None else validation_fold
        return sorted(a for a, f in self.assignments.items() if f != v)

    def sizes(self) -> list[int]:
        return [len(self.fold(i)) for i in range(self.k)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        return cls(**json.loads(text))


def make_folds(image_ids: Sequence[str], k: int = 10, seed: int = 0,
               validation_fold: int = 0) -> FoldPlan:
    """Seeded shuffle then round-robin assignment; fold 0 is the validation fold."""
    ids = sorted(set(image_ids))
    if len(ids) < k:
        raise ValueError(f"{len(ids)} images cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, {ids[j]: int(pos % k) for pos, j in enumerate(order)}, validation_fold, seed)


# --------------------------------------------------------------------------
# checkpoints


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    epoch: int  # epochs completed
    params: dict
    optimizer: dict
    config_hash: str
    network: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        torch.save(asdict(self), buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        d = torch.load(path, map_location="cpu", weights_only=False)
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {d.get('version')}")
        return cls(**d)

    def restore_network(self) -> Network:
        net = build_network(NetworkConfig.from_dict(self.network))
        net.load_state_dict(self.params)
        return net


# --------------------------------------------------------------------------
# training loop


class SizingError(MemoryError):
    pass


def _sizing_report(cfg: NetworkConfig, batch: int) -> str:
    net = build_network(cfg)
    acts = sum(h * w * c for h, w, c in net.shape_table.values())
    return (
        f"out of memory: patch {cfg.patch_side}px, GR={cfg.growth_rate}, "
        f"{count_parameters(net)} parameters, ~{acts * batch * 4 * 2 / 2**30:.2f} GiB of "
        f"float32 activations+gradients for a batch of {batch}. Larger patches need a "
        f"smaller growth rate (768px/GR6, 512px/GR12, 256px/GR24 trade-off)."
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    best: Checkpoint | None = None


def predict_dataset(net: Network, index: DatasetIndex, image_ids: Sequence[str], overlap: int = 0,
                    window: str = "cosine") -> dict[str, np.ndarray]:
    side = net.config.patch_side
    preds = {}
    for iid in image_ids:
        e = index.by_id[iid]
        img = to_six_channel(index.rgb(e))
        plan = plan_tiles(img.shape[:2], side, overlap, net.config.downsampling_factor)
        preds[iid] = decode(predict_image(net, img, plan, window), index.task).classes
    return preds


def truth_maps(index: DatasetIndex, image_ids: Sequence[str]) -> dict[str, np.ndarray]:
    from .labels import majority_vote

    out = {}
    for iid in image_ids:
        e = index.by_id[iid]
        aset = index.annotations(e)
        if not aset.maps:
            out[iid] = np.zeros(e.size, np.uint8)
        elif index.task == "digestpath":
            out[iid] = next(iter(aset.maps.values()))
        else:
            out[iid] = majority_vote(aset)
    return out


def train(
    config: NetworkConfig,
    index: DatasetIndex,
    fold_plan: FoldPlan | None,
    label_source: str = "majority_vote",
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after_epoch: int | None = None,
    cfg_hash: str = "",
    validate_every: int = 1,
    on_epoch: Callable[[dict], None] | None = None,
    audit: Callable | None = None,
    on_step: Callable[[int, Network], None] | None = None,
    prefetch: int = 0,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Run ``schedule.epochs`` epochs and return the last-epoch checkpoint.

    Batches for global step ``s`` come from ``SeedSequence([seed, s])`` so a
    resumed run consumes exactly the batches the uninterrupted run would.
    """
    loss_mode = "binary_ce" if config.head == "binary_2class" else "categorical_ce"
    expected_task = "digestpath" if config.head == "binary_2class" else "gleason"
    if index.task != expected_task:
        raise ValueError(f"head {config.head} does not fit a {index.task} index")
    val_ids: list[str] = []
    train_index = index
    if fold_plan is not None:
        val_ids = [i for i in fold_plan.fold(fold_plan.validation_fold) if i in index.by_id]
        train_index = index.exclude(val_ids)
    forbidden = set(val_ids)

    torch.manual_seed(seed)
    net = build_network(config, seed=seed).to(dtype)
    state = NadamState()
    start_epoch = 0
    if resume is not None:
        net.load_state_dict(resume.params)
        state = NadamState.from_state_dict(resume.optimizer)
        start_epoch = resume.epoch
    params = list(net.parameters())

    history: list[dict] = []
    best: Checkpoint | None = None
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    last = stop_after_epoch if stop_after_epoch is not None else schedule.epochs
    ckpt = resume

    for epoch in range(start_epoch, min(last, schedule.epochs)):
        t0 = time.perf_counter()
        lr = learning_rate(epoch, schedule)
        net.train()
        losses = []
        steps = schedule.iterations_per_epoch
        stream = batch_stream(train_index, seed, epoch * steps, (epoch + 1) * steps,
                              config.patch_side, label_source, prefetch)
        for step, batch in enumerate(stream, start=epoch * steps):
            if forbidden & set(batch.image_ids):
                raise RuntimeError(f"validation image sampled: {forbidden & set(batch.image_ids)}")
            if audit is not None:
                audit(batch)
            x = torch.as_tensor(batch.pixels(), dtype=dtype).permute(0, 3, 1, 2)
            y = torch.as_tensor(batch.targets(), dtype=dtype).permute(0, 3, 1, 2)
            try:
                value = loss(net(x), y, loss_mode)
                grads = torch.autograd.grad(value, params)
            except RuntimeError as exc:
                if "memory" in str(exc).lower():
                    raise SizingError(_sizing_report(config, x.shape[0])) from exc
                raise
            optimizer_step(params, grads, state, lr)
            losses.append(value.item())
            if on_step is not None:
                on_step(step, net)

        record = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                  "seconds": round(time.perf_counter() - t0, 3)}
        if val_ids and validate_every and (epoch + 1) % validate_every == 0:
            rep = evaluate(predict_dataset(net, index, val_ids), truth_maps(index, val_ids),
                           index.task)
            record["validation"] = rep.aggregate
        history.append(record)
        log.info("epoch %d lr %.3g loss %.4f", epoch + 1, lr, record["train_loss"])
        if on_epoch:
            on_epoch(record)

        ckpt = Checkpoint(epoch + 1, {k: v.detach().clone() for k, v in net.state_dict().items()},
                          state_dict_copy(state), cfg_hash, config.to_dict(), seed, record)
        if ckdir:
            ckpt.save(ckdir / "last.pt")
            score = _selection_metric(record)
            if score is not None and (best is None or score > _selection_metric(best.metrics)):
                best = ckpt
                ckpt.save(ckdir / "best.pt")
    if ckpt is None:
        raise ValueError("nothing to train: resume checkpoint already at the final epoch")
    return TrainResult(ckpt, history, best)


def _selection_metric(record: dict) -> float | None:
    v = record.get("validation")
    if not v:
        return None
    return v.get("dice", v.get("score"))


def state_dict_copy(state: NadamState) -> dict:
    return {"step": state.step, "mu_product": state.mu_product,
            "m": [m.clone() for m in state.m], "v": [v.clone() for v in state.v]}


def first_step_loss(config: NetworkConfig, x: torch.Tensor, target: torch.Tensor) -> float:
    """Loss of a freshly built network whose head weights and bias are zeroed."""
    net = build_network(config, seed=0).to(x.dtype)
    with torch.no_grad():
        head = net.parameter_store["head"]
        head.weight.zero_()
        head.bias.zero_()
    mode = "binary_ce" if config.head == "binary_2class" else "categorical_ce"
    return loss(net(x), target, mode).item()


def uniform_loss(k: int) -> float:
    return math.log(k)
