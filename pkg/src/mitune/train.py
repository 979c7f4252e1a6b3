"""Training kit: schedule, Adam with freeze enforcement, loop, checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoders import image_encoder_param_count, seq_encoder_param_count
from .infusion import MiTConfig, infusion_param_count
from .model import MODAL_DIMS, MiTModel, targets_of
from .rng import generator
from .tasks import seg_decoder_param_count
from .transformer import LMConfig, lm_param_count

CHECKPOINT_FORMAT = "mitune-ckpt/1"


class FreezeViolation(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 4e-5
    decay_factor: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    weight_decay: float = 0.0
    test_fraction: float = 0.1
    max_steps: int | None = None
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step decay. Computed in decimal so 4e-5 -> 4e-6 -> 4e-7 come out exact."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = epoch // cfg.decay_every
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.decay_factor)) ** k)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainConfig,
              frozen: dict[str, Tensor] | None = None) -> None:
    """One Adam update in place. Any gradient on a frozen tensor aborts."""
    for name, t in (frozen or {}).items():
        if t.grad is not None:
            raise FreezeViolation(f"frozen tensor {name} received a gradient")
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if cfg.weight_decay:
        grads = {k: g + cfg.weight_decay * params[k].data for k, g in grads.items()}
    if cfg.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for k, g in grads.items():
        p = params[k]
        if not p.requires_grad:
            raise FreezeViolation(f"tensor {k} is frozen but listed as trainable")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def zero_grad(params) -> None:
    for t in params.values():
        t.grad = None


def tensor_hash(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return hashlib.sha256(str(a.shape).encode() + a.tobytes()).hexdigest()


def freeze_hashes(tensors: dict[str, Tensor]) -> dict[str, str]:
    return {k: tensor_hash(t.data) for k, t in tensors.items()}


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    history: list[dict]
    metrics: dict
    steps: int


def batches(samples, batch_size: int, order=None):
    idx = np.arange(len(samples)) if order is None else order
    for s in range(0, len(idx), batch_size):
        yield [samples[i] for i in idx[s:s + batch_size]]


def evaluate(model: MiTModel, samples: list[dict], batch_size: int = 32, filler=None) -> dict:
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    preds, tgts = [], []
    for chunk in batches(samples, batch_size):
        b = model.collate(chunk, filler)
        preds.append(model.predict(b))
        tgts.append(targets_of(b))
    return model.metrics(np.concatenate(preds), np.concatenate(tgts))


def train(model: MiTModel, train_samples: list[dict], cfg: TrainConfig, test_samples=None,
          log=None, filler=None) -> TrainResult:
    """Seeded mini-batch Adam. Frozen tensors are hashed before and after."""
    params = model.trainable()
    frozen = model.frozen()
    before = freeze_hashes(frozen)
    state = AdamState()
    order_rng = generator(cfg.seed, "train-order")
    history, step = [], 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        losses = []
        for chunk in batches(train_samples, cfg.batch_size, order_rng.permutation(len(train_samples))):
            b = model.collate(chunk, filler)
            zero_grad(params)
            loss = model.loss(b)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at step {step} (epoch {epoch})")
            loss.backward()
            adam_step(params, state, lr, cfg, frozen)
            losses.append(value)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        rec = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "steps": step}
        if test_samples:
            rec.update({f"test_{k}": v for k, v in evaluate(model, test_samples, cfg.eval_batch_size, filler).items()})
        history.append(rec)
        if log is not None:
            log(rec)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    zero_grad(params)
    after = freeze_hashes(frozen)
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise FreezeViolation(f"frozen tensors changed during training: {changed[:5]}")
    final = evaluate(model, test_samples, cfg.eval_batch_size, filler) if test_samples else {}
    return TrainResult(history, final, step)


# --------------------------------------------------------------------------
# checkpoints
#
# <dir>/checkpoint.json : format, meta, tensors [{name, shape, dtype, offset, nbytes, sha256, trainable}]
# <dir>/checkpoint.bin  : concatenated little-endian payloads


def save_checkpoint(directory, model: MiTModel, meta: dict | None = None, dtype: str = "<f4",
                    trainable_only: bool = False) -> Path:
    if dtype not in ("<f8", "<f4"):
        raise ValueError("dtype must be '<f8' or '<f4'")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tensors = model.trainable() if trainable_only else model.parameters()
    with open(d / "checkpoint.bin", "wb") as fh:
        for name, t in tensors.items():
            raw = np.ascontiguousarray(t.data, dtype=dtype).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset,
                            "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
                            "trainable": bool(t.requires_grad)})
            offset += len(raw)
    manifest = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "payload_bytes": offset, "tensors": entries}
    (d / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "checkpoint.json").read_text())
        payload = (d / "checkpoint.bin").read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"payload length {len(payload)} != manifest {manifest['payload_bytes']} (truncated?)")
    arrays = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {e['name']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * np.dtype(e["dtype"]).itemsize != len(raw):
            raise CheckpointError(f"tensor {e['name']}: shape {e['shape']} disagrees with {len(raw)} bytes")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
    return manifest, arrays


def restore(model: MiTModel, directory) -> dict:
    manifest, arrays = load_checkpoint(directory)
    params = model.parameters()
    for name, arr in arrays.items():
        if name not in params:
            raise CheckpointError(f"checkpoint tensor {name} not present in model")
        if tuple(arr.shape) != params[name].shape:
            raise CheckpointError(f"tensor {name}: checkpoint shape {arr.shape} != model {params[name].shape}")
    if set(params) - set(arrays):
        trainable_missing = sorted(k for k in set(params) - set(arrays) if params[k].requires_grad)
        if trainable_missing:
            raise CheckpointError(f"checkpoint lacks trainable tensors {trainable_missing[:5]}")
    for name, arr in arrays.items():
        t = params[name]
        if t.requires_grad:
            t.data[...] = arr
        elif not np.array_equal(arr, t.data.astype(arr.dtype)):
            raise CheckpointError(f"frozen tensor {name} differs from checkpoint (seed/config mismatch)")
    return manifest


# --------------------------------------------------------------------------
# parameter accounting


def trainable_report(model: MiTModel) -> dict:
    """Per-component totals, enumerated and cross-checked against closed forms."""
    comps = {}
    for name, tensors in model.components().items():
        total = sum(t.size for t in tensors.values())
        trainable = sum(t.size for t in tensors.values() if t.requires_grad)
        comps[name] = {"total": int(total), "trainable": int(trainable)}
    closed = {"lm": lm_param_count(model.lm_config),
              "infusion": infusion_param_count(model.mit_config, model.lm_config)}
    if model.image_encoder is not None:
        closed["image_encoder"] = image_encoder_param_count(model.mit_config.d_I, model.image_encoder.channels[1:-1])
    for m in model.seq_encoders:
        closed[f"encoder_{m}"] = seq_encoder_param_count(MODAL_DIMS[m], model.mit_config.d_I)
    if model.task == "seg":
        closed["head"] = seg_decoder_param_count(model.lm_config.d_model, model.head.level_channels, model.head.width)
        if model.task_tokens is not None:
            closed["head"] += model.task_tokens.embeddings.size
    for k, v in closed.items():
        comps[k]["closed_form"] = int(v)
        if v != comps[k]["total"]:
            raise AssertionError(f"{k}: enumerated {comps[k]['total']} != closed form {v}")
    total = sum(c["total"] for c in comps.values())
    trainable = sum(c["trainable"] for c in comps.values())
    return {"components": comps, "total": total, "trainable": trainable,
            "fraction": trainable / total, "fraction_of_lm": trainable / comps["lm"]["total"],
            "infusion_fraction_of_lm": comps["infusion"]["trainable"] / comps["lm"]["total"]}


def paper_scale_report(task: str = "seg") -> dict:
    """Closed-form counts for the 7B-scale preset (no arrays allocated).

    Fractions are relative to the frozen base LM, which dominates the total.
    """
    lm = LMConfig.paper()
    mit = MiTConfig.paper(lm)
    lm_total = lm_param_count(lm)
    infusion = infusion_param_count(mit, lm)
    if task == "seg":
        head = seg_decoder_param_count(lm.d_model, PAPER_IMAGE_LEVELS, PAPER_DECODER_WIDTH)
    elif task == "cls":
        head = (lm.d_model + mit.d_I) * 3 + 3
    else:
        head = lm.d_model + 1 + sum(seq_encoder_param_count(d, mit.d_I) for d in MODAL_DIMS.values())
    trainable = infusion + head
    return {"lm_total": lm_total, "infusion": infusion, "other_trainable": head, "trainable": trainable,
            "infusion_fraction": infusion / lm_total, "trainable_fraction": trainable / lm_total}


PAPER_IMAGE_LEVELS = (1024, 1024, 1024)
PAPER_DECODER_WIDTH = 256


def env_threads() -> int | None:
    v = os.environ.get("MIT_THREADS")
    return int(v) if v else None


def config_dict(obj) -> dict:
    return asdict(obj)
