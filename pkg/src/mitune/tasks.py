"""Prompts, task-embedding extraction, task heads, losses and metrics."""
from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoders import ImageFeatures
from .rng import generator
from .transformer import last_token_embedding

TASKS = ("seg", "cls", "msa")

# seg is the published template; cls and msa are our stand-ins.
TEMPLATES = {
    "seg": "Segment the {description} according to the text. #Segmentation:",
    "cls": "Classify the image and text pair. Text: {text}. #Class:",
    "msa": "Predict the sentiment of the utterance. Utterance: {text}. #Sentiment:",
}


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    template: str

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(f for _, f, _, _ in string.Formatter().parse(self.template) if f)

    def render(self, **fields) -> str:
        missing = [s for s in self.slots if s not in fields]
        if missing:
            raise ValueError(f"{self.task} prompt is missing slot(s) {missing}")
        return self.template.format(**fields)


def template_for(task: str) -> PromptTemplate:
    if task not in TEMPLATES:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return PromptTemplate(task, TEMPLATES[task])


def tokenize(text: str) -> list[int]:
    """Byte-level tokenizer: one token per UTF-8 byte."""
    return list(text.encode("utf-8"))


def format_prompt(task: str, **fields) -> list[int]:
    return tokenize(template_for(task).render(**fields))


class TaskTokenTable:
    """Learnable embeddings for extra vocabulary entries such as ``<SEG>``."""

    def __init__(self, d_model: int, base_vocab: int, names=("<SEG>", "<CLS>"), seed: int = 0):
        self.base_vocab = base_vocab
        self.names = tuple(names)
        rng = generator(seed, "task-tokens")
        self.embeddings = ad.parameter(rng.normal(0, 1.0, (len(self.names), d_model)),
                                       name="head.task_tokens")
        self.params = {"head.task_tokens": self.embeddings}

    def id(self, name: str) -> int:
        return self.base_vocab + self.names.index(name)

    @property
    def vocab_size(self) -> int:
        return self.base_vocab + len(self.names)


def extract_embedding(hidden: Tensor, schema: str = "last_token", task_token_pos=None, lengths=None) -> Tensor:
    """Task embedding: the last real token's hidden state, or the task token's."""
    if schema == "last_token":
        return last_token_embedding(hidden, lengths)
    if schema != "task_token":
        raise ValueError(f"unknown schema {schema!r}")
    if task_token_pos is None:
        raise ValueError("task_token schema needs the task token position; token absent from sequence")
    pos = np.asarray(task_token_pos)
    if hidden.ndim == 2:
        return hidden[int(pos)]
    return hidden[np.arange(hidden.shape[0]), pos]


def find_token(tokens, token_id: int):
    """Position of ``token_id`` in each row of ``tokens`` (last occurrence)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    hits = tokens == token_id
    if not hits.any(axis=1).all():
        raise ValueError(f"task token {token_id} absent from sequence")
    return tokens.shape[1] - 1 - np.argmax(hits[:, ::-1], axis=1)


# --------------------------------------------------------------------------
# heads


class SegDecoder:
    """Light-weight mask decoder with exactly three blocks.

    Block k nearest-upsamples the running map 2x (block 0 starts from the
    coarsest level), concatenates one image feature level and the broadcast
    projection of the task embedding, then applies a pointwise conv and
    SiLU. A 1-channel pointwise head yields logits at stride 4, which are
    bilinearly resized to the image size.
    """

    N_BLOCKS = 3

    def __init__(self, d_model: int, level_channels=(16, 32, 32), width: int = 32, seed: int = 0):
        self.width = width
        self.level_channels = tuple(level_channels)
        rng = generator(seed, "seg-decoder")
        self.params: dict[str, Tensor] = {}
        for k in range(self.N_BLOCKS):
            lvl_ch = self.level_channels[-1 - k]
            in_ch = (0 if k == 0 else width) + lvl_ch + width
            self._put(f"head.seg.block{k}.task_w", rng.normal(0, d_model**-0.5, (d_model, width)))
            self._put(f"head.seg.block{k}.task_b", np.zeros(width))
            self._put(f"head.seg.block{k}.conv_w", rng.normal(0, in_ch**-0.5, (in_ch, width)))
            self._put(f"head.seg.block{k}.conv_b", np.zeros(width))
        self._put("head.seg.mask_w", rng.normal(0, width**-0.5, (width, 1)))
        self._put("head.seg.mask_b", np.zeros(1))

    def _put(self, name, arr):
        self.params[name] = ad.parameter(arr, name=name)

    def decode(self, task_emb, feats: ImageFeatures) -> Tensor:
        task_emb = ad.as_tensor(task_emb)
        levels = feats.levels
        single = task_emb.ndim == 1
        if single:
            task_emb = task_emb.reshape(1, -1)
            levels = [lv.reshape(1, *lv.shape) for lv in levels]
        if len(levels) != self.N_BLOCKS:
            raise ShapeError(f"decoder needs {self.N_BLOCKS} feature levels, got {len(levels)}")
        b = task_emb.shape[0]
        x = None
        for k in range(self.N_BLOCKS):
            lvl = levels[-1 - k]
            if lvl.shape[0] != b or lvl.shape[-1] != self.level_channels[-1 - k]:
                raise ShapeError(f"decoder block {k}: level shape {lvl.shape} incompatible "
                                 f"with batch {b} / channels {self.level_channels[-1 - k]}")
            _, h, w, _ = lvl.shape
            t = task_emb @ self.params[f"head.seg.block{k}.task_w"] + self.params[f"head.seg.block{k}.task_b"]
            t = ad.broadcast_to(t.reshape(b, 1, 1, self.width), (b, h, w, self.width))
            parts = [lvl, t]
            if x is not None:
                x = ad.upsample_nearest(x, 2)
                if x.shape[1:3] != (h, w):
                    raise ShapeError(f"decoder block {k}: upsampled {x.shape[1:3]} != level {(h, w)}")
                parts.insert(0, x)
            x = ad.concat(parts, axis=-1)
            x = ad.silu(x @ self.params[f"head.seg.block{k}.conv_w"] + self.params[f"head.seg.block{k}.conv_b"])
        logits = x @ self.params["head.seg.mask_w"] + self.params["head.seg.mask_b"]
        _, h, w, _ = logits.shape
        logits = logits.reshape(b, h, w)
        logits = ad.Tensor(bilinear_matrix(h, 4)) @ logits @ ad.Tensor(bilinear_matrix(w, 4).T)
        return logits[0] if single else logits

    __call__ = decode


def bilinear_matrix(n: int, scale: int) -> np.ndarray:
    """(n*scale, n) linear-interpolation weights, half-pixel centres, edges clamped."""
    pos = np.clip((np.arange(n * scale) + 0.5) / scale - 0.5, 0.0, n - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    m = np.zeros((n * scale, n))
    np.add.at(m, (np.arange(n * scale), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n * scale), hi), frac)
    return m


def seg_decoder_param_count(d_model: int, level_channels=(16, 32, 32), width: int = 32) -> int:
    total = 0
    for k in range(SegDecoder.N_BLOCKS):
        in_ch = (0 if k == 0 else width) + level_channels[-1 - k] + width
        total += d_model * width + width + in_ch * width + width
    return total + width + 1


class ClsHead:
    """Linear classifier over ``[task_emb || global_image]``."""

    def __init__(self, d_model: int, d_I: int, classes: int, seed: int = 0):
        rng = generator(seed, "cls-head")
        n_in = d_model + d_I
        self.classes = classes
        self.params = {
            "head.cls.w": ad.parameter(rng.normal(0, n_in**-0.5, (n_in, classes)), name="head.cls.w"),
            "head.cls.b": ad.parameter(np.zeros(classes), name="head.cls.b"),
        }

    def __call__(self, task_emb, global_img) -> Tensor:
        z = ad.concat([ad.as_tensor(task_emb), ad.as_tensor(global_img)], axis=-1)
        return z @ self.params["head.cls.w"] + self.params["head.cls.b"]


class RegHead:
    """Linear regressor on the task embedding alone; output unclamped."""

    def __init__(self, d_model: int, seed: int = 0):
        rng = generator(seed, "reg-head")
        self.params = {
            "head.reg.w": ad.parameter(rng.normal(0, d_model**-0.5, (d_model,)), name="head.reg.w"),
            "head.reg.b": ad.parameter(np.zeros(1), name="head.reg.b"),
        }

    def __call__(self, task_emb) -> Tensor:
        task_emb = ad.as_tensor(task_emb)
        out = task_emb @ self.params["head.reg.w"] + self.params["head.reg.b"]
        return out.reshape(()) if task_emb.ndim == 1 else out


# --------------------------------------------------------------------------
# losses

DICE_EPS = 1e-6


def dice_loss(pred, gt, eps: float = DICE_EPS) -> Tensor:
    """Soft DICE loss on probabilities, averaged over the batch."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=float)
    if gt.shape != pred.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} vs gt {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("dice_loss: ground truth must be binary")
    axes = (-2, -1)
    inter = (pred * gt).sum(axis=axes)
    denom = pred.sum(axis=axes) + gt.sum(axis=axes) + eps
    loss = 1.0 - 2.0 * inter / denom
    return loss.mean() if loss.ndim else loss


def ce_loss(logits, gt) -> Tensor:
    logits = ad.as_tensor(logits)
    gt = np.asarray(gt)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        gt = gt.reshape(1)
    n, k = logits.shape
    if gt.shape != (n,) or not np.issubdtype(gt.dtype, np.integer) or (gt < 0).any() or (gt >= k).any():
        raise ValueError(f"ce_loss: class indices {gt.tolist()} invalid for {k} classes")
    logp = ad.log_softmax(logits, axis=-1)
    return -logp[np.arange(n), gt].mean()


def rmse_loss(pred, gt) -> Tensor:
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt, dtype=float)
    if pred.size == 0 or gt.size == 0:
        raise ValueError("rmse_loss: empty input")
    if pred.shape != gt.shape:
        raise ShapeError(f"rmse_loss: pred {pred.shape} vs gt {gt.shape}")
    r = pred - gt
    return ad.sqrt(ad.maximum((r * r).mean(), 1e-300))


# --------------------------------------------------------------------------
# metrics (numpy, no graph)


def binary_dice(pred_mask: np.ndarray, gt: np.ndarray) -> float:
    p, g = pred_mask.astype(bool), gt.astype(bool)
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else 2.0 * (p & g).sum() / denom


def seg_metrics(probs: np.ndarray, gts: np.ndarray, threshold: float = 0.5) -> dict:
    masks = probs >= threshold
    gts = gts.astype(bool)
    inter = (masks & gts).sum()
    union = (masks | gts).sum()
    dices = [binary_dice(m, g) for m, g in zip(masks, gts)]
    return {"dice": float(np.mean(dices)), "oiou": float(inter / union) if union else 1.0}


def _f1(y_true, y_pred, positive) -> float:
    tp = np.sum((y_pred == positive) & (y_true == positive))
    fp = np.sum((y_pred == positive) & (y_true != positive))
    fn = np.sum((y_pred != positive) & (y_true == positive))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def cls_metrics(logits: np.ndarray, labels: np.ndarray) -> dict:
    pred = logits.argmax(axis=-1)
    classes = np.unique(np.concatenate([labels, pred]))
    return {"acc": float(np.mean(pred == labels)),
            "f1": float(np.mean([_f1(labels, pred, c) for c in classes]))}


def msa_metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    corr = float(np.corrcoef(pred, gt)[0, 1]) if pred.std() > 0 and gt.std() > 0 else 0.0
    pos_p, pos_g = pred >= 0, gt >= 0
    weights = [np.mean(pos_g == c) for c in (True, False)]
    f1 = sum(w * _f1(pos_g, pos_p, c) for w, c in zip(weights, (True, False)))
    acc7 = np.mean(np.clip(np.round(pred), -3, 3) == np.clip(np.round(gt), -3, 3))
    return {"mae": float(np.mean(np.abs(pred - gt))), "corr": corr,
            "acc2": float(np.mean(pos_p == pos_g)), "f1": float(f1), "acc7": float(acc7)}


def write_pgm(path, mask: np.ndarray) -> None:
    """8-bit binary PGM, foreground 255."""
    m = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + m.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)
