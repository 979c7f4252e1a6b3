"""Task pipelines: frozen LM + infusion + modality encoders + task head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ImageEncoder, SeqEncoder
from .infusion import MiTConfig, init_infusion
from .tasks import (ClsHead, RegHead, SegDecoder, TaskTokenTable, ce_loss, cls_metrics, dice_loss,
                    extract_embedding, format_prompt, msa_metrics, rmse_loss, seg_metrics, tokenize)
from .transformer import LMConfig, MicroLM

PAD_ID = 0
MODALITIES = ("acoustic", "facial")
MODAL_DIMS = {"acoustic": 8, "facial": 6}
TASK_TOKEN = {"seg": "<SEG>", "cls": "<CLS>", "msa": "<MSA>"}


@dataclass
class Batch:
    tokens: np.ndarray  # (B, L) int
    pad_mask: np.ndarray  # (B, L) bool, True for real tokens
    lengths: np.ndarray  # (B,)
    task_pos: np.ndarray | None = None
    images: np.ndarray | None = None
    masks: np.ndarray | None = None
    labels: np.ndarray | None = None
    acoustic: np.ndarray | None = None
    facial: np.ndarray | None = None

    def __len__(self) -> int:
        return self.tokens.shape[0]


FILLER_TEXT = " Answer using the picture and the words above."


def filler_tokens(k: int) -> list[int]:
    """k neutral filler tokens (a repeated sentence, truncated)."""
    if k < 0:
        raise ValueError("filler length must be >= 0")
    base = tokenize(FILLER_TEXT)
    return (base * (k // len(base) + 1))[:k]


def prompt_for(task: str, sample: dict) -> list[int]:
    if task == "seg":
        return format_prompt("seg", description=sample["description"])
    return format_prompt(task, text=sample["text"])


def collate(task: str, samples: list[dict], task_token_id: int | None = None, filler: list[int] | None = None) -> Batch:
    """Right-pad prompts into a batch.

    Layout per row: prompt, optional task token, optional filler suffix.
    """
    seqs, task_pos = [], []
    for s in samples:
        ids = prompt_for(task, s)
        if task_token_id is not None:
            ids = ids + [task_token_id]
            task_pos.append(len(ids) - 1)
        seqs.append(ids + list(filler or []))
    lengths = np.array([len(s) for s in seqs])
    n = int(lengths.max())
    tokens = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
    pad_mask = np.arange(n)[None, :] < lengths[:, None]
    batch = Batch(tokens, pad_mask, lengths, task_pos=np.array(task_pos) if task_token_id is not None else None)
    if task in ("seg", "cls"):
        batch.images = np.stack([s["image"] for s in samples]).astype(np.float64)
    if task == "seg":
        batch.masks = np.stack([s["mask"] for s in samples]).astype(np.float64)
    elif task == "cls":
        batch.labels = np.array([int(s["label"][0]) for s in samples])
    else:
        batch.labels = np.array([float(s["label"][0]) for s in samples], dtype=np.float64)
        batch.acoustic = np.stack([s["acoustic"] for s in samples]).astype(np.float64)
        batch.facial = np.stack([s["facial"] for s in samples]).astype(np.float64)
    return batch


class MiTModel:
    """One task's full pipeline. Only infusion, heads, task tokens and
    (trainable) sequence encoders carry ``requires_grad=True``."""

    def __init__(self, task: str, lm_config: LMConfig | None = None, mit_config: MiTConfig | None = None,
                 seed: int = 0, schema: str = "last_token", modalities=MODALITIES, classes: int = 3,
                 decoder_width: int = 64, encoder_trainable: bool = True):
        if task not in ("seg", "cls", "msa"):
            raise ValueError(f"unknown task {task!r}")
        if schema not in ("last_token", "task_token"):
            raise ValueError(f"unknown schema {schema!r}")
        self.task = task
        self.schema = schema
        self.lm_config = lm_config or LMConfig()
        self.mit_config = mit_config or MiTConfig()
        self.seed = seed
        d_I, d_T = self.mit_config.d_I, self.lm_config.d_model
        self.lm = MicroLM(self.lm_config, seed)
        self.infusion = init_infusion(self.mit_config, self.lm_config, seed)
        self.task_tokens = (TaskTokenTable(d_T, self.lm_config.vocab, (TASK_TOKEN[task],), seed)
                            if schema == "task_token" else None)
        self.image_encoder = ImageEncoder(d_I, seed) if task in ("seg", "cls") else None
        self.seq_encoders: dict[str, SeqEncoder] = {}
        if task == "seg":
            self.head = SegDecoder(d_T, self.image_encoder.channels[1:], decoder_width, seed)
        elif task == "cls":
            self.head = ClsHead(d_T, d_I, classes, seed)
        else:
            unknown = set(modalities) - set(MODALITIES)
            if unknown:
                raise ValueError(f"unknown modalities {sorted(unknown)}")
            self.modalities = tuple(m for m in MODALITIES if m in modalities)
            for m in self.modalities:
                self.seq_encoders[m] = SeqEncoder(MODAL_DIMS[m], d_I, trainable=encoder_trainable,
                                                  seed=seed, name=m)
            self.head = RegHead(d_T, seed)

    # parameter views ---------------------------------------------------

    def components(self) -> dict[str, dict[str, Tensor]]:
        comps = {"lm": self.lm.params, "infusion": self.infusion.params, "head": dict(self.head.params)}
        if self.task_tokens is not None:
            comps["head"].update(self.task_tokens.params)
        if self.image_encoder is not None:
            comps["image_encoder"] = self.image_encoder.params
        for m, enc in self.seq_encoders.items():
            comps[f"encoder_{m}"] = enc.params
        return comps

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for c in self.components().values():
            out.update(c)
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.parameters().items() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.parameters().items() if not t.requires_grad}

    # forward -------------------------------------------------------------

    def collate(self, samples: list[dict], filler=None) -> Batch:
        tok = self.task_tokens.id(TASK_TOKEN[self.task]) if self.task_tokens is not None else None
        return collate(self.task, samples, tok, filler)

    def modal_embedding(self, batch: Batch):
        """Global embedding ``I`` (B, d_I) and, for image tasks, the image features."""
        if self.task in ("seg", "cls"):
            feats = self.image_encoder.encode(batch.images)
            return feats.global_embedding, feats
        I = None
        for m, enc in self.seq_encoders.items():
            pooled = enc.encode(getattr(batch, m)).pooled
            I = pooled if I is None else I + pooled
        if I is None:
            I = ad.Tensor(np.zeros((len(batch), self.mit_config.d_I)))
        return I, None

    def task_embedding(self, batch: Batch, I) -> Tensor:
        hooks = self.infusion.hooks(I, batch.pad_mask)
        extra = self.task_tokens.embeddings if self.task_tokens is not None else None
        out = self.lm.forward(batch.tokens, hooks, pad_mask=batch.pad_mask, extra_embeddings=extra)
        return extract_embedding(out.hidden, self.schema, batch.task_pos, batch.lengths)

    def forward(self, batch: Batch) -> Tensor:
        """Mask logits (seg), class logits (cls) or sentiment scores (msa)."""
        I, feats = self.modal_embedding(batch)
        emb = self.task_embedding(batch, I)
        if self.task == "seg":
            return self.head.decode(emb, feats)
        if self.task == "cls":
            return self.head(emb, I)
        return self.head(emb)

    __call__ = forward

    def loss_from_output(self, out: Tensor, batch: Batch) -> Tensor:
        if self.task == "seg":
            return dice_loss(ad.sigmoid(out), batch.masks)
        if self.task == "cls":
            return ce_loss(out, batch.labels)
        return rmse_loss(out, batch.labels)

    def loss(self, batch: Batch) -> Tensor:
        return self.loss_from_output(self.forward(batch), batch)

    def predict(self, batch: Batch) -> np.ndarray:
        with ad.no_grad():
            out = self.forward(batch).data
        return _sigmoid(out) if self.task == "seg" else out

    def metrics(self, preds: np.ndarray, batch_targets: np.ndarray) -> dict:
        if self.task == "seg":
            return seg_metrics(preds, batch_targets)
        if self.task == "cls":
            return cls_metrics(preds, batch_targets)
        return msa_metrics(preds, batch_targets)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def targets_of(batch: Batch) -> np.ndarray:
    return batch.masks if batch.masks is not None else batch.labels
