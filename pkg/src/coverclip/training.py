"""Contrastive objective, weighted multi-task loss and the training loop.

The loop is fully deterministic given ``TrainConfig.seed``: batch order and
matching-sample assignment are keyed by (seed, epoch), model streams by
seed, and every piece of mutable state (weights, Adam moments, position in
the epoch, selection history) is written to the checkpoint so an
interrupted run resumes bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (CoverSample, DictionarySegmenter, Segmenter, Tokenizer, WhitespaceSegmenter,
                   assign_itm, make_batches, segment_title)
from .encoders import DualEncoder, ModelConfig, similarity_matrix
from .evaluation import evaluate_model
from .heads import AuxTextEncoder, PresenceHead, SemanticHead, ic_loss, itm_loss
from .hnsw import HnswParams, NegativeSampler, build_index
from .metrics import is_better

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "total", "itc", "ic", "itm")


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class LossWeights:
    itc: float = 0.8
    ic: float = 0.1
    itm: float = 0.1

    def __post_init__(self):
        for name in ("itc", "ic", "itm"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")
        if self.itc <= 0:
            raise ConfigError("the contrastive weight must be positive")


ABLATIONS = {
    "itc": LossWeights(1.0, 0.0, 0.0),
    "itc+ic": LossWeights(0.8, 0.2, 0.0),
    "itc+itm": LossWeights(0.8, 0.0, 0.2),
    "full": LossWeights(0.8, 0.1, 0.1),
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    clip_norm: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    itm_positive_rate: float = 0.7
    negatives_k: int = 10
    hnsw: HnswParams = field(default_factory=HnswParams)
    segmenter: str = "dictionary"
    eval_batch_size: int = 128

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        model = ModelConfig.from_dict(d.pop("model", {}))
        weights = LossWeights(**d.pop("weights", {}))
        hnsw = HnswParams(**d.pop("hnsw", {}))
        return cls(model=model, weights=weights, hnsw=hnsw, **{k: v for k, v in d.items() if k in known})


# -- losses -------------------------------------------------------------------

def itc_loss(img_emb: Tensor, txt_emb: Tensor, log_scale) -> Tensor:
    """Symmetric InfoNCE over the batch similarity matrix (diagonal targets)."""
    b = img_emb.shape[0]
    if b < 2:
        raise ConfigError("the contrastive loss needs a batch of at least 2")
    logits = similarity_matrix(img_emb, txt_emb, log_scale)
    targets = np.arange(b)
    i2t = ag.cross_entropy_from_logits(logits, targets)
    t2i = ag.cross_entropy_from_logits(ag.transpose(logits), targets)
    return (i2t + t2i) * 0.5


def total_loss(l_itc, l_ic, l_itm, w: LossWeights):
    """``w.itc*L_ITC + w.ic*L_IC + w.itm*L_ITM``; zero-weight terms are left
    out of the graph entirely (they may be passed as ``None``)."""
    out = l_itc * w.itc
    if w.ic > 0:
        out = out + l_ic * w.ic
    if w.itm > 0:
        out = out + l_itm * w.itm
    return out


class Model:
    """Encoders plus whichever guidance heads the loss weights enable."""

    def __init__(self, cfg: ModelConfig, weights: LossWeights, seed: int):
        self.cfg = cfg
        self.encoder = DualEncoder(cfg, seed)
        self.ic_head = PresenceHead(cfg, seed) if weights.ic > 0 else None
        self.itm_head = SemanticHead(cfg, seed) if weights.itm > 0 else None

    def named_parameters(self):
        yield from self.encoder.named_parameters("enc.")
        if self.ic_head is not None:
            yield from self.ic_head.named_parameters("ic.")
        if self.itm_head is not None:
            yield from self.itm_head.named_parameters("itm.")

    def head_state(self) -> dict:
        out = {}
        if self.ic_head is not None:
            out.update({f"ic.{k}": v for k, v in self.ic_head.state_dict().items()})
        if self.itm_head is not None:
            out.update({f"itm.{k}": v for k, v in self.itm_head.state_dict().items()})
        return out

    def load_head_state(self, state: dict) -> None:
        for prefix, head in (("ic.", self.ic_head), ("itm.", self.itm_head)):
            if head is not None:
                head.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def compute_losses(model: Model, batch, weights: LossWeights,
                   aux: AuxTextEncoder | None) -> dict[str, Tensor]:
    vis = model.encoder.encode_image(batch.images)
    txt = model.encoder.encode_text(batch.title_ids, batch.title_mask)
    out = {"itc": itc_loss(vis.embedding, txt, model.encoder.log_scale)}
    out["ic"] = ic_loss(model.ic_head(vis.tokens), batch.presence) if weights.ic > 0 else None
    if weights.itm > 0:
        emb = aux.embed(batch.itm_texts)
        out["itm"] = itm_loss(model.itm_head(vis.tokens, emb), batch.itm_labels)
    else:
        out["itm"] = None
    out["total"] = total_loss(out["itc"], out["ic"], out["itm"], weights)
    return out


# -- optimiser ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay applied to matrices (ndim >= 2) only."""

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-3):
        self.params = dict(named_params)
        self.lr, self.eps, self.wd = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict, t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"])
            self.v[k] = np.array(state[f"v/{k}"])


def clip_grad_norm(params, max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return norm


# -- loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path | None
    last_checkpoint: Path
    best_epoch: int | None
    history: list[dict]
    loss_csv: Path
    finished: bool


def make_segmenter(kind: str, dictionary: Sequence[str] | None = None) -> Segmenter:
    if kind == "dictionary" and dictionary:
        return DictionarySegmenter(dictionary)
    return WhitespaceSegmenter()


def build_tokenizer(samples: Sequence[CoverSample], segmenter: Segmenter, max_text_len: int) -> Tokenizer:
    texts = [segment_title(s.title, segmenter) for s in samples]
    texts += [s.ocr_text for s in samples if s.presence]
    return Tokenizer.build(texts, max_text_len)


def build_sampler(samples: Sequence[CoverSample], aux: AuxTextEncoder, cfg: TrainConfig) -> NegativeSampler | None:
    texts = [(s.id, s.ocr_text) for s in samples if s.presence]
    if not texts:
        return None
    index = build_index(texts, aux.embed, cfg.hnsw)
    return NegativeSampler(index, aux.embed, k=cfg.negatives_k, ef_search=cfg.hnsw.ef_search)


def save_train_checkpoint(path: Path, cfg: TrainConfig, model: Model, opt: AdamW | None,
                          aux: AuxTextEncoder | None, tokenizer: Tokenizer, meta: dict) -> Path:
    sections = {"encoders": model.encoder.state_dict()}
    heads = model.head_state()
    if heads:
        sections["heads"] = heads
    if aux is not None:
        sections["aux"] = aux.state_dict()
    if opt is not None:
        sections["optimizer"] = opt.state()
    meta = dict(meta, vocab=tokenizer.tokens, train_config=cfg.to_dict())
    return save_checkpoint(path, cfg.model.to_dict(), sections, step=meta.get("step", 0), meta=meta)


def _write_losses(path: Path, rows: list[dict], mode: str) -> None:
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        if mode == "w":
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_losses(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k in ("step", "epoch") else (float(v) if v != "" else None))
                        for k, v in r.items()})
        return out


def train(cfg: TrainConfig, train_samples: Sequence[CoverSample], eval_samples: Sequence[CoverSample],
          out_dir, dictionary: Sequence[str] | None = None, resume: bool = False,
          stop_after_epoch: int | None = None, stop_after_step: int | None = None,
          evaluate_each_epoch: bool = True) -> TrainResult:
    """Train, evaluate after every epoch and keep the best-PNR checkpoint.

    Writes ``last.ckpt`` (full resumable state), ``best.ckpt``, ``losses.csv``
    (per-step total and component losses) and ``history.json`` under
    ``out_dir``. ``stop_after_*`` interrupt the run cleanly for resumption.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path, best_path, csv_path = out / "last.ckpt", out / "best.ckpt", out / "losses.csv"
    segmenter = make_segmenter(cfg.segmenter, dictionary)
    w = cfg.weights

    if resume and last_path.exists():
        header, arrays = load_checkpoint(last_path)
        meta = header["meta"]
        tokenizer = Tokenizer(meta["vocab"], cfg.model.max_text_len)
        cfg.model.vocab_size = tokenizer.vocab_size
        model = Model(cfg.model, w, cfg.seed)
        model.encoder.load_state_dict(arrays["encoders"])
        model.load_head_state(arrays.get("heads", {}))
        aux = (AuxTextEncoder.from_state(cfg.model, arrays["aux"], tokenizer)
               if "aux" in arrays else None)
        step, epoch, start_batch = meta["step"], meta["epoch"], meta["next_batch"]
        history, best_pnr, best_epoch = meta["history"], meta["best_pnr"], meta["best_epoch"]
        opt = AdamW(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
        opt.load_state(arrays["optimizer"], meta["opt_t"])
        kept = [r for r in read_losses(csv_path) if r["step"] <= step] if csv_path.exists() else []
        _write_losses(csv_path, kept, "w")
        log.info("resumed at step %d (epoch %d, batch %d)", step, epoch, start_batch)
    else:
        tokenizer = build_tokenizer(train_samples, segmenter, cfg.model.max_text_len)
        cfg.model.vocab_size = tokenizer.vocab_size
        model = Model(cfg.model, w, cfg.seed)
        aux = AuxTextEncoder(model.encoder.text, tokenizer) if w.itm > 0 else None
        step = epoch = start_batch = 0
        history, best_pnr, best_epoch = [], None, None
        opt = AdamW(model.named_parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
        _write_losses(csv_path, [], "w")

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    sampler = build_sampler(train_samples, aux, cfg) if aux is not None else None
    params = [p for _, p in model.named_parameters()]

    def checkpoint(path, next_epoch, next_batch):
        meta = {"step": step, "epoch": next_epoch, "next_batch": next_batch, "opt_t": opt.t,
                "history": history, "best_pnr": best_pnr, "best_epoch": best_epoch}
        save_train_checkpoint(path, cfg, model, opt, aux, tokenizer, meta)

    while epoch < cfg.epochs:
        t0 = time.time()
        rows = []
        for bi, batch in enumerate(make_batches(train_samples, cfg.batch_size, cfg.seed, sampler, tokenizer,
                                                segmenter, epoch=epoch, start_batch=start_batch,
                                                positive_rate=cfg.itm_positive_rate), start=start_batch):
            losses = compute_losses(model, batch, w, aux)
            total = losses["total"]
            if not np.isfinite(total.data):
                (out / "aborted.json").write_text(json.dumps({"step": step + 1, "epoch": epoch}))
                raise TrainingAborted(step + 1, "non-finite loss")
            total.backward()
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            model.zero_grad()
            step += 1
            rows.append({"step": step, "epoch": epoch,
                         **{k: (None if losses[k] is None else float(losses[k].data))
                            for k in ("total", "itc", "ic", "itm")}})
            if stop_after_step is not None and step >= stop_after_step:
                _write_losses(csv_path, rows, "a")
                checkpoint(last_path, epoch, bi + 1)
                return TrainResult(out, best_path if best_path.exists() else None, last_path,
                                   best_epoch, history, csv_path, False)
        _write_losses(csv_path, rows, "a")
        start_batch = 0
        record = {"epoch": epoch, "step": step, "seconds": round(time.time() - t0, 3)}
        epoch_rows = read_losses(csv_path)
        for k in ("total", "itc", "ic", "itm"):
            vals = [r[k] for r in epoch_rows if r["epoch"] == epoch and r[k] is not None]
            record[f"mean_{k}"] = float(np.mean(vals)) if vals else None
        improved = False
        if evaluate_each_epoch and eval_samples:
            report = evaluate_model(model.encoder, tokenizer, eval_samples, cfg.eval_batch_size)
            record["metrics"] = report.to_dict()
            improved = is_better(report.pnr, best_pnr)
            if improved:
                best_pnr, best_epoch = report.pnr, epoch
        history.append(record)
        epoch += 1
        log.info("epoch %d done: %s", epoch, {k: v for k, v in record.items() if k != "metrics"})
        if improved:
            checkpoint(best_path, epoch, 0)
        checkpoint(last_path, epoch, 0)
        (out / "history.json").write_text(json.dumps(history, indent=2))
        if stop_after_epoch is not None and epoch >= stop_after_epoch and epoch < cfg.epochs:
            return TrainResult(out, best_path if best_path.exists() else None, last_path,
                               best_epoch, history, csv_path, False)
    return TrainResult(out, best_path if best_path.exists() else None, last_path,
                       best_epoch, history, csv_path, True)


def load_model(path, with_heads: bool = True) -> tuple[Model, Tokenizer, dict]:
    """Rebuild a :class:`Model` (and tokenizer) from a training checkpoint."""
    wanted = ("encoders", "heads") if with_heads else ("encoders",)
    header, arrays = load_checkpoint(path, sections=wanted)
    cfg = TrainConfig.from_dict(header["meta"]["train_config"])
    heads = arrays.get("heads", {})
    weights = LossWeights(cfg.weights.itc,
                          cfg.weights.ic if any(k.startswith("ic.") for k in heads) else 0.0,
                          cfg.weights.itm if any(k.startswith("itm.") for k in heads) else 0.0)
    model = Model(cfg.model, weights, cfg.seed)
    model.encoder.load_state_dict(arrays["encoders"])
    model.load_head_state(heads)
    return model, Tokenizer(header["meta"]["vocab"], cfg.model.max_text_len), header


def auxiliary_accuracy(model: Model, samples: Sequence[CoverSample], sampler: NegativeSampler | None,
                       aux: AuxTextEncoder | None, seed: int, batch_size: int = 128,
                       positive_rate: float = 0.7) -> dict:
    """Presence and matching accuracy of the guidance heads on held-out covers.

    Matching samples are drawn exactly as in training (70% positives for
    covers with text, mined or random negatives otherwise).
    """
    rng = np.random.default_rng([seed, 977])
    itm = assign_itm(samples, rng, sampler, positive_rate) if model.itm_head is not None else None
    ic_hits = itm_hits = itm_ocr_hits = n_ocr = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        with ag.no_grad():
            vis = model.encoder.encode_image(np.stack([s.image for s in chunk]))
            if model.ic_head is not None:
                pred = model.ic_head(vis.tokens).data > 0
                ic_hits += int((pred == np.array([s.presence for s in chunk])).sum())
            if model.itm_head is not None:
                part = itm[start:start + len(chunk)]
                emb = aux.embed([t for t, _, _ in part])
                pred = model.itm_head(vis.tokens, emb).data > 0
                truth = np.array([lbl for _, lbl, _ in part])
                ok = pred == truth
                itm_hits += int(ok.sum())
                has = np.array([s.presence for s in chunk])
                itm_ocr_hits += int(ok[has].sum())
                n_ocr += int(has.sum())
    n = len(samples)
    return {
        "presence_accuracy": ic_hits / n if model.ic_head is not None else None,
        "itm_accuracy": itm_hits / n if model.itm_head is not None else None,
        "itm_accuracy_with_text": itm_ocr_hits / n_ocr if n_ocr else None,
        "n": n,
    }
