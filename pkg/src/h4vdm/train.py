"""Training loop, pair scoring and evaluation."""
from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataUnavailable, NonFiniteLoss
from .gop_store import GopRecord, GopStore, ModelInput, assemble_model_input, load_record, record_dir
from .metrics import MetricsReport, auc, build_report, choose_threshold
from .model import H4VDM, loss_and_grads, similarity, stack_inputs
from .nn.checkpoint import save_checkpoint
from .nn.optim import OptimizerState, adam_step, lr_at
from .pairs import PairSample


@dataclass
class TrainConfig:
    batch_size: int = 72
    warmup_epochs: int = 5
    base_lr: float = 8e-6
    decay: float = 0.97
    patience: int = 5
    max_epochs: int = 100
    seed: int = 0
    prefetch: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]")
        if self.patience < 0 or self.max_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("patience/warmup must be >= 0 and max_epochs >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(base_lr=self.base_lr, warmup_epochs=self.warmup_epochs,
                              decay=self.decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


# The desk-scale presets learn in a few epochs only with a much larger step.
TRAIN_PRESETS = {
    "S": {}, "B": {}, "L": {},
    "tiny": {"batch_size": 32, "base_lr": 1e-3, "warmup_epochs": 0, "max_epochs": 3},
    "micro": {"batch_size": 16, "base_lr": 1e-3, "warmup_epochs": 0, "max_epochs": 2},
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return TrainConfig.from_dict({**TRAIN_PRESETS[name], **overrides})


# -- inputs ---------------------------------------------------------------------

class InputSource:
    """Maps GOP references to assembled model inputs, memoising the result."""

    def __init__(self, loader: Callable[[tuple], GopRecord], L: int, height: int, width: int,
                 dtype=np.float32, cache_size: int | None = 4096):
        self.L, self.height, self.width, self.dtype = L, height, width, dtype
        self._loader = loader
        self._cached = lru_cache(maxsize=cache_size)(self._assemble) if cache_size != 0 else self._assemble

    def _assemble(self, ref: tuple):
        return assemble_model_input(self._loader(ref), self.L, self.height, self.width, self.dtype)

    def get(self, ref) -> ModelInput:
        return self._cached(tuple(ref))

    @classmethod
    def from_records(cls, records: Sequence[GopRecord], L, height, width, dtype=np.float32):
        table = {r.key: r for r in records}

        def load(ref):
            try:
                return table[tuple(ref)]
            except KeyError:
                raise DataUnavailable(f"no record for GOP {ref}") from None
        return cls(load, L, height, width, dtype, cache_size=None)

    @classmethod
    def from_store(cls, store: GopStore | str | Path, L, height, width, dtype=np.float32,
                   cache_size: int | None = 4096):
        root = store.root if isinstance(store, GopStore) else Path(store)

        def load(ref):
            path = record_dir(root, *ref)
            if not path.exists():
                raise DataUnavailable(f"record {path} does not exist")
            return load_record(path, L, height, width)
        return cls(load, L, height, width, dtype, cache_size)

    def batch(self, refs: Sequence[tuple]) -> dict:
        return stack_inputs([self.get(r) for r in refs])


def _prefetch(producer, items, depth):
    """Yield ``producer(item)`` in order, computed up to ``depth`` items ahead."""
    if depth <= 0:
        for it in items:
            yield producer(it)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        try:
            for it in items:
                if stop.is_set():
                    return
                q.put((True, producer(it)))
        except BaseException as exc:  # surfaced in the consumer
            q.put((False, exc))
            return
        q.put((True, StopIteration))

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            ok, val = q.get()
            if not ok:
                raise val
            if val is StopIteration:
                return
            yield val
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)


# -- scoring --------------------------------------------------------------------

def extract_features(model: H4VDM, params: dict, source: InputSource, refs: Sequence[tuple],
                     batch_size: int = 64) -> dict:
    refs = list(dict.fromkeys(tuple(r) for r in refs))
    feats = {}
    chunks = [refs[i:i + batch_size] for i in range(0, len(refs), batch_size)]
    for chunk in chunks:
        r = model.extract(params, source.batch(chunk))
        feats.update(zip(chunk, r))
    return feats


def score_pairs(model: H4VDM, params: dict, source: InputSource, pairs: Sequence[PairSample],
                batch_size: int = 64) -> np.ndarray:
    """Similarity of every pair; each GOP is encoded once."""
    feats = extract_features(model, params, source,
                             [x for p in pairs for x in (p.a, p.b)], batch_size)
    if not pairs:
        return np.zeros(0)
    a = np.stack([feats[p.a] for p in pairs])
    b = np.stack([feats[p.b] for p in pairs])
    return np.asarray(similarity(a, b), dtype=np.float64)


def evaluate(model: H4VDM, params: dict, source: InputSource, test_pairs: Sequence[PairSample],
             val_pairs: Sequence[PairSample] | None = None, threshold: float | None = None,
             meta: dict | None = None) -> MetricsReport:
    """Score ``test_pairs``; the threshold comes from ``val_pairs`` when given."""
    source_name = "given"
    if threshold is None and val_pairs:
        v = score_pairs(model, params, source, val_pairs)
        threshold = choose_threshold(v, [p.label for p in val_pairs])
        source_name = "validation"
    scores = score_pairs(model, params, source, test_pairs)
    return build_report(test_pairs, scores, threshold,
                        "test" if threshold is None else source_name, meta)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    best_auc: float
    history: list = field(default_factory=list)


def _batches(pairs, order, size):
    return [[pairs[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def _dump_batch(out_dir, epoch, step, batch, loss):
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_epoch{epoch}_step{step}.json"
    path.write_text(json.dumps({"epoch": epoch, "step": step, "loss": repr(loss),
                                "pairs": [p.to_json() for p in batch]}, indent=1))
    return path


def train(model: H4VDM, params: dict, source: InputSource, train_pairs: Sequence[PairSample],
          val_pairs: Sequence[PairSample], config: TrainConfig, out_dir: str | Path | None = None,
          meta: dict | None = None, log: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam with the epoch schedule and early stopping on validation AUC.

    ``params`` is updated in place; the returned result holds a copy of the
    best parameters. With ``out_dir`` set, each epoch writes
    ``epoch_<n>.ckpt``, the best one is also ``best.ckpt``, and ``train_log.jsonl``
    gets one line per epoch.
    """
    if not train_pairs:
        raise DataUnavailable("no training pairs")
    if not val_pairs:
        raise DataUnavailable("no validation pairs")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    opt = config.optimizer()
    val_labels = [p.label for p in val_pairs]
    best_auc, best_epoch, best_params, bad = -1.0, -1, None, 0
    history = []
    ckpt_meta = {"model": model.model_card(), "train": config.to_dict(), **(meta or {})}
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, opt)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_pairs))
        batches = _batches(train_pairs, order, config.batch_size)

        def assemble(batch):
            return (batch, source.batch([p.a for p in batch]), source.batch([p.b for p in batch]),
                    np.array([p.label for p in batch], dtype=np.float64))

        total, count = 0.0, 0
        for step, (batch, b1, b2, y) in enumerate(_prefetch(assemble, batches, config.prefetch)):
            loss, grads, _ = loss_and_grads(model, params, b1, b2, y)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                dump = _dump_batch(out, epoch, step, batch, loss)
                raise NonFiniteLoss(f"non-finite loss/gradient at epoch {epoch} step {step}"
                                    + (f"; batch written to {dump}" if dump else ""))
            adam_step(opt, params, grads, lr)
            total += loss * len(batch)
            count += len(batch)
        val_auc = auc(score_pairs(model, params, source, val_pairs), val_labels)
        entry = {"epoch": epoch, "lr": lr, "train_loss": total / count, "val_auc": val_auc,
                 "elapsed_s": round(time.perf_counter() - t0, 3)}
        history.append(entry)
        improved = val_auc > best_auc
        if improved:
            best_auc, best_epoch, bad = val_auc, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
        if out is not None:
            m = {**ckpt_meta, "epoch": epoch, "val_auc": val_auc}
            save_checkpoint(out / f"epoch_{epoch}.ckpt", params, m)
            if improved:
                save_checkpoint(out / "best.ckpt", params, m)
            with (out / "train_log.jsonl").open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if log is not None:
            log(entry)
        if bad and bad >= config.patience:
            break
    return TrainResult(best_params, best_epoch, best_auc, history)
