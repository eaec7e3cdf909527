"""Contrastive pre-training loop, optimizer and checkpoints.

Each epoch shuffles the prepared examples with a generator keyed by
``(seed, epoch)``, cuts full batches (the remainder is dropped), encodes
audio, text and spectrum, and steps the optimizer on :func:`muser_loss`.
Because the shuffle is a pure function of ``(seed, epoch)``, a checkpoint
only needs the seed and the epoch counter to resume the exact batch order.

Fine-tuning is the same loop started from an existing checkpoint's
parameters (``init_from``) on another dataset, usually with a smaller lr.

Checkpoint layout (little-endian)::

    b"MUSERCKP"  u32 version  u32 blob_len  blob (UTF-8 JSON)
    per tensor:  u16 name_len  name  u8 dtype  u8 rank  u32 dims[rank]  payload
"""
from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import torch
from tqdm import tqdm

from .contrastive import muser_loss
from .data import DatasetRecord
from .encoders import ModelConfig, MuserModel, init_params
from .errors import ConfigError, DataError, NumericsError, TrainingError, UsageError
from .signal import stft
from .text import DEFAULT_TEMPLATE, TemplateSpec, Vocab, build_vocab, render_available, tokenize

logger = logging.getLogger(__name__)

T = TypeVar("T")

CHECKPOINT_MAGIC = b"MUSERCKP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {torch.float64: 0, torch.float32: 1, torch.int64: 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {0: "<f8", 1: "<f4", 2: "<i8"}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    lr: float = 3e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    spectrum_enabled: bool = True
    loss_aggregation: str = "mean"
    checkpoint_every: int = 0
    workers: int = 0
    eval_every: int = 0
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"
    log_compress: bool = True
    spectrum_eps: float = 1e-6
    template: str = DEFAULT_TEMPLATE
    max_len: int = 32
    min_count: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be at least 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"train.optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.loss_aggregation not in ("mean", "sum"):
            raise ConfigError(
                f"train.loss_aggregation must be 'mean' or 'sum', got {self.loss_aggregation!r}"
            )
        if self.seed < 0:
            raise ConfigError(f"train.seed must be non-negative, got {self.seed}")
        if self.checkpoint_every < 0 or self.eval_every < 0 or self.workers < 0:
            raise ConfigError("checkpoint_every, eval_every and workers must be >= 0")

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "TrainConfig":
        data = dict(data)
        model = ModelConfig(**data.pop("model", {}))  # type: ignore[arg-type]
        return cls(model=model, **data)  # type: ignore[arg-type]


@dataclass
class PreparedExample:
    """One aligned (A_i, T_i, S_i, Y_i) tuple, ready to batch."""

    record_id: str
    wave: torch.Tensor
    tokens: Tuple[int, ...]
    spectrum: Optional[torch.Tensor]
    labels: List[str]


@dataclass
class Batch:
    ids: List[str]
    waves: List[torch.Tensor]
    tokens: torch.Tensor
    spectra: List[torch.Tensor]


def record_texts(records: Sequence[DatasetRecord], template: TemplateSpec) -> List[str]:
    return [render_available(template, r.metadata) for r in records]


def vocab_for(records: Sequence[DatasetRecord], config: TrainConfig) -> Vocab:
    return build_vocab(
        record_texts(records, TemplateSpec(config.template)),
        min_count=config.min_count,
        max_size=config.model.max_vocab,
    )


def prepare_examples(
    records: Sequence[DatasetRecord], vocab: Vocab, config: TrainConfig
) -> List[PreparedExample]:
    """Load audio, render and tokenize text, compute spectra.

    With ``config.workers > 0`` records are processed on a thread pool; results
    keep the input order either way.
    """
    template = TemplateSpec(config.template)

    def prepare(record: DatasetRecord) -> PreparedExample:
        clip = record.load_audio()
        text = render_available(template, record.metadata)
        spectrum = None
        if config.spectrum_enabled:
            spec = stft(clip, config.frame_len, config.hop, config.window, config.log_compress, config.spectrum_eps)
            spectrum = torch.from_numpy(spec.mags)
        return PreparedExample(
            record_id=record.id,
            wave=torch.from_numpy(clip.samples),
            tokens=tokenize(text, vocab, config.max_len).ids,
            spectrum=spectrum,
            labels=list(record.labels),
        )

    if config.workers > 0:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(prepare, records))
    return [prepare(r) for r in records]


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(items: Sequence[T], batch_size: int, seed: int, epoch: int) -> List[List[T]]:
    """Full batches of a ``(seed, epoch)``-keyed shuffle; the remainder is dropped."""
    if len(items) < batch_size:
        raise DataError(f"dataset of {len(items)} examples is smaller than batch size {batch_size}")
    order = shuffle_order(len(items), seed, epoch)
    n_batches = len(items) // batch_size
    return [
        [items[int(i)] for i in order[b * batch_size : (b + 1) * batch_size]]
        for b in range(n_batches)
    ]


def collate(examples: Sequence[PreparedExample]) -> Batch:
    return Batch(
        ids=[e.record_id for e in examples],
        waves=[e.wave for e in examples],
        tokens=torch.tensor([list(e.tokens) for e in examples], dtype=torch.int64),
        spectra=[e.spectrum for e in examples if e.spectrum is not None],
    )


def batch_loss(model: MuserModel, batch: Batch, config: TrainConfig) -> torch.Tensor:
    e_a = model.encode_audio(batch.waves)
    e_t = model.encode_text(batch.tokens)
    e_s = model.encode_spectrum(batch.spectra) if config.spectrum_enabled else None
    return muser_loss(
        e_a,
        e_t,
        e_s,
        model.tau,
        spectrum_enabled=config.spectrum_enabled,
        reduction=config.loss_aggregation,
        scale=model.logit_scale(),
    )


def build_optimizer(params: Iterable[torch.nn.Parameter], config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr)
    return torch.optim.Adam(
        params,
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        foreach=False,
    )


def optimizer_step(
    params: Union[torch.nn.Module, Iterable[torch.nn.Parameter]], optimizer: torch.optim.Optimizer
) -> None:
    """Apply one update from the gradients stored on ``params``.

    Raises :class:`TrainingError` before touching any parameter when a
    gradient contains NaN or Inf.
    """
    if isinstance(params, torch.nn.Module):
        named = list(params.named_parameters())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise TrainingError(f"non-finite gradient for {name}")
    optimizer.step()


@dataclass
class TrainingLog:
    """Per-batch losses, per-epoch means and optional zero-shot accuracies."""

    batches: List[Tuple[int, int, float]] = field(default_factory=list)
    epoch_means: List[Tuple[int, float]] = field(default_factory=list)
    zeroshot: List[Tuple[int, float]] = field(default_factory=list)

    def lines(self) -> List[str]:
        out = []
        by_epoch: Dict[int, List[str]] = {}
        for epoch, batch, loss in self.batches:
            by_epoch.setdefault(epoch, []).append(f"{epoch},{batch},{loss!r}")
        means = dict(self.epoch_means)
        accs = dict(self.zeroshot)
        for epoch in sorted(set(by_epoch) | set(means) | set(accs)):
            out.extend(by_epoch.get(epoch, []))
            if epoch in means:
                out.append(f"{epoch},mean,{means[epoch]!r}")
            if epoch in accs:
                out.append(f"{epoch},zeroshot,{accs[epoch]!r}")
        return out

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")
        return path

    def since(self, epoch: int) -> "TrainingLog":
        return TrainingLog(
            [b for b in self.batches if b[0] >= epoch],
            [m for m in self.epoch_means if m[0] >= epoch],
            [z for z in self.zeroshot if z[0] >= epoch],
        )


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocab
    params: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, torch.Tensor]
    epoch: int
    version: int = CHECKPOINT_VERSION

    @property
    def rng_state(self) -> Dict[str, int]:
        return {"seed": self.config.seed, "next_epoch": self.epoch}

    @classmethod
    def capture(
        cls,
        model: MuserModel,
        optimizer: torch.optim.Optimizer,
        config: TrainConfig,
        vocab: Vocab,
        epoch: int,
    ) -> "Checkpoint":
        names = [name for name, _p in model.named_parameters()]
        params = {name: p.detach().clone() for name, p in model.named_parameters()}
        state: Dict[str, torch.Tensor] = {}
        for idx, slots in sorted(optimizer.state_dict()["state"].items()):
            for key in sorted(slots):
                value = slots[key]
                if not isinstance(value, torch.Tensor):
                    value = torch.tensor(value, dtype=torch.float64)
                state[f"optim/{names[idx]}/{key}"] = value.detach().clone()
        return cls(replace(config, model=model.config), vocab, params, state, epoch)

    def restore_model(self) -> MuserModel:
        model = MuserModel(self.config.model).to(torch.float64)
        missing = set(dict(model.named_parameters())) ^ set(self.params)
        if missing:
            raise DataError(f"checkpoint parameters do not match the model: {sorted(missing)}")
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.params[name])
        return model

    def restore_optimizer(self, model: MuserModel, config: Optional[TrainConfig] = None) -> torch.optim.Optimizer:
        optimizer = build_optimizer(model.parameters(), config or self.config)
        names = [name for name, _p in model.named_parameters()]
        state: Dict[int, Dict[str, torch.Tensor]] = {}
        for key, value in self.optimizer_state.items():
            _prefix, pname, slot = key.split("/")
            state.setdefault(names.index(pname), {})[slot] = value.clone()
        sd = optimizer.state_dict()
        sd["state"] = state
        optimizer.load_state_dict(sd)
        return optimizer


def _tensor_bytes(name: str, t: torch.Tensor) -> bytes:
    code = _DTYPE_CODES.get(t.dtype)
    if code is None:
        raise DataError(f"tensor {name} has unsupported dtype {t.dtype}")
    encoded = name.encode("utf-8")
    shape = tuple(t.shape)
    head = struct.pack(f"<H{len(encoded)}sBB{len(shape)}I", len(encoded), encoded, code, len(shape), *shape)
    payload = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=_NUMPY_DTYPES[code]).tobytes()
    return head + payload


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = list(ckpt.params.items()) + list(ckpt.optimizer_state.items())
    blob = json.dumps(
        {
            "config": asdict(ckpt.config),
            "epoch": ckpt.epoch,
            "rng": ckpt.rng_state,
            "vocab": list(ckpt.vocab.tokens),
            "n_params": len(ckpt.params),
            "n_optimizer": len(ckpt.optimizer_state),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(blob)), blob]
    parts.extend(_tensor_bytes(name, t) for name, t in tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path) -> None:
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a MUSERCKP checkpoint")
    version, blob_len = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(blob_len).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        vocab = Vocab(tuple(header["vocab"]))
        epoch = int(header["epoch"])
        n_params, n_optim = int(header["n_params"]), int(header["n_optimizer"])
        rng = {key: int(header["rng"][key]) for key in ("seed", "next_epoch")}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None
    if rng != {"seed": config.seed, "next_epoch": epoch}:
        raise DataError(f"{path}: batching state {rng} does not match seed {config.seed} at epoch {epoch}")
    tensors: List[Tuple[str, torch.Tensor]] = []
    for _ in range(n_params + n_optim):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{path}: corrupt tensor name") from None
        code, rank = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise DataError(f"{path}: tensor {name} has unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        itemsize = np.dtype(_NUMPY_DTYPES[code]).itemsize
        payload = reader.take(count * itemsize)
        arr = np.frombuffer(payload, dtype=_NUMPY_DTYPES[code]).reshape(dims).copy()
        tensors.append((name, torch.from_numpy(arr)))
    if reader.pos != len(reader.blob):
        raise DataError(f"{path}: trailing bytes after the last tensor")
    return Checkpoint(
        config=config,
        vocab=vocab,
        params=dict(tensors[:n_params]),
        optimizer_state=dict(tensors[n_params:]),
        epoch=epoch,
        version=version,
    )


RUN_FIELDS = ("epochs", "workers", "checkpoint_every", "eval_every")


def resume_config(ckpt: Checkpoint, config: TrainConfig, explicit: Iterable[str] = ()) -> TrainConfig:
    """The configuration a resumed run continues with.

    Everything comes from the checkpoint except the run-control fields in
    :data:`RUN_FIELDS` and the ``explicit`` field names, which are taken from
    ``config``. The shuffle seed is the checkpoint's batching seed unless
    ``seed`` is explicit. The model architecture is never overridden.
    """
    names = {f.name for f in fields(TrainConfig)} - {"model"}
    chosen = set(RUN_FIELDS) | set(explicit)
    unknown = sorted(chosen - names)
    if unknown:
        raise UsageError(f"cannot override {', '.join(unknown)} when resuming")
    base = replace(ckpt.config, seed=ckpt.rng_state["seed"])
    return replace(base, **{name: getattr(config, name) for name in sorted(chosen)})


def train(
    config: TrainConfig,
    dataset: Sequence[DatasetRecord],
    *,
    resume_from: Optional[Checkpoint] = None,
    init_from: Optional[Checkpoint] = None,
    eval_dataset: Optional[Sequence[DatasetRecord]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
    on_epoch: Optional[Callable[[int, float], None]] = None,
    explicit: Iterable[str] = (),
) -> Tuple[Checkpoint, TrainingLog]:
    """Run contrastive training and return the final checkpoint and the log.

    ``resume_from`` continues an interrupted run: parameters, optimizer state,
    the stored configuration and the batching state all come from the
    checkpoint (see :func:`resume_config` for what ``config`` still decides).
    ``init_from`` fine-tunes: parameters and vocabulary come from the
    checkpoint, the optimizer starts fresh at epoch 0.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    start_epoch = 0
    if resume_from is not None:
        config = resume_config(resume_from, config, explicit)
        vocab = resume_from.vocab
        model = resume_from.restore_model()
        optimizer = resume_from.restore_optimizer(model, config)
        start_epoch = resume_from.rng_state["next_epoch"]
    else:
        if init_from is not None:
            vocab = init_from.vocab
            model = init_from.restore_model()
        else:
            vocab = vocab_for(dataset, config)
            model = init_params(replace(config.model, vocab_size=len(vocab)), config.seed)
        config = replace(config, model=model.config)
        optimizer = build_optimizer(model.parameters(), config)

    if len(dataset) < config.batch_size:
        raise DataError(
            f"no full batch: {len(dataset)} examples with batch size {config.batch_size}"
        )
    if start_epoch >= config.epochs:
        raise UsageError(
            f"nothing to train: checkpoint is at epoch {start_epoch} and train.epochs is {config.epochs}"
        )
    examples = prepare_examples(dataset, vocab, config)
    log = TrainingLog()
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    epochs = range(start_epoch, config.epochs)
    for epoch in tqdm(epochs, desc="epochs", disable=not progress):
        losses = []
        for b_idx, batch_examples in enumerate(make_batches(examples, config.batch_size, config.seed, epoch)):
            optimizer.zero_grad()
            try:
                loss = batch_loss(model, collate(batch_examples), config)
            except TrainingError:
                raise
            except NumericsError as e:
                raise TrainingError(f"epoch {epoch}: {e}", batch_index=b_idx) from None
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss in epoch {epoch}", batch_index=b_idx)
            loss.backward()
            optimizer_step(model, optimizer)
            log.batches.append((epoch, b_idx, value))
            losses.append(value)
            logger.debug("epoch %d batch %d loss %.6f", epoch, b_idx, value)
        mean = float(np.mean(losses))
        log.epoch_means.append((epoch, mean))
        logger.info("epoch %d mean loss %.6f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
        done = epoch + 1
        if config.eval_every and eval_dataset and done % config.eval_every == 0:
            from .evaluation import eval_zero_shot

            with torch.no_grad():
                report = eval_zero_shot(
                    eval_dataset, model, vocab, TemplateSpec(config.template), max_len=config.max_len
                )
            log.zeroshot.append((epoch, float(report.accuracy or 0.0)))
            logger.info("epoch %d zero-shot accuracy %.4f", epoch, report.accuracy or 0.0)
        if checkpoint_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            path = save_checkpoint(
                Checkpoint.capture(model, optimizer, config, vocab, done),
                checkpoint_dir / f"epoch_{done:04d}.ckpt",
            )
            logger.info("wrote checkpoint %s", path)
    final = Checkpoint.capture(model, optimizer, config, vocab, max(config.epochs, start_epoch))
    return final, log
