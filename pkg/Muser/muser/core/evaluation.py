"""Zero-shot evaluation, tagging metrics and the ablation harnesses.

Zero-shot classification fills the text template once per class, encodes the
prompts, and scores each clip by the dot product of its audio embedding with
every prompt embedding. Genre classification takes the argmax; tagging uses
the raw similarities as tag scores for ROC-AUC and AP, so no threshold is
involved.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import torch
from sklearn.metrics import accuracy_score, roc_auc_score
from tqdm import tqdm

from .data import DatasetRecord, stratified_order
from .encoders import MuserModel, token_tensor, wave_tensors
from .errors import DataError, NumericsError, UsageError
from .text import DEFAULT_MAX_LEN, TemplateSpec, Vocab, render_template, restrict_template, tokenize

logger = logging.getLogger(__name__)

T = TypeVar("T")

TASKS = ("genre", "tagging")
_TASK_FIELDS = {"genre": "genre", "tagging": "tag"}


@dataclass
class MetricsReport:
    """Result of one evaluation run.

    ``per_class`` maps a class or tag name to its accuracy (genre task: the
    per-class recall) or to ``{"roc_auc": ..., "ap": ...}`` (tagging task).
    Tags without both a positive and a negative example are listed in
    ``excluded`` and take no part in the macro averages.
    """

    task: str
    n_examples: int
    accuracy: Optional[float] = None
    roc_auc_macro: Optional[float] = None
    ap_macro: Optional[float] = None
    per_class: Dict[str, object] = field(default_factory=dict)
    excluded: List[str] = field(default_factory=list)
    template: str = ""

    def __post_init__(self) -> None:
        for name in ("accuracy", "roc_auc_macro", "ap_macro"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise NumericsError(f"{name}={value} outside [0, 1]")

    def to_lines(self) -> List[str]:
        lines = [f"task={self.task}", f"n_examples={self.n_examples}"]
        if self.template:
            lines.append(f"template={self.template}")
        for name in ("accuracy", "roc_auc_macro", "ap_macro"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}={value!r}")
        if self.excluded:
            lines.append("excluded=" + ",".join(self.excluded))
        for name, value in sorted(self.per_class.items()):
            if isinstance(value, Mapping):
                for key, v in sorted(value.items()):
                    lines.append(f"class.{name}.{key}={v!r}")
            else:
                lines.append(f"class.{name}.accuracy={value!r}")
        return lines

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".json":
            path.write_text(self.to_json() + "\n", encoding="utf-8")
        else:
            path.write_text("".join(line + "\n" for line in self.to_lines()), encoding="utf-8")
        return path


def zero_shot_classify(e: torch.Tensor, prompt_embs: torch.Tensor) -> Tuple[int, np.ndarray]:
    """Best-matching prompt for one embedding; ties go to the lowest index."""
    prompts = torch.as_tensor(prompt_embs, dtype=torch.float64)
    if prompts.ndim != 2 or prompts.shape[0] == 0:
        raise UsageError("zero-shot classification needs at least one class prompt")
    e = torch.as_tensor(e, dtype=torch.float64).reshape(-1)
    if e.shape[0] != prompts.shape[1]:
        raise NumericsError(
            f"embedding of size {e.shape[0]} does not match prompts {tuple(prompts.shape)}"
        )
    scores = (prompts @ e).detach().cpu().numpy()
    return int(np.argmax(scores)), scores


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    if len(preds) != len(labels):
        raise UsageError(f"{len(preds)} predictions for {len(labels)} labels")
    if not labels:
        raise UsageError("accuracy of an empty set is undefined")
    return float(accuracy_score(list(labels), list(preds)))


def _score_label_arrays(scores: object, labels: object) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape != y.shape:
        raise NumericsError(f"scores {s.shape} and labels {y.shape} must be matching n x C matrices")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    return s, y.astype(np.int64)


def _valid_columns(y: np.ndarray) -> Tuple[List[int], List[int]]:
    pos = y.sum(axis=0)
    valid = [c for c in range(y.shape[1]) if 0 < pos[c] < y.shape[0]]
    excluded = [c for c in range(y.shape[1]) if c not in valid]
    return valid, excluded


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Step-interpolated AP of one column, ranked by score with ties by index."""
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / hits.sum())


def tagging_metrics(
    scores: object, labels: object
) -> Tuple[Dict[int, float], Dict[int, float], List[int]]:
    """Per-column ROC-AUC and AP over the valid columns, plus the excluded ones."""
    s, y = _score_label_arrays(scores, labels)
    valid, excluded = _valid_columns(y)
    if not valid:
        raise DataError("no column has both a positive and a negative example")
    aucs = {c: float(roc_auc_score(y[:, c], s[:, c])) for c in valid}
    aps = {c: average_precision(s[:, c], y[:, c]) for c in valid}
    return aucs, aps, excluded


def roc_auc_macro(scores: object, labels: object) -> float:
    aucs, _aps, excluded = tagging_metrics(scores, labels)
    if excluded:
        logger.info("ROC-AUC: excluded degenerate columns %s", excluded)
    return float(np.mean([aucs[c] for c in sorted(aucs)]))


def average_precision_macro(scores: object, labels: object) -> float:
    _aucs, aps, excluded = tagging_metrics(scores, labels)
    if excluded:
        logger.info("AP: excluded degenerate columns %s", excluded)
    return float(np.mean([aps[c] for c in sorted(aps)]))


def class_names(dataset: Sequence[DatasetRecord], task: str) -> List[str]:
    """Genre task: the sorted first labels. Tagging: the sorted union of all tags."""
    if task == "genre":
        return sorted({r.labels[0] for r in dataset if r.labels})
    return sorted({tag for r in dataset for tag in r.labels})


def default_class_fields(names: Sequence[str], task: str) -> List[Dict[str, str]]:
    return [{_TASK_FIELDS[task]: name} for name in names]


def prompt_texts(template: TemplateSpec, fields: Sequence[Mapping[str, str]]) -> List[str]:
    """One prompt per class, keeping only the template clauses the class fields fill."""
    texts = []
    for i, f in enumerate(fields):
        try:
            texts.append(render_template(restrict_template(template, f.keys()), f))
        except UsageError as e:
            raise type(e)(f"class {i}: {e}") from None
    return texts


@torch.no_grad()
def encode_prompts(model: MuserModel, vocab: Vocab, texts: Sequence[str], max_len: int) -> torch.Tensor:
    return model.encode_text(token_tensor([tokenize(t, vocab, max_len) for t in texts]))


@torch.no_grad()
def eval_zero_shot(
    dataset: Sequence[DatasetRecord],
    model: MuserModel,
    vocab: Vocab,
    template: TemplateSpec,
    class_fields: Optional[Sequence[Mapping[str, str]]] = None,
    *,
    task: str = "genre",
    names: Optional[Sequence[str]] = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> MetricsReport:
    """Score every clip against class-filled prompts and summarize the metrics.

    ``names`` fixes the class list (defaults to :func:`class_names` of the
    dataset); ``class_fields`` overrides the template fields per class.
    """
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    if not dataset:
        raise DataError("evaluation dataset is empty")
    names = list(names) if names is not None else class_names(dataset, task)
    if not names:
        raise DataError("evaluation dataset carries no labels")
    fields = list(class_fields) if class_fields is not None else default_class_fields(names, task)
    if len(fields) != len(names):
        raise UsageError(f"{len(fields)} class field sets for {len(names)} classes")
    prompts = encode_prompts(model, vocab, prompt_texts(template, fields), max_len)
    audio = model.encode_audio(wave_tensors([r.load_audio() for r in dataset]))

    if task == "genre":
        index = {name: i for i, name in enumerate(names)}
        truth = []
        for r in dataset:
            if not r.labels or r.labels[0] not in index:
                raise DataError(f"record {r.id}: label {r.labels[:1]} is not one of the classes")
            truth.append(index[r.labels[0]])
        preds = [zero_shot_classify(row, prompts)[0] for row in audio]
        per_class: Dict[str, object] = {}
        for c, name in enumerate(names):
            members = [i for i, t in enumerate(truth) if t == c]
            if members:
                per_class[name] = accuracy([preds[i] for i in members], [c] * len(members))
        return MetricsReport(
            task=task,
            n_examples=len(dataset),
            accuracy=accuracy(preds, truth),
            per_class=per_class,
            template=template.label,
        )

    scores = (audio @ prompts.t()).cpu().numpy()
    labels = np.array([[int(name in r.labels) for name in names] for r in dataset])
    aucs, aps, excluded = tagging_metrics(scores, labels)
    return MetricsReport(
        task=task,
        n_examples=len(dataset),
        roc_auc_macro=float(np.mean([aucs[c] for c in sorted(aucs)])),
        ap_macro=float(np.mean([aps[c] for c in sorted(aps)])),
        per_class={names[c]: {"roc_auc": aucs[c], "ap": aps[c]} for c in sorted(aucs)},
        excluded=[names[c] for c in excluded],
        template=template.label,
    )


def template_ablation(
    dataset: Sequence[DatasetRecord],
    model: MuserModel,
    vocab: Vocab,
    templates: Sequence[TemplateSpec],
    *,
    task: str = "tagging",
    max_len: int = DEFAULT_MAX_LEN,
    progress: bool = False,
) -> List[MetricsReport]:
    """One report per template, in input order, on the same data and model."""
    if not templates:
        raise UsageError("template ablation needs at least one template")
    names = class_names(dataset, task)
    reports = []
    for template in tqdm(templates, desc="templates", disable=not progress):
        report = eval_zero_shot(dataset, model, vocab, template, task=task, names=names, max_len=max_len)
        logger.info("template %r: %s", template.label, report.to_lines()[2:4])
        reports.append(report)
    return reports


def ablation_table(reports: Sequence[MetricsReport]) -> str:
    """Tab-delimited table, one row per template."""
    def cell(value: Optional[float]) -> str:
        return "" if value is None else repr(value)

    rows = ["template\tn_examples\taccuracy\troc_auc_macro\tap_macro"]
    for r in reports:
        rows.append(
            "\t".join(
                [r.template, str(r.n_examples), cell(r.accuracy), cell(r.roc_auc_macro), cell(r.ap_macro)]
            )
        )
    return "\n".join(rows) + "\n"


def subsample_size(ratio: float, n: int) -> int:
    return math.floor(round(ratio * n, 9))


def subsample_indices(records: Sequence[DatasetRecord], ratio: float, seed: int) -> List[int]:
    """Prefix of the class-stratified shuffle; smaller ratios give prefixes of larger ones."""
    if not 0.0 < ratio <= 1.0:
        raise UsageError(f"ratio must be in (0, 1], got {ratio}")
    return stratified_order(records, seed)[: subsample_size(ratio, len(records))]


@dataclass
class SweepPoint:
    ratio: float
    n_train: int
    report: Optional[MetricsReport] = None
    skipped: str = ""


def few_shot_sweep(
    train_fn: Callable[[List[DatasetRecord]], T],
    dataset: Sequence[DatasetRecord],
    ratios: Sequence[float],
    evaluate: Callable[[T], MetricsReport],
    *,
    batch_size: int,
    seed: int = 0,
    progress: bool = False,
) -> List[SweepPoint]:
    """Fine-tune on growing fractions of ``dataset`` and evaluate each result.

    ``train_fn`` receives the subset in dataset order, so ratio 1.0 trains on
    exactly ``dataset``. Ratios that leave fewer than ``batch_size`` examples
    are reported as skipped.
    """
    if not ratios:
        raise UsageError("few-shot sweep needs at least one ratio")
    if list(ratios) != sorted(ratios):
        raise UsageError(f"ratios must be sorted ascending, got {list(ratios)}")
    points = []
    for ratio in tqdm(ratios, desc="ratios", disable=not progress):
        subset = sorted(subsample_indices(dataset, ratio, seed))
        if len(subset) < batch_size:
            logger.warning(
                "ratio %s leaves %d examples, fewer than batch size %d; skipped", ratio, len(subset), batch_size
            )
            points.append(SweepPoint(ratio, len(subset), skipped=f"fewer than {batch_size} examples"))
            continue
        report = evaluate(train_fn([dataset[i] for i in subset]))
        logger.info("ratio %s (%d examples): %s", ratio, len(subset), report.to_lines()[2:])
        points.append(SweepPoint(ratio, len(subset), report))
    return points


def sweep_lines(points: Sequence[SweepPoint]) -> List[str]:
    lines = []
    for p in points:
        if p.report is None:
            lines.append(f"ratio={p.ratio!r} n_train={p.n_train} skipped={p.skipped}")
            continue
        metrics = " ".join(line for line in p.report.to_lines() if line.split("=")[0] in ("accuracy", "roc_auc_macro", "ap_macro"))
        lines.append(f"ratio={p.ratio!r} n_train={p.n_train} {metrics}")
    return lines
