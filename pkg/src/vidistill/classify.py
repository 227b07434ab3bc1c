"""Downstream 2D classifier and the representation comparison harness.

Every representation kind turns a clip [3,T,H,W] into one image [3,H,W], and
the same small CNN is trained on each, so accuracy differences come from the
image content alone.
"""

from __future__ import annotations

import enum
import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import model as M
from . import tensor as T
from .data import HFLIP_LABEL, VideoDataset, augment, sample_clips
from .errors import ConfigError, ContractError, DimensionError, SplitLeakageError
from .training import OptimizerState, sgd_momentum_step


class RepresentationKind(str, enum.Enum):
    SINGLE_RANDOM_FRAME = "SingleRandomFrame"
    MEAN_FRAME = "MeanFrame"
    DISTILLED = "Distilled"


KINDS = tuple(RepresentationKind)


@dataclass
class ClassifierConfig:
    epochs: int = 20
    lr: float = 0.02
    momentum: float = 0.9
    lr_decay: float = 0.95
    batch_size: int = 16
    seed: int = 0
    hflip: bool = True
    widths: tuple = (3, 16, 32, 64)


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------

def represent(kind, clip: np.ndarray, encoder: Optional[M.Params] = None, seed=None) -> np.ndarray:
    """Map one clip [3,T,H,W] to an image [3,H,W]."""
    return represent_batch(kind, np.asarray(clip)[None], encoder, seed)[0]


def represent_batch(kind, clips: np.ndarray, encoder: Optional[M.Params] = None, seed=None,
                    batch_size: int = 16) -> np.ndarray:
    kind = RepresentationKind(kind)
    clips = np.asarray(clips, dtype=np.float32)
    if clips.ndim != 5:
        raise DimensionError(f"clips must be [N,3,T,H,W], got {clips.shape}")
    if kind is RepresentationKind.MEAN_FRAME:
        return clips.mean(axis=2)
    if kind is RepresentationKind.SINGLE_RANDOM_FRAME:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, clips.shape[2], size=len(clips))
        return np.ascontiguousarray(clips[np.arange(len(clips)), :, idx])
    if encoder is None:
        raise ConfigError("Distilled representation needs encoder parameters")
    out = np.empty((len(clips), 3, *clips.shape[3:]), dtype=np.float32)
    with T.no_grad():
        for start in range(0, len(clips), batch_size):
            chunk = clips[start : start + batch_size]
            out[start : start + len(chunk)] = M.encode(encoder, chunk, training=False).data
    return out


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def init_classifier(num_classes: int, seed: int, widths=(3, 16, 32, 64), dtype=np.float32) -> M.Params:
    params: M.Params = OrderedDict()
    for i in range(3):
        cin, cout = widths[i], widths[i + 1]
        rng = np.random.default_rng([seed, 100 + i])
        params[f"classifier.{i}.kernel"] = T.Tensor(rng.standard_normal((cout, cin, 1, 3, 3)) * np.sqrt(2.0 / (cin * 9)),
                                                    requires_grad=True, dtype=dtype)
        params[f"classifier.{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        params[f"classifier.{i}.bn_gamma"] = T.Tensor(np.ones(cout), requires_grad=True, dtype=dtype)
        params[f"classifier.{i}.bn_beta"] = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        params[f"classifier.{i}.bn_mean"] = T.Tensor(np.zeros(cout), dtype=dtype)
        params[f"classifier.{i}.bn_var"] = T.Tensor(np.ones(cout), dtype=dtype)
    rng = np.random.default_rng([seed, 199])
    fan_in = widths[3]
    params["classifier.fc.weight"] = T.Tensor(rng.standard_normal((fan_in, num_classes)) * np.sqrt(1.0 / fan_in),
                                              requires_grad=True, dtype=dtype)
    params["classifier.fc.bias"] = T.Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype)
    return params


def classifier_logits(params: M.Params, images, training: bool = False) -> T.Tensor:
    """Logits [N, K] for images [N, 3, H, W]."""
    x = T.as_tensor(images)
    if x.ndim != 4:
        raise DimensionError(f"classifier expects [N,3,H,W], got {x.shape}")
    n = x.shape[0]
    # 2D convolutions as 3D ones over a single frame
    x = T.reshape(x, (n, x.shape[1], 1, *x.shape[2:]))
    for i in range(3):
        p = f"classifier.{i}"
        x = T.conv3d(x, params[f"{p}.kernel"], params[f"{p}.bias"], (1, 2, 2), (0, 1, 1))
        x = T.batchnorm(x, params[f"{p}.bn_gamma"], params[f"{p}.bn_beta"], params[f"{p}.bn_mean"],
                        params[f"{p}.bn_var"], training=training)
        x = T.relu(x)
    x = T.reduce_mean(x, (2, 3, 4))
    return T.bias_add(T.matmul(x, params["classifier.fc.weight"]), params["classifier.fc.bias"])


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.reduce_sum(T.mul(T.log_softmax(logits), T.Tensor(onehot, dtype=logits.dtype)))
    return T.scale(picked, -1.0 / len(labels))


def train_classifier(images: np.ndarray, labels: np.ndarray, num_classes: int,
                     config: ClassifierConfig = ClassifierConfig()) -> M.Params:
    """Cross-entropy training with SGD momentum; deterministic in ``config.seed``."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ContractError("training set must contain at least two classes")
    params = init_classifier(num_classes, config.seed, config.widths)
    trainable = M.trainable(params)
    state = OptimizerState()
    rng = np.random.default_rng([config.seed, 7])
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay ** epoch
        order = rng.permutation(len(images))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            for p in trainable.values():
                p.zero_grad()
            loss = cross_entropy(classifier_logits(params, images[idx], training=True), labels[idx])
            loss.backward()
            grads = {k: p.grad for k, p in trainable.items() if p.grad is not None}
            sgd_momentum_step(trainable, grads, state, lr, config.momentum)
    return params


def predict(params: M.Params, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(classifier_logits(params, images[start : start + batch_size], training=False).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class EvalEntry:
    kind: str
    accuracy: float
    confusion: np.ndarray

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)


def evaluate(params: M.Params, images: np.ndarray, labels: np.ndarray, num_classes: int,
             kind: str = "") -> EvalEntry:
    """Top-1 accuracy and confusion matrix (rows: true class, columns: predicted)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ContractError("test set is empty")
    pred = predict(params, np.asarray(images, dtype=np.float32))
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return EvalEntry(kind, float(np.trace(confusion) / len(labels)), confusion)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    entries: List[EvalEntry] = field(default_factory=list)
    train_ids: List[int] = field(default_factory=list)
    test_ids: List[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def accuracy(self, kind) -> float:
        kind = kind.value if isinstance(kind, RepresentationKind) else kind
        for e in self.entries:
            if e.kind == kind:
                return e.accuracy
        raise KeyError(kind)

    def to_csv(self) -> str:
        return "kind,accuracy\n" + "".join(f"{e.kind},{e.accuracy:.6f}\n" for e in self.entries)

    def confusion_text(self) -> str:
        blocks = []
        for e in self.entries:
            rows = [" ".join(f"{v:4d}" for v in row) for row in e.confusion]
            blocks.append(f"# {e.kind} (rows: true class, columns: predicted)\n" + "\n".join(rows))
        return "\n\n".join(blocks) + "\n"


def video_digests(dataset: VideoDataset) -> List[str]:
    return [hashlib.sha1(np.ascontiguousarray(v).tobytes()).hexdigest() for v in dataset.videos]


def check_split(train: VideoDataset, test: VideoDataset) -> None:
    """Raise if any source video appears in both splits (by content)."""
    shared = set(video_digests(train)) & set(video_digests(test))
    if shared:
        raise SplitLeakageError(f"{len(shared)} source videos appear in both train and test")


def _flip_augmented(clips: np.ndarray, labels: np.ndarray):
    flipped = np.stack([augment(c, force=True)[0] for c in clips]) if len(clips) else clips
    flipped_labels = np.array([HFLIP_LABEL[int(l)] for l in labels], dtype=np.int64)
    return np.concatenate([clips, flipped]), np.concatenate([labels, flipped_labels])


def _kind_entry(kind: RepresentationKind, train_clips, train_labels, test_clips, test_labels,
                num_classes: int, encoder, config: ClassifierConfig, label: str = None) -> EvalEntry:
    x_train = represent_batch(kind, train_clips, encoder, seed=[config.seed, 11])
    x_test = represent_batch(kind, test_clips, encoder, seed=[config.seed, 12])
    params = train_classifier(x_train, train_labels, num_classes, config)
    return evaluate(params, x_test, test_labels, num_classes, kind=label or kind.value)


def _prepare(train: VideoDataset, test: VideoDataset, config: ClassifierConfig):
    train_clips = sample_clips(train, M.CLIP_FRAMES)
    test_clips = sample_clips(test, M.CLIP_FRAMES)
    train_labels = train.labels
    if config.hflip:
        train_clips, train_labels = _flip_augmented(train_clips, train_labels)
    return train_clips, train_labels, test_clips


def compare_representations(train: VideoDataset, test: VideoDataset, encoder: M.Params,
                            config: ClassifierConfig = ClassifierConfig(), kinds=KINDS) -> EvalReport:
    """Train one identical classifier per representation kind and test all on ``test``."""
    check_split(train, test)
    if len(test) == 0:
        raise ContractError("test set is empty")
    train_clips, train_labels, test_clips = _prepare(train, test, config)
    report = EvalReport(train_ids=[int(i) for i in train.source_ids], test_ids=[int(i) for i in test.source_ids],
                        config=asdict(config))
    for kind in kinds:
        report.entries.append(_kind_entry(RepresentationKind(kind), train_clips, train_labels, test_clips,
                                          test.labels, train.num_classes, encoder, config))
    return report


def cross_dataset_eval(encoder: M.Params, source_train: VideoDataset, source_test: VideoDataset,
                       target_train: VideoDataset, target_test: VideoDataset,
                       config: ClassifierConfig = ClassifierConfig()) -> EvalReport:
    """Distilled accuracy in-domain (source variant) and cross-domain (target variant).

    ``encoder`` was trained on the source variant.  In both cases the
    classifier is trained and tested on the variant being distilled.
    """
    if source_train.num_classes != target_train.num_classes or \
            set(np.unique(source_train.labels)) != set(np.unique(target_train.labels)) or \
            set(np.unique(target_test.labels)) - set(np.unique(target_train.labels)):
        raise ConfigError("source and target datasets do not share a label set")
    check_split(source_train, source_test)
    check_split(target_train, target_test)
    report = EvalReport(train_ids=[int(i) for i in target_train.source_ids],
                        test_ids=[int(i) for i in target_test.source_ids], config=asdict(config))
    for name, tr, te in (("in_domain", source_train, source_test), ("cross_domain", target_train, target_test)):
        clips, labels, test_clips = _prepare(tr, te, config)
        report.entries.append(_kind_entry(RepresentationKind.DISTILLED, clips, labels, test_clips, te.labels,
                                          tr.num_classes, encoder, config, label=f"Distilled[{name}]"))
    return report
