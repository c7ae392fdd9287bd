"""Network assembly, training, distillation, evaluation and checkpoints."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor_io
from .attention import SkeletonTopology, SpatialAttnLayer, spatial_attn_param_count
from .config import ModelConfig, RunConfig, TrainConfig
from .data import ArrayDataset, SkeletonSequence, build_arrays, fuse_scores
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .heads import CovPoolHead, DkdLoss, GapHead, cross_entropy, dkd_loss
from .nn import BatchNorm, Linear, Module, ModuleList, Parameter
from .tdm import TdmBlock, tdm_param_count
from .tensor import Tape, Tensor, no_grad

SYNTHETIC_CAVEAT = ("NOTE: accuracies below come from the synthetic desk-scale dataset; they say nothing "
                    "about NTU RGB+D, NW-UCLA or UAV-Human performance, which is out of scope here.")


class Model(Module):
    """Stem, L x (spatial attention, temporal dynamics block), classification head."""

    def __init__(self, cfg: ModelConfig, topology: SkeletonTopology):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.topology = topology
        rng = np.random.default_rng(cfg.seed)
        C = cfg.channels
        self.stem = Linear(3, C, rng)
        self.stem_bn = BatchNorm(C, momentum=cfg.bn_momentum)
        self.attn = ModuleList()
        self.tdm = ModuleList()
        for layer in range(1, cfg.layers + 1):
            self.attn.append(SpatialAttnLayer(C, cfg.heads, topology, rng, max_hop=cfg.max_hop, rpe=cfg.rpe,
                                              ffn_ratio=cfg.ffn_ratio))
            self.tdm.append(TdmBlock(C, rng, stride=2 if layer in cfg.pool_layers else 1,
                                     mti_scales=tuple(cfg.mti_scales), expand=cfg.expand, n_state=cfg.n_state,
                                     conv_width=cfg.conv_width, scan=cfg.scan, offset_rule=cfg.offset_rule,
                                     cyclic=cfg.cyclic, bn_momentum=cfg.bn_momentum,
                                     dt_rank=cfg.dt_rank or None, discretization=cfg.discretization))
        if cfg.head_kind == "gap":
            self.head = GapHead(C, cfg.n_classes, rng)
        else:
            self.head = CovPoolHead(C, cfg.n_classes, rng, iterations=cfg.ns_iterations)

    def backbone(self, x: Tensor) -> Tensor:
        """(B, 3, T, V) -> (B, C, T', V)."""
        h = self.stem_bn(self.stem(x.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
        for attn, tdm in zip(self.attn, self.tdm):
            h = tdm(attn(h, self.topology))
        return h

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        persons = 1
        if x.ndim == 5:
            B, persons = x.shape[:2]
            x = x.reshape(B * persons, *x.shape[2:])
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input (B, 3, T, V) or (B, P, 3, T, V), got {x.shape}")
        T, V = x.shape[2], x.shape[3]
        div = self.cfg.time_divisor
        if T % div:
            raise ContractError(f"frame count {T} must be divisible by {div} "
                                f"(2^{len(tuple(self.cfg.pool_layers))} for pool_layers {tuple(self.cfg.pool_layers)})")
        if V != self.topology.n_joints:
            raise ShapeError(f"input has {V} joints, topology {self.topology.name} has {self.topology.n_joints}")
        logits = self.head(self.backbone(x))
        if persons > 1:
            logits = logits.reshape(-1, persons, logits.shape[-1]).mean(axis=1)
        return logits


def build_model(cfg: ModelConfig, topology: SkeletonTopology | None = None) -> Model:
    topology = topology or SkeletonTopology.load(cfg.topology)
    return Model(cfg, topology)


def param_count_formula(cfg: ModelConfig, n_joints: int = 25) -> dict:
    """Closed-form parameter count per module; ``total`` sums everything."""
    C = cfg.channels
    stem = 3 * C + C + 2 * C
    attn = spatial_attn_param_count(C, cfg.heads, n_joints, cfg.max_hop, cfg.rpe, cfg.ffn_ratio)
    tdm = tdm_param_count(C, tuple(cfg.mti_scales), cfg.expand, cfg.n_state, cfg.conv_width, cfg.dt_rank or None)
    if cfg.head_kind == "gap":
        head = C * cfg.n_classes + cfg.n_classes
    else:
        head = C * (C + 1) // 2 * cfg.n_classes + cfg.n_classes
    out = {"stem": stem, "spatial_attention": cfg.layers * attn, "tdm": cfg.layers * tdm, "head": head}
    out["total"] = sum(out.values())
    return out


def runtime_param_breakdown(model: Model) -> dict:
    out = {
        "stem": model.stem.num_parameters() + model.stem_bn.num_parameters(),
        "spatial_attention": model.attn.num_parameters(),
        "tdm": model.tdm.num_parameters(),
        "head": model.head.num_parameters(),
    }
    out["total"] = model.num_parameters()
    return out


# -- optimisation ----------------------------------------------------------------------


class SGD:
    """Momentum SGD with decoupled parameter groups (weight decay only where ``decay``)."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 nesterov: bool = False):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay, self.nesterov = lr, momentum, weight_decay, nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    @staticmethod
    def groups(model: Module) -> dict[str, list[str]]:
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            (decay if p.decay else no_decay).append(name)
        return {"decay": decay, "no_decay": no_decay}

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=True)
            if self.weight_decay and p.decay:
                g += self.weight_decay * p.data
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: linear warmup, then step drops."""
    lr = cfg.lr * cfg.lr_drop_factor ** sum(epoch >= e for e in cfg.lr_drop_epochs)
    if cfg.warmup_epochs and epoch <= cfg.warmup_epochs:
        lr *= epoch / cfg.warmup_epochs
    return lr


def _clip(params, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(model: Model, path, run_cfg: RunConfig | None = None, extra: dict | None = None) -> Path:
    """Directory of per-tensor TDMT dumps, ``manifest.json`` and ``config.json``."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, arr in model.state_dict().items():
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        fname = f"tensors/{name}.tdmt"
        digest = tensor_io.save(path / fname, arr)
        manifest.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": arr.dtype.name,
                         "sha256": digest})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    cfg_blob = {"model": _model_cfg_dict(model.cfg)}
    if run_cfg is not None:
        cfg_blob["run"] = run_cfg.to_dict()
    if extra:
        cfg_blob["extra"] = extra
    (path / "config.json").write_text(json.dumps(cfg_blob, indent=2, sort_keys=True))
    return path


def _model_cfg_dict(cfg: ModelConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def load_checkpoint(path) -> Model:
    """Rebuild the model from ``config.json`` and restore verified tensors."""
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    blob = json.loads((path / "config.json").read_text())
    mc = blob["model"]
    for k in ("mti_scales", "pool_layers"):
        mc[k] = tuple(mc[k])
    model = build_model(ModelConfig(**mc))
    state = {}
    import hashlib

    for entry in json.loads((path / "manifest.json").read_text()):
        raw = (path / entry["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise DataError(f"checkpoint tensor {entry['name']} fails its checksum")
        state[entry["name"]] = tensor_io.loads(raw)
    model.load_state_dict(state)
    return model


# -- training --------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list = field(default_factory=list)
    best_eval_acc: float = float("nan")
    checkpoint: Path | None = None


def _as_arrays(data, run_cfg: RunConfig, topology: SkeletonTopology, mode: str, epoch: int = 0) -> ArrayDataset:
    if isinstance(data, ArrayDataset):
        return data
    if not data:
        raise DataError("dataset is empty")
    dc = run_cfg.data
    return build_arrays(data, dc.frames, topology, run_cfg.model.stream,
                        dc.resolved_center_joint(run_cfg.model.topology), mode, run_cfg.train.seed, epoch)


def predict_logits(model: Model, data: ArrayDataset, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for xb, _ in data.batches(batch_size):
            out.append(model(Tensor(xb)).data)
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.n_classes))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels)) if len(labels) else float("nan")


def _check_labels(ds: ArrayDataset, n_classes: int) -> None:
    if len(ds) == 0:
        raise DataError("dataset is empty")
    if ds.y.min() < 0 or ds.y.max() >= n_classes:
        raise DataError(f"labels outside [0, {n_classes})")


def _loop(model: Model, train_data, test_data, run_cfg: RunConfig, loss_fn, out_dir=None, log_path=None,
          callback=None) -> TrainResult:
    tc = run_cfg.train.validate()
    topology = model.topology
    fixed_train = None if tc.augment else _as_arrays(train_data, run_cfg, topology, "eval_full")
    test_ds = _as_arrays(test_data, run_cfg, topology, "eval_full") if test_data is not None else None
    opt = SGD(model.parameters(), tc.lr, tc.momentum, tc.weight_decay, tc.nesterov)
    out_dir = Path(out_dir) if out_dir else None
    log_file = open(log_path, "a") if log_path else None
    result = TrainResult(model)
    last_good = model.state_dict()
    best = -1.0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, tc.epochs + 1):
            ds = fixed_train or _as_arrays(train_data, run_cfg, topology, "train_random_crop", epoch)
            _check_labels(ds, model.cfg.n_classes)
            opt.lr = lr_at(tc, epoch)
            model.train()
            rng = np.random.default_rng([tc.seed, epoch])
            tot_loss, correct, seen = 0.0, 0, 0
            for xb, yb in ds.batches(tc.batch_size, shuffle=True, rng=rng):
                with Tape() as tape:
                    logits = model(Tensor(xb))
                    loss = loss_fn(logits, xb, yb)
                    lv = float(loss.item())
                    if not math.isfinite(lv):
                        model.load_state_dict(last_good)
                        if out_dir:
                            save_checkpoint(model, out_dir / "last_good", run_cfg)
                        raise NumericError(f"loss became {lv} at epoch {epoch}; restored last good weights")
                    opt.zero_grad()
                    loss.backward()
                # nodes and their outputs reference each other; drop them now rather than at the next GC cycle
                tape.clear()
                if tc.grad_clip > 0:
                    _clip(opt.params, tc.grad_clip)
                opt.step()
                tot_loss += lv * len(yb)
                correct += int(np.sum(np.argmax(logits.data, -1) == yb))
                del logits, loss
                seen += len(yb)
            eval_acc = accuracy(predict_logits(model, test_ds), test_ds.y) if test_ds is not None else float("nan")
            rec = {"epoch": epoch, "lr": opt.lr, "train_loss": tot_loss / seen, "train_acc": correct / seen,
                   "eval_acc": eval_acc, "wall_s": time.perf_counter() - t0}
            result.metrics.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            last_good = model.state_dict()
            score = eval_acc if test_ds is not None else rec["train_acc"]
            if score > best:
                best = score
                result.best_eval_acc = eval_acc
                if out_dir:
                    result.checkpoint = save_checkpoint(model, out_dir / "best", run_cfg, {"epoch": epoch})
            if callback:
                callback(rec)
    finally:
        if log_file:
            log_file.close()
    return result


def train(model: Model, train_data, test_data, run_cfg: RunConfig, out_dir=None, log_path=None,
          callback=None) -> TrainResult:
    """SGD with cross-entropy; one metrics record per epoch."""
    return _loop(model, train_data, test_data, run_cfg, lambda logits, xb, yb: cross_entropy(logits, yb),
                 out_dir, log_path, callback)


def _backbone_signature(cfg: ModelConfig) -> dict:
    d = _model_cfg_dict(cfg)
    for k in ("head_kind", "ns_iterations", "seed"):
        d.pop(k)
    return d


@dataclass
class CpkdResult:
    teacher: Model
    student: Model
    teacher_metrics: list
    student_metrics: list
    student_eval_acc: float


def train_cpkd(teacher_cfg: RunConfig, student_cfg: RunConfig, train_data, test_data, kd: DkdLoss | None = None,
               teacher: Model | None = None, out_dir=None) -> CpkdResult:
    """Stage 1 trains (or accepts) a covariance-pooling teacher; stage 2 trains a GAP
    student on cross-entropy plus decoupled distillation against frozen teacher logits."""
    if teacher_cfg.model.head_kind != "cov_pool":
        raise ConfigError("teacher must use head_kind='cov_pool'")
    if student_cfg.model.head_kind != "gap":
        raise ConfigError("student must use head_kind='gap'")
    ts, ss = _backbone_signature(teacher_cfg.model), _backbone_signature(student_cfg.model)
    diff = sorted(k for k in ts if ts[k] != ss[k])
    if diff:
        raise ConfigError(f"teacher and student backbones differ in {diff}")
    kd = kd or student_cfg.kd.loss()
    out_dir = Path(out_dir) if out_dir else None
    teacher_metrics = []
    if teacher is None:
        teacher = build_model(teacher_cfg.model)
        res = train(teacher, train_data, test_data, teacher_cfg,
                    out_dir / "teacher" if out_dir else None,
                    out_dir / "teacher_metrics.jsonl" if out_dir else None)
        teacher_metrics = res.metrics
    teacher.eval()

    def loss_fn(logits, xb, yb):
        with no_grad():
            t_logits = teacher(Tensor(xb)).data
        return cross_entropy(logits, yb) + dkd_loss(logits, t_logits, yb, kd)

    student = build_model(student_cfg.model, teacher.topology)
    res = _loop(student, train_data, test_data, student_cfg, loss_fn,
                out_dir / "student" if out_dir else None,
                out_dir / "student_metrics.jsonl" if out_dir else None)
    return CpkdResult(teacher, student, teacher_metrics, res.metrics, res.best_eval_acc)


# -- evaluation ------------------------------------------------------------------------


@dataclass
class EvalReport:
    streams: list
    stream_acc: dict
    fused_acc: float
    confusion: np.ndarray
    per_class_acc: np.ndarray
    class_counts: np.ndarray
    synthetic: bool

    def to_dict(self) -> dict:
        return {"streams": self.streams, "stream_acc": self.stream_acc, "fused_acc": self.fused_acc,
                "confusion": self.confusion.tolist(), "per_class_acc": self.per_class_acc.tolist(),
                "class_counts": self.class_counts.tolist(), "synthetic": self.synthetic}

    def render(self) -> str:
        lines = []
        if self.synthetic:
            lines.append(SYNTHETIC_CAVEAT)
        for s in self.streams:
            lines.append(f"stream {s:<13} top-1 {self.stream_acc[s] * 100:6.2f}%")
        lines.append(f"fused ({'+'.join(self.streams)}) top-1 {self.fused_acc * 100:6.2f}%")
        lines.append("class  count  accuracy")
        for c, (n, a) in enumerate(zip(self.class_counts, self.per_class_acc)):
            lines.append(f"{c:>5}  {n:>5}  {a * 100:7.2f}%")
        lines.append("confusion (rows = true, cols = predicted):")
        lines.extend(" ".join(f"{v:>4d}" for v in row) for row in self.confusion)
        return "\n".join(lines)


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def evaluate(models: dict, data: Sequence[SkeletonSequence], run_cfg: RunConfig | None = None,
             synthetic: bool | None = None) -> EvalReport:
    """Per-stream and fused top-1 accuracy for ``{stream_name: model}``.

    Each model prepares the data in its own stream view.
    """
    if not models:
        raise ConfigError("evaluate needs at least one model")
    logits, labels = {}, None
    for stream, model in models.items():
        cfg = copy.deepcopy(run_cfg) if run_cfg else RunConfig()
        cfg.model.stream = stream
        cfg.model.topology = model.cfg.topology
        ds = _as_arrays(data, cfg, model.topology, "eval_full")
        logits[stream] = predict_logits(model, ds)
        labels = ds.y
    streams = list(models)
    K = {v.shape[-1] for v in logits.values()}
    if len(K) != 1:
        raise ConfigError(f"models disagree on class count: {sorted(K)}")
    n_classes = K.pop()
    fused = fuse_scores([logits[s] for s in streams], streams)
    pred = fused.argmax(-1)
    cm = confusion_matrix(pred, labels, n_classes)
    counts = cm.sum(axis=1)
    per_class = np.divide(np.diag(cm), counts, out=np.zeros(n_classes), where=counts > 0)
    if synthetic is None:
        synthetic = (run_cfg is None) or run_cfg.data.source == "synthetic" or \
            any(getattr(s, "meta", {}).get("synthetic") for s in data[:1])
    return EvalReport(streams, {s: accuracy(logits[s], labels) for s in streams}, accuracy(fused, labels),
                      cm, per_class, counts, bool(synthetic))
