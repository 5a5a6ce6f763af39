"""Two-stage training, evaluation and the ablation runner.

Stage 1 trains DEN and ASN jointly on the depth and scene-regression L1
terms. Stage 2 loads DEN from a stage-1 checkpoint, freezes it, and trains
DGEN with the Charbonnier + SSIM objective.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import image_io
import metrics
from checkpoint import Checkpoint, load_checkpoint, require_compatible, save_checkpoint
from datagen import ImageTriple, ManifestEntry, load_manifest, load_triple
from depthops import DepthMap
from errors import ConfigurationError, ContractError, FormatError, NumericalError
from losses import LossWeights, stage1_loss, stage2_loss
from networks import ABLATION_FLAGS, NetConfig, UVZModel
from tensorcore import ParamStore, Tensor, backward, no_grad, reset_tape

logger = logging.getLogger(__name__)

# keys a stage-2 run may change relative to the stage-1 checkpoint it loads DEN from
STAGE2_FREE_KEYS = ("seed", "use_asn", "use_rsb", "use_rb", "use_depth", "use_reverse", "use_rs", "use_dpm")
STAGE1_FLAGS = ("use_dam", "use_rsb", "use_asn")
BEST_SUFFIX = ".best"


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 100
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_halve_epoch: int = 50
    batch: int = 4
    image_size: int = 64
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs <= 0 or self.batch <= 0 or self.image_size <= 0:
            raise ConfigurationError("epochs, batch and image_size must be positive")
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam decay rates must lie in [0, 1)")
        self.net.validate_input_size(self.image_size, self.image_size)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-based epoch; halved from lr_halve_epoch on"""
        return self.lr / 2 if epoch >= self.lr_halve_epoch else self.lr


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update of every trainable parameter, then clear gradients"""
    trainable = list(store.trainable_items())
    for name, param in trainable:
        if param.tensor.grad is None:
            raise ContractError(f"Trainable parameter {name!r} has no gradient; run backward first")
    store.step += 1
    t = store.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, param in trainable:
        grad = param.tensor.grad
        param.m *= beta1
        param.m += (1.0 - beta1) * grad
        param.v *= beta2
        param.v += (1.0 - beta2) * grad * grad
        update = lr * (param.m / correction1) / (np.sqrt(param.v / correction2) + eps)
        param.tensor.data -= update.astype(param.tensor.dtype, copy=False)
    store.zero_grad()
    return store


# ---------------------------------------------------------------------------
# Data

@dataclass
class Dataset:
    train: List[ImageTriple]
    test: List[ImageTriple]

    @property
    def validation(self) -> List[ImageTriple]:
        return self.test or self.train

    @classmethod
    def from_manifest(cls, path: str, threads: int = 1) -> "Dataset":
        entries = load_manifest(path)
        triples = _load_all(entries, threads)
        train = [t for e, t in zip(entries, triples) if e.split == "train"]
        test = [t for e, t in zip(entries, triples) if e.split == "test"]
        logger.info("loaded %s: %d train, %d test", path, len(train), len(test))
        return cls(train, test)


def _load_all(entries: Sequence[ManifestEntry], threads: int) -> List[ImageTriple]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(load_triple, entries))
    return [load_triple(entry) for entry in entries]


@dataclass
class Batch:
    raw: Tensor
    clean: Tensor
    depth: Tensor


def _crop(triple: ImageTriple, size: int, rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, ...]:
    _, h, w = triple.raw.shape
    if h < size or w < size:
        raise ConfigurationError(f"image {triple.name} is {h}x{w}, smaller than the {size}x{size} crop")
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
    else:
        top, left = int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))
    rows, cols = slice(top, top + size), slice(left, left + size)
    return triple.raw[:, rows, cols], triple.clean[:, rows, cols], triple.depth[rows, cols]


def make_batch(triples: Sequence[ImageTriple], size: int, near_is_zero: bool = True,
               rng: Optional[np.random.Generator] = None) -> Batch:
    crops = [_crop(t, size, rng) for t in triples]
    depth = np.stack([d for _, _, d in crops])[:, None]
    if not near_is_zero:
        depth = 1.0 - depth
    return Batch(Tensor(np.stack([x for x, _, _ in crops])), Tensor(np.stack([j for _, j, _ in crops])),
                 Tensor(depth))


def _batches(triples: Sequence[ImageTriple], order: Sequence[int], batch: int) -> Iterator[List[ImageTriple]]:
    for start in range(0, len(order), batch):
        yield [triples[i] for i in order[start:start + batch]]


# ---------------------------------------------------------------------------
# Training log

@dataclass
class LogEntry:
    epoch: int
    split: str
    loss: float
    metrics: Dict[str, float] = field(default_factory=dict)

    def to_line(self) -> str:
        extras = "".join(f"\t{key}={value!r}" for key, value in self.metrics.items())
        return f"{self.epoch}\t{self.split}\t{self.loss!r}{extras}"


class TrainingLog:
    """Per-epoch losses, kept in memory and appended to a UTF-8 file when a path is given"""

    def __init__(self, path: Optional[str] = None, append: bool = False):
        self.path = path
        self.entries: List[LogEntry] = []
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            if not append:
                open(path, "w", encoding="utf-8").close()

    def record(self, epoch: int, split: str, loss: float, **values: float) -> LogEntry:
        entry = LogEntry(epoch, split, float(loss), {k: float(v) for k, v in values.items()})
        self.entries.append(entry)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(entry.to_line() + "\n")
        return entry

    def losses(self, split: str) -> List[float]:
        return [entry.loss for entry in self.entries if entry.split == split]

    @staticmethod
    def read(path: str) -> List[LogEntry]:
        entries = []
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 3:
                    raise FormatError(f"Malformed training log line {lineno}", path=path)
                extras = dict(part.split("=", 1) for part in parts[3:])
                entries.append(LogEntry(int(parts[0]), parts[1], float(parts[2]),
                                        {k: float(v) for k, v in extras.items()}))
        return entries


# ---------------------------------------------------------------------------
# Stage loops

@dataclass
class StageOutcome:
    checkpoint: Checkpoint
    log: TrainingLog
    best_loss: float
    model: UVZModel


def _check_loss(loss: Tensor, epoch: int, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"Loss became {value}", epoch=epoch, step=step)
    return value


def _stage1_forward(model: UVZModel, batch: Batch, weights: LossWeights) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    d, features = model.den_depth_tensor(batch.raw)
    x_hat = model.asn_forward(batch.raw, features) if model.asn is not None else None
    return stage1_loss(d, batch.depth, x_hat, batch.raw, weights), d, x_hat


def _stage2_forward(model: UVZModel, batch: Batch, weights: LossWeights) -> Tuple[Tensor, Tensor]:
    with no_grad():
        depth, _ = model.den_forward(batch.raw)
    y = model.dgen_forward(batch.raw, depth)
    return stage2_loss(y, batch.clean, weights), y


def validate(model: UVZModel, triples: Sequence[ImageTriple], cfg: TrainConfig) -> Tuple[float, Dict[str, float]]:
    """Size-weighted mean validation loss plus stage-specific diagnostics"""
    total, count = 0.0, 0
    extras: Dict[str, float] = {}
    with no_grad():
        for chunk in _batches(triples, range(len(triples)), cfg.batch):
            batch = make_batch(chunk, cfg.image_size, cfg.net.near_is_zero)
            n = len(chunk)
            if cfg.stage == 1:
                loss, d, x_hat = _stage1_forward(model, batch, cfg.loss)
                extras["depth_mae"] = extras.get("depth_mae", 0.0) + n * float(np.mean(np.abs(d.data - batch.depth.data)))
                if x_hat is not None:
                    extras["scene_mae"] = extras.get("scene_mae", 0.0) + n * float(np.mean(np.abs(x_hat.data - batch.raw.data)))
            else:
                loss, y = _stage2_forward(model, batch, cfg.loss)
                gains = [metrics.psnr(y.data[i], batch.clean.data[i]) - metrics.psnr(batch.raw.data[i], batch.clean.data[i])
                         for i in range(n)]
                extras["psnr_gain"] = extras.get("psnr_gain", 0.0) + sum(g for g in gains if math.isfinite(g))
            total += n * loss.item()
            count += n
    return total / count, {key: value / count for key, value in extras.items()}


def _run_stage(model: UVZModel, dataset: Dataset, cfg: TrainConfig, forward, ckpt_path: Optional[str],
               log: TrainingLog, start_epoch: int, best_loss: float) -> StageOutcome:
    store = model.store
    if start_epoch == 0:
        initial, extras = validate(model, dataset.validation, cfg)
        log.record(0, "val", initial, **extras)
        logger.info("stage %d initial validation loss %.6f", cfg.stage, initial)

    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, cfg.stage, epoch])
        order = rng.permutation(len(dataset.train))
        running, seen = 0.0, 0
        for step, chunk in enumerate(_batches(dataset.train, order, cfg.batch)):
            batch = make_batch(chunk, cfg.image_size, cfg.net.near_is_zero, rng)
            try:
                loss = forward(model, batch, cfg.loss)[0]
                value = _check_loss(loss, epoch + 1, step)
                backward(loss)
            finally:
                reset_tape()
            adam_step(store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            running += value * len(chunk)
            seen += len(chunk)
        val_loss, extras = validate(model, dataset.validation, cfg)
        log.record(epoch + 1, "train", running / seen)
        log.record(epoch + 1, "val", val_loss, **extras)
        logger.info("stage %d epoch %d/%d lr %.2e train %.6f val %.6f", cfg.stage, epoch + 1, cfg.epochs,
                    lr, running / seen, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            if ckpt_path:
                save_checkpoint(ckpt_path + BEST_SUFFIX,
                                Checkpoint.from_store(cfg.net, store, epoch + 1, cfg.stage, best_loss))

    final = Checkpoint.from_store(cfg.net, store, cfg.epochs, cfg.stage, best_loss)
    if ckpt_path:
        save_checkpoint(ckpt_path, final)
    return StageOutcome(final, log, best_loss, model)


def _resume(model: UVZModel, cfg: TrainConfig, resume: Optional[Checkpoint]) -> Tuple[int, float]:
    if resume is None:
        return 0, math.inf
    if resume.stage != cfg.stage:
        raise ConfigurationError(f"cannot resume stage {cfg.stage} from a stage-{resume.stage} checkpoint")
    require_compatible(cfg.net, resume)
    resume.restore(model.store)
    if resume.epoch >= cfg.epochs:
        logger.warning("checkpoint already at epoch %d of %d; nothing to train", resume.epoch, cfg.epochs)
    return resume.epoch, resume.best_loss if resume.best_loss is not None else math.inf


def _require_data(dataset: Dataset) -> None:
    if not dataset.train:
        raise ConfigurationError("training split is empty")


def train_stage1(dataset: Dataset, cfg: TrainConfig, ckpt_path: Optional[str] = None,
                 log_path: Optional[str] = None, resume: Optional[Checkpoint] = None) -> StageOutcome:
    """Minimize the stage-1 loss over DEN (+ ASN when enabled); DGEN stays untouched"""
    _require_data(dataset)
    if cfg.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 TrainConfig")
    model = UVZModel(cfg.net)
    model.store.set_trainable("dgen.", False)
    start, best = _resume(model, cfg, resume)
    log = TrainingLog(log_path, append=resume is not None)
    logger.info("stage 1: %d trainable parameters", sum(p.tensor.data.size for _, p in model.store.trainable_items()))
    return _run_stage(model, dataset, cfg, _stage1_forward, ckpt_path, log, start, best)


def train_stage2(dataset: Dataset, cfg: TrainConfig, stage1_ckpt: Checkpoint, ckpt_path: Optional[str] = None,
                 log_path: Optional[str] = None, resume: Optional[Checkpoint] = None) -> StageOutcome:
    """Train DGEN with DEN loaded from stage1_ckpt and frozen"""
    _require_data(dataset)
    if cfg.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 TrainConfig")
    require_compatible(cfg.net, stage1_ckpt, ignore=STAGE2_FREE_KEYS)
    model = UVZModel(cfg.net)
    stage1_ckpt.restore(model.store, prefix="den.", optimizer=False)
    model.store.set_trainable("den.", False)
    model.store.set_trainable("asn.", False)
    start, best = _resume(model, cfg, resume)
    log = TrainingLog(log_path, append=resume is not None)
    logger.info("stage 2: %d trainable parameters", sum(p.tensor.data.size for _, p in model.store.trainable_items()))
    return _run_stage(model, dataset, cfg, _stage2_forward, ckpt_path, log, start, best)


# ---------------------------------------------------------------------------
# Evaluation

def load_model(ckpt: Checkpoint) -> UVZModel:
    model = UVZModel(ckpt.config)
    ckpt.restore(model.store, optimizer=False)
    return model


def raw_report_path(report_path: str) -> str:
    root, ext = os.path.splitext(report_path)
    return f"{root}.raw{ext or '.csv'}"


def evaluate(ckpt: Checkpoint, entries: Sequence[ManifestEntry], out_dir: Optional[str] = None,
             report_path: Optional[str] = None, use_gt_depth: bool = False) -> Tuple[metrics.MetricReport, metrics.MetricReport]:
    """Enhance every test image and score it; returns (enhanced report, raw baseline report)"""
    model = load_model(ckpt)
    selected = [e for e in entries if e.split == "test"] or list(entries)
    enhanced, baseline = metrics.MetricReport(), metrics.MetricReport()
    for entry in selected:
        try:
            triple = load_triple(entry)
            x = Tensor(triple.raw[None])
            depth = DepthMap(triple.depth).in_convention(ckpt.config.near_is_zero) if use_gt_depth else None
            y, _ = model.enhance(x, depth)
        except (FormatError, ConfigurationError) as e:
            enhanced.skip(entry.name, str(e))
            baseline.skip(entry.name, str(e))
            continue
        y_image = y.data[0].astype(np.float64)
        if out_dir:
            image_io.save_image(os.path.join(out_dir, f"{entry.name}.ppm"), y_image)
        enhanced.add(metrics.evaluate_pair(entry.name, y_image, triple.clean))
        baseline.add(metrics.evaluate_pair(entry.name, triple.raw, triple.clean))
    if report_path:
        enhanced.write(report_path)
        baseline.write(raw_report_path(report_path))
    return enhanced, baseline


# ---------------------------------------------------------------------------
# Ablations

ABLATION_COLUMNS = ("config", "params", "stage1_val_loss", "stage2_val_loss", "psnr", "ssim", "uiqm")


@dataclass
class AblationRow:
    config: str
    params: int
    stage1_val_loss: float
    stage2_val_loss: float
    psnr: Optional[float]
    ssim: Optional[float]
    uiqm: Optional[float]

    def to_line(self) -> str:
        def fmt(value):
            return "" if value is None else repr(value) if isinstance(value, float) else str(value)
        return ",".join(fmt(getattr(self, column)) for column in ABLATION_COLUMNS)


def ablation_label(flag: str) -> str:
    return "full" if flag == "full" else f"no_{flag[len('use_'):]}"


def _with_net(cfg: TrainConfig, stage: int, net: NetConfig) -> TrainConfig:
    values = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    values.update(stage=stage, net=net)
    return TrainConfig(**values)


def run_ablation(dataset: Dataset, entries: Sequence[ManifestEntry], cfg: TrainConfig, out_dir: str,
                 flags: Sequence[str] = ABLATION_FLAGS) -> List[AblationRow]:
    """Train the full model and one variant per ablation flag under a shared seed.

    Stage-1 flags retrain both stages; stage-2 flags reuse the full model's
    stage-1 checkpoint.
    """
    unknown = [flag for flag in flags if flag not in ABLATION_FLAGS]
    if unknown:
        raise ConfigurationError(f"unknown ablation flag {unknown[0]!r}")
    os.makedirs(out_dir, exist_ok=True)
    full_net = cfg.net.replace(**{flag: True for flag in ABLATION_FLAGS})
    stage1_cache: Dict[str, StageOutcome] = {}

    def stage1_for(label: str, net: NetConfig) -> StageOutcome:
        if label not in stage1_cache:
            stage1_cache[label] = train_stage1(dataset, _with_net(cfg, 1, net),
                                               os.path.join(out_dir, label, "stage1.uvz"),
                                               os.path.join(out_dir, label, "stage1.log"))
        return stage1_cache[label]

    rows = []
    for flag in ("full", *flags):
        label = ablation_label(flag)
        net = full_net if flag == "full" else full_net.replace(**{flag: False})
        if flag in STAGE1_FLAGS:
            s1 = stage1_for(label, net)
        else:
            s1 = stage1_for("full", full_net)
        s2 = train_stage2(dataset, _with_net(cfg, 2, net), s1.checkpoint,
                          os.path.join(out_dir, label, "stage2.uvz"), os.path.join(out_dir, label, "stage2.log"))
        report, _ = evaluate(s2.checkpoint, entries, os.path.join(out_dir, label, "enhanced"))
        means = report.means()
        params = s1.model.store.count("den.") + s1.model.store.count("asn.") + s2.model.store.count("dgen.")
        row = AblationRow(label, params, s1.log.losses("val")[-1], s2.log.losses("val")[-1],
                          means["psnr"], means["ssim"], means["uiqm"])
        logger.info("ablation %s: %s", label, row.to_line())
        rows.append(row)

    with open(os.path.join(out_dir, "ablation.csv"), "w", encoding="utf-8") as f:
        f.write(",".join(ABLATION_COLUMNS) + "\n")
        f.write("".join(row.to_line() + "\n" for row in rows))
    return rows


def load_stage1(path: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.stage != 1:
        raise ConfigurationError(f"{path} is a stage-{ckpt.stage} checkpoint; train2 needs stage 1")
    return ckpt
