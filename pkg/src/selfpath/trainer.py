"""Multi-task training: supervised loss plus weighted pretext losses.

The optimised scalar is

    total = L_c + sum_k alpha_k * (L_k(labeled pool) + L_k(unlabeled pool))

where L_c is cross-entropy on the labeled batch and each pool term is a mean
over that pool's batch.  The domain task is the exception: its loss is one
mean over source and target together, split into the two pool terms by the
samples' origin, and it reaches the encoder through gradient reversal.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import pretext
from .datagen import PatchSet, materialize
from .errors import ConfigError, NumericalError, UndefinedMetricError
from .evalkit import score_auc
from .model import (EncoderConfig, SelfPathModel, discriminator_loss, feature_matching_loss,
                    pool, sample_noise, to_tensor)
from .pretext import TaskSpec

log = logging.getLogger(__name__)

MODES = ("semi", "da")


@dataclass
class TrainConfig:
    mode: str = "semi"
    tasks: list = field(default_factory=list)
    # None picks the regime default: 200 / 64 / 1e-3, or 500 / 32 / 3e-4 with the generative task
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    seed: int = 0
    label_budget: float = 1.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    grl_lambda: float = 1.0
    # "val": keep the best validation-AUC epoch; "last": keep the final weights
    selection: str = "val"
    gan_as_printed: bool = True
    z_dim: int = 100
    eval_batch: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.tasks = [pretext.make_task(t) if isinstance(t, str) else t for t in self.tasks]
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate tasks in {names}")
        gen = self.generative
        if self.epochs is None:
            self.epochs = 500 if gen else 200
        if self.batch_size is None:
            self.batch_size = 32 if gen else 64
        if self.lr is None:
            self.lr = 3e-4 if gen else 1e-3
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.selection not in ("val", "last"):
            raise ConfigError(f"selection must be 'val' or 'last', got {self.selection!r}")
        if "domain" in names and self.mode != "da":
            raise ConfigError("the domain task requires mode 'da'")

    @property
    def generative(self) -> bool:
        return any(t.name == "generative" for t in self.tasks)

    @property
    def needs_pyramid(self) -> bool:
        return any(t.name in pretext.NEEDS_PYRAMID for t in self.tasks)


@dataclass
class Batch:
    images: np.ndarray
    labels: Optional[np.ndarray] = None
    pyramid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.images)

    @classmethod
    def take(cls, ps: PatchSet, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return cls(ps.images[idx], ps.labels[idx], None if ps.pyramid is None else ps.pyramid[idx])


@dataclass
class LossReport:
    main: torch.Tensor
    labeled: dict
    unlabeled: dict
    weights: dict
    total: torch.Tensor
    step: int = 0

    def recompose(self) -> float:
        """Rebuild the total from the reported parts, in the order it was built."""
        total = float(self.main.detach().double())
        for name, w in self.weights.items():
            total = total + w * (float(self.labeled[name].detach()) + float(self.unlabeled[name].detach()))
        return total

    def as_dict(self) -> dict:
        val = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
        d = {"total": val(self.total), "main": val(self.main)}
        for name in self.weights:
            d[f"{name}/labeled"] = val(self.labeled[name])
            d[f"{name}/unlabeled"] = val(self.unlabeled[name])
        return d


class _Features:
    """Shared-encoder features of the untransformed pool images, computed once per step."""

    def __init__(self, model):
        self.model = model
        self.cache = {}

    def __call__(self, key, images_t):
        if key not in self.cache:
            self.cache[key] = self.model.forward_shared(images_t)
        return self.cache[key]


def _zero(model) -> torch.Tensor:
    return torch.zeros((), dtype=torch.float32)


def _pool_loss(task: TaskSpec, model, batch: Batch, key, feats, rng, stain) -> torch.Tensor:
    if len(batch) == 0:
        return _zero(model)
    if task.name in ("autoencoder", "hematoxylin"):
        x = to_tensor(batch.images)
        out = model.head(task.name, feats(key, x))
        if task.name == "autoencoder":
            target = x
        else:
            pb = pretext.make_batch(task, batch.images, rng, stain=stain)
            target = torch.from_numpy(pb.targets).unsqueeze(1)
        return F.l1_loss(out, target)
    pb = pretext.make_batch(task, batch.images, rng, pyramid=batch.pyramid, stain=stain)
    logits = model.head(task.name, model.forward_shared(to_tensor(pb.inputs)))
    return F.cross_entropy(logits, torch.from_numpy(pb.targets))


def multitask_loss(labeled: Batch, unlabeled: Batch, tasks: Sequence[TaskSpec], model: SelfPathModel,
                   rng: np.random.Generator, noise: Optional[torch.Generator] = None,
                   gan_as_printed: bool = True, stain=pretext.stainsep.DEFAULT_STAIN,
                   step: int = 0) -> LossReport:
    """Compose the supervised loss and every task's pooled losses into one scalar."""
    if labeled.labels is None or np.any(labeled.labels < 0):
        raise ConfigError("labeled batch must carry class labels")
    for t in tasks:
        if t.name not in model.heads:
            raise ConfigError(f"task {t.name!r} has no head in the model")
    feats = _Features(model)
    x_l = to_tensor(labeled.images)
    x_u = to_tensor(unlabeled.images) if len(unlabeled) else None
    logits = model.head("main", feats("l", x_l))
    main = F.cross_entropy(logits, torch.from_numpy(labeled.labels))

    lab, unl, weights = {}, {}, {}
    for t in tasks:
        if t.name == "domain":
            f_l = feats("l", x_l)
            parts = [model.head("domain", f_l)]
            d = [torch.zeros(len(labeled), dtype=torch.int64)]
            if x_u is not None:
                parts.append(model.head("domain", feats("u", x_u)))
                d.append(torch.ones(len(unlabeled), dtype=torch.int64))
            per = F.cross_entropy(torch.cat(parts), torch.cat(d), reduction="none")
            n = per.shape[0]
            lab[t.name] = per[:len(labeled)].sum() / n
            unl[t.name] = per[len(labeled):].sum() / n
        elif t.name == "generative":
            if model.generator is None:
                raise ConfigError("generative task needs a generator")
            real_key, real = ("u", x_u) if x_u is not None else ("l", x_l)
            z = sample_noise(len(real), model.z_dim, noise)
            with torch.no_grad():
                fake = model.generate(z)
            logit_real = model.head("generative", feats(real_key, real))
            logit_fake = model.head("generative", model.forward_shared(fake))
            lab[t.name] = _zero(model)
            unl[t.name] = discriminator_loss(logit_real, logit_fake, gan_as_printed)
        else:
            lab[t.name] = (_pool_loss(t, model, labeled, "l", feats, rng, stain)
                           if t.uses_labeled else _zero(model))
            unl[t.name] = (_pool_loss(t, model, unlabeled, "u", feats, rng, stain)
                           if t.uses_unlabeled and x_u is not None else _zero(model))
        weights[t.name] = float(t.weight)

    total = main.double()
    for t in tasks:
        total = total + weights[t.name] * (lab[t.name].double() + unl[t.name].double())
    return LossReport(main, lab, unl, weights, total, step)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    labeled: PatchSet
    unlabeled: PatchSet
    val: Optional[PatchSet] = None
    test: Optional[PatchSet] = None
    num_classes: int = 2


def split_train_pool(manifest, train_set: PatchSet):
    """Divide a materialised train split into labeled / unlabeled by the manifest's labels."""
    entries = manifest.split("train")
    if len(entries) != len(train_set):
        raise ConfigError("train patch set does not match the manifest's train split")
    labels = np.array([-1 if e.label is None else e.label for e in entries], dtype=np.int64)
    ps = PatchSet(train_set.images, labels, train_set.domains, train_set.origins, train_set.pyramid)
    lab_idx = np.flatnonzero(labels >= 0)
    unl_idx = np.flatnonzero(labels < 0)
    return ps.subset(lab_idx), ps.subset(unl_idx)


def prepare_data(manifest, slides, config: TrainConfig, train_set: Optional[PatchSet] = None) -> TrainData:
    if train_set is None:
        train_set = materialize(manifest.split("train"), slides, with_pyramid=config.needs_pyramid)
    labeled, unlabeled = split_train_pool(manifest, train_set)
    val = materialize(manifest.split("val"), slides) if manifest.split("val") else None
    test = materialize(manifest.split("test"), slides) if manifest.split("test") else None
    return TrainData(labeled, unlabeled, val, test, manifest.num_classes)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SelfPathModel
    history: list
    best_epoch: int
    best_val_auc: float
    test_auc: Optional[float]
    config: TrainConfig
    wall_seconds: float = 0.0

    def metrics(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val_auc": self.best_val_auc, "test_auc": self.test_auc}


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Index batches covering a fresh permutation of range(n) exactly once."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class _LabeledCycle:
    """Endless labeled batches of size min(batch_size, pool), reshuffled per pass."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n, self.b, self.rng = n, min(batch_size, n), rng
        self.perm, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.b > self.n:
            self.perm, self.pos = self.rng.permutation(self.n), 0
        idx = self.perm[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


@torch.no_grad()
def predict(model: SelfPathModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = [model.predict_proba(to_tensor(images[i:i + batch])).numpy() for i in range(0, len(images), batch)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), np.float32)


def evaluate(model, ps: PatchSet, batch: int = 256) -> float:
    """AUC on ``ps``; NaN (with a warning) when the split lacks a class."""
    try:
        return score_auc(predict(model, ps.images, batch), ps.labels)
    except UndefinedMetricError as exc:
        log.warning("AUC undefined on a %d-patch split: %s", len(ps), exc)
        return float("nan")


def _check_finite(value: torch.Tensor, what: str, step: int):
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what} loss at step {step}")


def fit(config: TrainConfig, data: TrainData, model: Optional[SelfPathModel] = None) -> TrainResult:
    """Optimise the composed objective; one epoch is one pass over the unlabeled pool."""
    t0 = time.perf_counter()
    if len(data.labeled) == 0:
        raise ConfigError("labeled pool is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    noise = torch.Generator().manual_seed(config.seed)
    if model is None:
        model = SelfPathModel(config.encoder, data.num_classes, config.tasks, config.grl_lambda, config.z_dim)
    model.train()
    gen_params = set(map(id, model.generator.parameters())) if model.generator is not None else set()
    opt = torch.optim.Adam([p for p in model.parameters() if id(p) not in gen_params], lr=config.lr)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=config.lr) if gen_params else None

    n_u = len(data.unlabeled)
    epoch_pool = n_u if n_u else len(data.labeled)
    cycle = _LabeledCycle(len(data.labeled), config.batch_size, rng)
    history, step = [], 0
    best_auc, best_epoch, best_state = -math.inf, -1, None

    for epoch in range(config.epochs):
        for u_idx in epoch_batches(epoch_pool, config.batch_size, rng):
            lab = Batch.take(data.labeled, cycle.next())
            unl = Batch.take(data.unlabeled, u_idx) if n_u else Batch(data.unlabeled.images[:0])
            report = multitask_loss(lab, unl, config.tasks, model, rng, noise, config.gan_as_printed, step=step)
            _check_finite(report.total, "total", step)
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            opt.step()
            for k, v in report.as_dict().items():
                history.append({"step": step, "epoch": epoch, "split": "train", "metric": k, "value": v})
            if opt_g is not None:
                real = to_tensor(unl.images if len(unl) else lab.images)
                with torch.no_grad():
                    f_real = pool(model.forward_shared(real))
                fake = model.generate(sample_noise(len(real), model.z_dim, noise))
                l_gen = feature_matching_loss(f_real, pool(model.forward_shared(fake)))
                _check_finite(l_gen, "generator", step)
                opt_g.zero_grad(set_to_none=True)
                l_gen.backward()
                opt_g.step()
                history.append({"step": step, "epoch": epoch, "split": "train", "metric": "generative/gen",
                                "value": float(l_gen.detach())})
            step += 1

        if data.val is not None and len(data.val):
            auc = evaluate(model, data.val, config.eval_batch)
            history.append({"step": step, "epoch": epoch, "split": "val", "metric": "auc", "value": auc})
            log.info("epoch %d  val auc %.4f  loss %.4f", epoch, auc, float(report.total.detach()))
            if config.selection == "val" and auc > best_auc:
                best_auc, best_epoch = auc, epoch
                best_state = copy.deepcopy(model.state_dict())
    if config.selection == "last" or best_state is None:
        best_epoch = config.epochs - 1
        if data.val is not None and len(data.val):
            best_auc = history[-1]["value"] if history[-1]["split"] == "val" else float("nan")
        else:
            best_auc = float("nan")
    else:
        model.load_state_dict(best_state)
    model.eval()

    test_auc = None
    if data.test is not None and len(data.test):
        test_auc = evaluate(model, data.test, config.eval_batch)
        history.append({"step": step, "epoch": best_epoch, "split": "test", "metric": "auc", "value": test_auc})
    return TrainResult(model, history, best_epoch, float(best_auc), test_auc, config,
                       time.perf_counter() - t0)


def train_semi(config: TrainConfig, manifest, slides, train_set: Optional[PatchSet] = None) -> TrainResult:
    """Labeled and unlabeled pools drawn from one domain."""
    if config.mode != "semi":
        raise ConfigError("train_semi expects mode 'semi'")
    if config.generative:
        return train_generative(config, manifest, slides, train_set)
    data = prepare_data(manifest, slides, config, train_set)
    if len(data.labeled) == 0:
        raise ConfigError("labeled pool is empty; raise the label budget")
    return fit(config, data)


def prepare_da(source_manifest, target_manifest, slides, config: TrainConfig,
               source_train: Optional[PatchSet] = None, target_train: Optional[PatchSet] = None) -> TrainData:
    """Source train split (labeled) vs. target train split (labels withheld).

    Model selection uses the source ``val`` split; reported AUC uses the
    target ``test`` split.
    """
    src_dom = {e.domain for e in source_manifest.entries}
    tgt_dom = {e.domain for e in target_manifest.entries}
    if src_dom & tgt_dom:
        raise ConfigError(f"source and target share domain identifiers {sorted(src_dom & tgt_dom)}")
    need = config.needs_pyramid
    src_entries = [e for e in source_manifest.split("train") if e.label is not None]
    if source_train is None:
        source_train = materialize(src_entries, slides, with_pyramid=need)
    if target_train is None:
        target_train = materialize(target_manifest.split("train"), slides, with_pyramid=need)
    target_train = PatchSet(target_train.images, np.full(len(target_train), -1), target_train.domains,
                            target_train.origins, target_train.pyramid)
    val_entries = source_manifest.split("val")
    test_entries = target_manifest.split("test")
    val = materialize(val_entries, slides) if val_entries else None
    test = materialize(test_entries, slides) if test_entries else None
    return TrainData(source_train, target_train, val, test, source_manifest.num_classes)


def train_da(config: TrainConfig, source_manifest, target_manifest, slides,
             data: Optional[TrainData] = None) -> TrainResult:
    if config.mode != "da":
        raise ConfigError("train_da expects mode 'da'")
    if data is None:
        data = prepare_da(source_manifest, target_manifest, slides, config)
    if len(data.labeled) == 0:
        raise ConfigError("source pool has no labels")
    return fit(config, data)


def train_generative(config: TrainConfig, manifest, slides, train_set: Optional[PatchSet] = None,
                     data: Optional[TrainData] = None) -> TrainResult:
    """Alternating real/fake training: encoder+heads step, then a feature-matching generator step."""
    if not config.generative:
        raise ConfigError("train_generative needs the 'generative' task")
    if config.encoder.arch != "small-conv":
        raise ConfigError("the generative regime uses the small-conv encoder")
    if data is None:
        data = prepare_data(manifest, slides, config, train_set)
    return fit(config, data)
