"""Training loop for the dual-student method and its baselines.

Modes
-----
``pccl``            both students, EMA teacher of the transformer, all toggled losses
``supervised_only`` lightweight student on labelled data alone
``cps``             both students, cross pseudo supervision only
``mt``              lightweight student + EMA teacher, noisy-input consistency
``ict``             lightweight student + EMA teacher, mixup consistency

Only the lightweight student is validated, checkpointed and tested.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np
import torch

from . import losses as L
from .core import Ablation, ValidationError, dump_config, softmax
from .data import (AugmentConfig, DatasetError, SplitSpec, augment, load_dataset, preprocess,
                   split_labelled)
from .metrics import MetricReport, evaluate
from .models import (EMATeacher, SegmenterSpec, build_segmenter, ema_decay_at, ema_update,
                     load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

MODES = ("pccl", "supervised_only", "cps", "mt", "ict")
DUAL_MODES = ("pccl", "supervised_only", "cps")

# noisy-input consistency in mt mode
MT_NOISE_STD = 0.1
MT_NOISE_CLIP = 0.2

CHECKPOINT_NAME = "model1_best.pt"
HISTORY_NAME = "history.jsonl"
TEST_REPORT_NAME = "test_metrics.csv"


def effective_toggles(mode, config):
    """Which unsupervised losses a mode actually computes.

    A loss whose weight is zero is skipped entirely, so a zero weight and a
    disabled toggle give identical runs.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    w = config.loss_weights
    if mode == "pccl":
        a = config.ablation
        return Ablation(semi=a.semi and w.lam > 0, con=a.con and w.tau > 0, mac=a.mac and w.beta > 0)
    if mode == "supervised_only":
        return Ablation(False, False, False)
    if mode == "cps":
        return Ablation(semi=w.lam > 0, con=False, mac=False)
    return Ablation(semi=False, con=w.tau > 0, mac=False)


@dataclass
class TrainState:
    model1: torch.nn.Module
    model2: torch.nn.Module | None
    teacher: EMATeacher | None
    opt1: torch.optim.Optimizer
    opt2: torch.optim.Optimizer | None
    mode: str = "pccl"
    epoch: int = 0
    global_step: int = 0
    best_val_dsc: float = -math.inf
    history: list = field(default_factory=list)
    noise_gen: torch.Generator | None = None


def _sgd(model, config):
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def init_state(config, mode="pccl"):
    effective_toggles(mode, config)
    spec1 = SegmenterSpec.for_scale("lightweight_conv", config.scale, config.num_classes, config.input_size)
    model1 = build_segmenter(spec1, seed=config.seed)
    model2 = opt2 = None
    if mode in DUAL_MODES:
        spec2 = SegmenterSpec.for_scale("windowed_transformer", config.scale, config.num_classes,
                                        config.input_size)
        model2 = build_segmenter(spec2, seed=config.seed + 1)
        opt2 = _sgd(model2, config)
        teacher = EMATeacher(model2, config.ema_decay)
    else:
        teacher = EMATeacher(model1, config.ema_decay)
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(model1, model2, teacher, _sgd(model1, config), opt2, mode=mode, noise_gen=gen)


def _check_batches(config, images_l, masks_l, images_u, need_unlabelled):
    if images_l.shape[0] != config.labelled_batch or masks_l.shape[0] != config.labelled_batch:
        raise ValidationError(
            f"labelled batch must hold {config.labelled_batch} samples, got {images_l.shape[0]}")
    if need_unlabelled:
        if images_u is None or images_u.shape[0] != config.unlabelled_batch:
            got = None if images_u is None else images_u.shape[0]
            raise ValidationError(f"unlabelled batch must hold {config.unlabelled_batch} samples, got {got}")


def train_step(state, images_l, masks_l, images_u, config):
    """One joint update. Returns (state, LossBundle of python floats)."""
    mode = state.mode
    on = effective_toggles(mode, config)
    need_u = on.semi or on.con or on.mac
    _check_batches(config, images_l, masks_l, images_u, need_u)
    BL = images_l.shape[0]
    sigma = config.mix_ratio

    state.model1.train()
    if state.model2 is not None:
        state.model2.train()

    if mode in DUAL_MODES:
        x = torch.cat([images_l, images_u]) if need_u else images_l
        p1 = softmax(state.model1(x))
        p2 = softmax(state.model2(x))
        sup1 = L.supervised_loss(p1[:BL], masks_l)
        sup2 = L.supervised_loss(p2[:BL], masks_l)
        semi1 = semi2 = con = mac = 0.0
        if on.semi:
            semi1, semi2 = L.cross_supervision_losses(p1[BL:], p2[BL:])
        if on.con:
            h = images_u.shape[0] // 2
            t = softmax(state.teacher(images_u))
            mixed = L.mixup(images_u[:h], images_u[h:], sigma)
            s = softmax(state.model2(mixed))
            con = L.interpolation_consistency_loss(s, t[:h], t[h:], sigma)
        if on.mac:
            mac = L.mac_loss(p1, p2)
        bundle = L.total_loss(sup1, sup2, semi1, semi2, con, mac, config.loss_weights, on)
        opts = [state.opt1, state.opt2]
        student = state.model2
    else:
        x = torch.cat([images_l, images_u]) if need_u else images_l
        p1 = softmax(state.model1(x))
        sup1 = L.supervised_loss(p1[:BL], masks_l)
        con = 0.0
        if on.con and mode == "mt":
            noise = torch.randn(images_u.shape, generator=state.noise_gen) * MT_NOISE_STD
            t = softmax(state.teacher(images_u + noise.clamp(-MT_NOISE_CLIP, MT_NOISE_CLIP)))
            con = ((p1[BL:] - t) ** 2).mean()
        elif on.con:
            h = images_u.shape[0] // 2
            t = softmax(state.teacher(images_u))
            s = softmax(state.model1(L.mixup(images_u[:h], images_u[h:], sigma)))
            con = L.interpolation_consistency_loss(s, t[:h], t[h:], sigma)
        bundle = L.total_loss(sup1, 0.0, con=con, weights=config.loss_weights, toggles=on)
        opts = [state.opt1]
        student = state.model1

    for opt in opts:
        opt.zero_grad(set_to_none=True)
    bundle.total.backward()
    for opt in opts:
        opt.step()
    ema_update(state.teacher, student, ema_decay_at(state.teacher.step, config.ema_decay))
    state.global_step += 1
    return state, L.LossBundle(**bundle.as_floats())


# ---------------------------------------------------------------------------
# data plumbing

@dataclass
class Prepared:
    labelled: list
    unlabelled: list
    val: list
    test: list


def prepare_data(config, dataset_root):
    root = Path(dataset_root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    train = [preprocess(s, config.input_size) for s in load_dataset(root, "train")]
    if not train:
        raise DatasetError(f"no training images under {root / 'images' / 'train'}")
    val = [preprocess(s, config.input_size) for s in load_dataset(root, "val")]
    test = [preprocess(s, config.input_size) for s in load_dataset(root, "test")]
    group = any(s.case is not None for s in train)
    labelled, unlabelled = split_labelled(train, SplitSpec(config.labelled_fraction, config.seed, group))
    if not val:
        log.warning("no validation split under %s; validating on the labelled training images", root)
        val = labelled
    return Prepared(labelled, unlabelled, val, test)


class _Cycler:
    """Endless shuffled batches over a pool; reshuffles on every pass."""

    def __init__(self, items, batch, rng):
        self.items, self.batch, self.rng = items, batch, rng
        self.order, self.pos = [], 0

    def next(self):
        out = []
        while len(out) < self.batch:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.items)).tolist()
                self.pos = 0
            out.append(self.items[self.order[self.pos]])
            self.pos += 1
        return out


def _stack_images(samples):
    return torch.from_numpy(np.stack([s.image for s in samples]))


def _stack_masks(samples):
    return torch.from_numpy(np.stack([s.mask for s in samples]))


# ---------------------------------------------------------------------------
# full runs

@dataclass
class TrainResult:
    state: TrainState
    output_dir: Path
    checkpoint: Path
    history: Path
    test_report: MetricReport | None

    @property
    def test_dsc(self):
        return None if self.test_report is None else self.test_report.dsc


def _record(fh, state, rec):
    state.history.append(rec)
    fh.write(json.dumps(rec) + "\n")


def train(config, dataset_root, mode="pccl", output_dir="runs/pccl", augment_config=AugmentConfig()):
    """Run ``config.epochs`` epochs, keeping the best-validation lightweight student.

    An epoch is one pass over the labelled pool; unlabelled batches come from
    an independent shuffled stream cycling the unlabelled pool. Writes the
    checkpoint, a line-delimited history and (if a test split exists) the
    per-image test metrics into ``output_dir``.
    """
    effective_toggles(mode, config)
    data = prepare_data(config, dataset_root)
    on = effective_toggles(mode, config)
    if (on.semi or on.con or on.mac) and not data.unlabelled:
        raise DatasetError(f"mode {mode!r} needs unlabelled images but the split left none")

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.toml")
    ckpt_path = out / CHECKPOINT_NAME
    hist_path = out / HISTORY_NAME

    seq = np.random.SeedSequence(config.seed)
    lab_rng, unl_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    unl = _Cycler(data.unlabelled, config.unlabelled_batch, unl_rng) if data.unlabelled else None

    state = init_state(config, mode)
    n_lab = len(data.labelled)
    steps_per_epoch = n_lab // config.labelled_batch
    if steps_per_epoch == 0:
        raise DatasetError(f"{n_lab} labelled images cannot fill a batch of {config.labelled_batch}")

    with hist_path.open("w") as fh:
        _record(fh, state, {"kind": "meta", "mode": mode, "semi": on.semi, "con": on.con,
                            "mac": on.mac, "config_hash": config.hash(), "seed": config.seed,
                            "n_labelled": n_lab, "n_unlabelled": len(data.unlabelled)})
        for epoch in range(config.epochs):
            state.epoch = epoch
            order = lab_rng.permutation(n_lab)
            for b in range(steps_per_epoch):
                idx = order[b * config.labelled_batch:(b + 1) * config.labelled_batch]
                batch = [augment(data.labelled[i], augment_config, lab_rng) for i in idx]
                xu = _stack_images(unl.next()) if unl is not None else None
                state, bundle = train_step(state, _stack_images(batch), _stack_masks(batch), xu, config)
                _record(fh, state, {"kind": "step", "step": state.global_step, "epoch": epoch,
                                    "lr": config.learning_rate, **bundle.as_floats()})

            report = evaluate(state.model1, data.val)
            improved = report.dsc > state.best_val_dsc
            if improved:
                state.best_val_dsc = report.dsc
                save_checkpoint(ckpt_path, state.model1, config.hash(),
                                extra={"epoch": epoch, "val_dsc": report.dsc, "mode": mode})
            _record(fh, state, {"kind": "epoch", "epoch": epoch, "val_dsc": report.dsc,
                                "val_hd95": report.hd95, "val_asd": report.asd,
                                "best_val_dsc": state.best_val_dsc, "improved": improved})
            fh.flush()
            log.info("epoch %d/%d val %s", epoch + 1, config.epochs, report.summary())

    test_report = None
    if data.test:
        best, _ = load_checkpoint(ckpt_path)
        test_report = evaluate(best, data.test)
        test_report.to_csv(out / TEST_REPORT_NAME)
        log.info("test %s", test_report.summary())
    return TrainResult(state, out, ckpt_path, hist_path, test_report)


def run_baseline(mode, config, dataset_root, output_dir):
    return train(config, dataset_root, mode=mode, output_dir=output_dir)


ABLATION_ROWS = (
    Ablation(semi=True, con=False, mac=False),
    Ablation(semi=True, con=True, mac=False),
    Ablation(semi=True, con=False, mac=True),
    Ablation(semi=True, con=True, mac=True),
)


def ablate(config, dataset_root, output_dir, seeds=None):
    """Train the four loss-toggle rows and tabulate test DSC/HD95/ASD.

    With several ``seeds`` each row reports the median over seeds.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    out = Path(output_dir)
    rows = []
    for toggles in ABLATION_ROWS:
        tag = "semi" + "+con" * toggles.con + "+mac" * toggles.mac
        reports = []
        for seed in seeds:
            cfg = config.replace(ablation=toggles, seed=seed)
            res = train(cfg, dataset_root, "pccl", out / f"{tag}_seed{seed}")
            if res.test_report is None:
                raise DatasetError("ablation needs a test split")
            reports.append(res.test_report)
        rows.append({"semi": toggles.semi, "con": toggles.con, "mac": toggles.mac,
                     "dsc": median(r.dsc for r in reports),
                     "hd95": median(r.hd95 for r in reports),
                     "asd": median(r.asd for r in reports),
                     "n_seeds": len(seeds)})
    write_table(rows, out / "ablation.csv")
    return rows


def write_table(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def evaluate_checkpoint(path, dataset_root, split="test"):
    model, payload = load_checkpoint(path)
    samples = [preprocess(s, model.spec.input_size) for s in load_dataset(dataset_root, split)]
    return evaluate(model, samples)


def read_history(path):
    """Parse a history file; raises ValidationError naming the first bad line."""
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{n}: malformed record ({e.msg})") from e
            if not isinstance(rec, dict) or rec.get("kind") not in ("meta", "step", "epoch"):
                raise ValidationError(f"{path}:{n}: record has no valid 'kind'")
            records.append(rec)
    if not records:
        raise ValidationError(f"{path}: empty history")
    return records


__all__ = ["MODES", "TrainState", "TrainResult", "init_state", "train_step", "train", "ablate",
           "run_baseline", "effective_toggles", "read_history", "evaluate_checkpoint", "MetricReport"]
