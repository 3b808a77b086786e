"""Training loop, evaluation and the ablation / k-sweep experiment runners."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import adacm, augment, loss, metrics, model
from .data import (
    CLASS_NAMES,
    SceneSpec,
    TrainStreams,
    generate_dataset,
    load_dataset,
    make_split,
    next_batch,
)
from .raster import softmax

log = logging.getLogger(__name__)

TRAIN_LOG_FIELDS = ("step", "l_sup", "l_con", "l_total", "retained_fraction",
                    "alpha_mean", "mode_counts")


@dataclass
class TrainConfig:
    k: int = 8
    tau_percent: float = 20.0
    lambda_con: float = 1.0
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # "poly": lr * (1 - step / total_steps) ** 0.9; "constant": lr throughout
    lr_schedule: str = "constant"
    epochs: int = 100
    labeled_fraction: float = 0.125
    seed: int = 0
    image_size: int = 64
    num_classes: int = 5
    widths: tuple = model.DEFAULT_WIDTHS
    use_usaug: bool = True
    use_adacm: bool = True
    supervised_only: bool = False
    alpha_normalization: str = "classes"
    eval_every: int = 5
    log_adacm: bool = False
    # used when an experiment runner has to generate its own dataset
    train_count: int = 80
    test_count: int = 20
    data_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        checks = [
            (1 <= self.k <= len(augment.ALL_OPS), "k must be in [1, 10]"),
            (0.0 <= self.tau_percent <= 100.0, "tau_percent must be in [0, 100]"),
            (self.lambda_con >= 0.0, "lambda_con must be non-negative"),
            (self.lr > 0.0, "lr must be positive"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (0.0 < self.labeled_fraction < 1.0, "labeled_fraction must be in (0, 1)"),
            (self.image_size >= 4 and self.image_size % 2 == 0, "image_size must be even and >= 4"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (len(self.widths) == 3 and min(self.widths) >= 1, "widths needs three positive ints"),
            (self.alpha_normalization in ("classes", "log_classes"),
             "alpha_normalization must be 'classes' or 'log_classes'"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.lr_schedule in ("poly", "constant"), "lr_schedule must be 'poly' or 'constant'"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}\n")
        return "".join(lines)


def _coerce(name, default, text):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(","))
    return text


def parse_config(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, getattr(defaults, key), value)
    return TrainConfig(**values)


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# --- one optimisation step ------------------------------------------------

@dataclass
class StepInfo:
    decisions: list = field(default_factory=list)
    recipes: list = field(default_factory=list)
    aux_recipes: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    # per image: strongly augmented primary, pasted partner image and its target
    strong_u: list = field(default_factory=list)
    aux_inputs: list = field(default_factory=list)
    aux_targets: list = field(default_factory=list)
    weak_probs: np.ndarray = None
    strong_inputs: np.ndarray = None
    targets: list = field(default_factory=list)
    reliability: np.ndarray = None


def _strong(image, cfg, rng):
    if cfg.use_usaug:
        recipe = augment.sample_recipe(cfg.k, rng)
        return augment.usaug(image, recipe), recipe
    return augment.fixed_strong_augment(image, rng), None


def build_strong_views(params, batch, cfg, rng):
    """Weak predictions, AdaCM decisions, mixed strong inputs and targets.

    Returns ``(strong_inputs, targets, info)``; everything here is constant
    with respect to the parameters.
    """
    n = len(batch.x_u)
    h, w = batch.x_u.shape[1:3]
    weak_probs = softmax(model.forward(params, batch.x_u).astype(np.float64))
    seeds = rng.integers(0, 2**63, size=(n, 3))
    info = StepInfo()
    strong_inputs = np.empty(batch.x_u.shape)
    targets = []
    for i in range(n):
        alpha = adacm.compute_alpha(weak_probs[i], cfg.alpha_normalization)
        if cfg.use_adacm:
            decision = adacm.decide(weak_probs[i], seeds[i, 0], alpha=alpha)
        else:
            # plain CutMix between two unlabeled images
            decision = adacm.decide(weak_probs[i], seeds[i, 0], alpha=0.0)
        strong_u, recipe = _strong(batch.x_u[i], cfg, seeds[i, 1])
        if decision.mode is adacm.MixMode.UNLABELED:
            j = batch.aux_index[i]
            aux_image, aux_recipe = _strong(batch.x_u[j], cfg, seeds[i, 2])
            aux_target = weak_probs[j]
        else:
            j = batch.aid_index[i]
            aux_image, aux_recipe = batch.x_l[j], None
            aux_target = batch.y_l[j]
        strong_inputs[i] = adacm.mix_images(strong_u, aux_image, decision.mask)
        targets.append(adacm.mix_targets(weak_probs[i], aux_target, decision.mask, decision.mode))
        info.decisions.append(decision)
        info.recipes.append(recipe)
        info.aux_recipes.append(aux_recipe)
        info.alphas.append(alpha)
        info.strong_u.append(strong_u)
        info.aux_inputs.append(aux_image)
        info.aux_targets.append(aux_target)
    info.weak_probs = weak_probs
    info.strong_inputs = strong_inputs
    info.targets = targets
    return strong_inputs, targets, info


def stack_targets(targets):
    return adacm.SoftTarget(
        np.stack([t.probs for t in targets]),
        np.stack([t.override for t in targets]),
        np.stack([t.ignore for t in targets]),
    )


def compute_gradients(params, batch, cfg, rng):
    """Loss report, parameter gradients and step info for one batch."""
    logits_l, cache_l = model.forward(params, batch.x_l, return_cache=True)
    l_sup = loss.supervised_loss(logits_l, batch.y_l)
    grads = model.backward(params, batch.x_l, loss.loss_gradients(logits_l, batch.y_l), cache_l)
    if cfg.supervised_only:
        return loss.total_loss(l_sup, 0.0, cfg.lambda_con, 0.0), grads, StepInfo()

    strong_inputs, targets, info = build_strong_views(params, batch, cfg, rng)
    target = stack_targets(targets)
    logits_s, cache_s = model.forward(params, strong_inputs, return_cache=True)
    probs_s = softmax(logits_s.astype(np.float64))
    reliability = loss.gate(loss.pixel_entropy(probs_s), cfg.tau_percent)
    info.reliability = reliability
    l_con, retained = loss.consistency_loss(logits_s, target, reliability)
    upstream = loss.loss_gradients(logits_s, target, reliability)
    grads_con = model.backward(params, strong_inputs, upstream, cache_s)
    lam = np.float32(cfg.lambda_con) if grads["head_w"].dtype == np.float32 else cfg.lambda_con
    for name in grads:
        grads[name] = grads[name] + lam * grads_con[name]
    return loss.total_loss(l_sup, l_con, cfg.lambda_con, retained), grads, info


def train_step(params, opt_state, batch, cfg, rng):
    """Run one AACL step and update ``params`` / ``opt_state`` in place."""
    rng = np.random.default_rng(rng)
    report, grads, info = compute_gradients(params, batch, cfg, rng)
    if not math.isfinite(report.l_total):
        raise FloatingPointError(f"non-finite loss {report}")
    model.sgd_step(params, grads, opt_state)
    return params, opt_state, report, info


def learning_rate(cfg, step, total_steps):
    """Learning rate for global ``step`` out of ``total_steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - step / total_steps) ** 0.9


# --- evaluation -------------------------------------------------------------

def evaluate_params(params, images, masks, num_classes):
    preds = model.predict(params, images)
    report, _ = metrics.evaluate(preds, masks, num_classes)
    return report


# --- full runs --------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list
    evals: list
    final: dict
    best_miou: float
    best_epoch: int
    wall_time: float

    @property
    def final_miou(self):
        return self.final["miou"]

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def _fmt(x):
    return f"{x:.17g}"


def _report_dict(report):
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in report.per_class_iou],
        "miou": report.miou,
        "absent": list(report.absent),
    }


def _class_names(num_classes):
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class_{c}" for c in range(num_classes)]


def _read_history(path):
    if not os.path.exists(path):
        return []
    with open(path) as f:
        return [(int(r["epoch"]), float(r["miou"])) for r in csv.DictReader(f)]


def run_training(cfg, data_dir, out_dir, resume=False, stop_after=None):
    """Train for ``cfg.epochs`` epochs, evaluating every ``cfg.eval_every``.

    Writes ``train_log.csv``, ``eval_history.csv``, ``eval.csv`` (final
    model), ``timing.csv``, ``run.record`` and the ``last.ckpt`` /
    ``best.ckpt`` checkpoints into ``out_dir``. ``resume`` continues from
    ``last.ckpt``; ``stop_after`` ends the run after that many epochs (total)
    without the final evaluation, which is how interrupted runs are
    simulated.
    """
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    dataset = load_dataset(data_dir, cfg.num_classes)
    train_ids = dataset.split_ids("train")
    test_ids = dataset.split_ids("test")
    if not test_ids:
        raise ValueError(f"{data_dir} has no test images")
    plan, lab_idx, unl_idx = make_split(len(train_ids), cfg.labeled_fraction, [cfg.seed, 7])
    lab_images, lab_masks = dataset.stack([train_ids[i] for i in lab_idx])
    unl_images, _ = dataset.stack([train_ids[i] for i in unl_idx])
    test_images, test_masks = dataset.stack(test_ids)
    streams = TrainStreams(lab_images, lab_masks, unl_images, plan, cfg.seed, cfg.image_size)
    log.info("split: %d labeled (x%d oversampled), %d unlabeled, %d test; tau=%s%% percentile gate",
             plan.n_labeled, plan.oversample_factor, plan.n_unlabeled, len(test_ids), cfg.tau_percent)

    paths = {name: os.path.join(out_dir, name) for name in (
        "train_log.csv", "eval_history.csv", "eval.csv", "timing.csv", "run.record",
        "last.ckpt", "best.ckpt", "config.txt", "adacm_log.csv")}
    with open(paths["config.txt"], "w") as f:
        f.write(cfg.to_text())

    if resume:
        params, velocity, start_epoch = model.load_checkpoint(paths["last.ckpt"], cfg.num_classes)
        opt = model.OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, velocity)
        history = [h for h in _read_history(paths["eval_history.csv"]) if h[0] <= start_epoch]
        mode = "a"
    else:
        params = model.init_params(cfg.seed, cfg.num_classes, cfg.widths)
        opt = model.OptimizerState.for_params(
            params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        start_epoch, history, mode = 0, [], "w"

    end_epoch = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    steps = streams.steps_per_epoch
    epochs_summary = []
    train_log = open(paths["train_log.csv"], mode, newline="")
    hist_log = open(paths["eval_history.csv"], mode, newline="")
    timing_log = open(paths["timing.csv"], mode, newline="")
    adacm_log = open(paths["adacm_log.csv"], mode, newline="") if cfg.log_adacm else None
    try:
        tw = csv.writer(train_log, lineterminator="\n")
        hw = csv.writer(hist_log, lineterminator="\n")
        timing = csv.writer(timing_log, lineterminator="\n")
        aw = csv.writer(adacm_log, lineterminator="\n") if adacm_log else None
        if not resume:
            tw.writerow(TRAIN_LOG_FIELDS)
            hw.writerow(("epoch", "miou"))
            timing.writerow(("epoch", "wall_seconds"))
            if aw:
                aw.writerow(("step", "image", "mode", "r", "alpha", "top", "left", "h", "w"))
        for epoch in range(start_epoch, end_epoch):
            order = streams.epoch_indices(epoch)
            sums = np.zeros(5)
            labeled_mixes = 0
            for step in range(steps):
                global_step = epoch * steps + step
                batch = next_batch(streams, epoch, step, order)
                opt.lr = learning_rate(cfg, global_step, cfg.epochs * steps)
                _, _, report, info = train_step(params, opt, batch, cfg, [cfg.seed, 303, epoch, step])
                n_lab = sum(d.mode is adacm.MixMode.LABELED for d in info.decisions)
                n_unl = len(info.decisions) - n_lab
                alpha_mean = float(np.mean(info.alphas)) if info.alphas else 0.0
                tw.writerow((global_step, _fmt(report.l_sup), _fmt(report.l_con),
                             _fmt(report.l_total), _fmt(report.retained_fraction),
                             _fmt(alpha_mean), f"L{n_lab}U{n_unl}"))
                if aw:
                    for i, d in enumerate(info.decisions):
                        aw.writerow((global_step, i, d.mode.value, _fmt(d.r), _fmt(d.alpha),
                                     d.mask.top, d.mask.left, d.mask.box_h, d.mask.box_w))
                sums += (report.l_sup, report.l_con, report.l_total,
                         report.retained_fraction, alpha_mean)
                labeled_mixes += n_lab
            means = sums / steps
            epochs_summary.append({
                "epoch": epoch + 1, "l_sup": means[0], "l_con": means[1], "l_total": means[2],
                "retained_fraction": means[3], "alpha_mean": means[4],
                "labeled_mixes": labeled_mixes,
            })
            model.save_checkpoint(paths["last.ckpt"], params, opt, epoch + 1)
            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                rep = evaluate_params(params, test_images, test_masks, cfg.num_classes)
                history.append((epoch + 1, rep.miou))
                hw.writerow((epoch + 1, _fmt(rep.miou)))
                if rep.miou >= max(m for _, m in history):
                    model.save_checkpoint(paths["best.ckpt"], params, None, epoch + 1)
                log.info("epoch %d/%d  l_sup %.4f  l_con %.4f  mIoU %.4f", epoch + 1,
                         cfg.epochs, means[0], means[1], rep.miou)
            timing.writerow((epoch + 1, f"{time.perf_counter() - t0:.3f}"))
            for fh in (train_log, hist_log, timing_log, adacm_log):
                if fh:
                    fh.flush()
    finally:
        for fh in (train_log, hist_log, timing_log, adacm_log):
            if fh:
                fh.close()

    final = evaluate_params(params, test_images, test_masks, cfg.num_classes)
    with open(paths["eval.csv"], "w", newline="") as f:
        f.write(final.to_csv(_class_names(cfg.num_classes)))
    best_epoch, best_miou = max(history, key=lambda h: (h[1], -h[0])) if history else (0, math.nan)
    record = RunRecord(
        config=json.loads(json.dumps(dataclasses.asdict(cfg))),
        seed=cfg.seed,
        epochs=epochs_summary,
        evals=[list(h) for h in history],
        final=_report_dict(final),
        best_miou=best_miou,
        best_epoch=best_epoch,
        wall_time=time.perf_counter() - t0,
    )
    with open(paths["run.record"], "w") as f:
        f.write(record.to_json())
    return record


def evaluate_checkpoint(ckpt_path, data_dir, num_classes=5, role="test"):
    params, _, _ = model.load_checkpoint(ckpt_path, num_classes)
    dataset = load_dataset(data_dir, num_classes)
    ids = dataset.split_ids(role)
    images, masks = dataset.stack(ids)
    return evaluate_params(params, images, masks, num_classes)


# --- experiment runners -------------------------------------------------------

def ensure_dataset(cfg, data_dir):
    if not os.path.exists(os.path.join(data_dir, "split.txt")):
        spec = SceneSpec(size=cfg.image_size, num_classes=cfg.num_classes)
        generate_dataset(data_dir, cfg.data_seed, cfg.train_count, cfg.test_count, spec)
    return data_dir


def run_variants(variants, seeds, data_dir, out_dir, label_keys):
    """Train every ``(label, cfg)`` variant for every seed; returns CSV text and rows."""
    rows = []
    for label, cfg in variants:
        mious = []
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            run_dir = os.path.join(out_dir, "_".join(f"{k}{v}" for k, v in label.items()) + f"_seed{seed}")
            record = run_training(run_cfg, data_dir, run_dir)
            mious.append(record.final_miou)
        rows.append({**label, "seeds": " ".join(str(s) for s in seeds),
                     "miou_mean": float(np.mean(mious)), "mious": mious})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(label_keys) + ["seeds", "miou_mean"] + [f"miou_seed{s}" for s in seeds])
    for row in rows:
        writer.writerow([row[k] for k in label_keys] + [row["seeds"], _fmt(row["miou_mean"])]
                        + [_fmt(m) for m in row["mious"]])
    return buf.getvalue(), rows


def sweep_k(cfg, data_dir, out_dir, k_values=range(1, 11), seeds=None):
    """One run per k with USAug on and plain unlabeled CutMix."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    variants = [({"k": k}, cfg.replace(k=k, use_usaug=True, use_adacm=False, supervised_only=False))
                for k in k_values]
    text, rows = run_variants(variants, seeds, data_dir, out_dir, ("k",))
    with open(os.path.join(out_dir, "sweep_k.csv"), "w") as f:
        f.write(text)
    return text, rows


ABLATION_ROWS = ((False, False), (True, False), (False, True), (True, True))


def ablate(cfg, data_dir, out_dir, seeds=None):
    """Four runs: neither module, USAug only, AdaCM only, both."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    variants = [({"usaug": int(u), "adacm": int(a)},
                 cfg.replace(use_usaug=u, use_adacm=a, supervised_only=False))
                for u, a in ABLATION_ROWS]
    text, rows = run_variants(variants, seeds, data_dir, out_dir, ("usaug", "adacm"))
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write(text)
    return text, rows
