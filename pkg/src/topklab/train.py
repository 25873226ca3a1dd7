"""SGD training loop for the desk-scale CNN, with per-epoch metrics and
optional Top-K mask instrumentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers, viz
from .evaluate import accuracy, classify
from .model import ConvNet, ModelConfig
from .optim import SgdState, cosine_lr, sgd_step
from .tensor import Tape, Tensor, grad_of, backward


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    eval_every: int = 1  # clean-accuracy probe cadence; last epoch always


def train_model(dataset_dir, model_cfg: ModelConfig, train_cfg: TrainConfig,
                out_dir=None, probe_masks: bool = False, log=None):
    """Train on the congruent split; returns (model, history).

    history rows: {"epoch", "train_loss", "clean_acc"} (+ "connectivity"
    when instrumented). If out_dir is given, writes metrics.csv and, with
    probe_masks, per-epoch mask dumps and connectivity.csv.
    """
    from .datagen import load_split
    images, labels, _ = load_split(dataset_dir, "train", dtype=np.float32)
    clean_images, clean_labels, _ = load_split(dataset_dir, "clean", dtype=np.float32)

    model = ConvNet(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    state = SgdState(train_cfg.lr0, train_cfg.momentum, train_cfg.weight_decay)

    n = len(images)
    bs = train_cfg.batch_size
    steps_per_epoch = max(1, n // bs)
    total_steps = train_cfg.epochs * steps_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    probe = clean_images[0].astype(np.float64) if probe_masks else None
    instrument = probe_masks and model_cfg.topk is not None

    history = []
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            tape = Tape()
            watched = {name: tape.watch(Tensor(arr))
                       for name, arr in model.params.items()}
            logits, _, _ = model.forward(Tensor(images[idx]), train=True,
                                         watched=watched)
            loss = layers.softmax_cross_entropy(logits, labels[idx])
            grads = backward(tape, loss)
            gdict = {name: grad_of(grads, t) for name, t in watched.items()}
            lr = cosine_lr(step, total_steps, train_cfg.lr0)
            sgd_step(model.params, gdict, state, lr)
            epoch_loss += loss.item()
            nb += 1
            step += 1
        probe_now = (epoch % max(1, train_cfg.eval_every) == 0
                     or epoch == train_cfg.epochs)
        clean_acc = (accuracy(classify(model, clean_images), clean_labels)
                     if probe_now else float("nan"))
        row = {"epoch": epoch, "train_loss": epoch_loss / nb,
               "clean_acc": clean_acc}
        if instrument:
            row["connectivity"] = viz.mean_connectivity(
                model, probe, model_cfg.topk_stage)
            if out is not None:
                viz.dump_topk_masks(model, probe, model_cfg.topk_stage,
                                    step=epoch, out_dir=out / "masks")
        history.append(row)
        if log:
            log(row)

    if out is not None:
        with open(out / "metrics.csv", "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,clean_acc\n")
            for r in history:
                f.write(f"{r['epoch']},{r['train_loss']:.8g},{r['clean_acc']:.8g}\n")
        if instrument:
            with open(out / "connectivity.csv", "w", encoding="utf-8") as f:
                f.write("epoch,connectivity\n")
                for r in history:
                    f.write(f"{r['epoch']},{r['connectivity']:.8g}\n")
    return model, history
