"""Analysis instruments: Gram-matrix texture synthesis with Top-K
ablation, masked-activation reconstruction, and Top-K mask dumps with a
connectivity statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensor as T
from .optim import LbfgsState, lbfgs_minimize
from .sparsity import TopKConfig, topk_forward
from .tensor import Tape, Tensor

MASK_MODES = ("topk_mask", "non_topk_mask", "identity_mask")


def gram(x: Tensor) -> Tensor:
    """(1/M) * Xflat @ Xflat.T for a (c, h, w) feature map; M = h*w.

    Composed from tape primitives, so it is differentiable for free.
    """
    c, h, w = x.shape
    xf = T.reshape(x, (c, h * w))
    return T.scale(T.matmul(xf, T.transpose(xf)), 1.0 / (h * w))


@dataclass
class SynthesisJob:
    target: np.ndarray            # (3, S, S) in [0, 1]
    layers: tuple = (1, 2)
    mode: str = "with_topk"       # or "without_topk" (Top-K responses zeroed)
    steps: int = 100
    lr: float = 1.0
    rho: float = 0.2              # ablation sparsity when mode == without_topk
    init_seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or not self.layers:
            raise ValueError("bad synthesis job")
        if self.mode not in ("with_topk", "without_topk"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class ReconstructionJob:
    target: np.ndarray
    layers: tuple = (1, 2)
    mask_mode: str = "topk_mask"  # one of MASK_MODES, applied at every layer
    steps: int = 100
    lr: float = 1.0
    rho: float = 0.2
    symmetric: bool = True        # mask both terms (default; see masked_loss)
    init_seed: int = 0

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")


def _collect_activations(model, image: Tensor, layers):
    _, acts, _ = model.forward(image, collect_activations=True)
    return [acts[i - 1] for i in layers]


def _ablate(act: Tensor, rho: float) -> Tensor:
    """Zero the Top-K responses, keeping only the non-Top-K remainder."""
    kept, _ = topk_forward(act, TopKConfig(rho, "hard"))
    return T.sub(act, kept)


def _gram_targets(model, target: np.ndarray, layers, mode: str, rho: float):
    acts = _collect_activations(model, Tensor(target.astype(np.float64)), layers)
    out = []
    for a in acts:
        a = _ablate(a, rho) if mode == "without_topk" else a
        out.append(gram(a).data)
    return out


def gram_objective(model, image: np.ndarray, target: np.ndarray, layers,
                   component: str = "full", rho: float = 0.2) -> float:
    """Gram loss between image and target using full / topk / nontopk responses."""
    def pick(act):
        if component == "full":
            return act
        kept, _ = topk_forward(act, TopKConfig(rho, "hard"))
        return kept if component == "topk" else T.sub(act, kept)

    total = 0.0
    ia = _collect_activations(model, Tensor(image.astype(np.float64)), layers)
    ta = _collect_activations(model, Tensor(target.astype(np.float64)), layers)
    for a, b in zip(ia, ta):
        d = gram(pick(a)).data - gram(pick(b)).data
        total += float((d * d).sum())
    return total


def _noise_image(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0, 1, shape)


def texture_synthesize(model, job: SynthesisJob):
    """Optimize an image so its (possibly Top-K-ablated) Gram statistics
    match the target's; returns (image, loss_trace)."""
    shape = job.target.shape
    targets = _gram_targets(model, job.target, job.layers, job.mode, job.rho)

    def f(x_flat):
        tape = Tape()
        img = tape.watch(Tensor(x_flat.reshape(shape)))
        acts = _collect_activations(model, img, job.layers)
        loss = None
        for a, gt in zip(acts, targets):
            if job.mode == "without_topk":
                a = _ablate(a, job.rho)
            d = T.sub(gram(a), Tensor(gt))
            term = T.tsum(T.square(d))
            loss = term if loss is None else T.add(loss, term)
        grads = T.backward(tape, loss)
        return loss.item(), T.grad_of(grads, img).reshape(-1)

    x0 = _noise_image(shape, job.init_seed).reshape(-1)
    state = LbfgsState(lr=job.lr, max_iter=job.steps)
    x, trace = lbfgs_minimize(f, x0, state, project=lambda z: np.clip(z, 0.0, 1.0))
    return x.reshape(shape), trace


def masked_loss_tensors(acts, target_acts, masks, symmetric: bool):
    loss = None
    for a, ta, m in zip(acts, target_acts, masks):
        scale = 1.0 / m.size
        masked_target = Tensor(m * ta)
        lhs = T.mul(a, Tensor(m)) if symmetric else a
        d = T.sub(lhs, masked_target)
        term = T.scale(T.tsum(T.square(d)), scale)
        loss = term if loss is None else T.add(loss, term)
    return loss


def reconstruct(model, job: ReconstructionJob):
    """Optimize an image to match masked target activations.

    Masks come from the Top-K selection on the *target* activations:
    topk_mask keeps the selected responses, non_topk_mask the rest,
    identity_mask everything. By default both terms are masked; the
    asymmetric literal form (raw activations of the optimized image
    against the masked target) is behind `symmetric=False`.
    """
    shape = job.target.shape
    t_acts = _collect_activations(model, Tensor(job.target.astype(np.float64)),
                                  job.layers)
    masks = []
    for a in t_acts:
        _, m = topk_forward(a, TopKConfig(job.rho, "hard"))
        md = m.data
        if job.mask_mode == "non_topk_mask":
            md = 1.0 - md
        elif job.mask_mode == "identity_mask":
            md = np.ones_like(md)
        masks.append(md)
    t_vals = [a.data for a in t_acts]

    def f(x_flat):
        tape = Tape()
        img = tape.watch(Tensor(x_flat.reshape(shape)))
        acts = _collect_activations(model, img, job.layers)
        loss = masked_loss_tensors(acts, t_vals, masks, job.symmetric)
        grads = T.backward(tape, loss)
        return loss.item(), T.grad_of(grads, img).reshape(-1)

    x0 = _noise_image(shape, job.init_seed).reshape(-1)
    state = LbfgsState(lr=job.lr, max_iter=job.steps)
    x, trace = lbfgs_minimize(f, x0, state, project=lambda z: np.clip(z, 0.0, 1.0))
    return x.reshape(shape), trace


# ---------------------------------------------------------------------------
# mask dumps and connectivity

def dump_topk_masks(model, image: np.ndarray, layer: int, step, out_dir,
                    cfg: TopKConfig | None = None) -> list:
    """Write one 0/255 grayscale PNG per channel of the layer's Top-K mask."""
    cfg = cfg or model.cfg.topk
    if cfg is None:
        raise ValueError("layer has no Top-K config and none was given")
    act = model.stage_activation(Tensor(image.astype(np.float64)), layer)
    _, mask = topk_forward(act, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(mask.shape[0]):
        arr = (mask.data[c] * 255).astype(np.uint8)
        p = out / f"layer{layer}_ch{c}_step{step}.png"
        Image.fromarray(arr, mode="L").save(p)
        paths.append(p)
    return paths


def connectivity(mask_plane: np.ndarray) -> float:
    """Largest 4-connected component size over K for one binary plane."""
    plane = np.asarray(mask_plane) > 0.5
    k = int(plane.sum())
    if k == 0:
        raise ValueError("empty mask")
    labels, n = ndimage.label(plane)  # default structure is 4-connectivity
    if n == 0:
        raise ValueError("empty mask")
    sizes = ndimage.sum_labels(plane, labels, index=np.arange(1, n + 1))
    return float(sizes.max()) / k


def mean_connectivity(model, image: np.ndarray, layer: int,
                      cfg: TopKConfig | None = None) -> float:
    """Connectivity averaged over the layer's channel masks."""
    cfg = cfg or model.cfg.topk
    if cfg is None:
        raise ValueError("layer has no Top-K config and none was given")
    act = model.stage_activation(Tensor(image.astype(np.float64)), layer)
    _, mask = topk_forward(act, cfg)
    return float(np.mean([connectivity(mask.data[c])
                          for c in range(mask.shape[0])]))


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,loss\n")
        for i, v in enumerate(trace):
            f.write(f"{i},{v:.10g}\n")
