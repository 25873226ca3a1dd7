"""Desk-scale CNN: four conv-bn-relu-pool stages plus a linear head,
with an optional spatial Top-K layer after a configurable stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .layers import BatchNormState, ConvParams
from .sparsity import TopKConfig, topk_forward
from .tensor import Tensor, reshape

VARIANT_CODES = {"hard": 0.0, "mean_replacement": 1.0}
CODE_VARIANTS = {v: k for k, v in VARIANT_CODES.items()}


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64, 64)
    in_channels: int = 3
    image_size: int = 64
    n_classes: int = 8
    topk_stage: int = 2            # 1-indexed stage after which Top-K applies
    topk: TopKConfig | None = None  # None = baseline (no sparsity)


class ConvNet:
    """Parameters live in a flat name -> ndarray dict (stable path names)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}
        self.bn_states: list[BatchNormState] = []
        rng = np.random.default_rng(seed)
        in_c = cfg.in_channels
        size = cfg.image_size
        for i, out_c in enumerate(cfg.widths, start=1):
            fan_in = in_c * 9
            bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
            self.params[f"stage{i}.conv.weight"] = rng.uniform(
                -bound, bound, (out_c, in_c, 3, 3)).astype(dtype)
            bb = 1.0 / np.sqrt(fan_in)
            self.params[f"stage{i}.conv.bias"] = rng.uniform(
                -bb, bb, out_c).astype(dtype)
            self.params[f"stage{i}.bn.gamma"] = np.ones(out_c, dtype=dtype)
            self.params[f"stage{i}.bn.beta"] = np.zeros(out_c, dtype=dtype)
            self.bn_states.append(BatchNormState(out_c, dtype))
            in_c = out_c
            size //= 2
        feat = in_c * size * size
        bound = np.sqrt(2.0) * np.sqrt(3.0 / feat)
        self.params["head.weight"] = rng.uniform(
            -bound, bound, (cfg.n_classes, feat)).astype(dtype)
        self.params["head.bias"] = np.zeros(cfg.n_classes, dtype=dtype)
        self._feat = feat

    @property
    def n_stages(self) -> int:
        return len(self.cfg.widths)

    def forward(self, x: Tensor, train: bool = False,
                watched: dict[str, Tensor] | None = None,
                collect_activations: bool = False):
        """Run the network.

        `watched` maps parameter names to tape-watched tensors (training);
        otherwise parameters enter as constants. Returns (logits,
        activations, masks): activations are the post-stage feature maps
        (after Top-K where configured), masks the Top-K masks by stage.
        """
        cfg = self.cfg

        def P(name):
            if watched is not None and name in watched:
                return watched[name]
            return Tensor(self.params[name].astype(x.data.dtype, copy=False))

        acts: list[Tensor] = []
        masks: dict[int, Tensor] = {}
        h = x
        for i in range(1, self.n_stages + 1):
            conv = ConvParams(P(f"stage{i}.conv.weight"), P(f"stage{i}.conv.bias"),
                              stride=1, padding=1)
            h = layers.conv2d(h, conv)
            h = layers.batchnorm2d(h, P(f"stage{i}.bn.gamma"), P(f"stage{i}.bn.beta"),
                                   self.bn_states[i - 1], train=train)
            h = layers.relu(h)
            h = layers.maxpool2d(h, 2)
            if cfg.topk is not None and i == cfg.topk_stage:
                h, mask = topk_forward(h, cfg.topk)
                masks[i] = mask
            if collect_activations:
                acts.append(h)
        n = h.data.shape[0] if h.data.ndim == 4 else None
        flat_shape = (n, self._feat) if n is not None else (self._feat,)
        h = reshape(h, flat_shape)
        logits = layers.linear(h, P("head.weight"), P("head.bias"))
        return logits, acts, masks

    def stage_activation(self, x: Tensor, stage: int) -> Tensor:
        _, acts, _ = self.forward(x, collect_activations=True)
        return acts[stage - 1]

    # -- persistence ---------------------------------------------------

    def state_dict(self) -> dict[str, Tensor]:
        cfg = self.cfg
        out = {name: Tensor(arr) for name, arr in self.params.items()}
        for i, st in enumerate(self.bn_states, start=1):
            out[f"stage{i}.bn.running_mean"] = Tensor(st.running_mean)
            out[f"stage{i}.bn.running_var"] = Tensor(st.running_var)
        out["meta.widths"] = Tensor(np.asarray(cfg.widths, dtype=np.float64))
        out["meta.arch"] = Tensor(np.asarray(
            [cfg.in_channels, cfg.image_size, cfg.n_classes], dtype=np.float64))
        if cfg.topk is None:
            out["meta.topk"] = Tensor(np.zeros(4, dtype=np.float64))
        else:
            out["meta.topk"] = Tensor(np.asarray(
                [1.0, cfg.topk_stage, cfg.topk.fraction,
                 VARIANT_CODES[cfg.topk.variant]], dtype=np.float64))
        return out

    def save(self, path) -> None:
        layers.save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "ConvNet":
        state = layers.load_checkpoint(path)
        widths = tuple(int(v) for v in state["meta.widths"].data)
        in_c, size, n_classes = (int(v) for v in state["meta.arch"].data)
        tk = state["meta.topk"].data
        topk = None
        stage = 2
        if tk[0] > 0:
            stage = int(tk[1])
            topk = TopKConfig(float(tk[2]), CODE_VARIANTS[float(tk[3])])
        cfg = ModelConfig(widths=widths, in_channels=in_c, image_size=size,
                          n_classes=n_classes, topk_stage=stage, topk=topk)
        model = cls(cfg)
        for name in model.params:
            model.params[name] = state[name].data.astype(model.dtype)
        for i, st in enumerate(model.bn_states, start=1):
            st.running_mean = state[f"stage{i}.bn.running_mean"].data.astype(model.dtype)
            st.running_var = state[f"stage{i}.bn.running_var"].data.astype(model.dtype)
        return model
