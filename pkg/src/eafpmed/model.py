"""Classifier composition: optional feature preprocessing in front of a CNN backbone."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import checkpoint
from .eafp import (
    ConvBlock,
    EafpConfig,
    EafpParams,
    ParamPool,
    block_arrays,
    eafp_forward,
    load_block_arrays,
    make_block,
)
from .tensor import (
    DEFAULT_SLOPE,
    BnState,
    ConvSpec,
    Tensor,
    flatten,
    global_avg_pool,
    kaiming_normal,
    leaky_relu,
    linear,
    no_grad,
    softmax,
)

EAFP_ON = "eafp-on"
EAFP_OFF = "eafp-off"


@dataclass(frozen=True)
class BackboneConfig:
    num_classes: int = 3
    in_channels: int = 1
    stem_channels: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (2, 2, 2)
    downsample: tuple[int, ...] = (1, 2, 2)
    head_width: int | None = None
    input_size: int = 64
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        for name in ("widths", "blocks", "downsample"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not (len(self.widths) == len(self.blocks) == len(self.downsample)) or not self.widths:
            raise ValueError("widths, blocks and downsample must be non-empty and of equal length")
        if any(b < 1 for b in self.blocks) or any(f not in (1, 2) for f in self.downsample):
            raise ValueError("blocks must be positive and downsample factors 1 or 2")
        if self.input_size % self.total_downsample:
            raise ValueError(f"input size {self.input_size} is not divisible by the cumulative "
                             f"downsample factor {self.total_downsample}")

    @property
    def total_downsample(self) -> int:
        return int(np.prod(self.downsample))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("widths", "blocks", "downsample"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(**d)


class Backbone:
    """conv stem -> stages of conv/bn/leaky blocks -> global pool -> linear head."""

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.stem = make_block(ConvSpec(c.in_channels, c.stem_channels, 3), rng, c.slope, dtype)
        self.stages: list[list[ConvBlock]] = []
        prev = c.stem_channels
        for width, nblocks, factor in zip(c.widths, c.blocks, c.downsample):
            stage = []
            for b in range(nblocks):
                spec = ConvSpec(prev, width, 3, stride=factor if b == 0 else 1, padding=1)
                stage.append(make_block(spec, rng, c.slope, dtype))
                prev = width
            self.stages.append(stage)
        self.hidden = None
        if c.head_width:
            w = kaiming_normal((c.head_width, prev), rng, c.slope, dtype)
            self.hidden = (Tensor(w, requires_grad=True), Tensor(np.zeros(c.head_width, dtype), requires_grad=True))
            prev = c.head_width
        w = (rng.standard_normal((c.num_classes, prev)) / np.sqrt(prev)).astype(dtype)
        self.head = (Tensor(w, requires_grad=True), Tensor(np.zeros(c.num_classes, dtype), requires_grad=True))

    def named_blocks(self) -> list[tuple[str, ConvBlock]]:
        out = [("stem", self.stem)]
        for s, stage in enumerate(self.stages):
            out += [(f"stage{s}.block{b}", blk) for b, blk in enumerate(stage)]
        return out

    @property
    def last_feature_layer(self) -> str:
        return self.named_blocks()[-1][0]

    def parameters(self) -> list[Tensor]:
        out = []
        for _, b in self.named_blocks():
            out += [b.weight, b.bias, b.bn.gamma, b.bn.beta]
        if self.hidden:
            out += list(self.hidden)
        return out + list(self.head)

    def bn_states(self) -> list[BnState]:
        return [b.bn for _, b in self.named_blocks()]

    def set_mode(self, mode: str) -> None:
        for bn in self.bn_states():
            bn.mode = mode

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, b in self.named_blocks():
            out.update(block_arrays(name, b))
        if self.hidden:
            out["hidden.weight"], out["hidden.bias"] = self.hidden[0].data, self.hidden[1].data
        out["head.weight"], out["head.bias"] = self.head[0].data, self.head[1].data
        return out

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        dtype = self.head[0].dtype
        for name, b in self.named_blocks():
            load_block_arrays(name, b, arrays, dtype)
        pairs = [("head", self.head)] + ([("hidden", self.hidden)] if self.hidden else [])
        for prefix, (w, b) in pairs:
            for t, suffix in ((w, "weight"), (b, "bias")):
                arr = np.asarray(arrays[f"{prefix}.{suffix}"], dtype=dtype)
                if arr.shape != t.shape:
                    raise ValueError(f"{prefix}.{suffix}: shape {arr.shape} != {t.shape}")
                t.data = arr.copy()

    def forward(self, image: Tensor, capture: dict | None = None) -> Tensor:
        c = self.config
        if image.ndim != 4 or image.shape[1] != c.in_channels:
            raise ValueError(f"backbone expects (N, {c.in_channels}, H, W), got {image.shape}")
        h, w = image.shape[2:]
        if h % c.total_downsample or w % c.total_downsample:
            raise ValueError(f"spatial dims {h}x{w} not divisible by {c.total_downsample}")
        x = image
        for name, block in self.named_blocks():
            x = block(x, c.slope)
            if capture is not None:
                capture[name] = x
        x = flatten(global_avg_pool(x))
        if self.hidden:
            x = leaky_relu(linear(x, *self.hidden), c.slope)
        return linear(x, *self.head)


def backbone_forward(backbone: Backbone, image: Tensor) -> Tensor:
    return backbone.forward(image)


class ClassifierModel:
    """Backbone with an optional prompt-selected preprocessing stage."""

    def __init__(self, backbone: Backbone, mode: str = EAFP_ON, pool: ParamPool | None = None,
                 eafp: EafpParams | None = None, prompt_key: str | None = None):
        if mode not in (EAFP_ON, EAFP_OFF):
            raise ValueError(f"unknown mode {mode!r}")
        self.backbone = backbone
        self.mode = mode
        self.pool = pool
        self.eafp = eafp
        self.prompt_key = prompt_key
        self.trainable_eafp = False

    def bind_prompt(self, text: str, copy: bool = False) -> str:
        """Resolve ``text`` through the pool and load that parameter set."""
        if self.pool is None:
            raise ValueError("no parameter pool attached to the model")
        key = self.pool.resolve(text)
        params = self.pool.lookup(key)
        self.eafp = params.copy() if copy else params
        self.prompt_key = key
        return key

    def parameters(self) -> list[Tensor]:
        params = self.backbone.parameters()
        if self.mode == EAFP_ON and self.trainable_eafp and self.eafp is not None:
            params = self.eafp.parameters() + params
        return params

    def train(self) -> None:
        self.backbone.set_mode("training")
        if self.eafp is not None:
            self.eafp.set_mode("training" if self.trainable_eafp else "inference")

    def eval(self) -> None:
        self.backbone.set_mode("inference")
        if self.eafp is not None:
            self.eafp.set_mode("inference")

    def preprocess(self, image: Tensor, capture: dict | None = None) -> Tensor:
        if self.mode == EAFP_OFF:
            return image
        if self.eafp is None:
            raise ValueError("eafp-on mode requires a bound prompt before inference")
        return eafp_forward(image, self.eafp, capture)

    def trace(self, image: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        """Logits plus every named intermediate activation."""
        acts: dict[str, Tensor] = {}
        x = self.preprocess(image, acts)
        if self.mode == EAFP_ON:
            acts["eafp.out"] = x
        return self.backbone.forward(x, acts), acts

    @property
    def default_cam_layer(self) -> str:
        return self.backbone.last_feature_layer

    def __call__(self, image: Tensor) -> Tensor:
        return self.backbone.forward(self.preprocess(image))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        if self.mode == EAFP_ON and self.eafp is not None:
            out.update({f"eafp.{k}": v for k, v in self.eafp.state_dict().items()})
        return out

    def save(self, directory: str | os.PathLike, extra: Mapping | None = None) -> Path:
        """Write ``model.eafp`` (arrays) and ``model.json`` (configs, prompt)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        checkpoint.save(directory / "model.eafp", self.state_dict())
        meta = {
            "mode": self.mode,
            "prompt_key": self.prompt_key,
            "backbone": self.backbone.config.to_dict(),
            "eafp": self.eafp.config.to_dict() if self.eafp is not None and self.mode == EAFP_ON else None,
            "eafp_fingerprint": self.eafp.fingerprint if self.eafp is not None and self.mode == EAFP_ON else None,
        }
        if extra:
            meta.update(extra)
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ClassifierModel":
        directory = Path(directory)
        meta = json.loads((directory / "model.json").read_text())
        arrays = checkpoint.load(directory / "model.eafp")
        backbone = Backbone(BackboneConfig.from_dict(meta["backbone"]))
        backbone.load_state_dict({k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")})
        eafp = None
        if meta.get("eafp"):
            config = EafpConfig.from_dict(meta["eafp"])
            eafp = EafpParams.from_state_dict(
                config, {k[len("eafp."):]: v for k, v in arrays.items() if k.startswith("eafp.")},
                meta.get("eafp_fingerprint"))
        model = cls(backbone, meta["mode"], eafp=eafp, prompt_key=meta.get("prompt_key"))
        model.eval()
        return model


def st_forward(model: ClassifierModel, image: Tensor, prompt_text: str | None = None) -> Tensor:
    """Logits of the composed classifier, binding ``prompt_text`` first if given."""
    if model.mode == EAFP_ON and prompt_text is not None:
        model.bind_prompt(prompt_text)
    return model(image)


def predict(model: ClassifierModel, batch, prompt_text: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Category index (ties to the lowest index) and probability vector per sample."""
    images = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
    if images.shape[0] == 0:
        raise ValueError("predict on an empty batch")
    model.eval()
    with no_grad():
        logits = st_forward(model, images, prompt_text)
    probs = softmax(logits.data)
    return np.argmax(probs, axis=1), probs
