"""Prompt-adaptive multi-scale feature preprocessing.

Three extractors (global, regional, local) built from conv -> batch norm ->
leaky ReLU blocks feed three 1x1 adaptors that project back to the image
channels. The adapted maps are summed and overlaid onto the input::

    g = G(x); r = R(x); l = L(concat(g, r))
    out = x + scale * (adapt_g(g) + adapt_r(r) + adapt_l(l))

Parameter sets are kept in a :class:`ParamPool` keyed by a normalized prompt.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import checkpoint
from .tensor import (
    DEFAULT_SLOPE,
    BnState,
    ConvSpec,
    Tensor,
    add,
    batch_norm2d,
    concat_channels,
    conv2d,
    kaiming_normal,
    leaky_relu,
    scale,
)

SCALES = ("global", "regional", "local")
POOL_INDEX_VERSION = 1


class FingerprintMismatch(ValueError):
    pass


class UnknownPromptError(LookupError):
    def __init__(self, text: str, normalized: str, known: Iterable[str]):
        self.text = text
        self.normalized = normalized
        self.known = sorted(known)
        listed = ", ".join(self.known) if self.known else "(none)"
        super().__init__(f"unknown prompt {text!r} (normalized {normalized!r}); registered keys: {listed}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class ExtractorConfig:
    scale: str
    channels: int = 16
    kernels: tuple[int, ...] = (3, 3)
    dilations: tuple[int, ...] = (1, 1)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"unknown extractor scale {self.scale!r}")
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if not self.kernels or len(self.kernels) != len(self.dilations):
            raise ValueError(f"{self.scale}: kernels and dilations must be non-empty and equal length")
        if self.channels < 1:
            raise ValueError(f"{self.scale}: channels must be positive")

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (k - 1) for k, d in zip(self.kernels, self.dilations))

    def conv_specs(self, in_channels: int) -> list[ConvSpec]:
        specs = []
        for k, d in zip(self.kernels, self.dilations):
            specs.append(ConvSpec(in_channels, self.channels, kernel=k, stride=1, dilation=d))
            in_channels = self.channels
        return specs


@dataclass(frozen=True)
class EafpConfig:
    in_channels: int = 1
    global_: ExtractorConfig = field(
        default_factory=lambda: ExtractorConfig("global", 16, (5, 5, 5), (1, 2, 4)))
    regional: ExtractorConfig = field(
        default_factory=lambda: ExtractorConfig("regional", 16, (5, 5), (1, 1)))
    local: ExtractorConfig = field(
        default_factory=lambda: ExtractorConfig("local", 16, (3, 3), (1, 1)))
    slope: float = DEFAULT_SLOPE
    overlay_scale: float = 1.0

    def __post_init__(self):
        for name, ext in self.extractors().items():
            if ext.scale != name:
                raise ValueError(f"extractor in the {name} slot is configured as {ext.scale!r}")
        g, r, l = (self.global_.receptive_field, self.regional.receptive_field,
                   self.local.receptive_field)
        if not g > r > l:
            raise ValueError(f"receptive fields must satisfy global > regional > local, got {g}, {r}, {l}")

    def extractors(self) -> dict[str, ExtractorConfig]:
        return {"global": self.global_, "regional": self.regional, "local": self.local}

    def extractor_inputs(self) -> dict[str, int]:
        return {"global": self.in_channels, "regional": self.in_channels,
                "local": self.global_.channels + self.regional.channels}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global"] = d.pop("global_")
        for ext in ("global", "regional", "local"):
            d[ext]["kernels"] = list(d[ext]["kernels"])
            d[ext]["dilations"] = list(d[ext]["dilations"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EafpConfig":
        d = dict(d)
        exts = {name: ExtractorConfig(**d.pop(name)) for name in SCALES}
        return cls(global_=exts["global"], regional=exts["regional"], local=exts["local"], **d)

    def fingerprint(self) -> str:
        return _fingerprint(self)


@functools.lru_cache(maxsize=256)
def _fingerprint(config: EafpConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    bn: BnState
    spec: ConvSpec

    def __call__(self, x: Tensor, slope: float) -> Tensor:
        return leaky_relu(batch_norm2d(conv2d(x, self.weight, self.bias, self.spec), self.bn), slope)


def make_block(spec: ConvSpec, rng: np.random.Generator, slope: float, dtype=np.float32) -> ConvBlock:
    w = kaiming_normal((spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), rng, slope, dtype)
    return ConvBlock(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True),
        bn=BnState.create(spec.out_channels, dtype),
        spec=spec,
    )


def block_arrays(prefix: str, block: ConvBlock) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.weight": block.weight.data,
        f"{prefix}.bias": block.bias.data,
        f"{prefix}.bn.gamma": block.bn.gamma.data,
        f"{prefix}.bn.beta": block.bn.beta.data,
        f"{prefix}.bn.running_mean": block.bn.running_mean,
        f"{prefix}.bn.running_var": block.bn.running_var,
    }


def load_block_arrays(prefix: str, block: ConvBlock, arrays: Mapping[str, np.ndarray], dtype) -> None:
    def get(name, like):
        key = f"{prefix}.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing array {key!r}")
        arr = np.asarray(arrays[key], dtype=dtype)
        if arr.shape != like.shape:
            raise ValueError(f"{key}: shape {arr.shape} does not match expected {like.shape}")
        return arr.copy()

    block.weight.data = get("weight", block.weight.data)
    block.bias.data = get("bias", block.bias.data)
    block.bn.gamma.data = get("bn.gamma", block.bn.gamma.data)
    block.bn.beta.data = get("bn.beta", block.bn.beta.data)
    block.bn.running_mean = get("bn.running_mean", block.bn.running_mean)
    block.bn.running_var = get("bn.running_var", block.bn.running_var)


class EafpParams:
    """All learnable state of one module instance."""

    def __init__(self, config: EafpConfig, blocks: dict[str, list[ConvBlock]],
                 adaptors: dict[str, tuple[Tensor, Tensor]], fingerprint: str | None = None):
        self.config = config
        self.blocks = blocks
        self.adaptors = adaptors
        self.fingerprint = config.fingerprint() if fingerprint is None else fingerprint

    @classmethod
    def initialize(cls, config: EafpConfig | None = None, seed: int = 0,
                   dtype=np.float32) -> "EafpParams":
        config = config or EafpConfig()
        rng = np.random.default_rng(seed)
        blocks, adaptors = {}, {}
        for name, ext in config.extractors().items():
            specs = ext.conv_specs(config.extractor_inputs()[name])
            blocks[name] = [make_block(s, rng, config.slope, dtype) for s in specs]
        for name, ext in config.extractors().items():
            w = kaiming_normal((config.in_channels, ext.channels, 1, 1), rng, config.slope, dtype)
            adaptors[name] = (Tensor(w, requires_grad=True),
                              Tensor(np.zeros(config.in_channels, dtype), requires_grad=True))
        return cls(config, blocks, adaptors)

    @property
    def dtype(self):
        return self.adaptors["global"][0].dtype

    def parameters(self) -> list[Tensor]:
        out = []
        for name in SCALES:
            for b in self.blocks[name]:
                out += [b.weight, b.bias, b.bn.gamma, b.bn.beta]
        for name in SCALES:
            out += list(self.adaptors[name])
        return out

    def bn_states(self) -> list[BnState]:
        return [b.bn for name in SCALES for b in self.blocks[name]]

    def set_mode(self, mode: str) -> None:
        for bn in self.bn_states():
            bn.mode = mode

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in SCALES:
            for i, b in enumerate(self.blocks[name]):
                out.update(block_arrays(f"{name}.{i}", b))
        for name in SCALES:
            w, b = self.adaptors[name]
            out[f"adapt_{name}.weight"] = w.data
            out[f"adapt_{name}.bias"] = b.data
        return out

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        dtype = self.dtype
        for name in SCALES:
            for i, b in enumerate(self.blocks[name]):
                load_block_arrays(f"{name}.{i}", b, arrays, dtype)
        for name in SCALES:
            w, b = self.adaptors[name]
            for t, suffix in ((w, "weight"), (b, "bias")):
                key = f"adapt_{name}.{suffix}"
                if key not in arrays:
                    raise KeyError(f"checkpoint is missing array {key!r}")
                arr = np.asarray(arrays[key], dtype=dtype)
                if arr.shape != t.shape:
                    raise ValueError(f"{key}: shape {arr.shape} does not match expected {t.shape}")
                t.data = arr.copy()

    @classmethod
    def from_state_dict(cls, config: EafpConfig, arrays: Mapping[str, np.ndarray],
                        fingerprint: str | None = None, dtype=np.float32) -> "EafpParams":
        params = cls.initialize(config, seed=0, dtype=dtype)
        params.load_state_dict(arrays)
        if fingerprint is not None:
            params.fingerprint = fingerprint
        return params

    def copy(self, dtype=None) -> "EafpParams":
        dtype = dtype or self.dtype
        out = EafpParams.from_state_dict(self.config, self.state_dict(), self.fingerprint, dtype)
        for src, dst in zip(self.bn_states(), out.bn_states()):
            dst.mode, dst.momentum, dst.eps = src.mode, src.momentum, src.eps
        return out

    def zero_adaptors(self) -> None:
        for w, b in self.adaptors.values():
            w.data[...] = 0
            b.data[...] = 0

    def save(self, path: str | os.PathLike) -> Path:
        return checkpoint.save(path, self.state_dict())


def _check_fingerprint(params: EafpParams) -> None:
    if params.fingerprint != params.config.fingerprint():
        raise FingerprintMismatch(
            f"parameter fingerprint {params.fingerprint} does not match config {params.config.fingerprint()}")


def _check_image(image: Tensor, params: EafpParams) -> None:
    if image.ndim != 4 or image.shape[1] != params.config.in_channels:
        raise ValueError(f"image shape {image.shape} does not match {params.config.in_channels} input channels")


def _run_chain(x: Tensor, blocks: list[ConvBlock], slope: float) -> Tensor:
    for block in blocks:
        x = block(x, slope)
    return x


def extract_global(image: Tensor, params: EafpParams) -> Tensor:
    _check_fingerprint(params)
    _check_image(image, params)
    return _run_chain(image, params.blocks["global"], params.config.slope)


def extract_regional(image: Tensor, params: EafpParams) -> Tensor:
    _check_fingerprint(params)
    _check_image(image, params)
    return _run_chain(image, params.blocks["regional"], params.config.slope)


def extract_local(global_features: Tensor, regional_features: Tensor, params: EafpParams) -> Tensor:
    _check_fingerprint(params)
    gs, rs = global_features.shape, regional_features.shape
    if gs[0] != rs[0] or gs[2:] != rs[2:]:
        raise ValueError(f"extract_local: spatial mismatch {gs} vs {rs}")
    fused = concat_channels(global_features, regional_features)
    return _run_chain(fused, params.blocks["local"], params.config.slope)


def adapt(features: Tensor, adaptor: tuple[Tensor, Tensor]) -> Tensor:
    weight, bias = adaptor
    out_c, in_c = weight.shape[:2]
    if features.ndim != 4 or features.shape[1] != in_c:
        raise ValueError(f"adapt: features have {features.shape[1] if features.ndim == 4 else '?'} "
                         f"channels, adaptor expects {in_c}")
    return conv2d(features, weight, bias, ConvSpec(in_c, out_c, kernel=1))


def eafp_forward(image: Tensor, params: EafpParams, capture: dict | None = None) -> Tensor:
    """Enhanced image with exactly the input's shape.

    When ``capture`` is a dict, the three extractor outputs are stored under
    ``eafp.global``, ``eafp.regional`` and ``eafp.local``, and the adapted
    maps under ``eafp.adapted.<scale>``.
    """
    g = extract_global(image, params)
    r = extract_regional(image, params)
    l = extract_local(g, r, params)
    ad = params.adaptors
    ag, ar, al = adapt(g, ad["global"]), adapt(r, ad["regional"]), adapt(l, ad["local"])
    if capture is not None:
        capture.update({"eafp.global": g, "eafp.regional": r, "eafp.local": l,
                        "eafp.adapted.global": ag, "eafp.adapted.regional": ar, "eafp.adapted.local": al})
    enhancement = add(add(ag, ar), al)
    if params.config.overlay_scale != 1.0:
        enhancement = scale(enhancement, params.config.overlay_scale)
    return add(image, enhancement)


# --------------------------------------------------------------------------
# prompt pool

_WS = re.compile(r"\s+")


def normalize_prompt(text: str) -> str:
    """Trim, lowercase and join whitespace runs with hyphens."""
    return _WS.sub("-", text.strip().lower())


class ParamPool:
    """Prompt-keyed parameter sets plus a synonym table.

    Lookups are lock-free; registration swaps entries under a lock so readers
    see either the old or the new parameter set for a key.
    """

    def __init__(self):
        self._entries: dict[str, EafpParams] = {}
        self._aliases: dict[str, str] = {}
        self._lock = threading.Lock()

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[str]:
        return sorted(self._entries)

    def aliases(self, key: str | None = None) -> dict[str, str]:
        if key is None:
            return dict(self._aliases)
        return {a: k for a, k in self._aliases.items() if k == key}

    def register(self, key: str, params: EafpParams, aliases: Iterable[str] = ()) -> "ParamPool":
        norm = normalize_prompt(key)
        if not norm:
            raise ValueError("prompt key must be non-empty")
        if norm != key:
            raise ValueError(f"prompt key {key!r} is not normalized (expected {norm!r})")
        _check_fingerprint(params)
        with self._lock:
            self._entries[key] = params
            for alias in aliases:
                self._add_alias_locked(alias, key)
        return self

    def add_alias(self, alias: str, key: str) -> None:
        with self._lock:
            self._add_alias_locked(alias, key)

    def _add_alias_locked(self, alias: str, key: str) -> None:
        if key not in self._entries:
            raise KeyError(f"cannot alias to unregistered key {key!r}")
        norm = normalize_prompt(alias)
        if not norm:
            raise ValueError("alias must be non-empty")
        if norm in self._entries and norm != key:
            raise ValueError(f"alias {norm!r} collides with registered key")
        self._aliases[norm] = key

    def lookup(self, key: str) -> EafpParams:
        try:
            return self._entries[key]
        except KeyError:
            raise UnknownPromptError(key, key, self._entries) from None

    def resolve(self, text: str) -> str:
        norm = normalize_prompt(text)
        if norm in self._entries:
            return norm
        key = self._aliases.get(norm)
        if key is None or key not in self._entries:
            raise UnknownPromptError(text, norm, self._entries)
        return key

    def params_for(self, text: str) -> EafpParams:
        return self._entries[self.resolve(text)]

    def save(self, index_path: str | os.PathLike) -> Path:
        """Write one checkpoint per key next to a JSON index."""
        index_path = Path(index_path)
        index_path.parent.mkdir(parents=True, exist_ok=True)
        stem = index_path.stem
        entries = []
        for key in self.keys():
            params = self._entries[key]
            ckpt_name = f"{stem}.{key}.eafp"
            params.save(index_path.parent / ckpt_name)
            entries.append({
                "key": key,
                "aliases": sorted(self.aliases(key)),
                "checkpoint_path": ckpt_name,
                "fingerprint": params.fingerprint,
                "config": params.config.to_dict(),
            })
        doc = {"version": POOL_INDEX_VERSION, "entries": entries}
        tmp = index_path.with_name(index_path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, index_path)
        return index_path

    @classmethod
    def load(cls, index_path: str | os.PathLike) -> "ParamPool":
        index_path = Path(index_path)
        doc = json.loads(index_path.read_text())
        if doc.get("version") != POOL_INDEX_VERSION:
            raise ValueError(f"unsupported pool index version {doc.get('version')!r}")
        pool = cls()
        for entry in doc["entries"]:
            config = EafpConfig.from_dict(entry["config"]) if "config" in entry else EafpConfig()
            if config.fingerprint() != entry["fingerprint"]:
                raise FingerprintMismatch(
                    f"pool entry {entry['key']!r}: stored fingerprint {entry['fingerprint']} "
                    f"does not match its config ({config.fingerprint()})")
            arrays = checkpoint.load(index_path.parent / entry["checkpoint_path"])
            params = EafpParams.from_state_dict(config, arrays, entry["fingerprint"])
            params.set_mode("inference")
            pool.register(entry["key"], params, entry.get("aliases", ()))
        return pool

    @classmethod
    def load_or_new(cls, index_path: str | os.PathLike) -> "ParamPool":
        return cls.load(index_path) if Path(index_path).exists() else cls()
