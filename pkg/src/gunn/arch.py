"""Declarative network descriptions and exact parameter accounting.

Counting convention (the one that reproduces all published totals):

* convolutions followed by batch normalization carry no bias; BN contributes
  a scale and a shift per channel;
* every stem, transition and update-unit convolution is followed by BN;
* the classifier is a biased fully connected layer after global pooling;
* an update unit with ``M > 1`` stacks one ``N -> n`` block and ``M - 1``
  ``n -> n`` blocks, ``n = N / P``;
* the CIFAR presets close every GUNN stage with a 1x1 ``N -> N``
  convolution (with BN and ReLU) before the next transition.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import yaml

from .engine import GRADUAL, SIMULTANEOUS, check_mode


class SpecError(ValueError):
    """An inconsistent or infeasible network description."""


@dataclass(frozen=True)
class GunnLayerConfig:
    N: int
    P: int
    K: int = 2
    M: int = 1

    def __post_init__(self):
        if self.N < 1 or self.P < 1 or self.N % self.P:
            raise SpecError(f"P={self.P} does not divide N={self.N}")
        if self.K < 1 or self.M < 1:
            raise SpecError(f"K and M must be >= 1, got K={self.K}, M={self.M}")

    @property
    def segment(self) -> int:
        return self.N // self.P


@dataclass(frozen=True)
class Stem:
    kernel: int
    out: int
    stride: int = 1
    pool: str = "none"  # "none" | "max" (3x3, stride 2)
    expand_to: Optional[int] = None


@dataclass(frozen=True)
class Transition:
    out: int
    pool: str = "avg"  # "avg" (2x2) | "none"


@dataclass(frozen=True)
class GunnStage:
    config: GunnLayerConfig
    mode: str = GRADUAL
    residual: bool = True


@dataclass(frozen=True)
class ClassifierHead:
    features: int
    classes: int


Stage = Union[Transition, GunnStage]


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    classes: int
    stem: Stem
    stages: tuple
    head: ClassifierHead
    in_channels: int = 3

    def gunn_stages(self) -> list[GunnStage]:
        return [s for s in self.stages if isinstance(s, GunnStage)]


# ----------------------------------------------------------------------------
# validation and counting


def _conv_bn(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + 2 * cout


def _unit_params(n_in: int, n: int, K: int) -> int:
    h = K * n
    return _conv_bn(n_in, h, 1) + _conv_bn(h, h, 3) + _conv_bn(h, n, 1)


def gunn_stage_params(cfg: GunnLayerConfig) -> int:
    n = cfg.segment
    return cfg.P * (_unit_params(cfg.N, n, cfg.K) + (cfg.M - 1) * _unit_params(n, n, cfg.K))


def validate(spec: NetworkSpec) -> None:
    """Check channel chaining, pooling kinds and one GUNN stage per resolution."""
    if spec.stem.pool not in ("none", "max"):
        raise SpecError(f"stem pool must be 'none' or 'max', got {spec.stem.pool!r}")
    ch = spec.stem.expand_to or spec.stem.out
    gunn_at_resolution = 0
    for i, st in enumerate(spec.stages):
        if isinstance(st, GunnStage):
            check_mode(st.mode)
            if st.config.N != ch:
                raise SpecError(f"stage {i}: GUNN layer N={st.config.N} but incoming channels are {ch}")
            gunn_at_resolution += 1
            if gunn_at_resolution > 1:
                raise SpecError(f"stage {i}: second GUNN stage at one resolution")
        elif isinstance(st, Transition):
            if st.pool not in ("avg", "none"):
                raise SpecError(f"stage {i}: transition pool must be 'avg' or 'none', got {st.pool!r}")
            ch = st.out
            if st.pool == "avg":
                if gunn_at_resolution != 1:
                    raise SpecError(f"stage {i}: resolution closed with {gunn_at_resolution} GUNN stages")
                gunn_at_resolution = 0
        else:
            raise SpecError(f"stage {i}: unknown stage {st!r}")
    if gunn_at_resolution != 1:
        raise SpecError(f"final resolution has {gunn_at_resolution} GUNN stages")
    if spec.head.features != ch:
        raise SpecError(f"head expects {spec.head.features} features, network produces {ch}")
    if spec.head.classes != spec.classes:
        raise SpecError(f"head classes {spec.head.classes} != network classes {spec.classes}")


def parameter_breakdown(spec: NetworkSpec) -> list[tuple[str, int]]:
    validate(spec)
    rows = []
    stem = spec.stem
    rows.append((f"stem {stem.kernel}x{stem.kernel},{stem.out}", _conv_bn(spec.in_channels, stem.out, stem.kernel)))
    ch = stem.out
    if stem.expand_to:
        rows.append((f"stem 1x1,{stem.expand_to}", _conv_bn(ch, stem.expand_to, 1)))
        ch = stem.expand_to
    for st in spec.stages:
        if isinstance(st, GunnStage):
            c = st.config
            tag = "GUNN" if st.mode == GRADUAL else "SUNN"
            rows.append((f"{tag} N={c.N} P={c.P} K={c.K} M={c.M}", gunn_stage_params(c)))
        else:
            rows.append((f"trans 1x1,{st.out}" + (" avgpool" if st.pool == "avg" else ""), _conv_bn(ch, st.out, 1)))
            ch = st.out
    rows.append((f"fc {spec.head.features}->{spec.head.classes}", spec.head.features * spec.head.classes + spec.head.classes))
    return rows


def parameter_count(spec: NetworkSpec) -> int:
    return sum(n for _, n in parameter_breakdown(spec))


# ----------------------------------------------------------------------------
# presets


def _cifar(name: str, classes: int, expand: int, cfgs, trans, mode: str) -> NetworkSpec:
    stages: list = []
    for i, (cfg, nxt) in enumerate(zip(cfgs, trans)):
        stages.append(GunnStage(cfg, mode))
        stages.append(Transition(cfg.N, "none"))
        stages.append(Transition(nxt, "avg" if i + 1 < len(cfgs) else "none"))
    spec = NetworkSpec(name, classes, Stem(3, 64, 1, "none", expand), tuple(stages),
                       ClassifierHead(trans[-1], classes))
    validate(spec)
    return spec


def _check_classes(classes: int) -> None:
    if classes not in (10, 100):
        raise SpecError(f"CIFAR presets take 10 or 100 classes, got {classes}")


def build_gunn15(classes: int = 10, mode: str = GRADUAL) -> NetworkSpec:
    _check_classes(classes)
    cfgs = [GunnLayerConfig(240, 20, 2, 1), GunnLayerConfig(300, 25, 2, 1), GunnLayerConfig(360, 30, 2, 1)]
    return _cifar("gunn15", classes, 240, cfgs, [300, 360, 360], mode)


def build_gunn24(classes: int = 10, mode: str = GRADUAL) -> NetworkSpec:
    _check_classes(classes)
    cfgs = [GunnLayerConfig(720, 20, 3, 2), GunnLayerConfig(900, 25, 3, 2), GunnLayerConfig(1080, 30, 3, 2)]
    return _cifar("gunn24", classes, 720, cfgs, [900, 1080, 1080], mode)


def _imagenet(name: str, cfgs, mode: str) -> NetworkSpec:
    stages: list = []
    for i, cfg in enumerate(cfgs):
        stages.append(GunnStage(cfg, mode))
        if i + 1 < len(cfgs):
            stages.append(Transition(cfgs[i + 1].N, "avg"))
    spec = NetworkSpec(name, 1000, Stem(7, 64, 2, "max", cfgs[0].N), tuple(stages),
                       ClassifierHead(cfgs[-1].N, 1000))
    validate(spec)
    return spec


def build_gunn18(mode: str = GRADUAL) -> NetworkSpec:
    cfgs = [GunnLayerConfig(400, 10), GunnLayerConfig(800, 20), GunnLayerConfig(1600, 40), GunnLayerConfig(2000, 50)]
    return _imagenet("gunn18", cfgs, mode)


def build_wide_gunn18(mode: str = GRADUAL) -> NetworkSpec:
    cfgs = [GunnLayerConfig(1200, 30), GunnLayerConfig(1600, 40), GunnLayerConfig(2000, 50), GunnLayerConfig(2000, 50)]
    return _imagenet("wide-gunn18", cfgs, mode)


def _scaled(value: int, scale: Fraction, what: str) -> int:
    v = value * scale
    if v.denominator != 1 or v < 1:
        raise SpecError(f"{what}: {value} x {scale} = {float(v):g} is not a positive integer")
    return int(v)


def build_tiny_pair(width_scale, classes: int = 10, partitions=None, K: int = 2, M: int = 1,
                    residual: bool = True, stem_out: Optional[int] = None):
    """Width-scaled GUNN-15 twins ``(gunn_spec, sunn_spec)``.

    Channel counts are multiplied by ``width_scale``. Without ``partitions``
    the segment counts scale too (keeping the segment size of the full
    model); every scaled quantity has to come out integral and every ``P``
    has to divide its ``N``.
    """
    try:
        scale = Fraction(width_scale).limit_denominator(1000)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"bad width scale {width_scale!r}") from exc
    if scale <= 0:
        raise SpecError(f"width scale must be positive, got {width_scale!r}")
    base_n, base_p, base_t = (240, 300, 360), (20, 25, 30), (300, 360, 360)
    ns = [_scaled(n, scale, f"N of stage {i + 1}") for i, n in enumerate(base_n)]
    if partitions is None:
        ps = [_scaled(p, scale, f"P of stage {i + 1}") for i, p in enumerate(base_p)]
    else:
        ps = [int(p) for p in partitions]
        if len(ps) != 3:
            raise SpecError(f"need three partition counts, got {partitions!r}")
    for i, (n, p) in enumerate(zip(ns, ps)):
        if p < 1 or n % p:
            raise SpecError(f"stage {i + 1}: P={p} does not divide N={n}")
    trans = [_scaled(t, scale, f"transition {i + 1} width") for i, t in enumerate(base_t)]
    stem = stem_out if stem_out is not None else max(1, round(64 * scale))
    cfgs = [GunnLayerConfig(n, p, K, M) for n, p in zip(ns, ps)]
    gunn = _cifar(f"tiny-{scale}", classes, ns[0], cfgs, trans, GRADUAL)
    gunn = dataclasses.replace(gunn, stem=dataclasses.replace(gunn.stem, out=stem))
    if not residual:
        gunn = set_residual(gunn, False)
    return gunn, convert_mode(gunn, SIMULTANEOUS)


PRESETS = {
    "gunn15": build_gunn15,
    "gunn24": build_gunn24,
    "gunn18": lambda classes=1000, mode=GRADUAL: build_gunn18(mode),
    "wide-gunn18": lambda classes=1000, mode=GRADUAL: build_wide_gunn18(mode),
}


# ----------------------------------------------------------------------------
# transformations


def convert_mode(spec: NetworkSpec, mode: Optional[str] = None) -> NetworkSpec:
    """Set every GUNN stage to ``mode``; with ``None`` flip each stage."""
    def flip(st):
        if not isinstance(st, GunnStage):
            return st
        new = mode if mode is not None else (SIMULTANEOUS if st.mode == GRADUAL else GRADUAL)
        return dataclasses.replace(st, mode=check_mode(new))

    return dataclasses.replace(spec, stages=tuple(flip(s) for s in spec.stages))


def set_residual(spec: NetworkSpec, residual: bool) -> NetworkSpec:
    stages = tuple(dataclasses.replace(s, residual=residual) if isinstance(s, GunnStage) else s for s in spec.stages)
    name = spec.name if residual else f"{spec.name}-nores"
    return dataclasses.replace(spec, stages=stages, name=name)


def stage_geometry(spec: NetworkSpec, input_hw: int) -> list[tuple[int, GunnStage, int]]:
    """``(stage index, stage, spatial size)`` for every GUNN stage."""
    s = spec.stem
    hw = (input_hw + 2 * (s.kernel // 2) - s.kernel) // s.stride + 1
    if s.pool == "max":
        hw = (hw + 2 - 3) // 2 + 1
    out = []
    for i, st in enumerate(spec.stages):
        if isinstance(st, GunnStage):
            out.append((i, st, hw))
        elif st.pool == "avg":
            hw //= 2
    return out


# ----------------------------------------------------------------------------
# config files


def spec_to_dict(spec: NetworkSpec) -> dict:
    stages = []
    for st in spec.stages:
        if isinstance(st, GunnStage):
            c = st.config
            d = {"type": "gunn", "N": c.N, "P": c.P, "K": c.K, "M": c.M, "mode": st.mode}
            if not st.residual:
                d["residual"] = False
            stages.append(d)
        else:
            stages.append({"type": "transition", "out": st.out, "pool": st.pool})
    stem = {"kernel": spec.stem.kernel, "out": spec.stem.out, "stride": spec.stem.stride,
            "expand_to": spec.stem.expand_to}
    if spec.stem.pool != "none":
        stem["pool"] = spec.stem.pool
    d = {"name": spec.name, "classes": spec.classes, "stem": stem, "stages": stages,
         "head": {"features": spec.head.features, "classes": spec.head.classes}}
    if spec.in_channels != 3:
        d["in_channels"] = spec.in_channels
    return d


def spec_from_dict(d: dict) -> NetworkSpec:
    try:
        stages = []
        for st in d["stages"]:
            kind = st["type"]
            if kind == "gunn":
                cfg = GunnLayerConfig(int(st["N"]), int(st["P"]), int(st.get("K", 2)), int(st.get("M", 1)))
                stages.append(GunnStage(cfg, st.get("mode", GRADUAL), bool(st.get("residual", True))))
            elif kind == "transition":
                stages.append(Transition(int(st["out"]), st.get("pool", "avg")))
            else:
                raise SpecError(f"unknown stage type {kind!r}")
        s = d["stem"]
        stem = Stem(int(s["kernel"]), int(s["out"]), int(s.get("stride", 1)), s.get("pool", "none"),
                    None if s.get("expand_to") is None else int(s["expand_to"]))
        head = ClassifierHead(int(d["head"]["features"]), int(d["head"]["classes"]))
        spec = NetworkSpec(str(d["name"]), int(d["classes"]), stem, tuple(stages), head,
                           int(d.get("in_channels", 3)))
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed network config: {exc!r}") from exc
    validate(spec)
    return spec


def dump_config(spec: NetworkSpec) -> str:
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False)


def load_config(text_or_path: Union[str, Path]) -> NetworkSpec:
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path
                                          and Path(text_or_path).exists()):
        text = Path(text_or_path).read_text()
    else:
        text = text_or_path
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise SpecError("network config must be a mapping")
    return spec_from_dict(data)


def config_digest(spec: NetworkSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
