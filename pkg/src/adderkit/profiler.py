"""Static multiply/add counting and energy estimation over a layer list.

Counting law: a conv layer costs ``kh*kw*c_in*c_out*h_out*w_out`` multiplies
and as many additions; the adder version of the same layer costs no
multiplies and twice as many additions (one subtraction and one accumulation
per tap). BN, ReLU, bias and resize ops are not counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .layers import FilterKind

GIGA = 10 ** 9


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: FilterKind
    kh: int
    kw: int
    c_in: int
    c_out: int
    h_out: int
    w_out: int

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        for f in ("kh", "kw", "c_in", "c_out", "h_out", "w_out"):
            if int(getattr(self, f)) <= 0:
                raise ValueError(f"layer {self.name}: {f} must be positive")

    @property
    def component(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def taps(self) -> int:
        return self.kh * self.kw * self.c_in * self.c_out * self.h_out * self.w_out


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    name: str = "model"
    resolution: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [l.name for l in self.layers]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate layer names: {sorted(dupes)}")


@dataclass(frozen=True)
class OpCount:
    muls: int = 0
    adds: int = 0

    def __post_init__(self):
        if self.muls < 0 or self.adds < 0:
            raise ValueError("op counts are non-negative")

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(self.muls + other.muls, self.adds + other.adds)

    @property
    def total(self) -> int:
        return self.muls + self.adds


@dataclass(frozen=True)
class EnergyModel:
    e_mul: Fraction  # pJ per op
    e_add: Fraction
    precision: str

    def __post_init__(self):
        object.__setattr__(self, "e_mul", Fraction(self.e_mul))
        object.__setattr__(self, "e_add", Fraction(self.e_add))
        if self.e_mul <= 0 or self.e_add <= 0:
            raise ValueError("energy coefficients must be positive")


FP32 = EnergyModel(Fraction("3.7"), Fraction("0.9"), "fp32")
INT8 = EnergyModel(Fraction("0.2"), Fraction("0.03"), "int8")
ENERGY_MODELS = {"fp32": FP32, "int8": INT8}


def count_layer(layer: LayerSpec) -> OpCount:
    if layer.kind is FilterKind.CONV:
        return OpCount(layer.taps, layer.taps)
    return OpCount(0, 2 * layer.taps)


def count_model(spec: ModelSpec) -> OpCount:
    if not spec.layers:
        raise ValueError(f"model spec {spec.name!r} has no layers")
    total = OpCount()
    for layer in spec.layers:
        total = total + count_layer(layer)
    return total


def convert_to_adder(spec: ModelSpec, which, force_first: bool = False) -> ModelSpec:
    """Turn the layers whose component (name prefix before the first dot) is in
    ``which`` into adder layers. The first layer stays a convolution unless
    ``force_first``. ``which`` may contain ``"all"``.
    """
    if not spec.layers:
        raise ValueError(f"model spec {spec.name!r} has no layers")
    mask = set(which)
    layers = []
    for i, layer in enumerate(spec.layers):
        hit = "all" in mask or layer.component in mask
        if hit and (i > 0 or force_first):
            layer = replace(layer, kind=FilterKind.ADDER)
        layers.append(layer)
    return replace(spec, layers=tuple(layers))


def energy_exact(counts: OpCount, model: EnergyModel = FP32) -> Fraction:
    """Energy in millijoules as an exact rational (pJ * 1e-9)."""
    return (counts.muls * model.e_mul + counts.adds * model.e_add) / GIGA


def energy(counts: OpCount, model: EnergyModel = FP32) -> float:
    return float(energy_exact(counts, model))


def parse_model_spec(text: str, name: str = "model") -> ModelSpec:
    """Parse ``name kind kh kw c_in c_out h_out w_out`` lines.

    ``#`` starts a comment; a ``#! key=value ...`` line sets metadata
    (``name``, ``input``).
    """
    meta = {"name": name, "input": ""}
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        if raw.startswith("#!"):
            for tok in raw[2:].split():
                key, _, value = tok.partition("=")
                meta[key] = value
            continue
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, got {len(parts)}: {raw!r}")
        try:
            dims = [int(p) for p in parts[2:]]
            layers.append(LayerSpec(parts[0], parts[1].lower(), *dims))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return ModelSpec(tuple(layers), meta["name"], meta["input"])


def load_model_spec(path) -> ModelSpec:
    path = Path(path)
    return parse_model_spec(path.read_text(), path.stem)


def format_model_spec(spec: ModelSpec, comments=()) -> str:
    lines = [f"#! name={spec.name}" + (f" input={spec.resolution}" if spec.resolution else "")]
    lines.extend(f"# {c}" for c in comments)
    lines.append("# name kind kh kw c_in c_out h_out w_out")
    for l in spec.layers:
        lines.append(f"{l.name} {l.kind.value} {l.kh} {l.kw} {l.c_in} {l.c_out} {l.h_out} {l.w_out}")
    return "\n".join(lines) + "\n"


def giga(n: int) -> str:
    return f"{n / GIGA:.1f}"


@dataclass
class EnergyReport:
    spec: ModelSpec
    model: EnergyModel
    rows: list = field(default_factory=list)  # (name, OpCount, mJ)

    @property
    def total(self) -> OpCount:
        return count_model(self.spec)

    @property
    def total_energy(self) -> float:
        return energy(self.total, self.model)

    def table(self) -> str:
        width = max([len(r[0]) for r in self.rows] + [5])
        out = [f"{'name':<{width}}  {'kind':<5}  {'#Mul(G)':>9}  {'#Add(G)':>9}  {'energy(mJ)':>11}"]
        for (name, c, mj), layer in zip(self.rows, self.spec.layers):
            out.append(f"{name:<{width}}  {layer.kind.value:<5}  {giga(c.muls):>9}  {giga(c.adds):>9}  {mj:>11.2f}")
        t = self.total
        out.append(f"{'total':<{width}}  {'':<5}  {giga(t.muls):>9}  {giga(t.adds):>9}  {self.total_energy:>11.2f}")
        out.append(f"precision={self.model.precision} model={self.spec.name}")
        return "\n".join(out) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "muls", "adds", "energy_mj"])
        for (name, c, mj), layer in zip(self.rows, self.spec.layers):
            w.writerow([name, layer.kind.value, c.muls, c.adds, f"{mj:.6f}"])
        t = self.total
        w.writerow(["total", "", t.muls, t.adds, f"{self.total_energy:.6f}"])
        return buf.getvalue()


def energy_report(spec: ModelSpec, model: EnergyModel = FP32) -> EnergyReport:
    rows = []
    for layer in spec.layers:
        c = count_layer(layer)
        rows.append((layer.name, c, energy(c, model)))
    return EnergyReport(spec, model, rows)
