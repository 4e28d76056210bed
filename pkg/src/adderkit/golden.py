"""Published detector op counts and energies, and the bundled model specs
that reproduce them.

The bundled specs are aggregate layer lists: each component (stem, backbone,
neck, head, ...) is one 1x1 layer whose tap count equals that component's
published multiply share, in units of 0.01 G. Component shares come from
the differences between a conv detector and its adder variants
(e.g. FCOS R50 214.7 G -> 129.9 G with an adder backbone gives 84.8 G).
Where only the backbone+neck share is known it is a single ``backbone_neck``
component.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .profiler import LayerSpec, ModelSpec, format_model_spec, load_model_spec

UNIT = 10 ** 7  # 0.01 G


@dataclass(frozen=True)
class PublishedRow:
    label: str
    epochs: int
    muls_g: float
    adds_g: float
    energy_mj: float
    spec: str  # bundled spec slug
    mask: tuple[str, ...] = ()


# stem shares: 7x7x3x64 at half input resolution, rounded to 0.01 G
FAMILIES: dict[str, tuple[str, str, list[tuple[str, int]]]] = {
    "fcos_r50": ("FCOS R50", "800x1333", [("stem", 251), ("backbone", 8480), ("neck", 1700), ("head", 11039)]),
    "foveabox_r50": ("FoveaBox R50", "800x1333", [("stem", 251), ("backbone", 8480), ("neck", 1810), ("head", 11039)]),
    "sparse_rcnn_r50": ("Sparse R-CNN R50", "800x1333", [("stem", 251), ("backbone", 8481), ("rest", 6908)]),
    "fcos_r18": ("FCOS R18", "800x1333", [("stem", 251), ("backbone", 2080), ("neck", 2950), ("head", 10989)]),
    "fcos_r101": ("FCOS R101", "800x1333", [("stem", 251), ("backbone", 14890), ("neck", 3240), ("head", 11079)]),
    "fcos_rt_r50": ("FCOS-RT R50", "736x512", [("stem", 89), ("backbone_neck", 3570), ("head", 3827)]),
    "retinanet_ms500_r50": (
        "RetinaNet-MS-500 R50", "500x500",
        [("stem", 59), ("backbone_neck", 2516), ("head", 2574), ("output", 975)],
    ),
    "retinanet_ms640_r50": (
        "RetinaNet-MS-640 R50", "640x640",
        [("stem", 96), ("backbone_neck", 4055), ("head", 3898), ("output", 1519)],
    ),
    "ghm_r50": ("GHM R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 16299)]),
    "pafpn_r50": ("PAFPN R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 15439)]),
    "retinanet_r50": ("RetinaNet R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 15199)]),
    "libra_rcnn_r50": ("Libra R-CNN R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 12959)]),
    "faster_rcnn_r50": ("Faster R-CNN R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 12849)]),
    "reppoints_r50": ("RepPoints R50", "800x1333", [("stem", 251), ("backbone", 8480), ("rest", 11169)]),
}

B, BN, BNH = ("backbone",), ("backbone", "neck"), ("backbone_neck", "head")

DETECTOR_ENERGY = [
    PublishedRow("GHM R50", 12, 250.3, 250.3, 1152, "ghm_r50"),
    PublishedRow("PAFPN R50", 12, 241.7, 241.7, 1112, "pafpn_r50"),
    PublishedRow("RetinaNet R50", 12, 239.3, 239.3, 1100, "retinanet_r50"),
    PublishedRow("Libra R-CNN R50", 12, 216.9, 216.9, 997.9, "libra_rcnn_r50"),
    PublishedRow("Faster R-CNN R50", 12, 215.8, 215.8, 992.8, "faster_rcnn_r50"),
    PublishedRow("PISA R50", 12, 215.8, 215.8, 992.8, "faster_rcnn_r50"),
    PublishedRow("FSAF R50", 12, 215.8, 215.8, 992.8, "faster_rcnn_r50"),
    PublishedRow("RepPoints R50", 12, 199.0, 199.0, 915.4, "reppoints_r50"),
    PublishedRow("FoveaBox R50", 12, 215.8, 215.8, 992.7, "foveabox_r50"),
    PublishedRow("Adder FoveaBox R50 (B)", 12, 131, 300.6, 755.2, "foveabox_r50", B),
    PublishedRow("Adder FoveaBox R50 (B+N)", 12, 112.9, 318.7, 704.4, "foveabox_r50", BN),
    PublishedRow("Sparse R-CNN R50", 12, 156.4, 156.4, 719.5, "sparse_rcnn_r50"),
    PublishedRow("Adder Sparse R-CNN R50 (B)", 12, 71.59, 241.2, 482.0, "sparse_rcnn_r50", B),
    PublishedRow("FCOS R50", 12, 214.7, 214.7, 987.7, "fcos_r50"),
    PublishedRow("Adder FCOS R50 (B)", 12, 129.9, 299.5, 750.2, "fcos_r50", B),
    PublishedRow("Adder FCOS R50 (B+N)", 12, 112.9, 316.5, 702.7, "fcos_r50", BN),
    PublishedRow("RetinaNet R50", 24, 239.3, 239.3, 1100, "retinanet_r50"),
    PublishedRow("Faster R-CNN R50", 24, 215.8, 215.8, 992.8, "faster_rcnn_r50"),
    PublishedRow("RepPoints R50", 24, 199.0, 199.0, 915.4, "reppoints_r50"),
    PublishedRow("FoveaBox R50", 24, 215.8, 215.8, 992.7, "foveabox_r50"),
    PublishedRow("Adder FoveaBox R50 (B)", 24, 131, 300.6, 755.2, "foveabox_r50", B),
    PublishedRow("FCOS R50", 24, 214.7, 214.7, 987.7, "fcos_r50"),
    PublishedRow("Adder FCOS R50 (B)", 24, 129.9, 299.5, 750.2, "fcos_r50", B),
    PublishedRow("Adder FCOS R50 (B+N)", 24, 112.9, 316.5, 702.7, "fcos_r50", BN),
    PublishedRow("FCOS R18", 24, 162.7, 162.7, 748.5, "fcos_r18"),
    PublishedRow("Adder FCOS R18 (B)", 24, 141.9, 183.5, 690.3, "fcos_r18", B),
    PublishedRow("Adder FCOS R18 (B+N)", 24, 112.4, 213.0, 607.6, "fcos_r18", BN),
    PublishedRow("FCOS R101", 24, 294.6, 294.6, 1355, "fcos_r101"),
    PublishedRow("Adder FCOS R101 (B)", 24, 145.7, 443.5, 938.1, "fcos_r101", B),
    PublishedRow("Adder FCOS R101 (B+N)", 24, 113.3, 475.9, 847.4, "fcos_r101", BN),
    PublishedRow("FCOS-RT R50", 48, 74.86, 74.86, 344.4, "fcos_rt_r50"),
    PublishedRow("Adder FCOS-RT R50 (B+N)", 48, 39.16, 110.6, 244.4, "fcos_rt_r50", ("backbone_neck",)),
    PublishedRow("RetinaNet-MS-500 R50", 50, 61.24, 61.24, 281.7, "retinanet_ms500_r50"),
    PublishedRow("Adder RetinaNet-MS-500 R50 (B+N)", 50, 36.08, 86.40, 211.3, "retinanet_ms500_r50", ("backbone_neck",)),
    PublishedRow("Adder RetinaNet-MS-500 R50 (B+N+H)", 50, 10.34, 112.1, 139.2, "retinanet_ms500_r50", BNH),
    PublishedRow("RetinaNet-MS-640 R50", 50, 95.68, 95.68, 440.1, "retinanet_ms640_r50"),
    PublishedRow("Adder RetinaNet-MS-640 R50 (B+N)", 50, 55.13, 136.2, 326.6, "retinanet_ms640_r50", ("backbone_neck",)),
    PublishedRow("Adder RetinaNet-MS-640 R50 (B+N+H)", 50, 16.15, 175.2, 217.4, "retinanet_ms640_r50", BNH),
]

# INT8 comparison: (label, muls G, adds G, FP32 mJ, INT8 mJ)
PRECISION_ROWS = [
    ("FCOS R50", 214.7, 214.7, 987.62, 49.38),
    ("Adder FCOS R50 (B+N)", 112.9, 316.5, 702.58, 32.08),
]


def family_spec(slug: str) -> ModelSpec:
    title, resolution, parts = FAMILIES[slug]
    layers = [LayerSpec(f"{comp}.agg", "conv", 1, 1, 100, 1000, 100, units) for comp, units in parts]
    return ModelSpec(tuple(layers), slug, resolution)


def spec_text(slug: str) -> str:
    title = FAMILIES[slug][0]
    notes = [
        f"{title}: aggregate layers, one per component.",
        "Each layer's tap count is the component's multiply share (1x1x100x1000x100xN = N x 0.01 G).",
    ]
    return format_model_spec(family_spec(slug), notes)


def specs_dir() -> Path:
    return Path(str(resources.files("adderkit") / "data" / "specs"))


def bundled_spec(slug: str) -> ModelSpec:
    return load_model_spec(specs_dir() / f"{slug}.spec")


def write_specs(directory=None) -> list[Path]:
    directory = Path(directory or specs_dir())
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for slug in FAMILIES:
        path = directory / f"{slug}.spec"
        path.write_text(spec_text(slug))
        out.append(path)
    return out


if __name__ == "__main__":
    for p in write_specs():
        print(p)
