"""
Built-in backbone descriptors.

``toy_t``, ``desk_cnn`` and ``resnet_tiny`` are small enough to train on a
laptop CPU. ``mobilenet_v2`` and ``resnet50`` follow torchvision's graphs
layer for layer, so their accounting matches the reference implementations;
they can be assembled too, but are mostly used for parameter budgets.
"""

from __future__ import annotations

from pathlib import Path

from pyMDL.mdl_archspec import (
    ArchitectureSpec,
    ConvLayerSpec,
    LayerGlue,
    load_architecture,
)

__all__ = [
    "toy_t",
    "desk_cnn",
    "resnet_tiny",
    "mobilenet_v2",
    "resnet50",
    "BUILTIN_ARCHITECTURES",
    "resolve_architecture",
]


class _Builder:
    def __init__(self):
        self.layers = []
        self.glue = []
        self.bn_sites = []

    def conv(self, cin, cout, k, stride=1, groups=1, bias=False, bn=True, **glue):
        layer_id = len(self.layers)
        self.layers.append(ConvLayerSpec(layer_id, cin, cout, k, k, groups, bias))
        self.glue.append(LayerGlue(stride=stride, **glue))
        if bn:
            self.bn_sites.append((layer_id, cout))
        return layer_id

    def build(self, name):
        return ArchitectureSpec(
            name=name,
            layers=tuple(self.layers),
            bn_sites=tuple(self.bn_sites),
            head_in_features=self.layers[-1].out_channels,
            glue=tuple(self.glue),
        )


def toy_t(in_channels=1):
    """
    Three-layer toy network.

    Per-filter costs are 9 (two filters), 18 (four filters) and 4 (four
    filters), 106 conv parameters in total.
    """
    b = _Builder()
    b.conv(in_channels, 2, 3)
    b.conv(2, 4, 3)
    b.conv(4, 4, 1)
    return b.build("toyT")


def desk_cnn(in_channels=3):
    """Five-layer CNN for desk-scale experiments, widths growing to the top."""
    b = _Builder()
    b.conv(in_channels, 16, 3)
    b.conv(16, 32, 3, stride=2)
    b.conv(32, 32, 3)
    b.conv(32, 64, 3, stride=2)
    b.conv(64, 64, 1)
    return b.build("desk_cnn")


def _bottleneck(b, inplanes, planes, stride, expansion=4):
    first = b.conv(inplanes, planes, 1)
    b.conv(planes, planes, 3, stride=stride)
    needs_projection = stride != 1 or inplanes != planes * expansion
    if needs_projection:
        b.conv(planes, planes * expansion, 1, activation="none")
        b.conv(
            inplanes,
            planes * expansion,
            1,
            stride=stride,
            input_from=first,
            add_previous=True,
        )
    else:
        b.conv(planes, planes * expansion, 1, residual_from=first)
    return planes * expansion


def _resnet(name, in_channels, stem, stages, stem_kernel, stem_pool):
    b = _Builder()
    if stem_pool:
        b.conv(
            in_channels,
            stem,
            stem_kernel,
            stride=2,
            pool="max",
            pool_kernel=3,
            pool_stride=2,
            pool_padding=1,
        )
    else:
        b.conv(in_channels, stem, stem_kernel)
    inplanes = stem
    for index, (planes, blocks) in enumerate(stages):
        for block in range(blocks):
            stride = 2 if index > 0 and block == 0 else 1
            inplanes = _bottleneck(b, inplanes, planes, stride)
    return b.build(name)


def resnet_tiny(in_channels=3):
    """Two bottleneck stages, one with a projection shortcut."""
    return _resnet("resnet_tiny", in_channels, 16, [(8, 1), (16, 2)], 3, False)


def resnet50(in_channels=3):
    """ResNet-50 (torchvision layout, stride on the 3x3 convolution)."""
    return _resnet(
        "resnet50", in_channels, 64, [(64, 3), (128, 4), (256, 6), (512, 3)], 7, True
    )


# expansion t, output channels c, repeats n, first stride s
_MOBILENET_V2_SETTINGS = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
]


def mobilenet_v2(in_channels=3):
    """MobileNetV2 at width multiplier 1.0 (torchvision layout)."""
    b = _Builder()
    b.conv(in_channels, 32, 3, stride=2, activation="relu6")
    cin = 32
    for t, c, n, s in _MOBILENET_V2_SETTINGS:
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = cin * t
            first = len(b.layers)
            if t != 1:
                b.conv(cin, hidden, 1, activation="relu6")
            b.conv(hidden, hidden, 3, stride=stride, groups=hidden, activation="relu6")
            residual = first if stride == 1 and cin == c else None
            b.conv(hidden, c, 1, activation="none", residual_from=residual)
            cin = c
    b.conv(cin, 1280, 1, activation="relu6")
    return b.build("mobilenet_v2")


BUILTIN_ARCHITECTURES = {
    "toyT": toy_t,
    "desk_cnn": desk_cnn,
    "resnet_tiny": resnet_tiny,
    "mobilenet_v2": mobilenet_v2,
    "resnet50": resnet50,
}


def resolve_architecture(name_or_path, in_channels=None) -> ArchitectureSpec:
    """
    Look up a built-in descriptor by name, or load an architecture document.

    Parameters
    ----------
    name_or_path : str or Path
        Built-in name (see ``BUILTIN_ARCHITECTURES``) or path to a JSON
        architecture document.
    in_channels : int, optional
        Input channels for built-in descriptors; ignored for documents.
    """
    key = str(name_or_path)
    if key in BUILTIN_ARCHITECTURES:
        factory = BUILTIN_ARCHITECTURES[key]
        return factory() if in_channels is None else factory(in_channels)
    path = Path(key)
    if not path.exists():
        raise ValueError(
            f"Unknown architecture {key!r}: not a built-in "
            f"({', '.join(BUILTIN_ARCHITECTURES)}) and no such file"
        )
    return load_architecture(path)
