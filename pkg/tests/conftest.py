import numpy as np
import pytest
from hypothesis import settings

from patchcert.model import LayerGeom, LayerSpec, ModelSpec

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_model(rng, size=8, channels=(3, 4, 5), classes=3, geoms=None, pool=False,
                 dtype=np.float32, surf=1, bias=True):
    """Small conv -> relu -> [maxpool] -> conv -> relu -> gap -> dense model with random weights."""
    c0, c1, c2 = channels
    g1, g2 = geoms or (LayerGeom(3, 1, 1), LayerGeom(3, 1, 1))

    def t(*shape):
        return rng.standard_normal(shape).astype(dtype)

    def b(n):
        return (0.1 * rng.standard_normal(n)).astype(dtype) if bias else np.zeros(n, dtype)

    layers = [LayerSpec("conv", g1, t(c1, c0, g1.kernel, g1.kernel), b(c1)), LayerSpec("relu")]
    if pool:
        layers.append(LayerSpec("maxpool", LayerGeom(2, 2, 0)))
    layers += [LayerSpec("conv", g2, t(c2, c1, g2.kernel, g2.kernel), b(c2)), LayerSpec("relu"),
               LayerSpec("globalavgpool"), LayerSpec("dense", None, t(classes, c2), b(classes))]
    return ModelSpec(layers, (c0, size, size), classes, surf)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_stack(rng, geoms, size, channels=2):
    """Conv-only model with strictly positive weights; the last conv is the superficial layer."""
    layers, c = [], channels
    for g in geoms:
        layers.append(LayerSpec("conv", g, rng.uniform(0.5, 1.5, (2, c, g.kernel, g.kernel)),
                                np.zeros(2)))
        c = 2
    layers += [LayerSpec("globalavgpool"), LayerSpec("dense", None, np.ones((2, 2)), np.zeros(2))]
    return ModelSpec(layers, (channels, size, size), 2, superficial_layer=len(geoms) - 1)


def perturbation_influence(model):
    """Oracle: (Hs, Ws, H, W) bool, True where bumping the pixel changes that layer-s activation."""
    from patchcert.model import forward

    s = model.superficial_layer
    c, h, w = model.input_shape
    base = forward(model, np.ones((c, h, w)), trace=True).outputs[s][0]
    hs, ws = base.shape[1:]
    infl = np.zeros((hs, ws, h, w), dtype=bool)
    bumped = np.ones((h * w, c, h, w))
    for q in range(h * w):
        bumped[q, :, q // w, q % w] += 1.0
    outs = forward(model, bumped, trace=True).outputs[s]
    for q in range(h * w):
        infl[:, :, q // w, q % w] = (outs[q] != base).any(axis=0)
    return infl


def random_geoms(rng, layers=2):
    """Random conv geometries with a non-empty output on some image size; returns (geoms, size)."""
    while True:
        geoms = []
        for _ in range(layers):
            k = int(rng.integers(1, 5))
            geoms.append(LayerGeom(k, int(rng.integers(1, 4)), int(rng.integers(0, k))))
        size = int(rng.integers(5, 13))
        n = size
        for g in geoms:
            n = g.out_extent(n)
        if n >= 1:
            return geoms, size


ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    """Collect one acceptance line; they are printed together at the end of the run."""
    line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
