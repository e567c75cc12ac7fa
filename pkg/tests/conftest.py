import numpy as np
import pytest

from mixsa.backend import EchoBackend, LinearBackend, ZeroBackend
from mixsa.contour import ContourParams
from mixsa.images import ImageBuffer
from mixsa.pipeline import SketchJob


@pytest.fixture
def shapes_color() -> ImageBuffer:
    """64x64 color scene: two rectangles on a light background."""
    px = np.full((64, 64, 3), 210, dtype=np.uint8)
    px[12:40, 10:30] = [60, 90, 200]
    px[30:55, 35:58] = [220, 120, 40]
    return ImageBuffer(px)


@pytest.fixture
def stripes_reference() -> ImageBuffer:
    """64x64 sketch-like reference: dark horizontal strokes on white."""
    px = np.full((64, 64), 255, dtype=np.uint8)
    px[8:56:6, 8:56] = 30
    return ImageBuffer(px)


@pytest.fixture
def checkerboard() -> ImageBuffer:
    yy, xx = np.indices((32, 32))
    return ImageBuffer(np.where((yy + xx) % 2 == 0, 255, 0).astype(np.uint8))


@pytest.fixture
def echo_backend() -> EchoBackend:
    return EchoBackend()


@pytest.fixture
def zero_backend() -> ZeroBackend:
    return ZeroBackend()


@pytest.fixture
def linear_backend() -> LinearBackend:
    return LinearBackend(0.1)


@pytest.fixture
def base_job(shapes_color, stripes_reference) -> SketchJob:
    """Fast mock job: built-in detector, 10 transport steps."""
    return SketchJob(
        color_image=shapes_color,
        reference_image=stripes_reference,
        contour=ContourParams(method="canny", alpha=0.55),
        steps=10,
    )
