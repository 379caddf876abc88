import numpy as np
import pytest

from fluorotwin.phantoms import build_branched_phantom, build_maze
from fluorotwin.render import FluoroRenderer, RenderConfig
from fluorotwin.world import RobotState, load_geometry


@pytest.fixture(scope="session")
def branched_doc():
    return build_branched_phantom()


@pytest.fixture(scope="session")
def maze_doc():
    return build_maze()


@pytest.fixture(scope="session")
def branched_geom(branched_doc):
    return load_geometry(branched_doc)


@pytest.fixture(scope="session")
def maze_geom(maze_doc):
    return load_geometry(maze_doc)


@pytest.fixture()
def clean_cfg():
    return RenderConfig(noise_sigma=0.0)


@pytest.fixture()
def robot():
    return RobotState((40.0, 0.0), 0.0, 5.0, 2.0, 0)


def open_channel_doc(width=40.0, length=300.0):
    """A single wide straight channel: effectively open space for kinematics."""
    return {
        "units": "mm",
        "channels": [{"points": [[0.0, 0.0], [length, 0.0]],
                      "widths": [width, width]}],
        "walls": [],
        "fiducials": [[0.0, 0.0], [length, 0.0]],
        "reference_length_mm": length,
    }


@pytest.fixture(scope="session")
def open_geom():
    return load_geometry(open_channel_doc())


def frame_of(pixels, seq=0, t=0, mode="cine"):
    from fluorotwin.render import Frame
    arr = np.asarray(pixels, dtype=np.uint8)
    return Frame(arr.shape[1], arr.shape[0], arr, seq, t, mode)
