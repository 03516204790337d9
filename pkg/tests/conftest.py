import numpy as np
import pytest

from lensforge.isp import SensorModel
from lensforge.lens import (
    ConstraintSpec,
    DesignSpec,
    Glass,
    LensSystem,
    ParamRanges,
    SearchSettings,
    Surface,
)

BK7 = Glass(1.5168, 64.17, "BK7")
SF2 = Glass(1.64769, 33.85, "SF2")


@pytest.fixture
def triplet() -> LensSystem:
    """A hand-set Cooke-style triplet; traceable, not optimized."""
    return LensSystem(
        surfaces=(
            Surface(1 / 26.0, 4.0, BK7),
            Surface(-1 / 300.0, 6.0, None),
            Surface(-1 / 50.0, 1.5, SF2),
            Surface(1 / 50.0, 3.0, None),
            Surface(0.0, 3.0, None, is_stop=True),
            Surface(1 / 60.0, 4.0, BK7),
            Surface(-1 / 35.0, 0.0, None),
        ),
        image_distance=36.0,
        entrance_pupil_diameter=16.0,
        design_form="GAGASAGA",
    )


@pytest.fixture
def thick_singlet() -> LensSystem:
    """Symmetric biconvex singlet with a front stop; n_d of the glass is
    exactly 1.5 so first-order oracles are closed-form."""
    return LensSystem(
        surfaces=(
            Surface(0.0, 5.0, None, is_stop=True),
            Surface(0.01, 5.0, Glass(1.5, 50.0)),
            Surface(-0.01, 0.0, None),
        ),
        image_distance=95.0,
        entrance_pupil_diameter=10.0,
    )


def triplet_spec(**search_overrides) -> DesignSpec:
    """The EFL-40 f/2.5 HFOV-20 three-element design task used throughout."""
    search_overrides.setdefault("output_loss_ceiling", 0.08)
    return DesignSpec(
        hfov_deg=20.0,
        f_number=2.5,
        efl_range=(40.0, 40.0),
        design_forms=("GAGASAGA",),
        ranges=ParamRanges(
            curvature=(-0.1, 0.1),
            air_spacing=(1.3, 10.0),
            glass_thickness=(1.3, 8.0),
            image_distance=(25.0, 48.0),
        ),
        constraints=(
            ConstraintSpec("efl", 40.0, 40.0, 0.1),
            ConstraintSpec("distortion", -1.0, 1.0, 1.0),
            ConstraintSpec("air_edge", 0.3, 8.0, 0.1),
            ConstraintSpec("glass_edge", 1.0, 8.0, 0.1),
            ConstraintSpec("bfl", 29.0, float("inf"), 0.05),
            ConstraintSpec("ttl", float("-inf"), 50.0, 0.01),
        ),
        search=SearchSettings(**search_overrides),
    )


@pytest.fixture
def spec3e() -> DesignSpec:
    return triplet_spec()


@pytest.fixture
def small_sensor() -> SensorModel:
    return SensorModel(width=48, height=32, pixel_pitch_um=(24.0, 24.0))


def smooth_image(seed: int, height: int, width: int, block: int = 4) -> np.ndarray:
    """Band-limited test image: blockwise-constant noise upsampled."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.15, 0.85, (height // block, width // block, 3))
    return np.clip(np.kron(base, np.ones((block, block))[:, :, None]), 0.0, 1.0)
