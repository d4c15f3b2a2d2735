import numpy as np
import pytest

from depthdet import CameraModel, SceneSpec, generate_sample


@pytest.fixture(scope="session")
def toy_cam() -> CameraModel:
    return CameraModel.from_hfov(64, 40)


@pytest.fixture(scope="session")
def toy_scene(toy_cam):
    """One deterministic pitched-down scene with two obstacles in range."""
    spec = SceneSpec(rng_seed=3, object_count=2, cam_pitch_deg=12.0)
    return generate_sample(spec, toy_cam)


def make_toy_dataset(cam, count, seed, object_count=(1, 2), sizes=(1.2, 3.0),
                     depths=(3.0, 14.0), pitch=12.0):
    """Deterministic batch of toy scenes, shared by training-level tests."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        spec = SceneSpec(
            rng_seed=int(rng.integers(0, 2**62)),
            object_count=int(rng.integers(object_count[0], object_count[1] + 1)),
            object_size_range=sizes,
            depth_range=depths,
            cam_pitch_deg=pitch,
        )
        samples.append(generate_sample(spec, cam))
    return samples
