import numpy as np
import pytest

from quadfit import (Camera, KinematicCache, Observation, make_toy_pose_library,
                     make_toy_prior, make_toy_template, pose_keypoints, project)


@pytest.fixture(scope="session")
def template():
    return make_toy_template()


@pytest.fixture(scope="session")
def cache(template):
    return KinematicCache.build(template)


@pytest.fixture(scope="session")
def prior(template):
    return make_toy_prior(template.n_beta, template.n_joints)


@pytest.fixture(scope="session")
def pose_library(template):
    return make_toy_pose_library(template.n_joints, n_poses=8, seed=0)


@pytest.fixture(scope="session")
def observe(template, cache):
    """Factory: noise-free all-visible Observation from known params."""

    def build(params, cam_t=(0.0, 0.0, 6.0)):
        cam_t = np.asarray(cam_t, dtype=np.float64)
        kp = pose_keypoints(template, params, cache)
        px, _, ok = project(kp, Camera(translation=cam_t))
        assert ok.all(), "synthetic scene must sit in front of the camera"
        return Observation(kp2d=px, visibility=np.ones(template.n_kp, dtype=np.uint8),
                           camera=Camera())

    return build
