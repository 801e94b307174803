"""Shared fixtures: a calibrated profile and small cluster/catalog builders."""

import pytest

from addonsim.addons import AddonCatalog
from addonsim.analysis import calibrate_encoder_mid_fraction
from addonsim.model import PROFILES, ClusterSpec, Request


@pytest.fixture(scope="session")
def base_profile():
    return PROFILES["paper-h800-sdxl"]


@pytest.fixture(scope="session")
def calibrated_profile(base_profile):
    # Serial fraction tuned to 0.55 for three offloaded branches.
    return calibrate_encoder_mid_fraction(base_profile, n_controlnets=3)


@pytest.fixture
def three_cn_catalog():
    return AddonCatalog(
        controlnets={"cn-000": 2500.0, "cn-001": 2500.0, "cn-002": 2500.0},
        loras={"lora-00000": 341.0, "lora-00001": 456.0},
    )


@pytest.fixture
def warm_cluster():
    return ClusterSpec(
        base_workers=1,
        controlnet_gpus=3,
        prewarm_worker_controlnets=True,
        prewarm_service_controlnets=True,
    )


def make_request(request_id=0, arrival_ms=0.0, n_controlnets=3, loras=(), steps=50):
    cns = tuple(f"cn-{i:03d}" for i in range(n_controlnets))
    return Request(request_id=request_id, arrival_ms=arrival_ms,
                   controlnets=cns, loras=tuple(loras), steps=steps)
