"""
Pytest configuration and fixtures for dxs tests.
"""

import os
import sys

import pytest

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

# Determinism mode, in-process compute
os.environ["DXS_THREADS"] = "1"
os.environ["DXS_LOCAL_COMPUTE"] = "true"


@pytest.fixture(scope="session", autouse=True)
def setup_local_mode():
    """Run every test single-threaded with in-process compute."""
    os.environ["DXS_THREADS"] = "1"
    os.environ["DXS_LOCAL_COMPUTE"] = "true"
    yield


@pytest.fixture(autouse=True)
def offline_live_log(mocker):
    """Keep progress reporting away from Redis."""
    import redis

    mocker.patch(
        "dxs_graph.utils.live_logger.get_redis",
        side_effect=redis.ConnectionError("offline"),
    )
    # Don't let a run's job id leak into later tests
    from dxs_graph.utils import live_logger

    live_logger.set_current_job_id(None)
    yield
    live_logger.set_current_job_id(None)


@pytest.fixture
def acquisition():
    """Default five-echo bipolar acquisition at 1.5 T."""
    from dxs_core.signal_model import AcquisitionConfig

    return AcquisitionConfig()


@pytest.fixture
def spectrum():
    """Six-peak fat spectrum."""
    from dxs_core.signal_model import FatSpectrum

    return FatSpectrum.default()


@pytest.fixture
def small_phantom_config():
    """Noiseless 32x32 phantom with three slices, the last one air."""
    from dxs_core.phantom import PhantomConfig

    return PhantomConfig(height=32, width=32, slices=3, air_slices=1, snr=None)


@pytest.fixture
def tiny_run_config():
    """Run configuration payload sized for seconds-long integration tests."""
    return {
        "phantom": {"height": 32, "width": 32, "slices": 3, "air_slices": 1, "snr": None},
        "network": {"depth": 2, "base_features": 2},
        "training": {"epochs": 2, "k_folds": 2, "lr0": 0.001},
        "evaluation": {"export_png": True},
    }


@pytest.fixture
def tiny_dataset(tmp_path, small_phantom_config):
    """Four-subject dataset on disk; subject 0 is forced above the liver cutoff."""
    from dxs_core.phantom import generate_dataset

    dataset_dir = tmp_path / "dataset"
    manifest = generate_dataset(4, 7, small_phantom_config, dataset_dir)
    return dataset_dir, manifest


@pytest.fixture
def small_spec():
    """Depth-2 U-Net for a three-echo input."""
    from dxs_core.unet import UNetSpec

    return UNetSpec(depth=2, base_features=2, in_channels=6)


# Markers for test categories
def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line("markers", "unit: Unit tests (fast, no external deps)")
    config.addinivalue_line("markers", "integration: Integration tests (small datasets on disk, local compute)")
    config.addinivalue_line("markers", "slow: Desk-scale acceptance runs (set DXS_RUN_SLOW=1)")
