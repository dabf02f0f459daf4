import pytest

from posefree3d.config import TrainConfig
from posefree3d.synthdata import faces_proxy, generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("faces16")
    generate_dataset(faces_proxy(count=24, resolution=16, seed=11), out)
    return out


@pytest.fixture
def small_config():
    return TrainConfig(
        batch_size=4, total_images=400, resolution=16, n_samples=8, backbone="triplane", field_hidden=16,
        triplane_channels=4, triplane_res=16, latent_dim=16, style_dim=16, pose_hidden=16, d_base_channels=8,
        d_max_channels=16, d_pose_hidden=32, eval_every=50, checkpoint_every=50, log_every=5, eval_latents=100,
        eval_real_images=24, eval_reprojection_latents=1, stratified=True,
    )


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
