from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES


def make_record(frame_count=10, height=48, width=64, device="dev0", video="vid0", gop_index=0,
                seed=0, qp=None, types=None):
    import numpy as np

    from h4vdm.gop_store import GopRecord, mb_grid_shape

    rng = np.random.default_rng(seed)
    gh, gw = mb_grid_shape(height, width)
    if types is None:
        types = ["I"] + [("P", "B")[k % 2] for k in range(frame_count - 1)]
    qp_grids = (np.full((frame_count, gh, gw), qp, np.uint8) if qp is not None
                else rng.integers(0, 52, (frame_count, gh, gw), dtype=np.uint8))
    return GopRecord(
        device_id=device, video_id=video, gop_index=gop_index, frame_types=list(types),
        frames=rng.integers(0, 256, (frame_count, height, width, 3), dtype=np.uint8),
        mb_type_grids=rng.integers(0, 256, (frame_count, gh, gw), dtype=np.uint8),
        luma_qp_grids=qp_grids,
    )


@pytest.fixture
def record_factory():
    return make_record


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
