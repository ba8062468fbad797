import pytest

from flatgrasp import datagen, schedule as sched


@pytest.fixture(scope="session")
def small_episodes():
    # 2 per scenario keeps every bucket populated without slowing the suite
    return datagen.generate_episodes(11, 2)


@pytest.fixture(scope="session")
def small_manifest(small_episodes):
    return datagen.build_manifest(small_episodes)


@pytest.fixture(scope="session")
def default_schedule():
    return sched.make_square_cosine()
