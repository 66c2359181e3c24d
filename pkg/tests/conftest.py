import pytest

from bullettime.scene import (
    generate_dataset,
    load_dataset,
    ring_rig,
    standard_scene,
    tiny_rig,
    tiny_scene,
)


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "ds"
    generate_dataset(tiny_scene(), tiny_rig(), str(root), n_dense=128)
    return load_dataset(str(root))


@pytest.fixture(scope="session")
def standard_ds(tmp_path_factory):
    root = tmp_path_factory.mktemp("standard") / "ds"
    generate_dataset(standard_scene(), ring_rig(), str(root), n_dense=256)
    return load_dataset(str(root))
