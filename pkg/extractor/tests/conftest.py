import numpy as np
import pytest
from PIL import Image

from adextract import ExtractionConfig, load_backbone

# Reduced-depth random-init settings used throughout the suite: the
# production widths (1024 visual / 768 joint, 24x24 grid at 336 px) are
# what the contract pins down; depth only has to cover the tapped layers.
TINY = dict(
    random_init=True, depth=2, text_depth=2, layer_l=1, layer_lp=2, seed=0,
)


def tiny_config(images_dir, out_dir, **overrides) -> ExtractionConfig:
    kwargs = dict(TINY, category="widget", images_dir=images_dir, out_dir=out_dir)
    kwargs.update(overrides)
    return ExtractionConfig(**kwargs)


def write_png(path, seed, size=(64, 64)):
    rng = np.random.default_rng(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(
        rng.integers(0, 256, (size[0], size[1], 3), dtype=np.uint8), "RGB"
    ).save(path)
    return path


def make_dataset(root, n_support=3, with_mask=True):
    """Standard tiny layout: support/, test/good/, test/scratch/ (+ mask)."""
    images = root / "images"
    for i in range(n_support):
        write_png(images / "support" / f"s{i}.png", seed=100 + i)
    write_png(images / "test" / "good" / "ok0.png", seed=200)
    write_png(images / "test" / "scratch" / "bad0.png", seed=300)
    masks = None
    if with_mask:
        masks = root / "masks"
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[10:30, 12:40] = 255
        (masks / "scratch").mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask, "L").save(masks / "scratch" / "bad0_mask.png")
    return images, masks


@pytest.fixture(scope="session")
def backbone():
    config = tiny_config(images_dir="unused", out_dir="unused")
    return load_backbone(config)


@pytest.fixture(scope="session")
def sample_image(tmp_path_factory):
    return write_png(tmp_path_factory.mktemp("img") / "sample.png", seed=7)


@pytest.fixture(scope="session")
def exported(tmp_path_factory):
    """One full export shared by the manifest/validation/integration tests."""
    from adextract import export_dataset

    root = tmp_path_factory.mktemp("export")
    images, masks = make_dataset(root)
    config = tiny_config(images, root / "out", masks_dir=masks)
    manifest_path = export_dataset(config)
    return config, manifest_path
