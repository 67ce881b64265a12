import numpy as np
import pytest

from composerlab.data import EvalDraws, gen_synthetic_dataset
from composerlab.errors import TrainingAbort
from composerlab.training import (
    PretrainConfig,
    TrainConfig,
    pretrain_backbone,
    train_composer,
    validation_loss,
)

from conftest import TINY


@pytest.fixture(scope="module")
def splits():
    return gen_synthetic_dataset(0, 128, 4, image_size=8), gen_synthetic_dataset(0, 32, 4, image_size=8, split=1)


def test_pretrain_lowers_loss(splits):
    train, val = splits
    model, hist = pretrain_backbone(TINY, train, val, PretrainConfig(epochs=3, batch=16), threshold=1e9)
    assert hist.val_loss[-1] < hist.val_loss[0] < 64 * 2
    assert not any(p.requires_grad for p in model.params.values())
    with pytest.raises(TrainingAbort):
        pretrain_backbone(TINY, train, val, PretrainConfig(epochs=1, batch=16), threshold=0.0)


def test_pretrain_aborts_on_nan(splits):
    train, val = splits
    bad = gen_synthetic_dataset(0, 32, 4, image_size=8)
    bad.images[:] = np.nan
    dumped = []
    with pytest.raises(TrainingAbort):
        pretrain_backbone(TINY, bad, val, PretrainConfig(epochs=1, batch=16), dump=dumped.append)
    assert len(dumped) == 1


def test_untrained_composer_matches_backbone_loss(tiny_backbone, tiny_composer, splits):
    _, val = splits
    draws = EvalDraws.make(len(val), 8, TINY.num_timesteps, 0)
    a = validation_loss(tiny_backbone, val, draws)
    b = validation_loss(tiny_backbone, val, draws, tiny_composer)
    assert a == b


def test_train_composer_history_and_frozen_backbone(tiny_backbone, tiny_composer, splits):
    train, val = splits
    before = tiny_backbone.checksum()
    seen = []
    comp, hist = train_composer(tiny_backbone, tiny_composer, TrainConfig(epochs=2, lr=1e-3, batch=8), train, val,
                                on_epoch=lambda e, tr, v: seen.append(e))
    assert tiny_backbone.checksum() == before
    assert len(hist.val_loss) == 3 and len(hist.train_loss) == 2 and seen == [0, 1]
    assert hist.val_loss[-1] < hist.val_loss[0]
    assert not any(p.requires_grad for p in comp.params.values())


def test_training_is_deterministic(tiny_backbone, splits):
    from composerlab.training import new_composer
    from composerlab.composer import ComposerConfig

    train, val = splits
    cfg = ComposerConfig(r=2, d_model=16, L=1, heads=2)
    runs = []
    for _ in range(2):
        comp = new_composer(cfg, tiny_backbone, 3)
        _, hist = train_composer(tiny_backbone, comp, TrainConfig(epochs=1, lr=1e-3, batch=8, seed=3), train, val)
        runs.append(hist.val_loss)
    assert runs[0] == runs[1]
