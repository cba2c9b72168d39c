import math

import pytest
import torch

from dtaformer import reference
from dtaformer.errors import NumericalError
from dtaformer.training import (TrainConfig, batch_order, cosine_lr, fit, load_checkpoint,
                                make_optimizer, save_checkpoint, train_step)
from dtaformer.wnet import DTAFormer, ModelConfig, StageConfig


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return DTAFormer(ModelConfig(stages=[StageConfig(4, 0.5), StageConfig(4, 0.5)]))


def batch(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(2, 8, 6, generator=g), torch.randint(0, 6, (2, 8), generator=g)


def test_zero_lr_leaves_parameters():
    model = tiny_model()
    opt = make_optimizer(model, TrainConfig(lr=0.0))
    before = {k: v.clone() for k, v in model.named_parameters()}
    train_step(model, opt, *batch())
    assert all(torch.equal(before[k], v) for k, v in model.named_parameters())


def test_momentum_trajectory_on_quadratic():
    p = torch.nn.Parameter(torch.tensor(1.0, dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.1, momentum=0.9)
    traj = []
    for _ in range(3):
        opt.zero_grad()
        ((p - 3) ** 2).backward()
        opt.step()
        traj.append(float(p))
    assert traj == pytest.approx([1.4, 2.08, 2.876], abs=1e-12)
    assert traj == pytest.approx(reference.momentum_sgd(1.0, lambda x: 2 * (x - 3), 0.1, 0.9, 0.0, 3))


def test_weight_decay_trajectory():
    p = torch.nn.Parameter(torch.tensor(-2.0, dtype=torch.float64))
    opt = torch.optim.SGD([p], lr=0.05, momentum=0.9, weight_decay=0.1)
    traj = []
    for _ in range(3):
        opt.zero_grad()
        (0.5 * p ** 2 + p).backward()
        opt.step()
        traj.append(float(p))
    assert traj == pytest.approx(reference.momentum_sgd(-2.0, lambda x: x + 1, 0.05, 0.9, 0.1, 3), abs=1e-12)


@pytest.mark.parametrize("epoch", [0, 1, 50, 100, 199, 200])
def test_cosine_schedule(epoch):
    assert cosine_lr(epoch, 200, 0.1) == pytest.approx(0.1 * (1 + math.cos(math.pi * epoch / 200)) / 2)


def test_nan_loss_reports_batch():
    model = tiny_model()
    opt = make_optimizer(model, TrainConfig())
    with torch.no_grad():
        model.heads[0].fc2.bias.fill_(float("nan"))
    with pytest.raises(NumericalError) as info:
        train_step(model, opt, *batch(), batch_id="epoch0/batch3")
    assert info.value.batch_id == "epoch0/batch3"
    assert "heads.0.fc2.bias" in info.value.diagnostic["nonfinite_params"]


def test_batch_order_is_seeded():
    assert (batch_order(10, 1, 2) == batch_order(10, 1, 2)).all()
    assert sorted(batch_order(10, 1, 2)) == list(range(10))
    assert not (batch_order(10, 1, 2) == batch_order(10, 1, 3)).all()


def test_fit_is_deterministic_and_checkpoints_identical(tmp_path):
    pts, lab = batch(1)
    tc = TrainConfig(epochs=2, batch_size=1)
    paths = []
    for run in range(2):
        model = tiny_model(4)
        opt = make_optimizer(model, tc)
        hist = fit(model, opt, pts, lab, tc, seed=9)
        path = tmp_path / f"ck{run}.pt"
        save_checkpoint(path, model, opt, tc.epochs, 9, "echo")
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    ck = load_checkpoint(paths[0])
    assert ck["epoch"] == 2 and ck["seed"] == 9 and ck["config_echo"] == "echo"
    assert len(hist) == 2 and hist[0][0] == pytest.approx(0.1)
