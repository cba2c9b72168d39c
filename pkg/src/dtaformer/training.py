"""SGD training loop, evaluation and checkpoints."""
import io
import math
from dataclasses import dataclass

import numpy as np
import torch

from .data import normalize_block
from .errors import NumericalError
from .metrics import ConfusionMatrix
from .numerics import make_generator
from .wnet import multi_loss


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    checkpoint_every: int = 10


def cosine_lr(epoch, total_epochs, base_lr):
    return base_lr * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def make_optimizer(model, tc):
    return torch.optim.SGD(model.parameters(), lr=tc.lr, momentum=tc.momentum,
                           weight_decay=tc.weight_decay)


def blocks_to_tensors(blocks, normalize=True):
    if not blocks:
        raise ValueError("no blocks")
    if normalize:
        blocks = [normalize_block(b) for b in blocks]
    points = torch.as_tensor(np.stack([b.points for b in blocks]), dtype=torch.float32)
    labels = torch.as_tensor(np.stack([b.labels for b in blocks]), dtype=torch.long)
    return points, labels


def batch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_step(model, optimizer, points, labels, generator=None, batch_id=None):
    model.train()
    optimizer.zero_grad()
    out = model(points, generator)
    loss = multi_loss(out, labels)
    if not torch.isfinite(loss):
        stage_losses = [float(torch.nn.functional.cross_entropy(
            lg.reshape(-1, lg.shape[-1]), labels.reshape(-1))) for lg in out.logits]
        bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
        raise NumericalError(
            f"non-finite loss at batch {batch_id}", batch_id,
            {"batch_id": batch_id, "stage_losses": stage_losses, "nonfinite_params": bad,
             "input_finite": bool(torch.isfinite(points).all())})
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def predict(model, points, batch_size=8):
    model.eval()
    preds = [model(points[i:i + batch_size]).prediction for i in range(0, len(points), batch_size)]
    return torch.cat(preds)


def evaluate(model, points, labels, num_classes, batch_size=8):
    cm = ConfusionMatrix(num_classes)
    cm.update(predict(model, points, batch_size).numpy(), labels.numpy())
    return cm


def train_epoch(model, optimizer, points, labels, tc, seed, epoch, generator):
    lr = cosine_lr(epoch, tc.epochs, tc.lr)
    for group in optimizer.param_groups:
        group["lr"] = lr
    order = batch_order(len(points), seed, epoch)
    losses = []
    for b, start in enumerate(range(0, len(order), tc.batch_size)):
        idx = torch.as_tensor(order[start:start + tc.batch_size])
        losses.append(train_step(model, optimizer, points[idx], labels[idx], generator,
                                 batch_id=f"epoch{epoch}/batch{b}"))
    return lr, float(np.mean(losses))


def fit(model, optimizer, points, labels, tc, seed, start_epoch=0, on_epoch=None):
    """Run epochs ``start_epoch .. tc.epochs - 1``; returns per-epoch (lr, loss)."""
    generator = make_generator(seed)
    history = []
    for epoch in range(start_epoch, tc.epochs):
        lr, loss = train_epoch(model, optimizer, points, labels, tc, seed, epoch, generator)
        history.append((lr, loss))
        if on_epoch is not None:
            on_epoch(epoch, lr, loss)
    return history


def save_checkpoint(path, model, optimizer, epoch, seed, config_echo):
    state = {
        "config_echo": config_echo,
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "seed": seed,
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    return torch.load(path, map_location="cpu", weights_only=False)
