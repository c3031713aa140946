"""Desk-scale settings shared by the acceptance suite, the scripts and the CLI sweeps.

Pretraining runs longer than task training and without decay; task runs use
the 30-epoch, decay-at-15 recipe with the larger of the two head learning rates.
"""

from .training import TrainConfig

PRETRAIN = dict(epochs=60, decay_epochs=())
TASK = dict(epochs=30, decay_epochs=(15,), head_lr=1e-2)


def pretrain_config(seed, **kw):
    return TrainConfig(seed=seed, **{**PRETRAIN, **kw})


def task_config(seed, **kw):
    return TrainConfig(seed=seed, **{**TASK, **kw})
