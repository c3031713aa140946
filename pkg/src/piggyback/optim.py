"""SGD with momentum and Adam over named parameter groups, plus step decay.

Parameters are addressed by ``(layer_name, slot)`` keys, the same keys
``Network.backward`` produces gradients for. A group owns a set of keys and
never touches anything else.
"""

from dataclasses import dataclass, field

import numpy as np

from piggyback.errors import ConfigError
from piggyback.masking import scale_mask_gradient

ROLES = ("head", "mask", "backbone", "batchnorm")
SGDM = "sgdm"
ADAM = "adam"
NO_SCALING = "none"
INVERSE_MEAN_ABS = "inverse-mean-abs-weight"


def sgdm_step(param, grad, velocity, lr, momentum=0.9):
    velocity = momentum * velocity + grad
    return param - lr * velocity, velocity


def adam_step(param, grad, m1, m2, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. ``t`` counts steps from 1."""
    if t < 1:
        raise ConfigError(f"adam step counter must start at 1, got {t}")
    m1 = beta1 * m1 + (1 - beta1) * grad
    m2 = beta2 * m2 + (1 - beta2) * grad * grad
    m_hat = m1 / (1 - beta1 ** t)
    v_hat = m2 / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m1, m2


@dataclass
class ParamGroup:
    name: str
    role: str
    keys: list
    lr: float
    optimizer: str = ADAM
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    scaling: str = NO_SCALING
    base_lr: float = field(init=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown parameter-group role {self.role!r}")
        if self.optimizer not in (SGDM, ADAM):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        # lr == 0 is allowed: it freezes a group while keeping its bookkeeping.
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.scaling not in (NO_SCALING, INVERSE_MEAN_ABS):
            raise ConfigError(f"unknown gradient scaling {self.scaling!r}")
        if self.scaling == INVERSE_MEAN_ABS and (self.optimizer != SGDM or self.role != "mask"):
            raise ConfigError("inverse-mean-abs-weight scaling is only valid for sgdm on mask groups")
        wrong = [k for k in self.keys if (k[1] == "mask") != (self.role == "mask")]
        if wrong:
            raise ConfigError(f"group {self.name!r} (role {self.role}) cannot own {wrong}")
        self.keys = list(self.keys)
        self.base_lr = self.lr


@dataclass
class DecaySchedule:
    factor: float = 10.0
    epochs: tuple = (15,)

    def __post_init__(self):
        self.epochs = tuple(int(e) for e in self.epochs)
        if not self.factor > 1:
            raise ConfigError(f"decay factor must be > 1, got {self.factor}")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ConfigError(f"decay epochs must be strictly increasing, got {self.epochs}")

    def multiplier(self, epoch):
        passed = sum(1 for e in self.epochs if epoch >= e)
        return self.factor ** -passed


def apply_decay(groups, schedule, epoch):
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    for g in groups:
        g.lr = g.base_lr * schedule.multiplier(epoch)
    return groups


class Optimizer:
    """Drives a list of ``ParamGroup`` objects over a flat parameter dict.

    ``params`` maps keys to arrays and is updated by rebinding entries, so
    arrays handed in by callers (e.g. read-only backbone tensors) are never
    written to. ``scale_refs`` supplies the frozen weight each mask key is
    scaled by when a group uses inverse-mean-abs-weight scaling.
    """

    def __init__(self, groups, scale_refs=None):
        self.groups = list(groups)
        seen = set()
        for g in self.groups:
            dup = seen.intersection(g.keys)
            if dup:
                raise ConfigError(f"parameters {sorted(dup)} belong to more than one group")
            seen.update(g.keys)
        self.scale_refs = scale_refs or {}
        self.state = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for g in self.groups:
            for key in g.keys:
                grad = grads[key]
                if g.scaling == INVERSE_MEAN_ABS:
                    grad = scale_mask_gradient(grad, self.scale_refs[key])
                p = params[key]
                if g.optimizer == SGDM:
                    vel = self.state.get(key)
                    if vel is None:
                        vel = np.zeros_like(p)
                    params[key], self.state[key] = sgdm_step(p, grad, vel, g.lr, g.momentum)
                else:
                    m1, m2 = self.state.get(key, (np.zeros_like(p), np.zeros_like(p)))
                    params[key], m1, m2 = adam_step(p, grad, m1, m2, self.t, g.lr, g.betas[0], g.betas[1], g.eps)
                    self.state[key] = (m1, m2)
        return params
