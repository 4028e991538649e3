"""AdamW with decoupled weight decay, and cosine-annealed learning rate."""
import math

import numpy as np


def adamw_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 1e-2):
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {getattr(p, 'name', '') or p!r} has no gradient")
        g = p.grad
        p.data = p.data - lr * weight_decay * p.data
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * step / total_steps))
