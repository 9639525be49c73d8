"""Adam and the single training step tying generator, extractor and losses.

One step: forward the generator, measure the pixel loss against ground
truth, optionally measure the feature loss through the frozen extractor,
combine, backpropagate, and update the generator parameters only. A
non-finite loss aborts before any parameter changes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, NonFiniteLossError, UsageError
from .losses import LossWeights, feature_loss, reconstruction_loss, total_loss
from .networks import (ExtractorParams, GeneratorParams, extractor_forward,
                       generator_forward)
from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first and second moment estimates plus the step count."""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params, grads, state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to the parameter map.

    ``grads`` maps the same names to gradient arrays/tensors. The step
    counter increments before the bias correction, so t >= 1 when used.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != tensor.data.shape:
            raise DimensionError(
                f"adam_step: gradient shape {g.shape} != parameter shape "
                f"{tensor.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        params[name] = Tensor(tensor.data - update)


@dataclass(frozen=True)
class StepRecord:
    """What one training step did: loss decomposition and bookkeeping."""
    iteration: int
    loss_total: float
    loss_rec: float
    loss_feat: float
    grad_norm: float
    wall_time: float


def train_step(batch, gen: GeneratorParams, ext: ExtractorParams | None,
               weights: LossWeights, state: AdamState) -> StepRecord:
    """One optimization step of the generator on a batch of (lr, hr) pairs.

    ``ext`` may be None only when ``weights.beta == 0`` (the feature term is
    then skipped entirely and no extractor weights are ever touched).
    """
    if not batch:
        raise UsageError("train_step requires a nonempty batch")
    if weights.beta > 0 and ext is None:
        raise UsageError("feature weight beta > 0 requires an extractor")
    lr_images = Tensor(np.concatenate([p[0].data for p in batch], axis=0))
    hr_images = Tensor(np.concatenate([p[1].data for p in batch], axis=0))

    started = time.perf_counter()
    tape = T.Tape()
    with tape:
        for tensor in gen.tensors.values():
            tape.watch(tensor)
        sr = generator_forward(gen, lr_images)
        l_rec = reconstruction_loss(sr, hr_images, weights.p)
        if weights.beta > 0:
            f_sr = extractor_forward(ext, sr)
            f_hr = extractor_forward(ext, hr_images)  # constant: never tracked
            l_feat = feature_loss(f_sr, f_hr)
        else:
            l_feat = Tensor(np.zeros((1, 1, 1, 1), dtype=sr.data.dtype))
        l_total = total_loss(l_rec, l_feat, weights)

    iteration = state.t + 1
    rec_val, feat_val, total_val = l_rec.item(), l_feat.item(), l_total.item()
    if not (math.isfinite(total_val) and math.isfinite(rec_val)
            and math.isfinite(feat_val)):
        raise NonFiniteLossError(iteration, total_val, rec_val, feat_val)

    grad_map = T.backward(tape, l_total)
    grads = {name: grad_map[tensor.tid] for name, tensor in gen.tensors.items()}
    sq_sum = 0.0
    for name in gen.tensors:
        g = grads[name].data
        sq_sum += float(np.dot(g.reshape(-1), g.reshape(-1)))
    adam_step(gen.tensors, grads, state)

    return StepRecord(iteration=iteration, loss_total=total_val, loss_rec=rec_val,
                      loss_feat=feat_val, grad_norm=math.sqrt(sq_sum),
                      wall_time=time.perf_counter() - started)
