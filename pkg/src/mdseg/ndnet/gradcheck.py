"""Finite-difference verification of the analytic gradients (float64 only)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tape import Tape
from .unet import NetConfig, Network, backward, build_unet, forward

DEFAULT_STEP = 1e-4
DEFAULT_TOLERANCE = 1e-5


@dataclass
class CheckResult:
    kind: str
    target: str
    max_rel_error: float
    tolerance: float
    compared: int
    excluded: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.passed for r in self.results)

    def max_by_kind(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.kind] = max(out.get(r.kind, 0.0), r.max_rel_error)
        return out

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def extend(self, other: "GradcheckReport"):
        self.results.extend(other.results)

    def lines(self) -> list[str]:
        return [f"{'ok  ' if r.passed else 'FAIL'} {r.kind:<22} {r.target:<28} "
                f"max_rel_err={r.max_rel_error:.3e} (< {r.tolerance:g}) "
                f"n={r.compared} excluded={r.excluded}"
                for r in self.results]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask=None, floor=1e-8) -> float:
    """Tensor-wise relative error ``max|a - n| / max(max|a|, max|n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if mask is not None:
        a, n = a[mask], n[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def numeric_gradient(f, x: np.ndarray, h=DEFAULT_STEP, kink=None):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place).

    ``kink`` is an optional callable returning a hashable state (e.g. the sign
    pattern of every leaky-ReLU input); elements whose ``+h`` and ``-h``
    evaluations land in different states are flagged as excluded.
    """
    grad = np.zeros_like(x)
    excluded = np.zeros(x.shape, dtype=bool)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    ex = excluded.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        sp = kink() if kink else None
        flat[i] = old - h
        fm = f()
        sm = kink() if kink else None
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
        if kink is not None and sp != sm:
            ex[i] = True
    return grad, excluded


# --- primitive checks -----------------------------------------------------------

def _primitive_cases(rng):
    def r(*shape):
        return rng.standard_normal(shape)

    n = 6
    x = r(1, 2, n, n, n)
    yield "conv3d", "k3 stride1", lambda a, w, b, tape=None: ops.conv3d(a, w, b, 1, tape=tape), \
        [x, r(3, 2, 3, 3, 3) * 0.3, r(3)]
    yield "conv3d", "k3 stride2", lambda a, w, b, tape=None: ops.conv3d(a, w, b, 2, tape=tape), \
        [r(1, 2, n, n, n), r(3, 2, 3, 3, 3) * 0.3, r(3)]
    yield "conv3d", "k1 stride1", lambda a, w, b, tape=None: ops.conv3d(a, w, b, 1, tape=tape), \
        [r(2, 3, 4, 4, 4), r(2, 3, 1, 1, 1), r(2)]
    yield "conv3d", "k5 stride1", lambda a, w, tape=None: ops.conv3d(a, w, None, 1, tape=tape), \
        [r(1, 1, 5, 5, 5), r(2, 1, 5, 5, 5) * 0.2]
    yield "upsample2", "", lambda a, tape=None: ops.upsample2(a, tape=tape), [r(2, 2, 3, 3, 3)]
    yield "subsample2", "", lambda a, tape=None: ops.subsample2(a, tape=tape), [r(1, 2, 4, 4, 4)]
    yield "concat", "", lambda a, b, tape=None: ops.concat([a, b], tape=tape), \
        [r(2, 1, 3, 3, 3), r(2, 2, 3, 3, 3)]
    yield "add", "", lambda a, b, tape=None: ops.add(a, b, tape=tape), \
        [r(1, 2, 3, 3, 3), r(1, 2, 3, 3, 3)]
    yield "leaky_relu", "", lambda a, tape=None: ops.leaky_relu(a, tape=tape), [r(2, 2, 4, 4, 4)]
    yield "instance_norm", "eps=1e-5", \
        lambda a, g, b, tape=None: ops.instance_norm(a, g, b, tape=tape), \
        [r(2, 3, 4, 4, 4), r(3), r(3)]
    yield "sigmoid", "", lambda a, tape=None: ops.sigmoid(a, tape=tape), [r(2, 2, 3, 3, 3) * 3]
    yield "softmax", "channel axis", lambda a, tape=None: ops.softmax(a, tape=tape), \
        [r(2, 4, 3, 3, 3)]
    yield "sum", "axes (2,3,4)", lambda a, tape=None: ops.reduce_sum(a, (2, 3, 4), tape=tape), \
        [r(2, 3, 3, 3, 3)]
    yield "sum", "all", lambda a, tape=None: ops.reduce_sum(a, None, tape=tape), [r(2, 2, 3, 3, 3)]
    yield "mean", "axes (0,1)", lambda a, tape=None: ops.reduce_mean(a, (0, 1), tape=tape), \
        [r(2, 3, 3, 3, 3)]
    yield "mean", "axis 4", lambda a, tape=None: ops.reduce_mean(a, 4, tape=tape), \
        [r(2, 3, 3, 3, 3)]


def check_primitives(tolerance=DEFAULT_TOLERANCE, seed=0, h=DEFAULT_STEP) -> GradcheckReport:
    """Compare tape gradients with central differences for every primitive."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for kind, label, fn, inputs in _primitive_cases(rng):
        out = fn(*inputs)
        weight = rng.standard_normal(out.shape)
        tape = Tape()
        y = fn(*inputs, tape=tape)
        grads = tape.backward(y, weight)

        def scalar():
            return float((fn(*inputs) * weight).sum())

        for j, x in enumerate(inputs):
            analytic = grads.get(id(x), np.zeros_like(x))
            numeric, _ = numeric_gradient(scalar, x, h)
            mask = None
            if kind == "leaky_relu":
                mask = np.abs(x) > 2 * h  # the kink at 0 is not differentiable
            target = f"{label} input{j}".strip()
            excluded = 0 if mask is None else int((~mask).sum())
            report.results.append(CheckResult(
                kind, target, relative_error(analytic, numeric, mask), tolerance,
                x.size - excluded, excluded))
    return report


# --- composed checks ---------------------------------------------------------------

def _kink_state(net: Network, batch):
    tape = Tape()
    forward(net, batch, tape)
    return tuple((e.inputs[0] > 0).tobytes() for e in tape.entries if e.kind == "leaky_relu")


def check_network(config: NetConfig | None = None, batch_size=2, loss="multi_dataset",
                  tolerance=DEFAULT_TOLERANCE, seed=0, h=DEFAULT_STEP,
                  include_input=True) -> GradcheckReport:
    """Check d(loss)/d(every parameter and input) of network + loss in float64.

    ``loss="multi_dataset"`` uses the masked sigmoid loss with a random
    annotation pattern; ``loss="projection"`` uses a random linear functional of
    the logits. Perturbations that flip any leaky-ReLU input sign are excluded.
    """
    from ..losses import LossBatch, multi_dataset_loss

    if config is None:
        config = NetConfig(stages=2, base_channels=2, num_global_classes=3,
                           patch_shape=(4, 4, 4), residual_encoder=True, seed=seed)
    if max(config.patch_shape) > 8:
        raise ValueError("gradcheck is limited to spatial shapes <= 8^3")
    rng = np.random.default_rng(seed)
    net = build_unet(config, dtype=np.float64)
    for p in net.parameters:  # move norm/bias params off their trivial init values
        if not p.name.endswith(".weight"):
            p.value += 0.1 * rng.standard_normal(p.value.shape)
    C = config.num_global_classes
    batch = rng.standard_normal((batch_size, config.in_channels) + config.patch_shape)

    if loss == "multi_dataset":
        masks = (rng.random((batch_size, C)) < 0.6).astype(np.float64)
        masks[0, 0] = 1.0
        targets = (rng.random((batch_size, C) + config.patch_shape) < 0.3) * masks[..., None, None, None]

        def value_and_grad(logits):
            lv = multi_dataset_loss(LossBatch(logits, targets, masks))
            return lv.total, lv.voxel_gradient
    elif loss == "projection":
        weight = rng.standard_normal((batch_size, C) + config.patch_shape)

        def value_and_grad(logits):
            return float((logits * weight).sum()), weight
    else:
        raise ValueError(f"unknown loss {loss!r}")

    tape = Tape()
    logits = forward(net, batch, tape, input_grad=True)
    _, glogits = value_and_grad(logits)
    net.zero_grad()
    backward(net, tape, glogits)
    input_grad = tape.backward(tape.entries[-1].output, glogits).get(id(batch))

    def scalar():
        return value_and_grad(forward(net, batch))[0]

    def kink():
        return _kink_state(net, batch)

    kind = f"network+{loss}"
    report = GradcheckReport()
    targets_to_check = [(p.name, p.value, p.grad) for p in net.parameters]
    if include_input:
        targets_to_check.append(("input", batch, input_grad))
    for name, x, analytic in targets_to_check:
        numeric, excluded = numeric_gradient(scalar, x, h, kink)
        report.results.append(CheckResult(
            kind, name, relative_error(analytic, numeric, ~excluded), tolerance,
            int((~excluded).sum()), int(excluded.sum())))
    return report


def check_losses(tolerance=DEFAULT_TOLERANCE, seed=0, h=DEFAULT_STEP) -> GradcheckReport:
    """Loss gradients w.r.t. logits (and probabilities for batch dice)."""
    from ..losses import (LossBatch, baseline_softmax_ce_dice, batch_dice,
                          multi_dataset_loss, sigmoid_bce)

    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    shape = (2, 3, 4, 4, 4)
    masks = np.array([[1, 1, 0], [0, 0, 1]], dtype=np.float64)
    targets = (rng.random(shape) < 0.4) * masks[..., None, None, None]
    logits = rng.standard_normal(shape) * 2

    for norm in ("annotated", "voxels"):
        _, g = sigmoid_bce(logits, targets, masks, norm)
        num, _ = numeric_gradient(lambda: float(sigmoid_bce(logits, targets, masks, norm)[0].sum()),
                                  logits, h)
        report.results.append(CheckResult("sigmoid_bce", norm, relative_error(g, num),
                                          tolerance, logits.size))
    probs = rng.uniform(0.05, 0.95, shape)
    w = rng.standard_normal(3)
    _, g = batch_dice(probs, targets, masks)
    num, _ = numeric_gradient(lambda: float(batch_dice(probs, targets, masks)[0] @ w), probs, h)
    report.results.append(CheckResult("batch_dice", "d/dprob", relative_error(
        (g * w.reshape(1, 3, 1, 1, 1)), num), tolerance, probs.size))
    for eps in (1e-5, 0.0):
        lv = multi_dataset_loss(LossBatch(logits, targets, masks), eps=eps)
        num, _ = numeric_gradient(
            lambda: multi_dataset_loss(LossBatch(logits, targets, masks), eps=eps).total, logits, h)
        report.results.append(CheckResult("multi_dataset_loss", f"eps={eps:g}",
                                          relative_error(lv.voxel_gradient, num),
                                          tolerance, logits.size))
    sm_logits = rng.standard_normal((2, 4, 3, 3, 3))
    labels = rng.integers(0, 4, (2, 3, 3, 3))
    _, g, _ = baseline_softmax_ce_dice(sm_logits, labels)
    num, _ = numeric_gradient(lambda: baseline_softmax_ce_dice(sm_logits, labels)[0], sm_logits, h)
    report.results.append(CheckResult("softmax_ce_dice", "d/dlogits", relative_error(g, num),
                                      tolerance, sm_logits.size))
    return report


def gradcheck(tolerance=DEFAULT_TOLERANCE, seed=0, h=DEFAULT_STEP) -> GradcheckReport:
    """Full suite: every primitive, the losses, and network+loss compositions."""
    report = check_primitives(tolerance, seed, h)
    report.extend(check_losses(tolerance, seed, h))
    for residual, norm in ((False, "instance"), (True, "instance"), (True, "none")):
        cfg = NetConfig(stages=2, base_channels=2, num_global_classes=3, patch_shape=(4, 4, 4),
                        residual_encoder=residual, normalization=norm, seed=seed)
        report.extend(check_network(cfg, tolerance=tolerance, seed=seed, h=h))
    cfg = NetConfig(stages=3, base_channels=2, num_global_classes=2, patch_shape=(8, 8, 8),
                    seed=seed)
    report.extend(check_network(cfg, batch_size=1, loss="projection", tolerance=tolerance,
                                seed=seed, h=h, include_input=False))
    return report
