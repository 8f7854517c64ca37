"""Soft-max risk, back-propagation, momentum SGD and gradient verification."""
import csv
import dataclasses
import logging
import pathlib
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from densedet.common.errors import ConfigurationError, InvalidArgumentError
from densedet.common.utils import derive_seed
from densedet.nnet import layers as L
from densedet.nnet.layers import LayerKind, LayerParams
from densedet.nnet.network import NetworkSpec, forward_batch
from densedet.training.sampler import BatchSpec, Patch, compose_batch, stack_batch

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

PROBABILITY_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """SGD parameters.

    Attributes:
        learning_rate: Step size, >= 0 (0 freezes the network).
        momentum: Velocity decay in [0, 1).
        weight_decay: L2 factor added to every gradient.
        iterations: Number of batches, >= 1.
        batch: Batch size and composition.
        seed: Master seed; batch t uses derive_seed(seed, t).
        flip_probability: Chance of mirroring each batch member.
        log_every: Iterations between progress lines.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 2000
    batch: BatchSpec = BatchSpec()
    seed: int = 0
    flip_probability: float = 0.5
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.iterations < 1:
            raise InvalidArgumentError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise InvalidArgumentError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")


@dataclasses.dataclass(frozen=True, eq=False)
class Gradients:
    """Per-layer parameter gradients, None where a layer has no parameters."""

    params: Tuple[Optional[LayerParams], ...]

    @classmethod
    def zeros_like(cls, net: NetworkSpec) -> "Gradients":
        return cls(
            tuple(
                LayerParams(np.zeros(p.weights.shape), np.zeros(p.bias.shape)) if p is not None else None
                for p in net.params
            )
        )

    def check_congruent(self, net: NetworkSpec) -> None:
        if len(self.params) != len(net.params):
            raise InvalidArgumentError(f"{len(self.params)} gradient entries for {len(net.params)} layers")
        for index, (g, p) in enumerate(zip(self.params, net.params)):
            if (g is None) != (p is None):
                raise InvalidArgumentError(f"layer {index}: gradient and parameter presence differ")
            if p is not None and (g.weights.shape != p.weights.shape or g.bias.shape != p.bias.shape):
                raise InvalidArgumentError(f"layer {index}: gradient shapes do not match parameters")


def _true_class_probabilities(out: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if out.shape[2:] != (1, 1):
        raise ConfigurationError(f"expected a 1x1 output per patch, got {out.shape[2]}x{out.shape[3]}")
    return out[np.arange(len(labels)), labels, 0, 0]


def batch_risk(net: NetworkSpec, batch: Sequence[Patch]) -> float:
    """Mean negative log-probability of the true labels, probabilities floored at 1e-12."""
    x, labels = stack_batch(batch)
    p = _true_class_probabilities(forward_batch(net, x), labels)
    return float(-np.mean(np.log(np.maximum(p, PROBABILITY_FLOOR))))


def risk_and_gradients(net: NetworkSpec, batch: Sequence[Patch]) -> Tuple[float, Gradients]:
    """batch_risk and its exact gradient from one forward/backward pass.

    The final layer must be the soft-max; the gradient of the mean
    negative log-likelihood w.r.t. its logits is (p - onehot) / N.
    """
    x, labels = stack_batch(batch)
    out, activations = forward_batch(net, x, keep=True)
    p = _true_class_probabilities(out, labels)
    risk = float(-np.mean(np.log(np.maximum(p, PROBABILITY_FLOOR))))
    grad = out.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    grads: List[Optional[LayerParams]] = [None] * len(net.layers)
    for index in range(len(net.layers) - 2, -1, -1):
        layer, params, a = net.layers[index], net.params[index], activations[index]
        if layer.kind == LayerKind.CONVOLUTION:
            grad, gw, gb = L.conv_backward(a, params.weights, layer.stride, layer.padding, grad)
            grads[index] = LayerParams(gw, gb)
        elif layer.kind == LayerKind.FULLY_CONNECTED:
            grad, gw, gb = L.fc_backward(a, params.weights, grad)
            grads[index] = LayerParams(gw, gb)
        elif layer.kind == LayerKind.MAX_POOL:
            grad = L.maxpool_backward(a, layer.kernel, layer.stride, layer.padding, grad)
        elif layer.kind == LayerKind.RELU:
            grad = L.relu_backward(a, grad)
        elif layer.kind == LayerKind.LRN:
            grad = L.lrn_backward(a, layer.lrn, grad)
        else:
            raise ConfigurationError("soft-max is only supported as the final layer", index)
    return risk, Gradients(tuple(grads))


def backward(net: NetworkSpec, batch: Sequence[Patch]) -> Gradients:
    """Exact gradient of batch_risk w.r.t. every parameter."""
    return risk_and_gradients(net, batch)[1]


def sgd_step(
    net: NetworkSpec, grads: Gradients, cfg: TrainConfig, velocity: Optional[Gradients] = None
) -> Tuple[NetworkSpec, Gradients]:
    """One momentum step: v <- momentum v - lr (g + decay w); w <- w + v.

    Weight decay applies to weights and biases alike.

    Arguments:
        net: Current network.
        grads: Gradients congruent with net.
        cfg: Step parameters.
        velocity: Previous velocity, zero when None.

    Raises:
        InvalidArgumentError: If shapes are not congruent.

    Returns:
        (updated network, new velocity).
    """
    grads.check_congruent(net)
    if velocity is None:
        velocity = Gradients.zeros_like(net)
    velocity.check_congruent(net)
    params, velocities = [], []
    for p, g, v in zip(net.params, grads.params, velocity.params):
        if p is None:
            params.append(None)
            velocities.append(None)
            continue
        vw = cfg.momentum * v.weights - cfg.learning_rate * (g.weights + cfg.weight_decay * p.weights)
        vb = cfg.momentum * v.bias - cfg.learning_rate * (g.bias + cfg.weight_decay * p.bias)
        params.append(LayerParams(p.weights + vw, p.bias + vb))
        velocities.append(LayerParams(vw, vb))
    return net.with_params(params), Gradients(tuple(velocities))


def _kink_signature(net: NetworkSpec, x: np.ndarray) -> List[np.ndarray]:
    """Which side of every ReLU and which max-pool winner each unit is on."""
    _, activations = forward_batch(net, x, keep=True)
    signature = []
    for layer, a in zip(net.layers, activations):
        if layer.kind == LayerKind.RELU:
            signature.append(a > 0)
        elif layer.kind == LayerKind.MAX_POOL:
            signature.append(L.maxpool_winners(a, layer.kernel, layer.stride, layer.padding))
    return signature


def _perturbed(net: NetworkSpec, layer: int, field: str, flat_index: int, delta: float) -> NetworkSpec:
    p = net.params[layer]
    values = getattr(p, field).copy()
    values.reshape(-1)[flat_index] += delta
    params = list(net.params)
    params[layer] = dataclasses.replace(p, **{field: values})
    return net.with_params(params)


def gradient_check(
    net: NetworkSpec, batch: Sequence[Patch], epsilon: float = 1e-3, samples_per_array: int = 4, seed: int = 0
) -> float:
    """Compares analytic gradients with central differences.

    A seeded subsample of every weight and bias array is checked. Coordinates
    whose perturbation moves a ReLU across zero or changes a max-pool winner
    are non-differentiable there and are replaced by further draws.

    Arguments:
        net: The network, evaluated in float64.
        batch: Patches the risk is measured on.
        epsilon: Perturbation size, > 0.
        samples_per_array: Coordinates checked per weight or bias array.
        seed: Subsample seed.

    Raises:
        InvalidArgumentError: If epsilon <= 0.

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    net = net.astype(np.float64)
    x, _ = stack_batch(batch)
    analytic = backward(net, batch)
    reference = _kink_signature(net, x)
    rng = np.random.default_rng(seed)
    worst, skipped = 0.0, 0
    for layer, g in enumerate(analytic.params):
        if g is None:
            continue
        for field in ("weights", "bias"):
            grad = getattr(g, field).reshape(-1)
            checked = 0
            for flat_index in rng.permutation(grad.size):
                if checked == samples_per_array:
                    break
                plus = _perturbed(net, layer, field, int(flat_index), epsilon)
                minus = _perturbed(net, layer, field, int(flat_index), -epsilon)
                smooth = all(
                    all(np.array_equal(r, s) for r, s in zip(reference, _kink_signature(n, x))) for n in (plus, minus)
                )
                if not smooth:
                    skipped += 1
                    continue
                numeric = (batch_risk(plus, batch) - batch_risk(minus, batch)) / (2.0 * epsilon)
                a = float(grad[flat_index])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                checked += 1
    logger.debug("gradient check worst=%.3g skipped=%d", worst, skipped)
    return worst


def finetune(
    net: NetworkSpec, positives: Sequence[Patch], negatives: Sequence[Patch], cfg: TrainConfig = TrainConfig()
) -> Tuple[NetworkSpec, List[float]]:
    """Runs cfg.iterations of compose_batch, backward and sgd_step.

    Training runs in float64 and the result is returned in float32, the
    precision models are stored in.

    Returns:
        (trained network, risk of every batch before its update).
    """
    work = net.astype(np.float64)
    velocity = None
    trace = []
    for iteration in range(cfg.iterations):
        batch = compose_batch(positives, negatives, cfg.batch, derive_seed(cfg.seed, iteration), cfg.flip_probability)
        risk, grads = risk_and_gradients(work, batch)
        trace.append(risk)
        work, velocity = sgd_step(work, grads, cfg, velocity)
        if cfg.log_every and (iteration + 1) % cfg.log_every == 0:
            logger.info("train iteration=%d risk=%.6f", iteration + 1, risk)
    return work.astype(np.float32), trace


def write_risk_trace(trace: Sequence[float], path: PathLike) -> None:
    """CSV with header iteration,risk."""
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["iteration", "risk"])
        for iteration, risk in enumerate(trace):
            writer.writerow([iteration, f"{risk:.10g}"])
