"""The capsule-network anomaly detector.

Architecture (full width): a 9x9/stride-1 convolution maps the 28x28 input
to 20x20x256 feature maps (ReLU); a second 9x9/stride-2 convolution maps
those to a 6x6 grid of 32 capsule types, read as 1152 eight-dimensional
capsule vectors and squashed; each primary capsule predicts both
16-dimensional class capsules through its own 16x8 transformation matrix;
routing by agreement combines the predictions into the two class capsule
outputs. A three-layer decoder (512, 1024, 784; ReLU, ReLU, sigmoid)
reconstructs the image from the masked class capsules.

Class capsule 0 is the normal class, capsule 1 the anomaly class. The
capsule norm encodes class presence; the anomaly score is
``|v_1| - |v_0|``.

Squash maps a vector s to ``s * (|s| / (1 + |s|^2))``: same direction,
norm in [0, 1), zero fixed. Routing starts from zero logits and repeats
``iterations`` times: couplings = softmax of the logits over the class
axis; each class pre-activation is the coupling-weighted sum of
predictions; outputs are the squashed pre-activations; the logits then
grow by the prediction/output dot product (skipped after the final pass).
Training backpropagates through the fully unrolled recurrence.

Loss: per class, ``T_c * max(0, m+ - |v_c|)^2
+ lambda * (1 - T_c) * max(0, |v_c| - m-)^2`` with m+ = 0.9, m- = 0.1,
lambda = 0.5, plus ``alpha`` times the mean squared reconstruction error.
The default alpha of 0.0005 * 784 applied to the per-pixel mean equals a
0.0005 weight on the summed squared error.

``width_scale`` shrinks the convolution channels and primary capsule types
proportionally (0.25 gives 64 channels and 8 types) for desk-scale
training; every invariant is preserved and full width stays available.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from capsanom.errors import ConfigError, TrainingError
from capsanom.metrics import confusion, prf1
from capsanom.optim import Adam
from capsanom.rng import Rng
from capsanom.tensor import (
    Tensor,
    conv2d,
    dense,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    tmean,
    transpose,
    tsum,
    vecnorm,
)


class RoutingError(ValueError):
    """Routing received non-finite predictions or bad iteration count."""


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder geometry; defaults are the full-width architecture."""

    input_side: int = 28
    conv_channels: int = 256
    conv_kernel: int = 9
    conv_stride: int = 1
    primary_caps_types: int = 32
    primary_caps_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    class_caps_count: int = 2
    class_caps_dim: int = 16
    routing_iterations: int = 3
    width_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.width_scale <= 1.0:
            raise ConfigError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.routing_iterations < 1:
            raise ConfigError(
                f"routing_iterations must be >= 1, got {self.routing_iterations}"
            )
        if self.class_caps_count != 2:
            raise ConfigError(
                f"binary detector needs exactly 2 class capsules, got "
                f"{self.class_caps_count}"
            )
        if self.scaled_conv_channels < 1 or self.scaled_primary_types < 1:
            raise ConfigError(
                f"width_scale {self.width_scale} scales a channel count below 1"
            )
        if self.input_side < self.conv_kernel:
            raise ConfigError("input smaller than the first kernel")
        if self.conv_side < self.primary_kernel:
            raise ConfigError("conv output smaller than the primary kernel")

    @property
    def scaled_conv_channels(self) -> int:
        return round(self.conv_channels * self.width_scale)

    @property
    def scaled_primary_types(self) -> int:
        return round(self.primary_caps_types * self.width_scale)

    @property
    def conv_side(self) -> int:
        return (self.input_side - self.conv_kernel) // self.conv_stride + 1

    @property
    def primary_grid(self) -> int:
        return (self.conv_side - self.primary_kernel) // self.primary_stride + 1

    @property
    def num_primary_capsules(self) -> int:
        return self.primary_grid**2 * self.scaled_primary_types


@dataclass(frozen=True)
class DecoderConfig:
    layer_sizes: tuple[int, ...] = (512, 1024, 784)
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(self.layer_sizes))
        if self.layer_sizes[-1] != 784:
            raise ConfigError(
                f"decoder must end in 784 = 28*28 outputs, got {self.layer_sizes[-1]}"
            )


@dataclass(frozen=True)
class LossParams:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    alpha: float = 0.0005 * 784  # weight on the per-pixel mean squared error

    def __post_init__(self):
        if not 0.0 < self.m_minus < self.m_plus < 1.0:
            raise ConfigError(
                f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}"
            )
        if self.lam <= 0 or self.alpha < 0:
            # alpha == 0 is allowed: it just switches the regularizer off
            raise ConfigError("lambda must be positive and alpha non-negative")


@dataclass
class RoutingState:
    """Final intermediates of one routing execution (values, not graph)."""

    logits: np.ndarray  # [.., I, J]
    couplings: np.ndarray  # [.., I, J]
    predictions: np.ndarray  # [.., I, J, D]
    pre_activations: np.ndarray  # [.., J, D]
    outputs: np.ndarray  # [.., J, D]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_f1: float | None = None


def squash(s, axis: int = -1) -> Tensor:
    """Shrink a vector to norm |s|^2 / (1 + |s|^2), keeping its direction.

    The zero vector maps to the zero vector with zero gradient.
    """
    s = s if isinstance(s, Tensor) else Tensor(s)
    n2 = tsum(s * s, axis=axis, keepdims=True)
    n = vecnorm(s, axis=axis, keepdims=True)
    return s * (n / (1.0 + n2))


def route(u_hat, iterations: int) -> tuple[Tensor, RoutingState]:
    """Routing by agreement over prediction vectors.

    Args:
        u_hat: Predictions, [I, J, D] or batched [B, I, J, D]; I indexes
            lower capsules, J class capsules, D the class capsule dimension.
        iterations: Number of coupling updates, >= 1.

    Returns:
        (v, state): class capsule outputs [.., J, D] and the final
        routing intermediates.
    """
    u_hat = u_hat if isinstance(u_hat, Tensor) else Tensor(u_hat)
    if iterations < 1:
        raise RoutingError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(u_hat.data)):
        raise RoutingError("non-finite prediction vectors")
    single = u_hat.ndim == 3
    if single:
        u_hat = reshape(u_hat, (1,) + u_hat.shape)
    if u_hat.ndim != 4:
        raise RoutingError(f"u_hat must be [I,J,D] or [B,I,J,D], got {u_hat.shape}")
    bsz, n_lower, n_upper, dim = u_hat.shape

    logits = Tensor(np.zeros((bsz, n_lower, n_upper)))
    couplings = pre = v = None
    for it in range(iterations):
        couplings = softmax(logits, axis=-1)  # [B, I, J]
        pre = tsum(reshape(couplings, (bsz, n_lower, n_upper, 1)) * u_hat, axis=1)
        v = squash(pre)  # [B, J, D]
        if it < iterations - 1:
            agreement = tsum(u_hat * reshape(v, (bsz, 1, n_upper, dim)), axis=-1)
            logits = logits + agreement

    def final(a: Tensor) -> np.ndarray:
        return a.data[0].copy() if single else a.data.copy()

    state = RoutingState(
        logits=final(logits),
        couplings=final(couplings),
        predictions=final(u_hat),
        pre_activations=final(pre),
        outputs=final(v),
    )
    if single:
        v = reshape(v, (n_upper, dim))
    return v, state


class CapsNetModel:
    """Configs plus every trainable tensor, shape-checked at construction."""

    def __init__(
        self,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        loss_params: LossParams,
        params: dict[str, Tensor],
        seed: int = 0,
    ) -> None:
        self.encoder = encoder
        self.decoder = decoder
        self.loss_params = loss_params
        self.seed = seed
        self.params = params
        self._check_shapes()

    def _expected_shapes(self) -> dict[str, tuple[int, ...]]:
        e, d = self.encoder, self.decoder
        c1 = e.scaled_conv_channels
        primary_out = e.scaled_primary_types * e.primary_caps_dim
        shapes = {
            "conv_kernels": (c1, 1, e.conv_kernel, e.conv_kernel),
            "conv_bias": (c1,),
            "primary_kernels": (primary_out, c1, e.primary_kernel, e.primary_kernel),
            "primary_bias": (primary_out,),
            "transform": (
                e.num_primary_capsules,
                e.class_caps_count,
                e.class_caps_dim,
                e.primary_caps_dim,
            ),
        }
        in_size = e.class_caps_count * e.class_caps_dim
        for i, out_size in enumerate(d.layer_sizes):
            shapes[f"dec_w{i}"] = (out_size, in_size)
            shapes[f"dec_b{i}"] = (out_size,)
            in_size = out_size
        return shapes

    def _check_shapes(self) -> None:
        expected = self._expected_shapes()
        for name, shape in expected.items():
            if name not in self.params:
                raise ConfigError(f"missing parameter {name!r}")
            got = self.params[name].shape
            if got != shape:
                raise ConfigError(f"parameter {name!r} has shape {got}, expected {shape}")
        extra = set(self.params) - set(expected)
        if extra:
            raise ConfigError(f"unexpected parameters {sorted(extra)}")

    @classmethod
    def init(
        cls,
        encoder: EncoderConfig | None = None,
        decoder: DecoderConfig | None = None,
        loss_params: LossParams | None = None,
        seed: int = 0,
    ) -> "CapsNetModel":
        """Fresh model with fan-in scaled uniform weights and zero biases.

        Weights are drawn from U(-a, a) with a = 1/sqrt(fan_in). For the
        per-capsule transformation matrices the fan-in counts every primary
        capsule feeding a class capsule (dim * num_primary_capsules): the
        routed pre-activation sums contributions from all of them, and a
        per-matrix fan-in of 8 makes its norm saturate the squash within a
        few optimizer steps, killing the gradient.
        """
        encoder = encoder or EncoderConfig()
        decoder = decoder or DecoderConfig()
        loss_params = loss_params or LossParams()
        rng = Rng(seed).split("capsnet-init")

        def uniform(stream: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
            a = 1.0 / np.sqrt(fan_in)
            data = rng.split(stream).uniform(-a, a, shape)
            return Tensor(data, requires_grad=True, name=stream)

        def zeros(stream: str, shape: tuple[int, ...]) -> Tensor:
            return Tensor(np.zeros(shape), requires_grad=True, name=stream)

        e, d = encoder, decoder
        c1 = e.scaled_conv_channels
        primary_out = e.scaled_primary_types * e.primary_caps_dim
        params = {
            "conv_kernels": uniform(
                "conv_kernels", (c1, 1, e.conv_kernel, e.conv_kernel), e.conv_kernel**2
            ),
            "conv_bias": zeros("conv_bias", (c1,)),
            "primary_kernels": uniform(
                "primary_kernels",
                (primary_out, c1, e.primary_kernel, e.primary_kernel),
                c1 * e.primary_kernel**2,
            ),
            "primary_bias": zeros("primary_bias", (primary_out,)),
            "transform": uniform(
                "transform",
                (e.num_primary_capsules, e.class_caps_count, e.class_caps_dim,
                 e.primary_caps_dim),
                e.primary_caps_dim * e.num_primary_capsules,
            ),
        }
        in_size = e.class_caps_count * e.class_caps_dim
        for i, out_size in enumerate(d.layer_sizes):
            params[f"dec_w{i}"] = uniform(f"dec_w{i}", (out_size, in_size), in_size)
            params[f"dec_b{i}"] = zeros(f"dec_b{i}", (out_size,))
            in_size = out_size
        return cls(encoder, decoder, loss_params, params, seed=seed)

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name in sorted(self.params)]

    def config_dict(self) -> dict:
        return {
            "encoder": asdict(self.encoder),
            "decoder": asdict(self.decoder),
            "loss_params": asdict(self.loss_params),
        }


def _encode_batch(model: CapsNetModel, pixels: np.ndarray) -> tuple[Tensor, RoutingState]:
    """Forward the encoder on [B, 784] float pixels in [0, 1]."""
    e = model.encoder
    bsz = pixels.shape[0]
    if pixels.min(initial=0.0) < 0.0 or pixels.max(initial=0.0) > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    x = Tensor(pixels.reshape(bsz, 1, e.input_side, e.input_side))
    feat = relu(
        conv2d(x, model.params["conv_kernels"], bias=model.params["conv_bias"],
               stride=e.conv_stride)
    )
    primary = conv2d(
        feat, model.params["primary_kernels"], bias=model.params["primary_bias"],
        stride=e.primary_stride,
    )  # [B, types*dim, g, g]
    g = e.primary_grid
    types, dim = e.scaled_primary_types, e.primary_caps_dim
    caps = reshape(primary, (bsz, types, dim, g, g))
    caps = reshape(transpose(caps, (0, 3, 4, 1, 2)), (bsz, g * g * types, dim))
    u = squash(caps)  # [B, I, dim]

    u_col = reshape(u, (bsz, u.shape[1], 1, dim, 1))
    u_hat = model.params["transform"] @ u_col  # [B, I, J, class_dim, 1]
    u_hat = reshape(u_hat, u_hat.shape[:-1])
    return route(u_hat, e.routing_iterations)


def encoder_forward(model: CapsNetModel, image) -> tuple[Tensor, RoutingState]:
    """Class capsules for one image.

    Args:
        model: A constructed model.
        image: [28, 28] or flat [784] pixels in [0, 1].

    Returns:
        (v, state): v is [2, 16]; state holds the routing intermediates.
    """
    image = np.asarray(image, dtype=np.float64)
    side = model.encoder.input_side
    if image.size != side * side:
        raise ConfigError(f"image has {image.size} pixels, expected {side * side}")
    v, state = _encode_batch(model, image.reshape(1, -1))
    state = RoutingState(*(a[0] for a in
                           (state.logits, state.couplings, state.predictions,
                            state.pre_activations, state.outputs)))
    return reshape(v, v.shape[1:]), state


def _one_hot(labels, count: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if not np.isin(labels, np.arange(count)).all():
        raise ValueError(f"labels must be in 0..{count - 1}, got {np.unique(labels)}")
    return np.eye(count)[labels]


def margin_loss(v, true_label, params: LossParams) -> Tensor:
    """Hinge-squared class presence loss summed over both capsules.

    ``v`` is [2, 16] with an int label (returns a scalar) or [B, 2, 16]
    with labels [B] (returns [B]). Capsule norms are expected in [0, 1).
    """
    v = v if isinstance(v, Tensor) else Tensor(v)
    single = v.ndim == 2
    if single:
        v = reshape(v, (1,) + v.shape)
    norms = vecnorm(v, axis=-1)  # [B, C]
    t = _one_hot(true_label, v.shape[1])
    present = relu(params.m_plus - norms) ** 2
    absent = relu(norms - params.m_minus) ** 2
    per_sample = tsum(t * present + params.lam * (1.0 - t) * absent, axis=-1)
    return reshape(per_sample, ()) if single else per_sample


def decoder_forward(model: CapsNetModel, v, true_label=None) -> Tensor:
    """Reconstruct pixels from the class capsules.

    The non-target capsule is masked to zero: the target is the true label
    during training, or the larger-norm capsule when ``true_label`` is None
    (inference). Both capsules are then flattened together and passed
    through the three dense layers.
    """
    v = v if isinstance(v, Tensor) else Tensor(v)
    single = v.ndim == 2
    if single:
        v = reshape(v, (1,) + v.shape)
    bsz, count, dim = v.shape
    if true_label is None:
        norms = np.sqrt((v.data * v.data).sum(axis=-1))
        target = (norms[:, 1] > norms[:, 0]).astype(np.int64)
    else:
        target = np.atleast_1d(np.asarray(true_label, dtype=np.int64))
    mask = _one_hot(target, count)[:, :, None]
    h = reshape(v * mask, (bsz, count * dim))
    last = len(model.decoder.layer_sizes) - 1
    for i in range(len(model.decoder.layer_sizes)):
        h = dense(h, model.params[f"dec_w{i}"], model.params[f"dec_b{i}"])
        kind = (model.decoder.output_activation if i == last
                else model.decoder.hidden_activation)
        h = relu(h) if kind == "relu" else sigmoid(h)
    return reshape(h, (h.shape[-1],)) if single else h


def reconstruction_loss(reconstruction, image) -> Tensor:
    """Mean squared pixel error; [784] -> scalar or [B, 784] -> [B]."""
    reconstruction = (reconstruction if isinstance(reconstruction, Tensor)
                      else Tensor(reconstruction))
    image = image if isinstance(image, Tensor) else Tensor(image)
    if reconstruction.shape != image.shape:
        raise ValueError(
            f"reconstruction shape {reconstruction.shape} != image shape {image.shape}"
        )
    diff = reconstruction - image
    return tmean(diff * diff, axis=-1)


def total_loss(margin, recon, params: LossParams) -> Tensor:
    """Combined loss: margin + alpha * reconstruction."""
    margin = margin if isinstance(margin, Tensor) else Tensor(margin)
    return margin + params.alpha * (recon if isinstance(recon, Tensor) else Tensor(recon))


def capsule_decision(norms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decision rule on capsule norms [.., 2].

    Label is the capsule with the larger norm, ties resolved to normal (0).
    The anomaly score is |v_1| - |v_0|, strictly monotone in the anomaly
    capsule's norm and in the negated normal capsule's norm.
    """
    norms = np.asarray(norms, dtype=np.float64)
    labels = (norms[..., 1] > norms[..., 0]).astype(np.int64)
    scores = norms[..., 1] - norms[..., 0]
    return labels, scores


def predict(model: CapsNetModel, image) -> tuple[int, float]:
    """Predicted label and anomaly score for one image."""
    labels, scores = predict_batch(model, np.asarray(image).reshape(1, -1))
    return int(labels[0]), float(scores[0])


def predict_batch(
    model: CapsNetModel, pixels: np.ndarray, chunk: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized prediction over [N, 784] pixels, merged in input order."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    labels = np.empty(len(pixels), dtype=np.int64)
    scores = np.empty(len(pixels), dtype=np.float64)
    with no_grad():
        for start in range(0, len(pixels), chunk):
            v, _ = _encode_batch(model, pixels[start : start + chunk])
            norms = np.sqrt((v.data * v.data).sum(axis=-1))  # [b, 2]
            labels[start : start + chunk], scores[start : start + chunk] = (
                capsule_decision(norms)
            )
    return labels, scores


def train(
    model: CapsNetModel,
    dataset,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
    validation=None,
) -> tuple[CapsNetModel, list[EpochLog]]:
    """Mini-batch Adam training on a LabeledDataset.

    Per-sample losses are averaged over each batch. Logs the mean training
    loss per epoch, plus minority-class validation F1 when a validation
    dataset is supplied. Deterministic given (model, dataset, seed).

    Raises:
        TrainingError: On a non-finite loss, naming the epoch and batch.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")

    pixels = dataset.pixels
    labels = dataset.labels.astype(np.int64)
    optimizer = Adam(model.parameters())
    shuffle_rng = Rng(seed).split("train-shuffle")
    logs: list[EpochLog] = []
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.split(epoch).permutation(len(dataset))
        loss_sum = 0.0
        for bstart in range(0, len(order), batch_size):
            batch = order[bstart : bstart + batch_size]
            xb = pixels[batch]
            yb = labels[batch]
            v, _ = _encode_batch(model, xb)
            margin = margin_loss(v, yb, model.loss_params)
            recon = decoder_forward(model, v, true_label=yb)
            rloss = reconstruction_loss(recon, xb)
            loss = tmean(total_loss(margin, rloss, model.loss_params))
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bstart // batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * len(batch)
        val_f1 = None
        if validation is not None:
            preds, _ = predict_batch(model, validation.pixels)
            val_f1 = prf1(confusion(validation.labels, preds)).f1
        logs.append(EpochLog(epoch=epoch, train_loss=loss_sum / len(dataset), val_f1=val_f1))
    return model, logs
