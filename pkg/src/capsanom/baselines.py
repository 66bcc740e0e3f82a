"""Comparison models: deep neural network, undercomplete autoencoder,
isolation forest.

All three are deterministic under their config seed and score so that
higher = more anomalous:

* DNN: six dense layers (ReLU hidden, sigmoid output) trained with binary
  cross-entropy; the score is the output probability, label = score > 0.5.
* Autoencoder: six dense layers (three encoding, three mirrored decoding,
  bottleneck < input) trained to minimize reconstruction MSE; the score is
  the per-image reconstruction error and the classification threshold is
  the error value that maximizes F1 on a validation split.
* Isolation forest: random trees over subsamples; anomalies isolate near
  the root, so short average path lengths mean high scores,
  s(x) = 2^(-E[h(x)] / c(psi)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from capsanom.errors import ConfigError, TrainingError
from capsanom.metrics import confusion, prf1
from capsanom.optim import Adam, AdamHyperParams
from capsanom.rng import Rng
from capsanom.tensor import Tensor, bce_with_logits, dense, no_grad, relu, sigmoid, tmean

# -- shared dense-stack helpers -------------------------------------------------


def _init_stack(sizes: tuple[int, ...], input_dim: int, rng: Rng) -> dict[str, Tensor]:
    """Uniform fan-in weights, zero biases, named w0/b0, w1/b1, ..."""
    params: dict[str, Tensor] = {}
    in_dim = input_dim
    for i, out_dim in enumerate(sizes):
        a = 1.0 / np.sqrt(in_dim)
        params[f"w{i}"] = Tensor(
            rng.split(f"w{i}").uniform(-a, a, (out_dim, in_dim)),
            requires_grad=True, name=f"w{i}",
        )
        params[f"b{i}"] = Tensor(np.zeros(out_dim), requires_grad=True, name=f"b{i}")
        in_dim = out_dim
    return params


def _stack_forward(params: dict[str, Tensor], n_layers: int, x: Tensor,
                   final: str | None) -> Tensor:
    """ReLU between layers; ``final`` in {'sigmoid', None=logits}."""
    h = x
    for i in range(n_layers):
        h = dense(h, params[f"w{i}"], params[f"b{i}"])
        if i < n_layers - 1:
            h = relu(h)
    return sigmoid(h) if final == "sigmoid" else h


def _epoch_batches(n: int, batch_size: int, rng: Rng, epoch: int):
    order = rng.split(epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# -- deep neural network --------------------------------------------------------


@dataclass(frozen=True)
class DnnConfig:
    """Six dense layers ending in one sigmoid unit."""

    layer_sizes: tuple[int, ...] = (784, 256, 128, 64, 32, 1)
    input_dim: int = 784
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(self.layer_sizes))
        if len(self.layer_sizes) != 6:
            raise ConfigError(f"DNN needs exactly 6 layers, got {len(self.layer_sizes)}")
        if self.layer_sizes[-1] != 1:
            raise ConfigError("DNN output layer must be a single unit")


@dataclass
class DnnModel:
    config: DnnConfig
    params: dict[str, Tensor]
    loss_log: list[float] = field(default_factory=list)  # mean loss per epoch


def dnn_train(config: DnnConfig, dataset) -> DnnModel:
    """Train on a binary-labeled dataset with BCE and Adam."""
    pixels = dataset.pixels
    labels = dataset.labels.astype(np.float64)
    rng = Rng(config.seed).split("dnn")
    params = _init_stack(config.layer_sizes, config.input_dim, rng.split("init"))
    optimizer = Adam(list(params.values()), AdamHyperParams(lr=config.lr))
    shuffle = rng.split("shuffle")
    loss_log = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in _epoch_batches(len(pixels), config.batch_size, shuffle, epoch):
            logits = _stack_forward(params, 6, Tensor(pixels[batch]), final=None)
            loss = bce_with_logits(logits.reshape(len(batch)), labels[batch])
            if not np.isfinite(loss.data):
                raise TrainingError(f"dnn: non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        loss_log.append(total / len(pixels))
    return DnnModel(config=config, params=params, loss_log=loss_log)


def dnn_score_batch(model: DnnModel, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    with no_grad():
        out = _stack_forward(model.params, 6, Tensor(pixels), final="sigmoid")
    return out.data.reshape(-1)


def dnn_score(model: DnnModel, image) -> float:
    """Anomaly probability in (0, 1); label = score > 0.5."""
    return float(dnn_score_batch(model, np.asarray(image).reshape(1, -1))[0])


# -- undercomplete autoencoder ---------------------------------------------------


@dataclass(frozen=True)
class AutoencoderConfig:
    """Three strictly narrowing encoder layers mirrored by the decoder."""

    encoder_sizes: tuple[int, ...] = (784, 256, 64)
    decoder_sizes: tuple[int, ...] = (64, 256, 784)
    input_dim: int = 784
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_sizes", tuple(self.encoder_sizes))
        object.__setattr__(self, "decoder_sizes", tuple(self.decoder_sizes))
        if len(self.encoder_sizes) != 3 or len(self.decoder_sizes) != 3:
            raise ConfigError("autoencoder needs 3 encoder and 3 decoder layers")
        if any(a <= b for a, b in zip(self.encoder_sizes, self.encoder_sizes[1:])):
            raise ConfigError(f"encoder sizes must strictly decrease: {self.encoder_sizes}")
        if self.decoder_sizes != tuple(reversed(self.encoder_sizes)):
            raise ConfigError("decoder sizes must mirror the encoder sizes")
        if self.decoder_sizes[-1] != self.input_dim:
            raise ConfigError(
                f"decoder must end at input_dim={self.input_dim}, "
                f"got {self.decoder_sizes[-1]}"
            )
        if self.bottleneck >= self.input_dim:
            raise ConfigError(
                f"bottleneck {self.bottleneck} not undercomplete for input "
                f"{self.input_dim}"
            )

    @property
    def bottleneck(self) -> int:
        return self.encoder_sizes[-1]


@dataclass
class AutoencoderModel:
    config: AutoencoderConfig
    params: dict[str, Tensor]
    threshold: float  # reconstruction error at/above which an image is anomalous
    loss_log: list[float] = field(default_factory=list)  # mean loss per epoch


def select_threshold(errors: np.ndarray, labels: np.ndarray) -> float:
    """F1-maximizing decision threshold over observed error values.

    Classification rule: anomalous iff error >= threshold. Candidate
    thresholds are the distinct observed errors; the thresholds achieving
    the same classification as candidate e_k form the interval
    (e_{k-1}, e_k]. Among maximizing candidates, adjacent intervals merge
    and the midpoint of the widest merged interval is returned (upper edge
    if the widest interval is unbounded below; later interval on width ties).
    """
    errors = np.asarray(errors, dtype=np.float64)
    labels = np.asarray(labels)
    distinct = np.unique(errors)  # ascending
    f1s = np.empty(len(distinct))
    for k, t in enumerate(distinct):
        preds = (errors >= t).astype(np.int64)
        f1s[k] = prf1(confusion(labels, preds)).f1
    best = f1s.max()
    maximizing = np.flatnonzero(f1s == best)

    # merge consecutive maximizing candidates into threshold intervals
    runs: list[tuple[int, int]] = []
    start = prev = maximizing[0]
    for k in maximizing[1:]:
        if k == prev + 1:
            prev = k
        else:
            runs.append((start, prev))
            start = prev = k
    runs.append((start, prev))

    def bounds(run: tuple[int, int]) -> tuple[float, float]:
        lo = -np.inf if run[0] == 0 else distinct[run[0] - 1]
        return lo, distinct[run[1]]

    widths = [hi - lo for lo, hi in map(bounds, runs)]
    widest = max(range(len(runs)), key=lambda i: (widths[i], i))
    lo, hi = bounds(runs[widest])
    return hi if np.isinf(lo) else (lo + hi) / 2.0


def autoencoder_train(config: AutoencoderConfig, dataset, validation) -> AutoencoderModel:
    """Minimize reconstruction MSE, then tune the threshold on validation F1."""
    pixels = dataset.pixels
    rng = Rng(config.seed).split("autoencoder")
    sizes = config.encoder_sizes + config.decoder_sizes
    params = _init_stack(sizes, config.input_dim, rng.split("init"))
    optimizer = Adam(list(params.values()), AdamHyperParams(lr=config.lr))
    shuffle = rng.split("shuffle")
    loss_log = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in _epoch_batches(len(pixels), config.batch_size, shuffle, epoch):
            x = Tensor(pixels[batch])
            recon = _stack_forward(params, 6, x, final="sigmoid")
            diff = recon - x
            loss = tmean(diff * diff)
            if not np.isfinite(loss.data):
                raise TrainingError(f"autoencoder: non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        loss_log.append(total / len(pixels))
    model = AutoencoderModel(config=config, params=params, threshold=0.0,
                             loss_log=loss_log)
    val_errors = autoencoder_score_batch(model, validation.pixels)
    model.threshold = select_threshold(val_errors, validation.labels)
    return model


def autoencoder_score_batch(model: AutoencoderModel, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    with no_grad():
        recon = _stack_forward(model.params, 6, Tensor(pixels), final="sigmoid")
    return ((recon.data - pixels) ** 2).mean(axis=-1)


def autoencoder_score(model: AutoencoderModel, image) -> float:
    """Per-image reconstruction error; anomalous iff >= model.threshold."""
    return float(autoencoder_score_batch(model, np.asarray(image).reshape(1, -1))[0])


# -- isolation forest ------------------------------------------------------------


@dataclass(frozen=True)
class IsolationForestConfig:
    n_trees: int = 100
    subsample_size: int = 256  # psi; shrinks to the dataset size when smaller
    seed: int = 0

    def __post_init__(self):
        if self.subsample_size < 2:
            raise ConfigError(f"subsample_size must be >= 2, got {self.subsample_size}")
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")

    @property
    def max_depth(self) -> int:
        return int(np.ceil(np.log2(self.subsample_size)))


@dataclass
class IsolationTree:
    """One tree as parallel node arrays; children of leaves are -1."""

    feature: np.ndarray  # int64, -1 at leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int64 node indices
    right: np.ndarray
    size: np.ndarray  # int64, training points that reached the node
    root: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, IsolationTree):
            return NotImplemented
        return self.root == other.root and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("feature", "threshold", "left", "right", "size")
        )


@dataclass
class IsolationForest:
    config: IsolationForestConfig
    psi: int  # effective subsample size after shrinking
    max_depth: int
    trees: list[IsolationTree] = field(default_factory=list)


def harmonic(n: int) -> float:
    """Exact n-th harmonic number H(n) = sum_{i<=n} 1/i."""
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def average_path_length(n) -> float:
    """c(n): expected isolation depth of a size-n sample, 0 for n <= 1.

    c(n) = 2 H(n-1) - 2 (n-1)/n with H computed exactly; the classic
    ln(n-1) + Euler-Mascheroni approximation of H agrees within 1/(2n) but
    would put c(2) at 0.15 instead of the exact 1.
    """
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


class _TreeBuilder:
    def __init__(self, max_depth: int, gen):
        self.max_depth = max_depth
        self.gen = gen
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.size: list[int] = []

    def _leaf(self, n: int) -> int:
        return self._push(-1, 0.0, -1, -1, n)

    def _push(self, feature, threshold, left, right, n) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(left)
        self.right.append(right)
        self.size.append(n)
        return len(self.feature) - 1

    def grow(self, x: np.ndarray, depth: int) -> int:
        n = len(x)
        if n <= 1 or depth >= self.max_depth:
            return self._leaf(n)
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        varying = np.flatnonzero(hi > lo)
        if len(varying) == 0:  # all points identical: degenerate leaf
            return self._leaf(n)
        feature = int(varying[self.gen.integers(0, len(varying))])
        cut = float(self.gen.uniform(lo[feature], hi[feature]))
        mask = x[:, feature] < cut
        left = self.grow(x[mask], depth + 1)
        right = self.grow(x[~mask], depth + 1)
        return self._push(feature, cut, left, right, n)

    def build(self, x: np.ndarray) -> IsolationTree:
        root = self.grow(x, 0)
        return IsolationTree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            size=np.array(self.size, dtype=np.int64),
            root=root,
        )


def iforest_fit(config: IsolationForestConfig, pixels: np.ndarray) -> IsolationForest:
    """Fit isolation trees on unlabeled row vectors.

    Each tree sees a without-replacement subsample of size psi (the whole
    dataset when it is smaller) and splits on a uniformly random varying
    feature at a uniform cut between that feature's min and max in the
    node, until max_depth = ceil(log2 psi) or a single point remains.
    Trees are keyed by their position in the seed stream, so fitting order
    (or parallel fitting) cannot change the result.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    if len(pixels) < 1:
        raise ValueError("cannot fit an isolation forest on an empty dataset")
    psi = min(config.subsample_size, len(pixels))
    forest = IsolationForest(config=config, psi=psi, max_depth=config.max_depth)
    rng = Rng(config.seed).split("iforest")
    for t in range(config.n_trees):
        tree_rng = rng.split(t)
        sample = pixels[tree_rng.split("subsample").choice(len(pixels), psi)]
        builder = _TreeBuilder(config.max_depth, tree_rng.split("grow").generator)
        forest.trees.append(builder.build(sample))
    return forest


def _tree_path_lengths(tree: IsolationTree, x: np.ndarray) -> np.ndarray:
    """Depth plus the leaf-size correction c(leaf) for every row of x."""
    idx = np.full(len(x), tree.root, dtype=np.int64)
    depth = np.zeros(len(x), dtype=np.int64)
    rows = np.arange(len(x))
    while True:
        feat = tree.feature[idx]
        internal = feat >= 0
        if not internal.any():
            break
        go_left = x[rows, np.where(internal, feat, 0)] < tree.threshold[idx]
        nxt = np.where(go_left, tree.left[idx], tree.right[idx])
        idx = np.where(internal, nxt, idx)
        depth += internal
    leaf_sizes = tree.size[idx]
    corrections = np.array([average_path_length(int(n)) for n in leaf_sizes])
    return depth + corrections


def score_from_mean_path(mean_path: float, psi: int) -> float:
    """s = 2^(-E[h]/c(psi)); 0.5 exactly when the mean path equals c(psi)."""
    return float(2.0 ** (-mean_path / average_path_length(psi)))


def iforest_score_batch(forest: IsolationForest, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    paths = np.zeros(len(pixels))
    for tree in forest.trees:
        paths += _tree_path_lengths(tree, pixels)
    paths /= len(forest.trees)
    return 2.0 ** (-paths / average_path_length(forest.psi))


def iforest_score(forest: IsolationForest, image) -> float:
    """Anomaly score in (0, 1); larger = isolated earlier = more anomalous."""
    return float(iforest_score_batch(forest, np.asarray(image).reshape(1, -1))[0])
