"""From-scratch MLP autoencoder mapping channel features to hybrid precoders.

The network eats the vectorized real/imaginary parts of a channel matrix and
emits a box-constrained vector that decodes into analog phases and digital
precoder entries. Training minimizes the squared Frobenius mismatch between
the GMD precoder target and the decoded analog/digital product, using the
same momentum update as the direct factorization. Everything is float64 so
the finite-difference gradient audits are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hybridprec.channel import ChannelRealization, draw_channel
from hybridprec.decomp import RankDeficiencyError, gmd
from hybridprec.precoder import (
    FactorizeConfig,
    HybridFactors,
    SystemDims,
    _windowed_stop,
    factorization_gradient,
    power_normalize,
)

ACTIVATIONS = ("relu", "clamp", "linear")

MLP_FORMAT_VERSION = 1

DEFAULT_NOISE_SIGMA = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """One fully connected layer: output width, activation tag, optional noise."""

    width: int
    activation: str = "relu"
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass(frozen=True)
class PrecoderCodec:
    """Bijection between the network's output box and (analog phases, digital entries).

    The first nt*nt_rf outputs live in [0, ns] and rescale to phases in
    [0, 2pi]; the remaining 2*nt_rf*ns outputs shift by -ns/2 to give the
    real and imaginary parts of the digital precoder.
    """

    nt: int
    nt_rf: int
    ns: int

    @property
    def n_phase(self) -> int:
        return self.nt * self.nt_rf

    @property
    def output_dim(self) -> int:
        return self.n_phase + 2 * self.nt_rf * self.ns

    def decode(self, out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = np.asarray(out, dtype=float)
        if out.shape != (self.output_dim,):
            raise ValueError(f"expected output of length {self.output_dim}, got shape {out.shape}")
        phases = out[: self.n_phase].reshape(self.nt, self.nt_rf) * (2.0 * np.pi / self.ns)
        tail = out[self.n_phase :] - self.ns / 2.0
        re = tail[: self.nt_rf * self.ns].reshape(self.nt_rf, self.ns)
        im = tail[self.nt_rf * self.ns :].reshape(self.nt_rf, self.ns)
        return phases, re + 1j * im

    def encode(self, phases: np.ndarray, digital: np.ndarray) -> np.ndarray:
        head = np.asarray(phases, dtype=float).reshape(-1) * (self.ns / (2.0 * np.pi))
        tail = np.concatenate([digital.real.reshape(-1), digital.imag.reshape(-1)]) + self.ns / 2.0
        return np.concatenate([head, tail])


@dataclass
class Mlp:
    """Layered perceptron: specs plus per-layer weights, biases and velocities."""

    input_dim: int
    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    w_velocities: list[np.ndarray] = field(default_factory=list)
    b_velocities: list[np.ndarray] = field(default_factory=list)
    clamp_max: float = 1.0
    codec: PrecoderCodec | None = None

    def __post_init__(self) -> None:
        dims = [self.input_dim] + [s.width for s in self.specs]
        for i, w in enumerate(self.weights):
            if w.shape != (dims[i], dims[i + 1]):
                raise ValueError(f"weight {i} shape {w.shape} != {(dims[i], dims[i + 1])}")
        if not self.w_velocities:
            self.w_velocities = [np.zeros_like(w) for w in self.weights]
            self.b_velocities = [np.zeros_like(b) for b in self.biases]

    @property
    def n_layers(self) -> int:
        """Layer count including the input layer."""
        return len(self.specs) + 1

    @property
    def output_dim(self) -> int:
        return self.specs[-1].width


def default_architecture(
    input_dim: int, output_dim: int, noise_sigma: float = DEFAULT_NOISE_SIGMA
) -> tuple[LayerSpec, ...]:
    """The stock autoencoder stack: 128-400-256 encoder, 200-unit noise layer,
    128-64 decoder, box-clamped output."""
    return (
        LayerSpec(128, "relu"),
        LayerSpec(400, "relu"),
        LayerSpec(256, "relu"),
        LayerSpec(200, "relu", noise_sigma=noise_sigma),
        LayerSpec(128, "relu"),
        LayerSpec(64, "relu"),
        LayerSpec(output_dim, "clamp"),
    )


def build_mlp(
    input_dim: int,
    specs: tuple[LayerSpec, ...] | list[LayerSpec],
    clamp_max: float,
    seed: int,
    codec: PrecoderCodec | None = None,
) -> Mlp:
    """Initialize weights uniform on +-sqrt(6/(fan_in+fan_out)), biases zero.

    The clamp output layer gets its bias centered at clamp_max/2 instead, so
    its units start inside the box where the activation has gradient; a zero
    start would leave half of them saturated and permanently stuck.
    """
    rng = np.random.default_rng(seed)
    specs = tuple(specs)
    dims = [input_dim] + [s.width for s in specs]
    weights, biases = [], []
    for i, spec in enumerate(specs):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bias = np.full(fan_out, clamp_max / 2.0) if spec.activation == "clamp" else np.zeros(fan_out)
        biases.append(bias)
    return Mlp(
        input_dim=input_dim,
        specs=specs,
        weights=weights,
        biases=biases,
        clamp_max=clamp_max,
        codec=codec,
    )


def build_precoder_mlp(
    dims: SystemDims, seed: int = 0, noise_sigma: float = DEFAULT_NOISE_SIGMA
) -> Mlp:
    """Stock network sized for a system: channel features in, codec box out."""
    codec = PrecoderCodec(nt=dims.nt, nt_rf=dims.nt_rf, ns=dims.ns)
    input_dim = 2 * dims.nt * dims.nr
    specs = default_architecture(input_dim, codec.output_dim, noise_sigma=noise_sigma)
    return build_mlp(input_dim, specs, clamp_max=float(dims.ns), seed=seed, codec=codec)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(0.0, x)


def clamp_activation(x: np.ndarray, ns: float) -> np.ndarray:
    """Elementwise min(max(x, 0), ns): the power-constraint box on the output."""
    if ns < 1:
        raise ValueError(f"ns must be >= 1, got {ns}")
    return np.minimum(np.maximum(x, 0.0), float(ns))


def noise_inject(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian distortion of standard deviation sigma."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x
    return x + rng.normal(0.0, sigma, size=x.shape)


def _apply_activation(z: np.ndarray, spec: LayerSpec, clamp_max: float) -> np.ndarray:
    if spec.activation == "relu":
        return relu(z)
    if spec.activation == "clamp":
        return clamp_activation(z, clamp_max)
    return z


def forward(
    net: Mlp,
    v: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Run the composition of layers; returns (output, cache) for backprop.

    ``v`` may be a single feature vector or a (batch, input_dim) matrix.
    Noise layers fire only in ``mode="train"`` (which then requires ``rng``);
    inference is deterministic. The cache holds each layer's input and
    pre-activation.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    v = np.asarray(v, dtype=float)
    squeeze = v.ndim == 1
    x = v.reshape(1, -1) if squeeze else v
    if x.shape[1] != net.input_dim:
        raise ValueError(f"input width {x.shape[1]} != network input_dim {net.input_dim}")
    if mode == "train" and rng is None and any(s.noise_sigma > 0 for s in net.specs):
        raise ValueError("training mode with noise layers requires an rng")
    cache = []
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        z = x @ w + b
        cache.append((x, z))
        x = _apply_activation(z, spec, net.clamp_max)
        if mode == "train" and spec.noise_sigma > 0:
            x = noise_inject(x, spec.noise_sigma, rng)
    out = x[0] if squeeze else x
    return out, cache


def backward(
    net: Mlp,
    cache: list[tuple[np.ndarray, np.ndarray]],
    grad_out: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Reverse-mode gradients for every weight and bias.

    ``grad_out`` is dLoss/d(output), shaped like the forward output. ReLU
    takes subgradient 0 at 0; the clamp is flat outside (0, clamp_max); noise
    injection passes gradients through unchanged.
    """
    grad_out = np.asarray(grad_out, dtype=float)
    delta = grad_out.reshape(1, -1) if grad_out.ndim == 1 else grad_out
    d_weights = [np.empty(0)] * len(net.weights)
    d_biases = [np.empty(0)] * len(net.biases)
    for i in reversed(range(len(net.specs))):
        x_in, z = cache[i]
        spec = net.specs[i]
        if spec.activation == "relu":
            delta = delta * (z > 0)
        elif spec.activation == "clamp":
            delta = delta * ((z > 0) & (z < net.clamp_max))
        d_weights[i] = x_in.T @ delta
        d_biases[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.weights[i].T
    return d_weights, d_biases


def sgd_momentum_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocities: list[np.ndarray],
    alpha: float,
    epsilon: float,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Momentum update on every parameter array: v <- alpha*v - epsilon*g; p <- p + v."""
    new_velocities = [alpha * v - epsilon * g for v, g in zip(velocities, grads)]
    new_params = [p + v for p, v in zip(params, new_velocities)]
    return new_params, new_velocities


def feature_vector(h: ChannelRealization) -> np.ndarray:
    """Concatenated real and imaginary channel entries, scaled to unit RMS."""
    flat = np.concatenate([h.matrix.real.reshape(-1), h.matrix.imag.reshape(-1)])
    rms = np.sqrt(np.mean(flat**2))
    return flat / rms


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    target: np.ndarray
    channel: ChannelRealization
    split: str = "train"


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def train_samples(self) -> tuple[Sample, ...]:
        return tuple(s for s in self.samples if s.split == "train")

    @property
    def test_samples(self) -> tuple[Sample, ...]:
        return tuple(s for s in self.samples if s.split == "test")


def build_dataset(
    dims: SystemDims,
    size: int,
    rng: np.random.Generator,
    test_fraction: float = 0.0,
) -> Dataset:
    """Draw channels, compute their GMD precoder targets and feature vectors.

    Rank-deficient draws (possible only in pathological angle collisions) are
    redrawn, up to 100 retries per sample. The trailing ``test_fraction`` of
    samples is tagged as the test split.
    """
    if size < 0:
        raise ValueError(f"size must be >= 0, got {size}")
    n_test = int(round(size * test_fraction))
    samples = []
    for i in range(size):
        for attempt in range(100):
            ch = draw_channel(rng, nt=dims.nt, nr=dims.nr, p_nlos=dims.p_nlos, spacing_ratio=dims.spacing_ratio)
            try:
                target = gmd(ch.matrix, dims.ns).r1
            except RankDeficiencyError:
                continue
            break
        else:
            raise RankDeficiencyError(f"no full-rank channel found in 100 draws for sample {i}")
        split = "test" if i >= size - n_test else "train"
        samples.append(Sample(features=feature_vector(ch), target=target, channel=ch, split=split))
    return Dataset(samples=tuple(samples))


def _batch_loss_and_grad(
    net: Mlp, batch: list[Sample], mode: str, rng: np.random.Generator | None
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean root loss over the batch plus parameter gradients of the mean squared loss."""
    codec = net.codec
    b = len(batch)
    feats = np.stack([s.features for s in batch])
    targets = np.stack([s.target for s in batch])
    out, cache = forward(net, feats, mode=mode, rng=rng)
    # batched decode mirroring PrecoderCodec.decode
    phase_scale = 2.0 * np.pi / codec.ns
    phases = out[:, : codec.n_phase].reshape(b, codec.nt, codec.nt_rf) * phase_scale
    tail = out[:, codec.n_phase :] - codec.ns / 2.0
    n_d = codec.nt_rf * codec.ns
    digital = (tail[:, :n_d] + 1j * tail[:, n_d:]).reshape(b, codec.nt_rf, codec.ns)
    analog = np.exp(1j * phases) / np.sqrt(codec.nt)
    err = targets - analog @ digital
    g_digital = -2.0 * (np.conj(np.swapaxes(analog, 1, 2)) @ err)
    g_phases = 2.0 * np.imag(np.conj(err @ np.conj(np.swapaxes(digital, 1, 2))) * analog)
    grad_out = np.concatenate(
        [
            g_phases.reshape(b, -1) * phase_scale,
            g_digital.real.reshape(b, -1),
            g_digital.imag.reshape(b, -1),
        ],
        axis=1,
    ) / b
    root_losses = np.linalg.norm(err, axis=(1, 2))
    d_weights, d_biases = backward(net, cache, grad_out)
    return float(np.mean(root_losses)), d_weights, d_biases


def train(net: Mlp, data: Dataset, cfg: FactorizeConfig) -> tuple[Mlp, np.ndarray]:
    """Momentum-SGD training against the factorization loss on the train split.

    Samples are shuffled into batches of ``cfg.batch`` each epoch; ``cfg.max_iters``
    caps the total number of SGD steps. The history holds one entry per epoch:
    the mean root loss over the train split, evaluated noise-free, so a zero
    learning rate yields a constant history. Stops early when the windowed
    epoch-loss improvement falls below ``cfg.tolerance``.
    """
    if net.codec is None:
        raise ValueError("training requires a network built with a precoder codec")
    train_split = list(data.train_samples)
    if not train_split:
        raise ValueError("dataset has no training samples")
    rng = np.random.default_rng(cfg.seed)
    history = []
    steps = 0
    epoch = 0
    while steps < cfg.max_iters:
        epoch += 1
        order = rng.permutation(len(train_split))
        for start in range(0, len(order), cfg.batch):
            if steps >= cfg.max_iters:
                break
            batch = [train_split[j] for j in order[start : start + cfg.batch]]
            _, d_weights, d_biases = _batch_loss_and_grad(net, batch, mode="train", rng=rng)
            params, velocities = sgd_momentum_step(
                net.weights + net.biases,
                d_weights + d_biases,
                net.w_velocities + net.b_velocities,
                alpha=cfg.momentum,
                epsilon=cfg.learning_rate,
            )
            n_w = len(net.weights)
            net.weights, net.biases = params[:n_w], params[n_w:]
            net.w_velocities, net.b_velocities = velocities[:n_w], velocities[n_w:]
            steps += 1
        eval_loss, _, _ = _batch_loss_and_grad(net, train_split, mode="infer", rng=None)
        history.append(eval_loss)
        if _windowed_stop(history, epoch, cfg.tolerance):
            break
    return net, np.asarray(history)


def infer_precoders(net: Mlp, h: ChannelRealization) -> HybridFactors:
    """Single forward pass: decode the network output into power-normalized factors."""
    if net.codec is None:
        raise ValueError("inference requires a network built with a precoder codec")
    out, _ = forward(net, feature_vector(h), mode="infer")
    phases, digital = net.codec.decode(out)
    analog = np.exp(1j * phases) / np.sqrt(net.codec.nt)
    return power_normalize(HybridFactors(analog=analog, digital=digital))


def save_mlp(net: Mlp, path: str) -> None:
    """Serialize the network to one self-describing .npz file (bit-exact round trip)."""
    payload = {
        "format_version": np.array(MLP_FORMAT_VERSION),
        "input_dim": np.array(net.input_dim),
        "clamp_max": np.array(net.clamp_max),
        "widths": np.array([s.width for s in net.specs]),
        "activations": np.array([s.activation for s in net.specs]),
        "noise_sigmas": np.array([s.noise_sigma for s in net.specs]),
        "codec_dims": np.array(
            [net.codec.nt, net.codec.nt_rf, net.codec.ns] if net.codec else [-1, -1, -1]
        ),
    }
    for i, (w, b, vw, vb) in enumerate(
        zip(net.weights, net.biases, net.w_velocities, net.b_velocities)
    ):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
        payload[f"vw{i}"] = vw
        payload[f"vb{i}"] = vb
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_mlp(path: str) -> Mlp:
    """Rebuild a network saved by :func:`save_mlp`."""
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != MLP_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        specs = tuple(
            LayerSpec(int(w), str(a), float(s))
            for w, a, s in zip(data["widths"], data["activations"], data["noise_sigmas"])
        )
        codec_dims = data["codec_dims"]
        codec = (
            PrecoderCodec(nt=int(codec_dims[0]), nt_rf=int(codec_dims[1]), ns=int(codec_dims[2]))
            if codec_dims[0] >= 0
            else None
        )
        n = len(specs)
        return Mlp(
            input_dim=int(data["input_dim"]),
            specs=specs,
            weights=[data[f"w{i}"] for i in range(n)],
            biases=[data[f"b{i}"] for i in range(n)],
            w_velocities=[data[f"vw{i}"] for i in range(n)],
            b_velocities=[data[f"vb{i}"] for i in range(n)],
            clamp_max=float(data["clamp_max"]),
            codec=codec,
        )
